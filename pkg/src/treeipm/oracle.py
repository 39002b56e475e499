"""Centralized reference implementations.

Everything here solves the same problems as the tree-structured solver but
by direct dense linear algebra on globally assembled matrices, through a
different factorization route (LAPACK LU / least squares instead of the
symmetric-indefinite solves used per clique).  Tests compare the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from treeipm import chordal, model, treeqp
from treeipm.errors import (
    EliminationError,
    LineSearchStallError,
    NotStrictlyFeasibleError,
)
from treeipm.ipm import (
    ALPHA_STALL,
    ConvergenceTrace,
    SolverParams,
    TraceRow,
    _next_t,
    _step_scale,
)
from treeipm.model import Assignment, CoupledProblem, eval_subproblem, positions

KKT_RESIDUAL_TOL = 1e-10


@dataclass
class GlobalKkt:
    """Dense barrier KKT pieces over all variables and equality rows."""

    H: np.ndarray
    A: np.ndarray
    r: np.ndarray
    r_pri: np.ndarray
    row_slices: dict[int, slice]


def assemble_global(
    p: CoupledProblem,
    a: Assignment,
    tree: chordal.CliqueTree,
    x: np.ndarray,
    lam: Mapping[int, np.ndarray],
    v: Mapping[int, np.ndarray],
    t: float,
) -> GlobalKkt:
    n = p.n
    H = np.zeros((n, n))
    r = np.zeros(n)
    inv_t = 0.0 if math.isinf(t) else 1.0 / t
    for k, sp in enumerate(p.subproblems):
        cols = list(sp.J)
        ev = eval_subproblem(sp, x[cols])
        if ev.g.size and ev.g.max() >= 0:
            raise NotStrictlyFeasibleError(
                f"point is not strictly feasible for subproblem {k}"
            )
        lk = lam[k]
        Hk = ev.hess.copy()
        for lj, Qj in zip(lk, ev.con_hess):
            if Qj.any():
                Hk = Hk + lj * Qj
        if ev.g.size:
            Hk = Hk - ev.jac.T @ (ev.jac * (lk / ev.g)[:, None])
            r_cent = -lk * ev.g - inv_t
            rk = ev.grad + ev.jac.T @ lk + ev.jac.T @ (r_cent / ev.g)
        else:
            rk = ev.grad
        H[np.ix_(cols, cols)] += Hk
        r[cols] += rk
    rows = sum(a.local_eq[i][0].shape[0] for i in range(tree.q))
    A = np.zeros((rows, n))
    r_pri = np.zeros(rows)
    row_slices: dict[int, slice] = {}
    at = 0
    for i in range(tree.q):
        Ai, bi = a.local_eq[i]
        pi = Ai.shape[0]
        cols = list(tree.cliques[i])
        row_slices[i] = slice(at, at + pi)
        if pi:
            A[at : at + pi, cols] = Ai
            r_pri[at : at + pi] = Ai @ x[cols] - bi
            r[cols] += Ai.T @ v[i]
        at += pi
    return GlobalKkt(H, A, r, r_pri, row_slices)


def dense_kkt_solve(
    kkt: GlobalKkt, use_lstsq: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Solve the full saddle-point system in one shot.

    ``use_lstsq`` switches to a minimum-norm least-squares solve, which
    tolerates redundant (consistent) equality rows; the primal direction
    is still unique whenever the problem is well posed.
    """
    n = kkt.H.shape[0]
    rows = kkt.A.shape[0]
    M = np.zeros((n + rows, n + rows))
    M[:n, :n] = kkt.H
    M[:n, n:] = kkt.A.T
    M[n:, :n] = kkt.A
    rhs = np.concatenate([-kkt.r, -kkt.r_pri])
    if use_lstsq:
        sol = np.linalg.lstsq(M, rhs, rcond=None)[0]
    else:
        try:
            sol = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError as exc:
            raise EliminationError(
                "global KKT matrix is singular; check equality rows for "
                "redundancy or run preprocessing"
            ) from exc
    resid = float(np.max(np.abs(M @ sol - rhs))) if sol.size else 0.0
    if resid > KKT_RESIDUAL_TOL * (1.0 + float(np.max(np.abs(rhs), initial=0.0))):
        raise EliminationError(
            f"global KKT solve failed its residual check ({resid:.3e}); "
            "equality rows may be inconsistent"
        )
    return sol[:n], sol[n:]


def newton_direction(
    p: CoupledProblem,
    a: Assignment,
    tree: chordal.CliqueTree,
    x: np.ndarray,
    lam: Mapping[int, np.ndarray],
    v: Mapping[int, np.ndarray],
    t: float,
    use_lstsq: bool = False,
) -> tuple[np.ndarray, dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Global primal-dual Newton direction (dx, dv per clique, dlam)."""
    kkt = assemble_global(p, a, tree, x, lam, v, t)
    dx, dv_stack = dense_kkt_solve(kkt, use_lstsq=use_lstsq)
    dv = {i: dv_stack[kkt.row_slices[i]].copy() for i in range(tree.q)}
    inv_t = 0.0 if math.isinf(t) else 1.0 / t
    dlam: dict[int, np.ndarray] = {}
    for k, sp in enumerate(p.subproblems):
        ev = eval_subproblem(sp, x[list(sp.J)])
        if ev.g.size == 0:
            dlam[k] = np.zeros(0)
            continue
        lk = lam[k]
        r_cent = -lk * ev.g - inv_t
        dlam[k] = (r_cent - lk * (ev.jac @ dx[list(sp.J)])) / ev.g
    return dx, dv, dlam


def dual_residual(
    p: CoupledProblem,
    a: Assignment,
    tree: chordal.CliqueTree,
    x: np.ndarray,
    lam: Mapping[int, np.ndarray],
    v: Mapping[int, np.ndarray],
) -> np.ndarray:
    """Gradient of the Lagrangian, assembled globally."""
    w = np.zeros(p.n)
    for k, sp in enumerate(p.subproblems):
        cols = list(sp.J)
        ev = eval_subproblem(sp, x[cols])
        w[cols] += ev.grad + (ev.jac.T @ lam[k] if ev.g.size else 0.0)
    for i in range(tree.q):
        Ai, _ = a.local_eq[i]
        if Ai.shape[0]:
            w[list(tree.cliques[i])] += Ai.T @ v[i]
    return w


def primal_residual_sq(
    a: Assignment, tree: chordal.CliqueTree, x: np.ndarray
) -> float:
    total = 0.0
    for i in range(tree.q):
        Ai, bi = a.local_eq[i]
        if Ai.shape[0]:
            res = Ai @ x[list(tree.cliques[i])] - bi
            total += float(res @ res)
    return total


def surrogate_gap(
    p: CoupledProblem, x: np.ndarray, lam: Mapping[int, np.ndarray]
) -> float:
    total = 0.0
    for k, sp in enumerate(p.subproblems):
        xl = x[list(sp.J)]
        g = np.array([c.value(xl) for c in sp.inequalities])
        total += float(-(lam[k] @ g))
    return total


@dataclass
class CentralizedResult:
    x: np.ndarray
    v: dict[int, np.ndarray]
    lam: dict[int, np.ndarray]
    objective: float
    converged: bool
    status: str
    iterations: int
    total_backtracks: int
    trace: ConvergenceTrace


def centralized_ipm(
    p: CoupledProblem,
    params: SolverParams | None = None,
    x0: np.ndarray | None = None,
    lam0: Mapping[int, np.ndarray] | float | None = None,
    v0: Mapping[int, np.ndarray] | float | None = None,
    tree: chordal.CliqueTree | None = None,
    assignment: Assignment | None = None,
    use_lstsq: bool = False,
) -> CentralizedResult:
    """Reference interior-point loop on the globally assembled system.

    Mirrors the distributed update rules (same barrier schedule, same
    two-stage line search) but computes everything from dense global
    matrices.  With ``assignment`` given, runs on those equality blocks
    as-is; by default blocks are preprocessed exactly as the distributed
    solver does.
    """
    params = params or SolverParams()
    p.validate()
    if x0 is None:
        raise NotStrictlyFeasibleError("x0 is required")
    x = np.asarray(x0, dtype=float).copy()
    worst = p.max_inequality(x)
    if worst >= 0:
        raise NotStrictlyFeasibleError(
            f"x0 violates strict feasibility (max g = {worst:.3e})"
        )
    if tree is None:
        _, _, tree = chordal.clique_tree_for(p.scopes(), p.n)
    if assignment is None:
        assignment = model.preprocess_equalities(p, tree, model.assign(p, tree))

    lam: dict[int, np.ndarray] = {}
    for k, sp in enumerate(p.subproblems):
        if isinstance(lam0, Mapping):
            lam[k] = np.asarray(lam0[k], dtype=float).copy()
        else:
            lam[k] = np.full(sp.m, 1.0 if lam0 is None else float(lam0))
    v: dict[int, np.ndarray] = {}
    for i in range(tree.q):
        rows = assignment.local_eq[i][0].shape[0]
        if isinstance(v0, Mapping):
            v[i] = np.asarray(v0[i], dtype=float).copy()
        else:
            v[i] = np.full(rows, 1.0 if v0 is None else float(v0))

    m_total = p.m_total
    scale = _step_scale(m_total)
    t = _next_t(surrogate_gap(p, x, lam), m_total, params.mu)

    trace = ConvergenceTrace()
    total_backtracks = 0
    status = "max_iters"
    iterations = 0
    for it in range(1, params.max_iters + 1):
        iterations = it
        dx, dv, dlam = newton_direction(
            p, assignment, tree, x, lam, v, t, use_lstsq=use_lstsq
        )
        amax = 1.0
        for k, sp in enumerate(p.subproblems):
            d = dlam[k]
            mask = d < 0
            if mask.any():
                amax = min(amax, float(np.min(-lam[k][mask] / d[mask])))
        alpha = scale * amax
        w_old = dual_residual(p, assignment, tree, x, lam, v)
        p_old_sq = primal_residual_sq(assignment, tree, x)
        d_old_sq = float(w_old @ w_old)
        backtracks = 0
        while True:
            x_hat = x + alpha * dx
            ok = p.max_inequality(x_hat) < 0
            if ok:
                lam_hat = {k: lam[k] + alpha * dlam[k] for k in lam}
                v_hat = {i: v[i] + alpha * dv[i] for i in v}
                w_hat = dual_residual(p, assignment, tree, x_hat, lam_hat, v_hat)
                p_new_sq = primal_residual_sq(assignment, tree, x_hat)
                d_new_sq = float(w_hat @ w_hat)
                lhs = p_new_sq + d_new_sq
                rhs = (1.0 - params.gamma * alpha) ** 2 * (p_old_sq + d_old_sq)
                floor = params.eps_feas**2
                if lhs <= rhs or (p_new_sq <= floor and d_new_sq <= floor):
                    break
            alpha *= params.beta
            backtracks += 1
            if alpha < ALPHA_STALL:
                raise LineSearchStallError(
                    f"line search stalled at iteration {it} (alpha {alpha:.3e})"
                )
        x, lam, v = x_hat, lam_hat, v_hat
        eta = surrogate_gap(p, x, lam)
        trace.rows.append(
            TraceRow(
                it,
                math.sqrt(p_new_sq),
                math.sqrt(d_new_sq),
                eta,
                alpha,
                backtracks,
                t,
                0,
            )
        )
        total_backtracks += backtracks
        if (
            math.sqrt(p_new_sq) <= params.eps_feas
            and math.sqrt(d_new_sq) <= params.eps_feas
            and eta <= params.eps
        ):
            status = "converged"
            break
        t = _next_t(eta, m_total, params.mu)
    return CentralizedResult(
        x=x,
        v=v,
        lam=lam,
        objective=p.objective_value(x),
        converged=status == "converged",
        status=status,
        iterations=iterations,
        total_backtracks=total_backtracks,
        trace=trace,
    )


def parametric_min_oracle(
    Q: np.ndarray,
    q: np.ndarray,
    c: float,
    A: np.ndarray,
    b: np.ndarray,
    keep: Sequence[int],
) -> tuple[np.ndarray, np.ndarray, float]:
    """Minimise a constrained quadratic over all but the ``keep`` variables.

    Returns the coefficients of the reduced quadratic in the kept
    variables.  One dense solve, no tree recursion.
    """
    dim = Q.shape[0]
    keep = np.asarray(keep, dtype=int)
    free = np.array([i for i in range(dim) if i not in set(keep.tolist())], dtype=int)
    nf, nk, rows = free.size, keep.size, A.shape[0]
    K = np.zeros((nf + rows, nf + rows))
    K[:nf, :nf] = Q[np.ix_(free, free)]
    K[:nf, nf:] = A[:, free].T
    K[nf:, :nf] = A[:, free]
    rhs = np.zeros((nf + rows, nk + 1))
    rhs[:nf, :nk] = -Q[np.ix_(free, keep)]
    rhs[:nf, nk] = -q[free]
    rhs[nf:, :nk] = -A[:, keep]
    rhs[nf:, nk] = b
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise EliminationError("parametric minimisation is singular") from exc
    Z = sol[:nf, :nk]
    z0 = sol[:nf, nk]
    Qff = Q[np.ix_(free, free)]
    Qkf = Q[np.ix_(keep, free)]
    Qr = Q[np.ix_(keep, keep)] + Z.T @ Qff @ Z + Qkf @ Z + Z.T @ Qkf.T
    Qr = 0.5 * (Qr + Qr.T)
    qr = q[keep] + Z.T @ q[free] + Qkf @ z0 + Z.T @ (Qff @ z0)
    cr = c + 0.5 * float(z0 @ (Qff @ z0)) + float(q[free] @ z0)
    return Qr, qr, cr


def subtree_message_oracle(
    tree: chordal.CliqueTree,
    data: Mapping[int, treeqp.CliqueQpData],
    child: int,
) -> treeqp.QuadraticMessage:
    """Message a clique would send its parent, computed in one shot.

    Assembles the whole subtree's quadratic and equality rows over the
    union of its variables and minimises out everything but the separator.
    """
    par = tree.parent[child]
    if par is None:
        raise ValueError("the root sends no message")
    members = []
    stack = [child]
    while stack:
        i = stack.pop()
        members.append(i)
        stack.extend(tree.children[i])
    members.sort()
    varset = sorted({v for i in members for v in tree.cliques[i]})
    vmap = {v: t for t, v in enumerate(varset)}
    dim = len(varset)
    Q = np.zeros((dim, dim))
    q = np.zeros(dim)
    c = 0.0
    blocks_A = []
    blocks_b = []
    for i in members:
        d = data[i]
        cols = [vmap[v] for v in d.clique]
        Q[np.ix_(cols, cols)] += d.H
        q[cols] += d.r
        c += d.c
        if d.A.shape[0]:
            block = np.zeros((d.A.shape[0], dim))
            block[:, cols] = d.A
            blocks_A.append(block)
            blocks_b.append(d.beta)
    A = np.vstack(blocks_A) if blocks_A else np.zeros((0, dim))
    b = np.concatenate(blocks_b) if blocks_b else np.zeros(0)
    sep = tree.separator(child, par)
    keep = [vmap[v] for v in sep]
    Qr, qr, cr = parametric_min_oracle(Q, q, c, A, b, keep)
    return treeqp.QuadraticMessage(sep, Qr, qr, cr)
