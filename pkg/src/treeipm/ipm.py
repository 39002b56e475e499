"""Distributed primal-dual interior-point method on a clique tree.

Every iteration is a fixed schedule of synchronous passes:

1. upward: per-clique barrier KKT pieces are eliminated into quadratic
   messages (one factorization per agent);
2. downward: separator solutions propagate and each agent recovers its
   primal/dual direction;
3. upward: multiplier-positivity step bounds and current residual norms
   aggregate to the root;
4. downward: the root broadcasts the candidate step;
5. upward: candidate-point residuals, interiority flags and the surrogate
   gap aggregate; the root either accepts (one final broadcast) or shrinks
   the step and repeats 4-5.

Aggregation sums run in child-index order.  Residual norms are those of
the globally scattered residual vectors: scalar partial sums plus
separator-restricted vector pushes, so the root sees exactly the
centralized norm without any agent revealing local data beyond its
separators.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from treeipm import chordal, model, netsim, treeqp
from treeipm.errors import (
    InfeasibleProblemError,
    LineSearchStallError,
    NotStrictlyFeasibleError,
    ProblemFormatError,
)
from treeipm.model import (
    Assignment,
    CoupledProblem,
    Subproblem,
    eval_subproblem,
    positions,
)

ALPHA_STALL = 1e-12


@dataclass
class SolverParams:
    """Interior-point controls; ranges are enforced."""

    mu: float = 10.0
    eps: float = 1e-10
    eps_feas: float = 1e-8
    beta: float = 0.5
    gamma: float = 0.05
    max_iters: int = 100

    def __post_init__(self):
        if not self.mu > 1.0:
            raise ProblemFormatError(f"mu must exceed 1, got {self.mu}")
        if not 0.0 < self.beta < 1.0:
            raise ProblemFormatError(f"beta must lie in (0, 1), got {self.beta}")
        if not 0.01 <= self.gamma <= 0.1:
            raise ProblemFormatError(
                f"gamma must lie in [0.01, 0.1], got {self.gamma}"
            )
        if self.eps <= 0 or self.eps_feas <= 0:
            raise ProblemFormatError("tolerances must be positive")
        if self.max_iters < 1:
            raise ProblemFormatError("max_iters must be at least 1")


TRACE_COLUMNS = (
    "iter",
    "r_primal_norm",
    "r_dual_norm",
    "eta_hat",
    "alpha",
    "backtracks",
    "t",
    "mp_steps_cum",
)


@dataclass
class TraceRow:
    """Per-iteration record; norms and the gap are at the accepted point.

    ``t`` is the barrier parameter the iteration's directions were built
    with; ``mp_steps_cum`` counts solve-phase communication rounds so far.
    """

    iteration: int
    r_primal_norm: float
    r_dual_norm: float
    eta_hat: float
    alpha: float
    backtracks: int
    t: float
    mp_steps_cum: int

    def as_tuple(self) -> tuple:
        return (
            self.iteration,
            self.r_primal_norm,
            self.r_dual_norm,
            self.eta_hat,
            self.alpha,
            self.backtracks,
            self.t,
            self.mp_steps_cum,
        )


@dataclass
class ConvergenceTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        idx = TRACE_COLUMNS.index(name)
        return np.array([row.as_tuple()[idx] for row in self.rows])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            for row in self.rows:
                writer.writerow([repr(v) for v in row.as_tuple()])

    @staticmethod
    def from_csv(path: str | Path) -> "ConvergenceTrace":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != TRACE_COLUMNS:
                raise ProblemFormatError(f"{path}: unexpected trace header {header}")
            rows = [
                TraceRow(
                    int(vals[0]),
                    float(vals[1]),
                    float(vals[2]),
                    float(vals[3]),
                    float(vals[4]),
                    int(vals[5]),
                    float(vals[6]),
                    int(vals[7]),
                )
                for vals in reader
            ]
        return ConvergenceTrace(rows)


# ------------------ static per-clique context ------------------


@dataclass
class CliqueLocal:
    """Everything one agent needs about its own slice of the problem."""

    index: int
    clique: chordal.IndexSet
    sep: chordal.IndexSet
    sep_pos: np.ndarray
    elim_pos: np.ndarray
    subs: list[tuple[int, Subproblem, np.ndarray]]
    eq_A: np.ndarray
    eq_b: np.ndarray
    child_sep_pos: dict[int, np.ndarray]


@dataclass
class SolverSetup:
    problem: CoupledProblem
    tree: chordal.CliqueTree
    assignment: Assignment
    locals: dict[int, CliqueLocal]
    m_total: int
    n: int


@dataclass
class IterateState:
    """Per-clique iterate slices plus the barrier parameter."""

    x: dict[int, np.ndarray]
    v: dict[int, np.ndarray]
    lam: dict[int, np.ndarray]
    t: float


@dataclass
class Directions:
    dx: dict[int, np.ndarray]
    dv: dict[int, np.ndarray]
    dlam: dict[int, np.ndarray]
    records: dict[int, treeqp.EliminationRecord]
    data: dict[int, treeqp.CliqueQpData]


@dataclass
class StepSizeResult:
    alpha: float
    backtracks: int
    p_old_sq: float
    d_old_sq: float
    p_new_sq: float
    d_new_sq: float
    eta_hat: float


def _build_locals(
    p: CoupledProblem, tree: chordal.CliqueTree, a: Assignment
) -> dict[int, CliqueLocal]:
    locs: dict[int, CliqueLocal] = {}
    for i in range(tree.q):
        clique = tree.cliques[i]
        par = tree.parent[i]
        sep = tree.separator(i, par) if par is not None else ()
        sep_set = set(sep)
        elim_pos = np.array(
            [t for t, v in enumerate(clique) if v not in sep_set], dtype=int
        )
        subs = [
            (k, p.subproblems[k], positions(p.subproblems[k].J, clique))
            for k in a.phi[i]
        ]
        eq_A, eq_b = a.local_eq[i]
        child_sep_pos = {
            c: positions(tree.separator(c, i), clique) for c in tree.children[i]
        }
        locs[i] = CliqueLocal(
            i,
            clique,
            sep,
            positions(sep, clique),
            elim_pos,
            subs,
            eq_A,
            eq_b,
            child_sep_pos,
        )
    return locs


def prepare(
    p: CoupledProblem,
    tree: chordal.CliqueTree | None = None,
    assignment: Assignment | None = None,
) -> SolverSetup:
    """Build tree, assignment and preprocessed equality blocks (pure path)."""
    p.validate()
    if tree is None:
        _, _, tree = chordal.clique_tree_for(p.scopes(), p.n)
    if assignment is None:
        assignment = model.preprocess_equalities(p, tree, model.assign(p, tree))
    return SolverSetup(
        p, tree, assignment, _build_locals(p, tree, assignment), p.m_total, p.n
    )


def initial_state(
    setup: SolverSetup,
    x0: np.ndarray,
    lam0: Mapping[int, np.ndarray] | float | None = None,
    v0: Mapping[int, np.ndarray] | float | None = None,
) -> IterateState:
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (setup.n,):
        raise ProblemFormatError(f"x0 must have shape ({setup.n},)")
    x = {
        i: x0[list(setup.tree.cliques[i])].copy() for i in range(setup.tree.q)
    }
    lam: dict[int, np.ndarray] = {}
    for k, sp in enumerate(setup.problem.subproblems):
        if isinstance(lam0, Mapping):
            vec = np.asarray(lam0[k], dtype=float)
        else:
            vec = np.full(sp.m, 1.0 if lam0 is None else float(lam0))
        if vec.shape != (sp.m,) or (vec.size and vec.min() <= 0):
            raise ProblemFormatError(f"lam0[{k}] must be positive with shape ({sp.m},)")
        lam[k] = vec.copy()
    v: dict[int, np.ndarray] = {}
    for i in range(setup.tree.q):
        rows = setup.locals[i].eq_A.shape[0]
        if isinstance(v0, Mapping):
            vec = np.asarray(v0[i], dtype=float)
        else:
            vec = np.full(rows, 1.0 if v0 is None else float(v0))
        if vec.shape != (rows,):
            raise ProblemFormatError(f"v0[{i}] must have shape ({rows},)")
        v[i] = vec.copy()
    eta0 = surrogate_gap(setup, x, lam)
    t0 = _next_t(eta0, setup.m_total, 10.0)
    return IterateState(x, v, lam, t0)


def surrogate_gap(
    setup: SolverSetup, x: Mapping[int, np.ndarray], lam: Mapping[int, np.ndarray]
) -> float:
    """``-sum_k lam_k' g_k(x)``, aggregated in child-index order."""
    total = 0.0
    for i in setup.tree.post_order():
        loc = setup.locals[i]
        for k, sp, pos in loc.subs:
            g = np.array([c.value(x[i][pos]) for c in sp.inequalities])
            total += float(-(lam[k] @ g))
    return total


def _step_scale(m_total: int) -> float:
    # nothing to keep interior when there are no inequalities
    return 1.0 if m_total == 0 else 0.99


def _next_t(eta: float, m_total: int, mu: float) -> float:
    if m_total == 0:
        return math.inf
    if eta <= 0:
        raise LineSearchStallError(f"surrogate gap {eta:.3e} is not positive")
    return mu * m_total / eta


# ------------------ per-clique computations ------------------


def _clique_qp(
    loc: CliqueLocal,
    x: np.ndarray,
    v: np.ndarray,
    lam: Mapping[int, np.ndarray],
    t: float,
) -> tuple[treeqp.CliqueQpData, dict[int, model.SubproblemEval]]:
    d = len(loc.clique)
    H = np.zeros((d, d))
    r = np.zeros(d)
    inv_t = 0.0 if math.isinf(t) else 1.0 / t
    evals: dict[int, model.SubproblemEval] = {}
    for k, sp, pos in loc.subs:
        ev = eval_subproblem(sp, x[pos])
        evals[k] = ev
        if ev.g.size and ev.g.max() >= 0:
            raise NotStrictlyFeasibleError(
                f"iterate left the strict interior at subproblem {k} "
                f"(max g = {ev.g.max():.3e})"
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
        H[np.ix_(pos, pos)] += Hk
        r[pos] += rk
    if loc.eq_A.shape[0]:
        r += loc.eq_A.T @ v
    beta = loc.eq_b - loc.eq_A @ x
    return treeqp.CliqueQpData(loc.clique, H, r, loc.eq_A, beta), evals


def _clique_dlam(
    loc: CliqueLocal,
    evals: Mapping[int, model.SubproblemEval],
    lam: Mapping[int, np.ndarray],
    dx: np.ndarray,
    t: float,
) -> dict[int, np.ndarray]:
    inv_t = 0.0 if math.isinf(t) else 1.0 / t
    out: dict[int, np.ndarray] = {}
    for k, sp, pos in loc.subs:
        ev = evals[k]
        if ev.g.size == 0:
            out[k] = np.zeros(0)
            continue
        lk = lam[k]
        r_cent = -lk * ev.g - inv_t
        out[k] = (r_cent - lk * (ev.jac @ dx[pos])) / ev.g
    return out


def _dual_vector(
    loc: CliqueLocal,
    evals: Mapping[int, model.SubproblemEval],
    v: np.ndarray,
    lam: Mapping[int, np.ndarray],
) -> np.ndarray:
    w = np.zeros(len(loc.clique))
    for k, _, pos in loc.subs:
        ev = evals[k]
        w[pos] += ev.grad + (ev.jac.T @ lam[k] if ev.g.size else 0.0)
    if loc.eq_A.shape[0]:
        w += loc.eq_A.T @ v
    return w


def _stage1_local(
    loc: CliqueLocal,
    evals: Mapping[int, model.SubproblemEval],
    x: np.ndarray,
    v: np.ndarray,
    lam: Mapping[int, np.ndarray],
    dlam: Mapping[int, np.ndarray],
    children: Sequence[tuple[int, dict]],
    scale: float,
) -> dict:
    amax = 1.0
    for k, _, _ in loc.subs:
        d = dlam[k]
        mask = d < 0
        if mask.any():
            amax = min(amax, float(np.min(-lam[k][mask] / d[mask])))
    alpha = scale * amax
    for _, pl in children:
        alpha = min(alpha, pl["alpha"])
    w = _dual_vector(loc, evals, v, lam)
    p_sq = 0.0
    d_sq = 0.0
    for src, pl in children:
        p_sq += pl["p"]
        d_sq += pl["d"]
        w[loc.child_sep_pos[src]] += pl["push"]
    own_pr = loc.eq_A @ x - loc.eq_b
    p_sq += float(own_pr @ own_pr)
    own_w = w[loc.elim_pos]
    d_sq += float(own_w @ own_w)
    return {"alpha": alpha, "p": p_sq, "d": d_sq, "push": w[loc.sep_pos]}


def _candidate_local(
    loc: CliqueLocal,
    x: np.ndarray,
    v: np.ndarray,
    lam: Mapping[int, np.ndarray],
    dx: np.ndarray,
    dv: np.ndarray,
    dlam: Mapping[int, np.ndarray],
    alpha: float,
    children: Sequence[tuple[int, dict]],
) -> dict:
    dead = {
        "ok": False,
        "p": 0.0,
        "d": 0.0,
        "push": np.zeros(len(loc.sep)),
        "eta": 0.0,
    }
    if not all(pl["ok"] for _, pl in children):
        return dead
    x_hat = x + alpha * dx
    evals: dict[int, model.SubproblemEval] = {}
    for k, sp, pos in loc.subs:
        ev = eval_subproblem(sp, x_hat[pos])
        if ev.g.size and ev.g.max() >= 0:
            return dead
        evals[k] = ev
    v_hat = v + alpha * dv
    lam_hat = {k: lam[k] + alpha * dlam[k] for k, _, _ in loc.subs}
    w = _dual_vector(loc, evals, v_hat, lam_hat)
    p_sq = 0.0
    d_sq = 0.0
    eta = 0.0
    for src, pl in children:
        p_sq += pl["p"]
        d_sq += pl["d"]
        eta += pl["eta"]
        w[loc.child_sep_pos[src]] += pl["push"]
    own_pr = loc.eq_A @ x_hat - loc.eq_b
    p_sq += float(own_pr @ own_pr)
    own_w = w[loc.elim_pos]
    d_sq += float(own_w @ own_w)
    for k, _, _ in loc.subs:
        eta += float(-(lam_hat[k] @ evals[k].g))
    return {"ok": True, "p": p_sq, "d": d_sq, "push": w[loc.sep_pos], "eta": eta}


def _accept_test(
    cand: Mapping,
    alpha: float,
    p_old_sq: float,
    d_old_sq: float,
    params: SolverParams,
) -> bool:
    if not cand["ok"]:
        return False
    lhs = cand["p"] + cand["d"]
    rhs = (1.0 - params.gamma * alpha) ** 2 * (p_old_sq + d_old_sq)
    if lhs <= rhs:
        return True
    # both residuals already at the feasibility tolerance: forcing a further
    # decrease fights roundoff; only interiority matters from here on
    floor = params.eps_feas**2
    return cand["p"] <= floor and cand["d"] <= floor


# ------------------ pure operation variants ------------------


def local_qp_data(
    setup: SolverSetup, state: IterateState, i: int
) -> treeqp.CliqueQpData:
    """One clique's barrier KKT piece at the current iterate."""
    loc = setup.locals[i]
    data, _ = _clique_qp(loc, state.x[i], state.v[i], state.lam, state.t)
    return data


def compute_directions(setup: SolverSetup, state: IterateState) -> Directions:
    """Newton direction for all cliques via one up/down sweep (pure path)."""
    data: dict[int, treeqp.CliqueQpData] = {}
    evals: dict[int, dict[int, model.SubproblemEval]] = {}
    for i in setup.tree.post_order():
        loc = setup.locals[i]
        data[i], evals[i] = _clique_qp(loc, state.x[i], state.v[i], state.lam, state.t)
    _, records = treeqp.upward_pass(setup.tree, data)
    sols = treeqp.downward_pass(setup.tree, records)
    dx = {i: sols[i][0] for i in sols}
    dv = {i: sols[i][1] for i in sols}
    dlam: dict[int, np.ndarray] = {}
    for i in setup.tree.post_order():
        dlam.update(
            _clique_dlam(setup.locals[i], evals[i], state.lam, dx[i], state.t)
        )
    return Directions(dx, dv, dlam, records, data)


def distributed_step_size(
    setup: SolverSetup,
    state: IterateState,
    dirs: Directions,
    params: SolverParams,
) -> StepSizeResult:
    """Two-stage line search over the tree (pure path).

    Stage one aggregates the multiplier step bound and current residual
    norms to the root; stage two repeatedly evaluates a broadcast
    candidate step until interiority holds and the combined residual norm
    drops by the expected factor.
    """
    tree = setup.tree
    order = tree.post_order()
    scale = _step_scale(setup.m_total)
    evals = {
        i: {
            k: eval_subproblem(sp, state.x[i][pos])
            for k, sp, pos in setup.locals[i].subs
        }
        for i in order
    }
    stage1: dict[int, dict] = {}
    for i in order:
        children = [(c, stage1[c]) for c in tree.children[i]]
        stage1[i] = _stage1_local(
            setup.locals[i],
            evals[i],
            state.x[i],
            state.v[i],
            state.lam,
            dirs.dlam,
            children,
            scale,
        )
    root_pl = stage1[tree.root]
    alpha = root_pl["alpha"]
    p_old_sq, d_old_sq = root_pl["p"], root_pl["d"]
    backtracks = 0
    while True:
        cand: dict[int, dict] = {}
        for i in order:
            children = [(c, cand[c]) for c in tree.children[i]]
            cand[i] = _candidate_local(
                setup.locals[i],
                state.x[i],
                state.v[i],
                state.lam,
                dirs.dx[i],
                dirs.dv[i],
                dirs.dlam,
                alpha,
                children,
            )
        top = cand[tree.root]
        if _accept_test(top, alpha, p_old_sq, d_old_sq, params):
            return StepSizeResult(
                alpha, backtracks, p_old_sq, d_old_sq, top["p"], top["d"], top["eta"]
            )
        alpha *= params.beta
        backtracks += 1
        if alpha < ALPHA_STALL:
            raise LineSearchStallError(
                f"line search stalled (alpha {alpha:.3e})"
            )


def distributed_termination(
    params: SolverParams,
    m_total: int,
    p_new_sq: float,
    d_new_sq: float,
    eta_hat: float,
) -> tuple[bool, float]:
    """Stop decision and next barrier parameter from aggregated scalars."""
    stop = (
        math.sqrt(p_new_sq) <= params.eps_feas
        and math.sqrt(d_new_sq) <= params.eps_feas
        and eta_hat <= params.eps
    )
    return stop, _next_t(eta_hat, m_total, params.mu)


# ------------------ the simulator-driven solver ------------------


@dataclass
class SolveResult:
    x: np.ndarray
    x_clique: dict[int, np.ndarray]
    v: dict[int, np.ndarray]
    lam: dict[int, np.ndarray]
    objective: float
    converged: bool
    status: str
    iterations: int
    total_backtracks: int
    trace: ConvergenceTrace
    accounting: netsim.StepAccounting
    network: netsim.Network
    setup: SolverSetup

    def separator_gap(self) -> float:
        """Largest disagreement of shared variables across tree edges."""
        worst = 0.0
        tree = self.setup.tree
        for i, j in tree.edges:
            sep = tree.separator(i, j)
            a = self.x_clique[i][positions(sep, tree.cliques[i])]
            b = self.x_clique[j][positions(sep, tree.cliques[j])]
            if sep:
                worst = max(worst, float(np.max(np.abs(a - b))))
        return worst


def _preprocess_pass(
    net: netsim.Network, p: CoupledProblem, tree: chordal.CliqueTree
) -> Assignment:
    raw = model.assign(p, tree)
    for i in range(tree.q):
        env = net.agents[i]
        par = tree.parent[i]
        env.put("eq_raw", raw.local_eq[i])
        env.put("sep", tree.separator(i, par) if par is not None else ())

    def pre_up(env: netsim.AgentEnv, inbox):
        A, b = env.get("eq_raw")
        clique = env.clique
        blocks_A = [A]
        blocks_b = [b]
        for e in inbox:
            child_sep = e.payload["sep"]
            block = np.zeros((e.payload["A"].shape[0], len(clique)))
            block[:, positions(child_sep, clique)] = e.payload["A"]
            blocks_A.append(block)
            blocks_b.append(e.payload["b"])
        A = np.vstack(blocks_A)
        b = np.concatenate(blocks_b)
        sep = env.get("sep")
        sep_set = set(sep)
        elim_pos = np.array(
            [t for t, vv in enumerate(clique) if vv not in sep_set], dtype=int
        )
        keep_pos = positions(sep, clique)
        kept_A, kept_b, push_A, push_b = model.reduce_equality_block(
            A, b, elim_pos, keep_pos, is_root=env.parent is None
        )
        env.put("eq", (kept_A, kept_b))
        if env.parent is None:
            return None
        return {"A": push_A, "b": push_b, "sep": sep}

    net.run_up("eq-constraint-push", pre_up)
    local_eq = {i: net.agents[i].get("eq") for i in range(tree.q)}
    return Assignment({i: list(m) for i, m in raw.phi.items()}, local_eq)


def solve(
    p: CoupledProblem,
    params: SolverParams | None = None,
    x0: np.ndarray | None = None,
    lam0: Mapping[int, np.ndarray] | float | None = None,
    v0: Mapping[int, np.ndarray] | float | None = None,
    tree: chordal.CliqueTree | None = None,
    record_log: bool = True,
) -> SolveResult:
    """Run the distributed interior-point method through the simulator.

    ``x0`` must be strictly feasible for the inequalities (equalities may
    start violated); obtain one via :func:`phase_one` if needed.
    """
    params = params or SolverParams()
    p.validate()
    if x0 is None:
        raise NotStrictlyFeasibleError(
            "a strictly feasible x0 is required; obtain one via phase_one"
        )
    x0 = np.asarray(x0, dtype=float)
    worst = p.max_inequality(x0)
    if worst >= 0:
        raise NotStrictlyFeasibleError(
            f"x0 violates strict feasibility (max g = {worst:.3e}); run phase_one"
        )
    if tree is None:
        _, _, tree = chordal.clique_tree_for(p.scopes(), p.n)

    net = netsim.Network(tree, record_log=record_log)
    assignment = _preprocess_pass(net, p, tree)
    setup = SolverSetup(
        p, tree, assignment, _build_locals(p, tree, assignment), p.m_total, p.n
    )
    state = initial_state(setup, x0, lam0, v0)
    root = tree.root
    scale = _step_scale(setup.m_total)

    for i in range(tree.q):
        env = net.agents[i]
        env.put("loc", setup.locals[i])
        env.put("x", state.x[i])
        env.put("v", state.v[i])
        env.put("lam", {k: state.lam[k] for k in assignment.phi[i]})

    def gap_up(env, inbox):
        loc = env.get("loc")
        x = env.get("x")
        lam = env.get("lam")
        total = sum(e.payload for e in inbox)
        for k, sp, pos in loc.subs:
            g = np.array([c.value(x[pos]) for c in sp.inequalities])
            total += float(-(lam[k] @ g))
        return total

    eta0 = net.run_up("gap-partial", gap_up)
    t0 = _next_t(eta0, setup.m_total, params.mu)
    net.agents[root].put("t_bcast", t0)

    def t_seed(env, envelope):
        t = envelope.payload if envelope is not None else env.get("t_bcast")
        env.put("t", t)
        return {c: t for c in env.children}

    net.run_down("stop-broadcast", t_seed)

    def dir_up(env, inbox):
        loc = env.get("loc")
        data, evals = _clique_qp(
            loc, env.get("x"), env.get("v"), env.get("lam"), env.get("t")
        )
        env.put("evals", evals)
        msg, rec = treeqp.eliminate(
            data, [e.payload for e in inbox], loc.sep, clique_index=env.id
        )
        env.put("rec", rec)
        env.count_factorization()
        return msg if env.parent is not None else None

    def dir_down(env, envelope):
        loc = env.get("loc")
        rec = env.get("rec")
        y = envelope.payload if envelope is not None else np.zeros(0)
        dx, dv = treeqp.recover_clique(rec, y)
        dlam = _clique_dlam(loc, env.get("evals"), env.get("lam"), dx, env.get("t"))
        env.put("dx", dx)
        env.put("dv", dv)
        env.put("dlam", dlam)
        return {c: dx[loc.child_sep_pos[c]] for c in env.children}

    def stage1_up(env, inbox):
        loc = env.get("loc")
        return _stage1_local(
            loc,
            env.get("evals"),
            env.get("x"),
            env.get("v"),
            env.get("lam"),
            env.get("dlam"),
            [(e.src, e.payload) for e in inbox],
            scale,
        )

    def alpha_down(env, envelope):
        a = envelope.payload if envelope is not None else env.get("alpha_bar")
        env.put("alpha_bar", a)
        return {c: a for c in env.children}

    def cand_up(env, inbox):
        loc = env.get("loc")
        return _candidate_local(
            loc,
            env.get("x"),
            env.get("v"),
            env.get("lam"),
            env.get("dx"),
            env.get("dv"),
            env.get("dlam"),
            env.get("alpha_bar"),
            [(e.src, e.payload) for e in inbox],
        )

    def accept_down(env, envelope):
        acc = envelope.payload if envelope is not None else env.get("accept")
        loc = env.get("loc")
        a = acc["alpha"]
        env.put("x", env.get("x") + a * env.get("dx"))
        env.put("v", env.get("v") + a * env.get("dv"))
        lam = env.get("lam")
        dlam = env.get("dlam")
        env.put("lam", {k: lam[k] + a * dlam[k] for k in lam})
        env.put("t", acc["t"])
        return {c: acc for c in env.children}

    net.begin_phase("solve")
    trace = ConvergenceTrace()
    total_backtracks = 0
    status = "max_iters"
    iterations = 0
    t_used = t0
    for it in range(1, params.max_iters + 1):
        iterations = it
        net.run_up("qp-message", dir_up)
        net.run_down("separator-solution", dir_down)
        st1 = net.run_up("alpha-bound", stage1_up)
        alpha = st1["alpha"]
        p_old_sq, d_old_sq = st1["p"], st1["d"]
        net.agents[root].put("alpha_bar", alpha)
        net.run_down("alpha-broadcast", alpha_down)
        backtracks = 0
        while True:
            cand = net.run_up("residual-partial", cand_up)
            if _accept_test(cand, alpha, p_old_sq, d_old_sq, params):
                break
            alpha *= params.beta
            backtracks += 1
            if alpha < ALPHA_STALL:
                raise LineSearchStallError(
                    f"line search stalled at iteration {it} (alpha {alpha:.3e})"
                )
            net.agents[root].put("alpha_bar", alpha)
            net.run_down("alpha-broadcast", alpha_down)
        eta = cand["eta"]
        stop, t_next = distributed_termination(
            params, setup.m_total, cand["p"], cand["d"], eta
        )
        net.agents[root].put("accept", {"alpha": alpha, "stop": stop, "t": t_next})
        net.run_down("stop-broadcast", accept_down)
        trace.rows.append(
            TraceRow(
                it,
                math.sqrt(cand["p"]),
                math.sqrt(cand["d"]),
                eta,
                alpha,
                backtracks,
                t_used,
                net.mp_steps["solve"],
            )
        )
        total_backtracks += backtracks
        if stop:
            status = "converged"
            break
        t_used = t_next

    x_clique = {i: net.agents[i].get("x") for i in range(tree.q)}
    v_out = {i: net.agents[i].get("v") for i in range(tree.q)}
    lam_out: dict[int, np.ndarray] = {}
    for i in range(tree.q):
        lam_out.update(net.agents[i].get("lam"))
    x_global = np.zeros(p.n)
    for i in range(tree.q):
        loc = setup.locals[i]
        owned = [loc.clique[t] for t in loc.elim_pos]
        x_global[owned] = x_clique[i][loc.elim_pos]
    report = netsim.accounting(net, iterations, total_backtracks, strict=True)
    return SolveResult(
        x=x_global,
        x_clique=x_clique,
        v=v_out,
        lam=lam_out,
        objective=p.objective_value(x_global),
        converged=status == "converged",
        status=status,
        iterations=iterations,
        total_backtracks=total_backtracks,
        trace=trace,
        accounting=report,
        network=net,
        setup=setup,
    )


# ------------------ phase one ------------------


@dataclass
class PhaseOneInfo:
    pre_check: bool
    optimum: float | None
    margin: float
    iterations: int


def phase_one(
    p: CoupledProblem,
    params: SolverParams | None = None,
    eps_slack: float = 1e-3,
    record_log: bool = False,
) -> tuple[np.ndarray, PhaseOneInfo]:
    """Find a strictly feasible point, or certify none exists.

    Minimises the sum of per-constraint slacks, bounded below so the
    problem stays well posed.  The origin is tried first; if every
    inequality is already strictly negative there no auxiliary solve
    happens.  Equality constraints are ignored here (the main solver
    starts equality-infeasible without trouble).
    """
    params = params or SolverParams()
    p.validate()
    origin = np.zeros(p.n)
    worst = p.max_inequality(origin)
    if worst < 0:
        return origin, PhaseOneInfo(True, None, -worst, 0)

    n = p.n
    m_total = p.m_total
    offsets: list[int] = []
    off = 0
    for sp in p.subproblems:
        offsets.append(off)
        off += sp.m
    subs: list[Subproblem] = []
    for k, sp in enumerate(p.subproblems):
        d = sp.dim
        slack_ids = [n + offsets[k] + j for j in range(sp.m)]
        scope = tuple(list(sp.J) + slack_ids)
        dim = d + sp.m
        qvec = np.zeros(dim)
        qvec[d:] = 1.0
        cons: list[model.Constraint] = []
        for j, con in enumerate(sp.inequalities):
            a = np.zeros(dim)
            a[:d] = con.a
            a[d + j] = -1.0
            if con.kind == "affine":
                cons.append(model.Constraint("affine", a, con.b))
            else:
                Q = np.zeros((dim, dim))
                Q[:d, :d] = con.Q
                cons.append(model.Constraint("quadratic", a, con.b, Q=Q))
        for j in range(sp.m):
            a = np.zeros(dim)
            a[d + j] = -1.0
            cons.append(model.Constraint("affine", a, -eps_slack))
        subs.append(
            Subproblem(scope, model.QuadraticForm(np.zeros((dim, dim)), qvec), cons)
        )
    aux = CoupledProblem(n + m_total, subs).validate()

    s0 = np.empty(m_total)
    pos = 0
    for sp in p.subproblems:
        xl = origin[list(sp.J)]
        for con in sp.inequalities:
            s0[pos] = max(con.value(xl), -eps_slack) + 1.0
            pos += 1
    x_aux = np.concatenate([origin, s0])
    result = solve(aux, params, x_aux, record_log=record_log)
    x_cand = result.x[:n]
    optimum = result.objective
    threshold = -eps_slack * m_total + 1e-7 * (1 + m_total)
    margin = -p.max_inequality(x_cand)
    if optimum <= threshold and margin > 0:
        return x_cand, PhaseOneInfo(False, optimum, margin, result.iterations)
    raise InfeasibleProblemError(
        f"no strictly feasible point: slack optimum {optimum:.6e} "
        f"exceeds {threshold:.6e}",
        certificate=optimum,
    )


# ------------------ multi-component front end ------------------


@dataclass
class ComponentRun:
    variables: list[int]
    subproblems: list[int]
    phase_one: PhaseOneInfo | None
    result: SolveResult


def solve_auto(
    p: CoupledProblem,
    params: SolverParams | None = None,
    x0: np.ndarray | None = None,
    record_log: bool = True,
) -> list[ComponentRun]:
    """Split into coupling components, find starts, and solve each.

    A given ``x0`` is used where strictly feasible; otherwise phase one
    supplies the start for that component.
    """
    params = params or SolverParams()
    p.validate()
    g = chordal.sparsity_graph(p.scopes(), p.n)
    comps = chordal.connected_components(g)
    runs: list[ComponentRun] = []
    for comp in comps:
        comp_set = set(comp)
        var_map = {v: t for t, v in enumerate(comp)}
        sub_ids = [k for k, sp in enumerate(p.subproblems) if sp.J[0] in comp_set]
        sub_list = []
        for k in sub_ids:
            sp = p.subproblems[k]
            sub_list.append(
                Subproblem(
                    tuple(var_map[v] for v in sp.J),
                    model.QuadraticForm(
                        sp.objective.P.copy(), sp.objective.q.copy(), sp.objective.r
                    ),
                    [
                        model.Constraint(
                            c.kind, c.a.copy(), c.b, Q=None if c.Q is None else c.Q.copy()
                        )
                        for c in sp.inequalities
                    ],
                    sp.eq_A.copy(),
                    sp.eq_b.copy(),
                )
            )
        sub_p = CoupledProblem(len(comp), sub_list).validate()
        info: PhaseOneInfo | None = None
        start: np.ndarray | None = None
        if x0 is not None:
            cand = np.asarray(x0, dtype=float)[comp]
            if sub_p.max_inequality(cand) < 0:
                start = cand
        if start is None:
            start, info = phase_one(sub_p, params)
        result = solve(sub_p, params, start, record_log=record_log)
        runs.append(ComponentRun(list(comp), sub_ids, info, result))
    return runs


def merge_solution(p: CoupledProblem, runs: Sequence[ComponentRun]) -> np.ndarray:
    x = np.zeros(p.n)
    for run in runs:
        x[run.variables] = run.result.x
    return x
