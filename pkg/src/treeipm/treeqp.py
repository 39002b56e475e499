"""Quadratic message passing over a rooted clique tree.

Each clique holds an equality-constrained quadratic piece

    min 0.5 d' H d + r' d + c   subject to   A d = beta

over its variables.  The upward pass eliminates, per clique, the variables
absent from the parent together with the local multipliers, and sends the
parent the resulting parametric minimum: a quadratic in the separator
variables.  The downward pass recovers the minimiser by back-substitution.
The whole procedure is a block LDL' factorization of the assembled KKT
matrix with a fixed, tree-structured pivot order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from treeipm.chordal import CliqueTree, IndexSet
from treeipm.errors import EliminationError
from treeipm.model import positions

EQ_RANK_TOL = 1e-10
SOLVE_BACKWARD_TOL = 1e-8


def nullspace_condition(Q_zz: np.ndarray, A_z: np.ndarray, tol: float = 1e-10) -> bool:
    """True when the elimination block ``[[Q_zz, A_z'], [A_z, 0]]`` is regular.

    Holds exactly when ``A_z`` has full row rank and ``Q_zz`` is positive
    definite on the nullspace of ``A_z``.
    """
    Q_zz = np.atleast_2d(np.asarray(Q_zz, dtype=float))
    A_z = np.asarray(A_z, dtype=float)
    if A_z.size == 0:
        A_z = A_z.reshape(0, Q_zz.shape[0] if Q_zz.size else 0)
    nz = Q_zz.shape[0] if Q_zz.size else A_z.shape[1]
    p = A_z.shape[0]
    if p > nz:
        return False
    if p > 0:
        s = np.linalg.svd(A_z, compute_uv=False)
        if s.size < p or s[p - 1] <= tol * max(1.0, s[0]):
            return False
        basis = scipy.linalg.null_space(A_z)
    else:
        basis = np.eye(nz)
    if basis.shape[1] == 0:
        return True
    reduced = basis.T @ Q_zz @ basis
    w = np.linalg.eigvalsh(0.5 * (reduced + reduced.T))
    return bool(w[0] > tol * max(1.0, abs(w[-1])))


@dataclass
class CliqueQpData:
    """One clique's quadratic piece, ordered by ascending variable index."""

    clique: IndexSet
    H: np.ndarray
    r: np.ndarray
    A: np.ndarray
    beta: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        d = len(self.clique)
        self.H = np.asarray(self.H, dtype=float).reshape(d, d)
        self.r = np.asarray(self.r, dtype=float).reshape(d)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, d)
        self.beta = np.asarray(self.beta, dtype=float).reshape(self.A.shape[0])
        self.c = float(self.c)


@dataclass
class QuadraticMessage:
    """Parametric minimum over a separator: ``0.5 y'Qy + q'y + c``."""

    sep: IndexSet
    Q: np.ndarray
    q: np.ndarray
    c: float

    def value(self, y: np.ndarray) -> float:
        y = np.asarray(y, dtype=float)
        return float(0.5 * y @ self.Q @ y + self.q @ y + self.c)


@dataclass
class EliminationRecord:
    """Back-substitution data kept by one clique after its elimination."""

    clique_index: int
    clique: IndexSet
    sep: IndexSet
    elim: IndexSet
    H1: np.ndarray
    H2: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    O: np.ndarray
    message: QuadraticMessage


def eliminate(
    data: CliqueQpData,
    child_msgs: list[QuadraticMessage],
    sep: IndexSet,
    clique_index: int = -1,
) -> tuple[QuadraticMessage, EliminationRecord]:
    """Fold child messages into one clique and eliminate its private part.

    ``sep`` names the variables shared with the parent (empty at the
    root).  Returns the message for the parent plus the record needed to
    recover the local minimiser once the separator values arrive.
    """
    clique = data.clique
    H = data.H.copy()
    r = data.r.copy()
    c = data.c
    for msg in child_msgs:
        pos = positions(msg.sep, clique)
        H[np.ix_(pos, pos)] += msg.Q
        r[pos] += msg.q
        c += msg.c

    sep_set = set(sep)
    elim = tuple(v for v in clique if v not in sep_set)
    zpos = positions(elim, clique)
    ypos = positions(sep, clique)
    nz, ny, p = len(elim), len(sep), data.A.shape[0]

    Qzz = H[np.ix_(zpos, zpos)]
    Qzy = H[np.ix_(zpos, ypos)]
    Qyy = H[np.ix_(ypos, ypos)]
    qz = r[zpos]
    qy = r[ypos]
    Az = data.A[:, zpos]
    Ay = data.A[:, ypos]

    O = np.zeros((nz + p, nz + p))
    O[:nz, :nz] = Qzz
    O[:nz, nz:] = Az.T
    O[nz:, :nz] = Az

    # The equality rows are never barrier-scaled, so a rank drop there is
    # structural (redundant rows), not stiffness.
    if p > 0:
        s = np.linalg.svd(Az, compute_uv=False)
        if s.size < p or s[min(p, s.size) - 1] <= EQ_RANK_TOL * max(1.0, s[0]):
            raise EliminationError(
                f"clique {clique_index}: equality block is rank deficient "
                "over the eliminated variables; preprocessing required"
            )

    if O.size:
        rhs = np.zeros((nz + p, ny + 1))
        rhs[:nz, :ny] = -Qzy
        rhs[:nz, ny] = -qz
        rhs[nz:, :ny] = -Ay
        rhs[nz:, ny] = data.beta

        def backward_ok(s):
            if not np.isfinite(s).all():
                return False
            scale = np.linalg.norm(O) * np.linalg.norm(s) + np.linalg.norm(rhs) + 1.0
            return np.linalg.norm(O @ s - rhs) <= SOLVE_BACKWARD_TOL * scale

        try:
            sol = scipy.linalg.solve(O, rhs, assume_a="sym")
        except scipy.linalg.LinAlgError:
            sol = None
        if sol is None or not backward_ok(sol):
            # extreme barrier weights can defeat the symmetric pivoting even
            # though the system is consistent; retry before declaring the
            # block singular, under the same backward-error contract
            retry = np.linalg.lstsq(O, rhs, rcond=None)[0]
            if backward_ok(retry):
                sol = retry
            elif sol is None:
                raise EliminationError(
                    f"clique {clique_index}: singular elimination block; "
                    "positive definiteness on the equality nullspace is violated"
                )
            else:
                resid = np.linalg.norm(O @ sol - rhs)
                raise EliminationError(
                    f"clique {clique_index}: elimination solve failed its "
                    f"backward error check ({resid:.3e}); the block is "
                    "numerically singular"
                )
    else:
        sol = np.zeros((0, ny + 1))

    H1 = sol[:nz, :ny]
    H2 = sol[nz:, :ny]
    h1 = sol[:nz, ny]
    h2 = sol[nz:, ny]

    Qt = Qyy + H1.T @ Qzz @ H1 + H1.T @ Qzy + Qzy.T @ H1
    Qt = 0.5 * (Qt + Qt.T)
    qt = qy + H1.T @ qz + Qzy.T @ h1 + H1.T @ (Qzz @ h1)
    ct = c + 0.5 * h1 @ Qzz @ h1 + qz @ h1

    msg = QuadraticMessage(tuple(sep), Qt, qt, float(ct))
    rec = EliminationRecord(
        clique_index, clique, tuple(sep), elim, H1, H2, h1, h2, O, msg
    )
    return msg, rec


def upward_pass(
    tree: CliqueTree, data: dict[int, CliqueQpData]
) -> tuple[dict[int, QuadraticMessage], dict[int, EliminationRecord]]:
    """Eliminate every clique bottom-up.

    Returns the messages keyed by sending clique (one per non-root
    clique) and the per-clique records.  Child messages fold in ascending
    child index order.
    """
    messages: dict[int, QuadraticMessage] = {}
    records: dict[int, EliminationRecord] = {}
    for i in tree.post_order():
        par = tree.parent[i]
        sep = tree.separator(i, par) if par is not None else ()
        child_msgs = [messages[k] for k in tree.children[i]]
        msg, rec = eliminate(data[i], child_msgs, sep, clique_index=i)
        records[i] = rec
        if par is not None:
            messages[i] = msg
    return messages, records


def recover_clique(
    rec: EliminationRecord, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Back-substitute one clique given its separator values ``y``."""
    dz = rec.H1 @ y + rec.h1
    dv = rec.H2 @ y + rec.h2
    dx = np.zeros(len(rec.clique))
    dx[positions(rec.elim, rec.clique)] = dz
    dx[positions(rec.sep, rec.clique)] = y
    return dx, dv


def downward_pass(
    tree: CliqueTree,
    records: dict[int, EliminationRecord],
    root_solution: tuple[np.ndarray, np.ndarray] | None = None,
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Recover per-clique minimisers and multipliers top-down.

    Separator values are copied from the parent's solution, never
    recomputed, so shared variables agree bitwise across cliques.
    """
    out: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for i in reversed(tree.post_order()):
        rec = records[i]
        if tree.parent[i] is None:
            if root_solution is not None:
                out[i] = root_solution
                continue
            y = np.zeros(0)
        else:
            parent_dx = out[tree.parent[i]][0]
            y = parent_dx[positions(rec.sep, tree.cliques[tree.parent[i]])]
        out[i] = recover_clique(rec, y)
    return out


def solve_tree_qp(
    tree: CliqueTree, data: dict[int, CliqueQpData]
) -> tuple[dict[int, tuple[np.ndarray, np.ndarray]], float]:
    """Upward then downward pass; returns solutions and the optimal value."""
    _, records = upward_pass(tree, data)
    sols = downward_pass(tree, records)
    return sols, records[tree.root].message.c


def block_ldl_check(
    tree: CliqueTree,
    records: dict[int, EliminationRecord],
    data: dict[int, CliqueQpData],
    n: int,
) -> float:
    """Consistency check: message passing equals a permuted block LDL'.

    Assembles the full KKT matrix of the tree QP, permutes it into
    per-clique blocks (private variables then local multipliers, in
    elimination order) and runs block Gaussian elimination using the
    recorded pivot blocks.  Returns the Frobenius mismatch between the
    eliminated matrix and the block diagonal of the recorded pivots,
    relative to the KKT matrix norm.
    """
    order = tree.post_order()
    p_rows = {i: data[i].A.shape[0] for i in order}
    n_rows = n + sum(p_rows.values())

    # permutation: for every clique, its private variables then its rows
    col_of_var = {}
    block_idx: dict[int, np.ndarray] = {}
    offset = 0
    row_offset = {}
    seen_vars: set[int] = set()
    for i in order:
        rec = records[i]
        if set(rec.elim) & seen_vars:
            raise EliminationError("private variable sets are not disjoint")
        seen_vars.update(rec.elim)
        idx = list(range(offset, offset + len(rec.elim) + p_rows[i]))
        for v, pos in zip(rec.elim, idx):
            col_of_var[v] = pos
        row_offset[i] = offset + len(rec.elim)
        block_idx[i] = np.array(idx, dtype=int)
        offset += len(idx)
    if len(seen_vars) != n:
        raise EliminationError("private variable sets do not cover all variables")

    kkt = np.zeros((n_rows, n_rows))
    for i in order:
        d = data[i]
        cols = np.array([col_of_var[v] for v in d.clique], dtype=int)
        kkt[np.ix_(cols, cols)] += d.H
        if p_rows[i]:
            rows = np.arange(row_offset[i], row_offset[i] + p_rows[i])
            kkt[np.ix_(rows, cols)] += d.A
            kkt[np.ix_(cols, rows)] += d.A.T
    kkt_norm = float(np.linalg.norm(kkt))

    work = kkt.copy()
    eliminated: list[int] = []
    for i in order:
        idx = block_idx[i]
        rest = np.setdiff1d(
            np.arange(n_rows), np.concatenate([block_idx[k] for k in eliminated + [i]])
        )
        pivot = records[i].O
        if idx.size and rest.size:
            lower = work[np.ix_(rest, idx)]
            upper = work[np.ix_(idx, rest)]
            work[np.ix_(rest, rest)] -= lower @ scipy.linalg.solve(
                pivot, upper, assume_a="sym"
            )
            work[np.ix_(rest, idx)] = 0.0
            work[np.ix_(idx, rest)] = 0.0
        eliminated.append(i)

    block_diag = np.zeros_like(kkt)
    for i in order:
        idx = block_idx[i]
        block_diag[np.ix_(idx, idx)] = records[i].O
    denom = kkt_norm if kkt_norm > 0 else 1.0
    return float(np.linalg.norm(work - block_diag) / denom)
