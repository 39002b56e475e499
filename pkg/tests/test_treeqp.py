"""Tree-structured equality QP solver versus dense KKT algebra."""

from __future__ import annotations

import numpy as np
import pytest
import scipy.linalg

from treeipm import treeqp
from treeipm.errors import EliminationError

from conftest import make_rooted_tree, random_tree_qp


def dense_kkt(tree, data, n):
    """Assemble the stacked KKT system in global coordinates."""
    Q = np.zeros((n, n))
    r = np.zeros(n)
    c = 0.0
    A_rows = []
    beta = []
    row_of = {}
    row = 0
    for i in sorted(data):
        d = data[i]
        cols = list(d.clique)
        Q[np.ix_(cols, cols)] += d.H
        r[cols] += d.r
        c += d.c
        if d.A.shape[0]:
            block = np.zeros((d.A.shape[0], n))
            block[:, cols] = d.A
            A_rows.append(block)
            beta.extend(d.beta)
            row_of[i] = (row, row + d.A.shape[0])
            row += d.A.shape[0]
        else:
            row_of[i] = (row, row)
    A = np.vstack(A_rows) if A_rows else np.zeros((0, n))
    b = np.array(beta)
    p = A.shape[0]
    kkt = np.block([[Q, A.T], [A, np.zeros((p, p))]])
    rhs = np.concatenate([-r, b])
    sol = np.linalg.solve(kkt, rhs)
    x = sol[:n]
    nu = sol[n:]
    val = 0.5 * x @ Q @ x + r @ x + c
    return x, nu, row_of, val


# ---------------- scalar worked example ----------------


def test_single_clique_elimination_by_hand():
    # minimise 0.5 z^2 over (y, z) subject to y + z = 1, then send the
    # parent the resulting quadratic in y, which is 0.5 (1 - y)^2
    data = treeqp.CliqueQpData(
        clique=(0, 1),
        H=np.array([[0.0, 0.0], [0.0, 1.0]]),
        r=np.zeros(2),
        A=np.array([[1.0, 1.0]]),
        beta=np.array([1.0]),
    )
    msg, rec = treeqp.eliminate(data, [], sep=(0,))
    assert np.allclose(rec.O, [[1.0, 1.0], [1.0, 0.0]])
    assert np.allclose(rec.H1, [[-1.0]])
    assert np.allclose(rec.H2, [[1.0]])
    assert np.allclose(rec.h1, [1.0])
    assert np.allclose(rec.h2, [-1.0])
    assert np.allclose(msg.Q, [[1.0]])
    assert np.allclose(msg.q, [-1.0])
    assert np.isclose(msg.c, 0.5)
    for y in (-1.0, 0.0, 2.5):
        assert np.isclose(msg.value(np.array([y])), 0.5 * (1 - y) ** 2)
    # back-substitution satisfies the constraint and stationarity
    dx, dv = treeqp.recover_clique(rec, np.array([0.3]))
    assert np.isclose(dx[0], 0.3)
    assert np.isclose(dx[0] + dx[1], 1.0)
    assert np.isclose(dx[1] + dv[0], 0.0)


def test_message_folds_children_before_eliminating():
    # child message shifts the local quadratic seen by the parent
    data = treeqp.CliqueQpData(
        clique=(0, 1),
        H=np.diag([2.0, 1.0]),
        r=np.array([0.0, -1.0]),
        A=np.zeros((0, 2)),
        beta=np.zeros(0),
    )
    child = treeqp.QuadraticMessage((1,), np.array([[3.0]]), np.array([0.5]), 0.25)
    msg, rec = treeqp.eliminate(data, [child], sep=(0,))
    # eliminating z from 0.5*(1+3) z^2 + (-1+0.5) z gives value -0.5^2/8
    assert np.isclose(msg.c, 0.25 - 0.5**2 / (2 * 4.0))
    assert np.allclose(msg.Q, [[2.0]])
    z = rec.H1 @ np.array([1.0]) + rec.h1
    assert np.isclose(z[0], 0.5 / 4.0)


# ---------------- random trees vs dense algebra ----------------


def test_tree_solution_matches_dense_kkt(rng):
    for _ in range(25):
        tree, data = random_tree_qp(rng)
        n = 1 + max(v for c in tree.cliques for v in c)
        x_ref, nu_ref, row_of, val_ref = dense_kkt(tree, data, n)
        sols, val = solve_and_stitch(tree, data, n)
        x, per_clique = sols
        assert np.allclose(x, x_ref, atol=1e-8), np.abs(x - x_ref).max()
        assert np.isclose(val, val_ref, atol=1e-8 * max(1, abs(val_ref)))
        for i, (dx, dv) in per_clique.items():
            lo, hi = row_of[i]
            assert np.allclose(dv, nu_ref[lo:hi], atol=1e-8)


def solve_and_stitch(tree, data, n):
    sols, val = treeqp.solve_tree_qp(tree, data)
    x = np.full(n, np.nan)
    for i, (dx, dv) in sols.items():
        cols = list(tree.cliques[i])
        old = x[cols]
        # overlapping coordinates must agree bitwise
        both = ~np.isnan(old)
        assert np.array_equal(old[both], dx[both])
        x[cols] = dx
    assert not np.isnan(x).any()
    return (x, sols), val


def test_root_message_carries_optimal_value(rng):
    tree, data = random_tree_qp(rng)
    n = 1 + max(v for c in tree.cliques for v in c)
    _, records = treeqp.upward_pass(tree, data)
    root_msg = records[tree.root].message
    assert root_msg.sep == ()
    _, _, _, val_ref = dense_kkt(tree, data, n)
    assert np.isclose(root_msg.c, val_ref, atol=1e-8 * max(1, abs(val_ref)))


def test_downward_accepts_pinned_root_solution(rng):
    tree, data = random_tree_qp(rng)
    _, records = treeqp.upward_pass(tree, data)
    root = tree.root
    dz = np.zeros(len(records[root].elim))
    dv = np.zeros(data[root].A.shape[0])
    dx0 = np.zeros(len(tree.cliques[root]))
    sols = treeqp.downward_pass(tree, records, root_solution=(dx0, dv))
    assert np.allclose(sols[root][0], dx0)
    for i in tree.children[root]:
        y = dx0[
            np.array(
                [tree.cliques[root].index(v) for v in records[i].sep], dtype=int
            )
        ]
        dx, _ = sols[i]
        expect, _ = treeqp.recover_clique(records[i], y)
        assert np.allclose(dx, expect)


def test_block_ldl_check_near_zero(rng):
    for _ in range(5):
        tree, data = random_tree_qp(rng)
        n = 1 + max(v for c in tree.cliques for v in c)
        _, records = treeqp.upward_pass(tree, data)
        assert treeqp.block_ldl_check(tree, records, data, n) <= 1e-8


# ---------------- degeneracy handling ----------------


def test_nullspace_condition_classifies():
    ok = treeqp.nullspace_condition(np.eye(2), np.zeros((0, 2)))
    assert ok
    # PD on the nullspace of A even though Q is indefinite
    Q = np.diag([1.0, -1.0])
    A = np.array([[0.0, 1.0]])  # nullspace = span(e0)
    assert treeqp.nullspace_condition(Q, A)
    assert not treeqp.nullspace_condition(Q, np.zeros((0, 2)))
    # rank-deficient A
    A2 = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert not treeqp.nullspace_condition(np.eye(2), A2)
    # more rows than variables
    A3 = np.ones((3, 2))
    assert not treeqp.nullspace_condition(np.eye(2), A3)


def test_eliminate_rejects_redundant_equality_rows():
    data = treeqp.CliqueQpData(
        clique=(0, 1, 2),
        H=np.eye(3),
        r=np.zeros(3),
        A=np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]]),
        beta=np.zeros(2),
    )
    with pytest.raises(EliminationError, match="preprocessing required"):
        treeqp.eliminate(data, [], sep=(2,))


def test_eliminate_rejects_unbounded_direction():
    # H vanishes on the eliminated variable, nothing pins it, and the
    # linear term drives it to -inf: the KKT system is inconsistent
    data = treeqp.CliqueQpData(
        clique=(0, 1),
        H=np.diag([0.0, 1.0]),
        r=np.array([1.0, 0.0]),
        A=np.zeros((0, 2)),
        beta=np.zeros(0),
    )
    with pytest.raises(EliminationError):
        treeqp.eliminate(data, [], sep=(1,))


def test_eliminate_flat_but_consistent_direction():
    # no linear term on the flat variable: every value is optimal and the
    # minimum-norm representative is returned
    data = treeqp.CliqueQpData(
        clique=(0, 1),
        H=np.diag([0.0, 1.0]),
        r=np.zeros(2),
        A=np.zeros((0, 2)),
        beta=np.zeros(0),
    )
    msg, rec = treeqp.eliminate(data, [], sep=(1,))
    assert np.allclose(rec.h1, 0.0)
    assert np.allclose(msg.Q, [[1.0]])
    assert np.isclose(msg.c, 0.0)


def test_upward_pass_names_offending_clique(rng):
    tree, data = random_tree_qp(rng)
    victim = tree.post_order()[0]
    d = data[victim]
    sep = tree.separator(victim, tree.parent[victim])
    elim = [v for v in d.clique if v not in set(sep)]
    if len(elim) < 1:
        pytest.skip("first clique fully shared")
    row = np.zeros((2, len(d.clique)))
    row[:, d.clique.index(elim[0])] = 1.0
    data[victim] = treeqp.CliqueQpData(
        d.clique, d.H, d.r, row, np.zeros(2), d.c
    )
    with pytest.raises(EliminationError, match=f"clique {victim}"):
        treeqp.upward_pass(tree, data)


def test_data_validation():
    with pytest.raises(Exception):
        treeqp.CliqueQpData(
            clique=(0, 1),
            H=np.eye(3),
            r=np.zeros(2),
            A=np.zeros((0, 2)),
            beta=np.zeros(0),
        )
