import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mixedcbm.tree import (
    HARD,
    SOFT,
    DecisionTree,
    TreeError,
    decompose,
    export_dot,
    fit_tree,
    predict,
    route,
)
from tree_oracles import greedy_tree, optimal_accuracy


def xor_data():
    F = np.array([[a, b] for a in (0, 1) for b in (0, 1)] * 4, dtype=float)
    return F, (F[:, 0] != F[:, 1]).astype(int)


def test_xor_four_pure_leaves():
    F, y = xor_data()
    t = fit_tree(F, y, msl=1)
    assert t.n_leaves == 4 and t.depth == 2
    assert all(len(np.flatnonzero(nd.class_counts)) == 1 for nd in t.leaves())
    assert np.mean(t.predict(F) == y) == 1.0


def test_pure_labels_single_leaf():
    F = np.random.default_rng(0).random((20, 3))
    for msl in (1, 5, 20):
        assert fit_tree(F, np.ones(20, dtype=int), msl, n_classes=2).n_leaves == 1


def test_msl_equal_n_single_leaf_and_msl_above_n_errors():
    F, y = xor_data()
    assert fit_tree(F, y, msl=16).n_leaves == 1
    with pytest.raises(TreeError):
        fit_tree(F, y, msl=17)


def test_threshold_boundary_routes_left():
    F = np.array([[0.0], [0.0], [1.0], [1.0]])
    t = fit_tree(F, np.array([0, 0, 1, 1]), msl=1)
    assert t.root.threshold == 0.5
    assert t.predict(np.array([[0.5]]))[0] == 0
    assert t.predict(np.array([[np.nextafter(0.5, 1)]]))[0] == 1


def test_tie_break_lower_feature_then_lower_threshold():
    # both features separate the labels perfectly
    F = np.array([[0, 0], [0, 0], [1, 1], [1, 1]], dtype=float)
    t = fit_tree(F, np.array([0, 0, 1, 1]), msl=1)
    assert t.root.feature == 0
    # labels 0 1 1 0: cuts at 0.5 and 2.5 have equal gain, the lower one wins
    F = np.array([[0.0], [1.0], [2.0], [3.0]])
    t = fit_tree(F, np.array([0, 1, 1, 0]), msl=1)
    assert t.root.threshold == 0.5


def test_decompose_single_leaf_and_complete_tree():
    F, y = xor_data()
    (p,) = decompose(fit_tree(F, y, msl=16))
    assert p.conditions == () and p.concepts == frozenset()
    paths = decompose(fit_tree(F, y, msl=1))
    assert len(paths) == 4 and all(len(p.concepts) == 2 for p in paths)
    assert [p.leaf_id for p in paths] == sorted(p.leaf_id for p in paths)


def test_training_accuracy_equals_recount_from_leaf_counts():
    rng = np.random.default_rng(5)
    F, y = rng.random((300, 4)), rng.integers(0, 3, 300)
    t = fit_tree(F, y, msl=10)
    minority = sum(nd.n_samples - nd.class_counts.max() for nd in t.leaves())
    assert np.mean(t.predict(F) == y) == pytest.approx(1 - minority / 300, abs=0)


def test_module_level_route_and_predict_agree_with_methods():
    rng = np.random.default_rng(1)
    F, y = rng.random((100, 3)), rng.integers(0, 2, 100)
    t = fit_tree(F, y, msl=5)
    assert np.array_equal(predict(t, F), t.predict(F))
    assert [route(t, row) for row in F] == t.route(F).tolist()


def test_json_round_trip_and_dot():
    rng = np.random.default_rng(2)
    F, y = rng.random((200, 3)), rng.integers(0, 3, 200)
    t = fit_tree(F, y, msl=8, feature_names=["a", "b", "c"], feature_kinds=[HARD, SOFT, HARD])
    back = DecisionTree.from_dict(json.loads(json.dumps(t.to_dict())))
    assert np.array_equal(back.predict(F), t.predict(F))
    assert export_dot(back) == export_dot(t)
    dot = export_dot(t)
    assert dot.startswith("digraph") and dot.count("label=\"") - dot.count("-> ") == t.n_nodes
    one = export_dot(fit_tree(F, np.zeros(200, dtype=int), msl=1, n_classes=3))
    assert one.count("[label=\"samples") == 1


def test_dot_styles_hard_dark_soft_light():
    F = np.array([[0, 0.1], [0, 0.9], [1, 0.1], [1, 0.9]] * 3, dtype=float)
    y = np.array([0, 1, 2, 2] * 3)
    t = fit_tree(F, y, msl=1, feature_names=["x0", "x1"], feature_kinds=[HARD, SOFT])
    dot = export_dot(t)
    hard_line = next(ln for ln in dot.splitlines() if "x0 <=" in ln)
    soft_line = next(ln for ln in dot.splitlines() if "x1 <=" in ln)
    assert "#404040" in hard_line and "ellipse" in hard_line
    assert "box" in soft_line and "#e0e0e0" in soft_line


@st.composite
def tree_problem(draw):
    n = draw(st.integers(1, 80))
    p = draw(st.integers(1, 4))
    F = draw(hnp.arrays(np.float64, (n, p), elements=st.sampled_from([0.0, 0.25, 0.5, 1.0, 2.0, -1.0])))
    y = draw(hnp.arrays(np.int64, n, elements=st.integers(0, 2)))
    msl = draw(st.integers(1, max(1, n)))
    return F, y, msl


@given(tree_problem())
@settings(max_examples=150, deadline=None)
def test_structural_invariants(problem):
    F, y, msl = problem
    t = fit_tree(F, y, msl, n_classes=3)
    for nd in t.nodes:
        if nd.is_leaf:
            assert nd.n_samples >= msl
        else:
            L, R = t.nodes[nd.left], t.nodes[nd.right]
            assert np.array_equal(L.class_counts + R.class_counts, nd.class_counts)
            assert L.depth == R.depth == nd.depth + 1
    paths = decompose(t)
    assert sum(p.n_samples for p in paths) == len(y)
    # following a path's conditions reaches its leaf
    leaf = t.route(F)
    for p in paths:
        assert np.array_equal(p.matches(F), leaf == p.leaf_id)


@given(tree_problem(), st.randoms())
@settings(max_examples=60, deadline=None)
def test_row_order_does_not_matter(problem, rnd):
    F, y, msl = problem
    perm = list(range(len(y)))
    rnd.shuffle(perm)
    a = fit_tree(F, y, msl, n_classes=3)
    b = fit_tree(F[perm], y[perm], msl, n_classes=3)
    assert a.to_dict() == b.to_dict()


# ---------------------------------------------------------------------------
# oracle comparisons on small binary data
# ---------------------------------------------------------------------------


def _datasets(p, n_max):
    """Every multiset of (x, y) rows with x in {0,1}^p, y in {0,1}, size 1..n_max."""
    types = [(x, c) for x in itertools.product((0, 1), repeat=p) for c in (0, 1)]
    for n in range(1, n_max + 1):
        for combo in itertools.combinations_with_replacement(types, n):
            yield [list(x) for x, _ in combo], [c for _, c in combo]


def _agree_with_greedy_oracle(rows, y, msl):
    t = fit_tree(np.array(rows, dtype=float), np.array(y), msl, n_classes=2)
    return t.predict(np.array(rows, dtype=float)).tolist() == greedy_tree(rows, y, msl, 2)


def test_greedy_oracle_exhaustive_p2():
    for rows, y in _datasets(2, 7):
        for msl in range(1, len(y) // 2 + 1):
            assert _agree_with_greedy_oracle(rows, y, msl), (rows, y, msl)


def test_msl1_global_optimum_exhaustive_p3():
    for rows, y in _datasets(3, 5):
        t = fit_tree(np.array(rows, dtype=float), np.array(y), 1, n_classes=2)
        acc = np.mean(t.predict(np.array(rows, dtype=float)) == np.array(y))
        assert acc == optimal_accuracy(rows, y, 1, 2)


def test_greedy_can_trail_the_optimum_when_msl_above_one():
    # documented: with msl = 2 the locally best first split blocks a better tree
    rows = [[0, 0, 0], [0, 1, 1], [1, 1, 0], [0, 1, 1], [1, 1, 0], [0, 0, 1]]
    y = [0, 1, 0, 1, 0, 0]
    t = fit_tree(np.array(rows, dtype=float), np.array(y), 2, n_classes=2)
    greedy_acc = np.mean(t.predict(np.array(rows, dtype=float)) == np.array(y))
    assert greedy_acc == 5 / 6
    assert optimal_accuracy(rows, y, 2, 2) == 1.0
    assert t.predict(np.array(rows, dtype=float)).tolist() == greedy_tree(rows, y, 2, 2)
