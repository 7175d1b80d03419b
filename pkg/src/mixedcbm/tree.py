"""Binary decision trees grown greedily on entropy information gain.

Conventions, fixed for reproducibility:

* a sample goes left iff ``value <= threshold``;
* candidate thresholds are midpoints between consecutive distinct sorted
  values of a feature, so {0, 1} features always split at 0.5;
* a split is taken when the node is impure and both children keep at least
  ``msl`` samples, even when its gain is zero (XOR-like interactions);
* gains within ``TIE_TOL`` of the best are ties, resolved by lower feature
  index then lower threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TIE_TOL = 1e-12

HARD = "hard"
SOFT = "soft"


class TreeError(ValueError):
    pass


@dataclass
class TreeNode:
    node_id: int
    depth: int
    class_counts: np.ndarray
    feature: int = -1
    threshold: float = float("nan")
    left: int = -1
    right: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    @property
    def n_samples(self) -> int:
        return int(self.class_counts.sum())

    @property
    def predicted_class(self) -> int:
        # argmax returns the first maximum, i.e. the lowest class index on ties
        return int(np.argmax(self.class_counts))


@dataclass(frozen=True)
class DecisionPath:
    """Root-to-leaf rule: a conjunction of ``(feature, threshold, "<=" | ">")``."""

    conditions: tuple[tuple[int, float, str], ...]
    leaf_id: int
    concepts: frozenset
    n_samples: int
    class_counts: np.ndarray = field(compare=False)

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.class_counts))

    def matches(self, F: np.ndarray) -> np.ndarray:
        """Boolean mask of rows of ``F`` satisfying every condition."""
        F = np.atleast_2d(np.asarray(F, dtype=float))
        mask = np.ones(F.shape[0], dtype=bool)
        for f, t, op in self.conditions:
            mask &= (F[:, f] <= t) if op == "<=" else (F[:, f] > t)
        return mask


class DecisionTree:
    """A fitted tree stored as a preorder list of :class:`TreeNode` (root = 0)."""

    def __init__(self, nodes, n_classes, msl, feature_names=None, feature_kinds=None, n_features=None):
        self.nodes: list[TreeNode] = list(nodes)
        self.n_classes = int(n_classes)
        self.msl = int(msl)
        if n_features is None:
            n_features = len(feature_names) if feature_names is not None else (
                1 + max((nd.feature for nd in self.nodes), default=-1))
        self.n_features = int(n_features)
        self.feature_names = list(feature_names) if feature_names is not None else [
            f"f{j}" for j in range(self.n_features)]
        self.feature_kinds = list(feature_kinds) if feature_kinds is not None else [HARD] * self.n_features
        if len(self.feature_names) != self.n_features or len(self.feature_kinds) != self.n_features:
            raise TreeError("feature_names/feature_kinds must match the feature count")
        self._compile()

    def _compile(self):
        nodes = self.nodes
        self._feat = np.array([nd.feature for nd in nodes], dtype=np.int64)
        self._thr = np.array([nd.threshold for nd in nodes], dtype=np.float64)
        self._left = np.array([nd.left for nd in nodes], dtype=np.int64)
        self._right = np.array([nd.right for nd in nodes], dtype=np.int64)
        self._pred = np.array([nd.predicted_class for nd in nodes], dtype=np.int64)

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[TreeNode]:
        return [nd for nd in self.nodes if nd.is_leaf]

    @property
    def n_leaves(self) -> int:
        return sum(1 for nd in self.nodes if nd.is_leaf)

    @property
    def depth(self) -> int:
        return max(nd.depth for nd in self.nodes)

    def route(self, F) -> np.ndarray:
        """Leaf node id reached by each row of ``F``."""
        F = np.asarray(F, dtype=np.float64)
        if F.ndim == 1:
            F = F[None, :]
        if F.shape[1] != self.n_features:
            raise TreeError(f"expected {self.n_features} feature columns, got {F.shape[1]}")
        node = np.zeros(F.shape[0], dtype=np.int64)
        active = np.flatnonzero(self._feat[node] >= 0)
        while active.size:
            nd = node[active]
            go_left = F[active, self._feat[nd]] <= self._thr[nd]
            node[active] = np.where(go_left, self._left[nd], self._right[nd])
            active = active[self._feat[node[active]] >= 0]
        return node

    def predict(self, F) -> np.ndarray:
        return self._pred[self.route(F)]

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        nodes = []
        for nd in self.nodes:
            d = {"id": nd.node_id, "depth": nd.depth, "counts": [int(c) for c in nd.class_counts]}
            if nd.is_leaf:
                d["kind"] = "leaf"
            else:
                d.update(kind="split", feature=nd.feature, threshold=float(nd.threshold),
                         children=[nd.left, nd.right])
            nodes.append(d)
        return {
            "n_classes": self.n_classes,
            "msl": self.msl,
            "feature_names": self.feature_names,
            "feature_kinds": self.feature_kinds,
            "nodes": nodes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        nodes = []
        for i, nd in enumerate(d["nodes"]):
            if nd["id"] != i:
                raise TreeError("tree nodes must be stored in id order")
            counts = np.asarray(nd["counts"], dtype=np.int64)
            if nd["kind"] == "leaf":
                nodes.append(TreeNode(i, nd["depth"], counts))
            else:
                left, right = nd["children"]
                nodes.append(TreeNode(i, nd["depth"], counts, int(nd["feature"]),
                                      float(nd["threshold"]), int(left), int(right)))
        return cls(nodes, d["n_classes"], d["msl"], d["feature_names"], d["feature_kinds"])


# ---------------------------------------------------------------------------
# Induction
# ---------------------------------------------------------------------------


def _xlog2x_table(n: int) -> np.ndarray:
    c = np.arange(n + 1, dtype=np.float64)
    out = np.zeros(n + 1)
    out[1:] = c[1:] * np.log2(c[1:])
    return out


def _best_split(vals, ys, counts, msl, n_classes, xlx):
    """Best (feature row, cut position, gain) for one node, or None.

    ``vals``/``ys`` are p x m arrays: each row holds the node's feature values
    in ascending order and the matching labels.  A cut at position ``i``
    sends the first ``i`` sorted samples left.
    """
    p, m = vals.shape
    lo, hi = msl, m - msl  # allowed left sizes, inclusive
    if hi < lo:
        return None
    # cumulative class counts of the first i samples, for i = lo..hi
    cum = np.empty((p, hi - lo + 1, n_classes), dtype=np.int64)
    for c in range(n_classes):
        cum[:, :, c] = np.cumsum(ys == c, axis=1)[:, lo - 1:hi]
    valid = vals[:, lo - 1:hi] < vals[:, lo:hi + 1]
    if not valid.any():
        return None
    n_left = np.arange(lo, hi + 1)
    n_right = m - n_left
    right = counts[None, None, :] - cum
    child = (xlx[n_left] - xlx[cum].sum(axis=2)) + (xlx[n_right] - xlx[right].sum(axis=2))
    parent = xlx[m] - xlx[counts].sum()
    gain = np.where(valid, (parent - child) / m, -np.inf)
    best = gain.max()
    f, j = divmod(int(np.argmax(gain >= best - TIE_TOL)), gain.shape[1])
    return f, lo + j, max(float(gain[f, j]), 0.0)


def fit_tree(F, y, msl: int = 1, max_depth: int | None = None, n_classes: int | None = None,
             feature_names=None, feature_kinds=None) -> DecisionTree:
    """Grow a tree on ``F`` (n x p) and labels ``y``.

    Parameters
    ----------
    F : array-like, shape (n, p)
        Finite feature values.
    y : array-like of int, shape (n,)
        Class indices in ``[0, n_classes)``.
    msl : int
        Minimum samples per leaf.
    max_depth : int, optional
        Depth limit; unlimited by default.
    """
    F = np.asarray(F, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if F.ndim != 2 or F.shape[0] != y.shape[0]:
        raise TreeError("F must be an n x p matrix aligned with y")
    n, p = F.shape
    if msl < 1:
        raise TreeError("msl must be >= 1")
    if msl > n:
        raise TreeError(f"msl={msl} exceeds the number of samples n={n}")
    if not np.all(np.isfinite(F)):
        raise TreeError("feature values must be finite")
    if n_classes is None:
        n_classes = int(y.max()) + 1
    if y.min() < 0 or y.max() >= n_classes:
        raise TreeError("labels out of range")

    xlx = _xlog2x_table(n)
    FT = np.ascontiguousarray(F.T)
    in_left = np.zeros(n, dtype=bool)
    root_order = np.argsort(FT, axis=1, kind="stable") if p else np.zeros((0, n), dtype=np.int64)

    nodes: list[TreeNode] = []
    parent_slot: list[tuple[int, int]] = []
    # stack entries: (orders, depth, parent id, is_left); preorder ids
    stack = [(root_order, 0, -1, True, np.arange(n))]
    while stack:
        orders, depth, parent, is_left, members = stack.pop()
        node_id = len(nodes)
        counts = np.bincount(y[members], minlength=n_classes)
        node = TreeNode(node_id, depth, counts)
        nodes.append(node)
        if parent >= 0:
            if is_left:
                nodes[parent].left = node_id
            else:
                nodes[parent].right = node_id
        m = members.shape[0]
        if np.count_nonzero(counts) <= 1 or m < 2 * msl or p == 0:
            continue
        if max_depth is not None and depth >= max_depth:
            continue
        vals = np.take_along_axis(FT, orders, axis=1)
        best = _best_split(vals, y[orders], counts, msl, n_classes, xlx)
        if best is None:
            continue
        f, i, _gain = best
        lo_v, hi_v = vals[f, i - 1], vals[f, i]
        thr = 0.5 * (lo_v + hi_v)
        if not lo_v <= thr < hi_v:
            thr = lo_v  # adjacent floats: the midpoint rounded up onto hi_v
        node.feature, node.threshold = int(f), float(thr)

        left_members = orders[f, :i]
        in_left[left_members] = True
        mask = in_left[orders]
        left_orders = orders[mask].reshape(p, i)
        right_orders = orders[~mask].reshape(p, m - i)
        in_left[left_members] = False
        # right pushed first so the left subtree gets the next ids
        stack.append((right_orders, depth + 1, node_id, False, right_orders[0]))
        stack.append((left_orders, depth + 1, node_id, True, left_orders[0]))

    return DecisionTree(nodes, n_classes, msl, feature_names, feature_kinds, n_features=p)


# ---------------------------------------------------------------------------
# Paths, export
# ---------------------------------------------------------------------------


def decompose(tree: DecisionTree) -> list[DecisionPath]:
    """One :class:`DecisionPath` per leaf, ordered by leaf id."""
    paths = []
    stack = [(0, ())]
    while stack:
        nid, conds = stack.pop()
        nd = tree.nodes[nid]
        if nd.is_leaf:
            used = frozenset(f for f, _, _ in conds)
            paths.append(DecisionPath(conds, nid, used, nd.n_samples, nd.class_counts.copy()))
            continue
        stack.append((nd.right, conds + ((nd.feature, nd.threshold, ">"),)))
        stack.append((nd.left, conds + ((nd.feature, nd.threshold, "<="),)))
    paths.sort(key=lambda pth: pth.leaf_id)
    return paths


def route(tree: DecisionTree, row) -> int:
    return int(tree.route(np.asarray(row, dtype=float)[None, :])[0])


def predict(tree: DecisionTree, F) -> np.ndarray:
    return tree.predict(F)


def _fmt(x: float) -> str:
    return f"{x:.4g}"


def export_dot(tree: DecisionTree, annotations: dict | None = None, class_names=None) -> str:
    """Render ``tree`` as a Graphviz digraph.

    Splits on hard features are dark filled ellipses; splits on soft features
    are light boxes.  ``annotations`` maps node id to an extra label line.
    """
    annotations = annotations or {}
    names = tree.feature_names
    cls = list(class_names) if class_names is not None else [str(c) for c in range(tree.n_classes)]
    lines = ["digraph Tree {", '  node [fontname="helvetica"];', '  edge [fontname="helvetica"];']
    for nd in tree.nodes:
        counts = "[" + ", ".join(str(int(c)) for c in nd.class_counts) + "]"
        if nd.is_leaf:
            label = f"samples = {nd.n_samples}\\nvalue = {counts}\\nclass = {cls[nd.predicted_class]}"
            style = 'shape=ellipse, style="solid"'
        else:
            label = (f"{names[nd.feature]} <= {_fmt(nd.threshold)}\\n"
                     f"samples = {nd.n_samples}\\nvalue = {counts}")
            if tree.feature_kinds[nd.feature] == SOFT:
                style = 'shape=box, style="filled,rounded", fillcolor="#e0e0e0", fontcolor="black"'
            else:
                style = 'shape=ellipse, style="filled", fillcolor="#404040", fontcolor="white"'
        if nd.node_id in annotations:
            label += "\\n" + str(annotations[nd.node_id]).replace('"', "'")
        lines.append(f'  {nd.node_id} [label="{label}", {style}];')
    for nd in tree.nodes:
        if not nd.is_leaf:
            lines.append(f'  {nd.node_id} -> {nd.left} [label="yes"];')
            lines.append(f'  {nd.node_id} -> {nd.right} [label="no"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
