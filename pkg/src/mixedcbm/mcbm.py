"""Mixed concept bottleneck models with tree label predictors.

Training (sequential or joint probabilities, same procedure):

1. fit a global tree on the hard concepts;
2. for each of its leaves, build mixed concept vectors -- soft probabilities
   for the concepts tested on the leaf's path, hard values elsewhere -- and fit
   a sub-tree with the same ``msl``;
3. keep a sub-tree only if it splits on at least one soft column with
   positive gain.

A sample is classified by routing its hard concepts through the global tree
and, if the reached leaf was extended, finishing in that leaf's sub-tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .entropy import split_leakage
from .predictor import JOINT, SEQ, ProbabilitySource, SourceError, binarize
from .tree import HARD, SOFT, DecisionPath, DecisionTree, TreeNode, decompose, fit_tree

ACCEPT_GAIN = 1e-12
PREDICTED, ANNOTATED = "predicted", "annotated"


class McbmError(ValueError):
    pass


@dataclass(frozen=True)
class MixedConceptMatrix:
    values: np.ndarray
    kinds: tuple[str, ...]

    @property
    def soft_columns(self) -> list[int]:
        return [j for j, kd in enumerate(self.kinds) if kd == SOFT]


def build_mixed_matrix(path, C_m, P_m) -> MixedConceptMatrix:
    """Soft probabilities on the path's concepts, hard values on the rest.

    ``path`` is a :class:`DecisionPath` or any iterable of concept indices.
    """
    concepts = path.concepts if isinstance(path, DecisionPath) else frozenset(path)
    C_m = np.asarray(C_m, dtype=np.float64)
    P_m = np.asarray(P_m, dtype=np.float64)
    if C_m.shape != P_m.shape:
        raise McbmError(f"hard and soft concept matrices differ in shape: {C_m.shape} vs {P_m.shape}")
    k = C_m.shape[-1]
    if any(not 0 <= j < k for j in concepts):
        raise McbmError("path uses a concept index outside the matrix width")
    cols = sorted(concepts)
    values = C_m.copy()
    values[..., cols] = P_m[..., cols]
    kinds = tuple(SOFT if j in concepts else HARD for j in range(k))
    return MixedConceptMatrix(values, kinds)


def soft_splits(tree: DecisionTree) -> list[tuple[TreeNode, float]]:
    """Internal nodes splitting on a soft column, with their gain in bits."""
    out = []
    for nd in tree.nodes:
        if not nd.is_leaf and tree.feature_kinds[nd.feature] == SOFT:
            gain = split_leakage(nd.class_counts, tree.nodes[nd.left].class_counts,
                                 tree.nodes[nd.right].class_counts)
            out.append((nd, gain))
    return out


def is_leaky_extension(tree: DecisionTree) -> bool:
    return any(g > ACCEPT_GAIN for _, g in soft_splits(tree))


@dataclass
class McbmModel:
    global_tree: DecisionTree
    subtrees: dict
    source: ProbabilitySource
    mode: str
    msl: int
    paths: list = field(default=None)

    def __post_init__(self):
        if self.paths is None:
            self.paths = decompose(self.global_tree)
        self.subtrees = {int(k): v for k, v in sorted(self.subtrees.items())}
        self._path_of = {p.leaf_id: p for p in self.paths}
        for leaf_id, sub in self.subtrees.items():
            leaf = self.global_tree.nodes[leaf_id]
            if not leaf.is_leaf:
                raise McbmError(f"sub-tree attached to internal node {leaf_id}")
            if sub.msl != self.msl:
                raise McbmError(f"sub-tree of leaf {leaf_id} was fitted with msl={sub.msl}, not {self.msl}")
            if sub.root.n_samples != leaf.n_samples:
                raise McbmError(f"sub-tree of leaf {leaf_id} does not cover the leaf's samples")

    @property
    def schema(self):
        return self.source.schema

    @property
    def k(self) -> int:
        return self.global_tree.n_features

    def path(self, leaf_id: int) -> DecisionPath:
        return self._path_of[leaf_id]

    def to_dict(self, prob_source_ref: str | None = None, calibration_ref: str | None = None) -> dict:
        return {
            "global_tree": self.global_tree.to_dict(),
            "subtrees": {str(k): t.to_dict() for k, t in self.subtrees.items()},
            "mode": self.mode,
            "msl": self.msl,
            "prob_source_ref": prob_source_ref,
            "calibration_ref": calibration_ref,
        }

    @classmethod
    def from_dict(cls, d: dict, source: ProbabilitySource) -> "McbmModel":
        return cls(DecisionTree.from_dict(d["global_tree"]),
                   {int(k): DecisionTree.from_dict(t) for k, t in d["subtrees"].items()},
                   source, d["mode"], int(d["msl"]))


def _check_mode(src: ProbabilitySource, mode: str, allow_uncalibrated: bool):
    if mode not in (SEQ, JOINT):
        raise McbmError(f"mode must be 'seq' or 'joint', got {mode!r}")
    if src.mode != mode:
        raise SourceError(f"a {src.mode!r} probability source cannot drive mode {mode!r}")
    if mode == SEQ and not src.calibrated and not allow_uncalibrated:
        raise SourceError("seq mode expects calibrated probabilities (pass allow_uncalibrated to override)")


def fit_mcbm(train: Dataset, src: ProbabilitySource, msl: int, mode: str = SEQ,
             allow_uncalibrated: bool = False, probs=None) -> McbmModel:
    """Fit the global tree and the per-leaf leaky sub-trees.

    ``probs`` may supply precomputed training probabilities; otherwise they
    are taken from ``src``.
    """
    _check_mode(src, mode, allow_uncalibrated)
    schema = train.schema
    P = src.dataset_probs(train) if probs is None else np.asarray(probs, dtype=np.float64)
    C = train.C.astype(np.float64)
    names = list(schema.concepts)
    r = schema.n_classes
    global_tree = fit_tree(C, train.y, msl, n_classes=r, feature_names=names, feature_kinds=[HARD] * schema.k)
    paths = decompose(global_tree)
    subtrees = fit_subtrees(global_tree, paths, C, P, train.y, msl, names)
    return McbmModel(global_tree, subtrees, src, mode, msl, paths)


def fit_subtrees(global_tree: DecisionTree, paths, C, P, y, msl: int, names=None) -> dict:
    """Sub-tree phase: fit and accept a leaky extension per global leaf."""
    r = global_tree.n_classes
    leaf_of = global_tree.route(C) if len(y) else np.zeros(0, dtype=np.int64)
    subtrees = {}
    for path in paths:
        rows = np.flatnonzero(leaf_of == path.leaf_id)
        if path.class_counts.max() == rows.size or rows.size < 2 * msl:
            continue  # pure or too small to split
        mixed = build_mixed_matrix(path, C[rows], P[rows])
        if not mixed.soft_columns:
            continue
        sub = fit_tree(mixed.values, y[rows], msl, n_classes=r, feature_names=names,
                       feature_kinds=list(mixed.kinds))
        if is_leaky_extension(sub):
            subtrees[path.leaf_id] = sub
    return subtrees


def _hard_values(P, schema, concept_mode, C):
    if concept_mode == PREDICTED:
        return binarize(P, schema).astype(np.float64)
    if concept_mode == ANNOTATED:
        if C is None:
            raise McbmError("annotated concept mode needs the ground-truth concepts C")
        return np.asarray(C, dtype=np.float64)
    raise McbmError(f"concept_mode must be 'predicted' or 'annotated', got {concept_mode!r}")


def predict_composed(model: McbmModel, P, H) -> np.ndarray:
    """Route hard values ``H`` through the global tree, finishing extended
    leaves in their sub-tree on the sample's mixed vector."""
    P = np.asarray(P, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    leaf = model.global_tree.route(H)
    pred = model.global_tree._pred[leaf].copy()
    for leaf_id, sub in model.subtrees.items():
        rows = np.flatnonzero(leaf == leaf_id)
        if rows.size:
            mixed = build_mixed_matrix(model.path(leaf_id), H[rows], P[rows])
            pred[rows] = sub.predict(mixed.values)
    return pred


def evaluate(model: McbmModel, X=None, concept_mode: str = PREDICTED, C=None, ids=None, probs=None) -> np.ndarray:
    """Predicted labels.

    In ``"predicted"`` mode the global tree is routed on binarized predicted
    concepts; in ``"annotated"`` mode on the supplied ground truth ``C``.
    Soft columns always come from the probability source (or ``probs``).
    """
    P = model.source.probs(X, ids) if probs is None else np.asarray(probs, dtype=np.float64)
    H = _hard_values(P, model.schema, concept_mode, C)
    return predict_composed(model, P, H)


def evaluate_dataset(model: McbmModel, ds: Dataset, concept_mode: str = PREDICTED, probs=None) -> np.ndarray:
    return evaluate(model, ds.X, concept_mode, ds.C, ds.ids, probs)


# ---------------------------------------------------------------------------
# Merging
# ---------------------------------------------------------------------------


def merged_features(H, P) -> np.ndarray:
    """Input matrix of a merged tree: hard columns first, then soft columns."""
    return np.hstack([np.asarray(H, dtype=np.float64), np.asarray(P, dtype=np.float64)])


def merge(model: McbmModel) -> DecisionTree:
    """Single tree over ``[hard concepts, soft concepts]`` (width 2k).

    Each extended leaf is replaced by its sub-tree; soft sub-tree splits are
    remapped to the soft block, hard ones stay in the hard block.
    """
    k = model.k
    g = model.global_tree
    names = list(g.feature_names) + [f"p({nm})" for nm in g.feature_names]
    kinds = [HARD] * k + [SOFT] * k
    nodes: list[TreeNode] = []

    def emit(tree: DecisionTree, nid: int, depth_offset: int, remap) -> int:
        # explicit stack keeps deep trees clear of the recursion limit
        root_new = None
        stack = [(tree, nid, depth_offset, remap, None, True)]
        while stack:
            t, i, off, rm, parent, is_left = stack.pop()
            nd = t.nodes[i]
            if t is g and i in model.subtrees:
                sub = model.subtrees[i]
                stack.append((sub, 0, nd.depth, lambda f, s=sub: k + f if s.feature_kinds[f] == SOFT else f,
                              parent, is_left))
                continue
            new_id = len(nodes)
            new = TreeNode(new_id, nd.depth + off, nd.class_counts.copy())
            if not nd.is_leaf:
                new.feature, new.threshold = rm(nd.feature), nd.threshold
            nodes.append(new)
            if parent is not None:
                if is_left:
                    nodes[parent].left = new_id
                else:
                    nodes[parent].right = new_id
            elif root_new is None:
                root_new = new_id
            if not nd.is_leaf:
                stack.append((t, nd.right, off, rm, new_id, False))
                stack.append((t, nd.left, off, rm, new_id, True))
        return root_new

    emit(g, 0, 0, lambda f: f)
    return DecisionTree(nodes, g.n_classes, model.msl, names, kinds, n_features=2 * k)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

BASELINES = ("hard", "independent", "sequential_soft")


@dataclass
class BaselineModel:
    """Single-tree CBM.  ``hard`` and ``independent`` share one tree fitted on
    the hard concepts; they differ only in what is routed at test time."""

    tree: DecisionTree
    source: ProbabilitySource
    variant: str

    @property
    def schema(self):
        return self.source.schema

    def features(self, P, concept_mode: str = PREDICTED, C=None) -> np.ndarray:
        if self.variant == "hard":
            return _hard_values(P, self.schema, concept_mode, C)
        return np.asarray(P, dtype=np.float64)

    def predict(self, X=None, concept_mode: str = PREDICTED, C=None, ids=None, probs=None) -> np.ndarray:
        P = self.source.probs(X, ids) if probs is None else np.asarray(probs, dtype=np.float64)
        return self.tree.predict(self.features(P, concept_mode, C))

    def to_dict(self) -> dict:
        return {"variant": self.variant, "tree": self.tree.to_dict()}


def fit_baseline(train: Dataset, src: ProbabilitySource, msl: int, variant: str, probs=None) -> BaselineModel:
    if variant not in BASELINES:
        raise McbmError(f"unknown baseline variant {variant!r}")
    schema = train.schema
    names = list(schema.concepts)
    if variant in ("hard", "independent"):
        tree = fit_tree(train.C.astype(np.float64), train.y, msl, n_classes=schema.n_classes,
                        feature_names=names, feature_kinds=[HARD] * schema.k)
    else:
        P = src.dataset_probs(train) if probs is None else np.asarray(probs, dtype=np.float64)
        tree = fit_tree(P, train.y, msl, n_classes=schema.n_classes, feature_names=names,
                        feature_kinds=[SOFT] * schema.k)
    return BaselineModel(tree, src, variant)


def leaky_splits(model: McbmModel) -> dict:
    """Per extended leaf: ``[(node, concept index, threshold, bits), ...]``."""
    out = {}
    for leaf_id, sub in model.subtrees.items():
        out[leaf_id] = [(nd, nd.feature, nd.threshold, gain) for nd, gain in soft_splits(sub)]
    return out
