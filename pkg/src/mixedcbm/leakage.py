"""Leakage accounting and evaluation metrics for mixed tree CBMs.

Leakage of a sub-tree split on a soft concept is the information gain of that
split, computed from the training counts stored in the tree.  A report lists
these per decision path of the global tree next to the path's accuracy with
and without its leaky extension.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from .data import Dataset, SynthSpec, generate_synthetic
from .entropy import entropy_bits, split_leakage
from .mcbm import (
    PREDICTED,
    BaselineModel,
    McbmModel,
    _hard_values,
    leaky_splits,
    merge,
    merged_features,
    predict_composed,
)
from .predictor import TrainHyper, binarize
from .tree import DecisionTree, decompose

__all__ = [
    "entropy_bits",
    "split_leakage",
    "LeakageReport",
    "path_report",
    "standard_metrics",
    "replay_rules",
    "total_leakage",
    "completeness_sweep",
    "msl_sweep",
]


class FidelityError(AssertionError):
    pass


def total_leakage(model: McbmModel) -> float:
    return float(sum(bits for splits in leaky_splits(model).values() for *_, bits in splits))


# ---------------------------------------------------------------------------
# Rule replay
# ---------------------------------------------------------------------------


def replay_rules(tree: DecisionTree, F) -> np.ndarray:
    """Classify rows of ``F`` by evaluating every root-to-leaf rule as a
    standalone conjunction, without walking the tree."""
    F = np.asarray(F, dtype=np.float64)
    out = np.full(F.shape[0], -1, dtype=np.int64)
    fired = np.zeros(F.shape[0], dtype=np.int64)
    for rule in decompose(tree):
        m = rule.matches(F)
        out[m] = rule.predicted_class
        fired += m
    if np.any(fired != 1):
        raise FidelityError("decision rules are not mutually exclusive and exhaustive")
    return out


def standard_metrics(model, test: Dataset, concept_mode: str = PREDICTED, probs=None) -> dict:
    """Task, concept and explanation accuracy plus explanation fidelity."""
    P = model.source.dataset_probs(test) if probs is None else np.asarray(probs, dtype=np.float64)
    schema = test.schema
    if isinstance(model, McbmModel):
        H = _hard_values(P, schema, concept_mode, test.C)
        pred = predict_composed(model, P, H)
        tree, F = merge(model), merged_features(H, P)
    elif isinstance(model, BaselineModel):
        pred = model.predict(concept_mode=concept_mode, C=test.C, probs=P)
        tree, F = model.tree, model.features(P, concept_mode, test.C)
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")
    rules = replay_rules(tree, F)
    fidelity = float(np.mean(rules == pred)) if test.n else 1.0
    if fidelity != 1.0:
        raise FidelityError(f"rule replay disagrees with the model on {1 - fidelity:.2%} of samples")
    acc = (lambda a: float(np.mean(a)) if test.n else float("nan"))
    return {
        "task_accuracy": acc(pred == test.y),
        "concept_accuracy": acc(binarize(P, schema) == test.C) if schema.k else float("nan"),
        "explanation_accuracy": acc(rules == test.y),
        "fidelity": fidelity,
    }


# ---------------------------------------------------------------------------
# Per-path report
# ---------------------------------------------------------------------------


@dataclass
class PathRow:
    path_id: int
    leaf_id: int
    rule: str
    n_train: int
    n_test: int
    hard_accuracy: float | None
    mcbm_accuracy: float | None
    leaky_splits: list = field(default_factory=list)

    @property
    def extended(self) -> bool:
        return bool(self.leaky_splits)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class LeakageReport:
    rows: list
    totals: dict

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "totals": self.totals}

    def render_table(self) -> str:
        def pct(v):
            return "    -" if v is None else f"{100 * v:6.2f}"

        lines = [f"{'Path':>4}  {'n_train':>7}  {'n_test':>6}  {'Hard Acc%':>9}  {'MCBM Acc%':>9}  IG (bits)"]
        for r in self.rows:
            igs = "-" if not r.leaky_splits else "[" + ", ".join(f"{s['bits']:.3f}" for s in r.leaky_splits) + "]"
            lines.append(f"{r.path_id:>4}  {r.n_train:>7}  {r.n_test:>6}  {pct(r.hard_accuracy):>9}  "
                         f"{pct(r.mcbm_accuracy):>9}  {igs}")
        t = self.totals
        lines.append("")
        lines.append(f"total leakage: {t['total_leakage_bits']:.4f} bits over "
                     f"{t['n_extended_paths']} extended path(s)")
        lines.append(f"task {t['task_accuracy']:.4f}  concept {t['concept_accuracy']:.4f}  "
                     f"explanation {t['explanation_accuracy']:.4f}  fidelity {t['fidelity']:.4f}")
        return "\n".join(lines) + "\n"


def _rule_text(path, names) -> str:
    if not path.conditions:
        return "(root)"
    return " AND ".join(f"{names[f]} {op} {t:.4g}" for f, t, op in path.conditions)


def path_report(model: McbmModel, train: Dataset, test: Dataset, concept_mode: str = PREDICTED,
                test_probs=None) -> LeakageReport:
    """Per-path accuracies on ``test`` and per-split leakage from training counts.

    Paths with no test samples report ``None`` accuracies.
    """
    schema = train.schema
    names = list(schema.concepts)
    g = model.global_tree
    train_leaf = g.route(train.C.astype(np.float64)) if train.n else np.zeros(0, dtype=np.int64)

    P = model.source.dataset_probs(test) if test_probs is None else np.asarray(test_probs, dtype=np.float64)
    H = _hard_values(P, schema, concept_mode, test.C)
    test_leaf = g.route(H) if test.n else np.zeros(0, dtype=np.int64)
    hard_pred = g._pred[test_leaf]
    mcbm_pred = predict_composed(model, P, H) if test.n else np.zeros(0, dtype=np.int64)

    splits = leaky_splits(model)
    rows = []
    for i, path in enumerate(model.paths, start=1):
        m = test_leaf == path.leaf_id
        n_test = int(m.sum())
        entries = [{"concept": names[f], "concept_index": int(f), "threshold": float(t), "bits": float(b),
                    "node_id": nd.node_id}
                   for nd, f, t, b in splits.get(path.leaf_id, [])]
        rows.append(PathRow(
            path_id=i,
            leaf_id=path.leaf_id,
            rule=_rule_text(path, names),
            n_train=int(np.sum(train_leaf == path.leaf_id)),
            n_test=n_test,
            hard_accuracy=float(np.mean(hard_pred[m] == test.y[m])) if n_test else None,
            mcbm_accuracy=float(np.mean(mcbm_pred[m] == test.y[m])) if n_test else None,
            leaky_splits=entries,
        ))

    metrics = standard_metrics(model, test, concept_mode, probs=P)
    totals = {
        "total_leakage_bits": float(sum(s["bits"] for r in rows for s in r.leaky_splits)),
        "n_extended_paths": sum(1 for r in rows if r.leaky_splits),
        "n_paths": len(rows),
        **metrics,
    }
    return LeakageReport(rows, totals)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    runs: list      # one dict per (level, seed)
    curve: list     # one dict per level
    spearman: float


def completeness_sweep(base_spec: SynthSpec, levels, seeds, hyper: TrainHyper | None = None,
                       msl: int = 30, fractions=(0.7, 0.15, 0.15)) -> SweepResult:
    """Total leakage of the sequential pipeline as more concept groups are revealed.

    Level ``L`` reveals factors ``0..L-1``; completeness is ``L / n_factors``.
    """
    from .pipeline import run_pipeline

    hyper = hyper or TrainHyper()
    G = base_spec.n_factors
    levels = [int(L) for L in levels]
    if any(not 0 <= L <= G for L in levels):
        raise ValueError(f"levels must lie in [0, {G}]")
    runs = []
    for L in levels:
        for s in seeds:
            spec = replace(base_spec, revealed=tuple(range(L)), seed=int(s))
            ds = generate_synthetic(spec)
            res = run_pipeline(ds, hyper, msl, seed=int(s), fractions=fractions,
                               calibrate=ds.schema.k > 0, baselines=())
            runs.append({
                "level": L,
                "seed": int(s),
                "completeness": L / G,
                "total_bits": total_leakage(res.model),
                "n_extended": len(res.model.subtrees),
                "n_leaves": res.model.global_tree.n_leaves,
            })
    curve = []
    for L in levels:
        bits = np.array([r["total_bits"] for r in runs if r["level"] == L])
        curve.append({"level": L, "completeness": L / G, "mean_bits": float(bits.mean()),
                      "std_bits": float(bits.std(ddof=1)) if bits.size > 1 else 0.0})
    if len(curve) > 1:
        rho = spearmanr([c["completeness"] for c in curve], [c["mean_bits"] for c in curve])[0]
    else:
        rho = float("nan")
    return SweepResult(runs, curve, float(rho))


def msl_sweep(ds: Dataset, msls, hyper: TrainHyper | None = None, seed: int = 0,
              fractions=(0.7, 0.15, 0.15), modes=("seq",)) -> list:
    """Accuracy and tree size of the mixed model for each ``msl``.

    The concept predictor is trained once per mode and shared across ``msl``.
    """
    from .data import split_dataset
    from .mcbm import fit_mcbm
    from .pipeline import train_source

    hyper = replace(hyper or TrainHyper(), seed=seed)
    train, calib, test = split_dataset(ds, fractions, seed)
    base = None
    rows = []
    for mode in modes:
        src, params, _, _ = train_source(train, calib, hyper, mode, calibrate=mode == "seq", base=base)
        if mode == "seq":
            base = params
        P_train = src.dataset_probs(train)
        P_test = src.dataset_probs(test)
        for msl in msls:
            model = fit_mcbm(train, src, int(msl), mode, probs=P_train)
            m = standard_metrics(model, test, probs=P_test)
            rows.append({
                "msl": int(msl),
                "mode": mode,
                "task_accuracy": m["task_accuracy"],
                "concept_accuracy": m["concept_accuracy"],
                "n_nodes": merge(model).n_nodes,
                "n_global_nodes": model.global_tree.n_nodes,
                "n_extended": len(model.subtrees),
                "total_bits": total_leakage(model),
            })
    return rows
