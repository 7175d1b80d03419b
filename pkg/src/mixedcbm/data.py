"""Dataset and concept-schema types, CSV ingestion, splitting and a synthetic
generator with a tunable concept-completeness knob.

A dataset row holds real features ``X``, binary concepts ``C`` and a class
index ``y``.  Concepts are either independent (sigmoid heads) or members of a
mutually exclusive group (softmax heads); :class:`ConceptSchema` records which.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Raised for malformed dataset or schema input."""


@dataclass(frozen=True)
class ConceptSchema:
    concepts: tuple[str, ...]
    groups: tuple[tuple[int, ...], ...]
    independents: tuple[int, ...]
    classes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "concepts", tuple(str(c) for c in self.concepts))
        object.__setattr__(self, "groups", tuple(tuple(int(i) for i in g) for g in self.groups))
        object.__setattr__(self, "independents", tuple(int(i) for i in self.independents))
        object.__setattr__(self, "classes", tuple(str(c) for c in self.classes))

        k = len(self.concepts)
        if len(set(self.concepts)) != k:
            raise DataError("duplicate concept names")
        seen = list(self.independents)
        for g in self.groups:
            if len(g) < 2:
                raise DataError(f"group {list(g)} has fewer than 2 concepts")
            seen.extend(g)
        if sorted(seen) != list(range(k)):
            raise DataError("every concept must belong to exactly one group or to the independents")
        if len(self.classes) < 2:
            raise DataError("at least two classes are required")
        if len(set(self.classes)) != len(self.classes):
            raise DataError("duplicate class names")

    @property
    def k(self) -> int:
        return len(self.concepts)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        return {
            "concepts": list(self.concepts),
            "groups": [list(g) for g in self.groups],
            "independents": list(self.independents),
            "classes": list(self.classes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptSchema":
        try:
            return cls(d["concepts"], d["groups"], d["independents"], d["classes"])
        except KeyError as e:
            raise DataError(f"schema is missing field {e.args[0]!r}") from None

    def digest(self) -> str:
        """Short content hash used to tie model files to a schema."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Dataset:
    """Immutable bundle of features, hard concepts and labels.

    ``ids`` are stable sample identifiers; they survive splitting so that an
    externally computed probability file can be joined back onto any split.
    """

    X: np.ndarray
    C: np.ndarray
    y: np.ndarray
    schema: ConceptSchema
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        C = np.asarray(self.C)
        y = np.asarray(self.y)
        n = y.shape[0]
        if X.ndim != 2 or X.shape[0] != n:
            raise DataError(f"X must be an n x d matrix with n={n}")
        if C.ndim != 2 or C.shape != (n, self.schema.k):
            raise DataError(f"C must be {n} x {self.schema.k}, got {C.shape}")
        if not np.all(np.isfinite(X)):
            raise DataError("non-finite feature value")
        if C.size and not np.all((C == 0) | (C == 1)):
            raise DataError("concept values must be 0 or 1")
        C = C.astype(np.int8)
        if n and (y.min() < 0 or y.max() >= self.schema.n_classes):
            raise DataError("label index out of range")
        for g in self.schema.groups:
            sums = C[:, list(g)].sum(axis=1)
            bad = np.flatnonzero(sums != 1)
            if bad.size:
                raise DataError(f"one-hot violation at row {int(bad[0])}")
        ids = np.arange(n) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (n,):
            raise DataError("ids must have one entry per row")
        for name, arr in (("X", X), ("C", C), ("y", y.astype(np.int64)), ("ids", ids)):
            arr = np.array(arr, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def d(self) -> int:
        return int(self.X.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.C[idx], self.y[idx], self.schema, self.ids[idx])


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def load_schema(path) -> ConceptSchema:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: {e}") from None
    return ConceptSchema.from_dict(d)


def write_schema(schema: ConceptSchema, path, extra: dict | None = None) -> None:
    d = schema.to_dict()
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def load_dataset(csv_path, schema_path) -> Dataset:
    """Read a dataset CSV plus its JSON schema.

    The header must be ``x_0..x_{d-1}``, one column per concept name (schema
    order) and ``y`` holding class names.  A leading ``sample_id`` column is
    accepted and becomes :attr:`Dataset.ids`.
    """
    schema = load_schema(schema_path)
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{csv_path}: missing header row") from None
        rows = list(reader)

    has_ids = bool(header) and header[0] == "sample_id"
    cols = header[1:] if has_ids else header
    d = 0
    while d < len(cols) and cols[d] == f"x_{d}":
        d += 1
    expected = [f"x_{j}" for j in range(d)] + list(schema.concepts) + ["y"]
    if cols != expected:
        missing = [c for c in expected if c not in cols]
        extra = [c for c in cols if c not in expected]
        raise DataError(
            f"{csv_path}: column mismatch (missing={missing}, extra={extra}); "
            f"expected order {expected}"
        )

    n, k = len(rows), schema.k
    off = 1 if has_ids else 0
    X = np.empty((n, d))
    C = np.empty((n, k), dtype=np.int8)
    y = np.empty(n, dtype=np.int64)
    ids = np.empty(n, dtype=np.int64)
    class_index = {c: i for i, c in enumerate(schema.classes)}
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{csv_path}: row {i} has {len(row)} fields, expected {len(header)}")
        if has_ids:
            ids[i] = int(row[0])
        try:
            X[i] = [float(v) for v in row[off:off + d]]
        except ValueError:
            raise DataError(f"{csv_path}: non-numeric feature at row {i}") from None
        for j, v in enumerate(row[off + d:off + d + k]):
            if v not in ("0", "1"):
                raise DataError(f"{csv_path}: non-binary concept value {v!r} at row {i}")
            C[i, j] = int(v)
        label = row[-1]
        if label not in class_index:
            raise DataError(f"{csv_path}: unknown class label {label!r} at row {i}")
        y[i] = class_index[label]
    try:
        return Dataset(X, C, y, schema, ids if has_ids else None)
    except DataError as e:
        raise DataError(f"{csv_path}: {e}") from None


def write_dataset(ds: Dataset, csv_path, with_ids: bool | None = None) -> None:
    """Write ``ds`` as CSV; floats use ``repr`` so they round-trip exactly.

    ``sample_id`` is written when ``with_ids`` is true, or by default whenever
    the ids are not simply ``0..n-1``.
    """
    if with_ids is None:
        with_ids = not np.array_equal(ds.ids, np.arange(ds.n))
    header = [f"x_{j}" for j in range(ds.d)] + list(ds.schema.concepts) + ["y"]
    if with_ids:
        header = ["sample_id"] + header
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.X[i]]
            row += [str(int(v)) for v in ds.C[i]]
            row.append(ds.schema.classes[ds.y[i]])
            if with_ids:
                row = [str(int(ds.ids[i]))] + row
            w.writerow(row)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split_dataset(ds: Dataset, fractions=(0.7, 0.15, 0.15), seed: int = 0):
    """Shuffle with ``seed`` then cut into (train, calib, test).

    Sizes are ``floor(f * n)`` for calib and test with the remainder going to
    train, so ``(0.6, 0.2, 0.2)`` on ten rows gives ``(6, 2, 2)``.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or fr[0] <= 0 or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError(f"fractions must be three non-negative values summing to 1: {fractions}")
    n = ds.n
    # small epsilon keeps 0.2 * 10 from flooring to 1
    n_cal = int(np.floor(fr[1] * n + 1e-9))
    n_test = int(np.floor(fr[2] * n + 1e-9))
    n_train = n - n_cal - n_test
    for name, f, size in (("train", fr[0], n_train), ("calib", fr[1], n_cal), ("test", fr[2], n_test)):
        if f > 0 and size == 0:
            raise DataError(f"{name} split is empty: n={n} is too small for fraction {f}")
    perm = np.random.default_rng(seed).permutation(n)
    return (
        ds.subset(perm[:n_train]),
        ds.subset(perm[n_train:n_train + n_cal]),
        ds.subset(perm[n_train + n_cal:]),
    )


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the latent-factor generator.

    ``revealed`` lists the factor indices whose concept groups appear in ``C``;
    the remaining factors still drive the label and reach the model only
    through ``X``.
    """

    n_samples: int = 2000
    n_factors: int = 4
    bins_per_factor: int = 3
    revealed: tuple[int, ...] = (0, 1)
    feature_dim: int = 8
    feature_noise_sigma: float = 0.1
    concept_flip_prob: float = 0.0
    n_classes: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "revealed", tuple(sorted(int(j) for j in self.revealed)))
        if self.n_samples < 0:
            raise DataError("n_samples must be non-negative")
        if self.n_factors < 1:
            raise DataError("n_factors must be at least 1")
        if len(set(self.revealed)) != len(self.revealed) or any(
            not 0 <= j < self.n_factors for j in self.revealed
        ):
            raise DataError(f"revealed factors must be distinct indices in [0, {self.n_factors})")
        if self.bins_per_factor < 2:
            raise DataError("bins_per_factor must be >= 2")
        if self.feature_dim < 1:
            raise DataError("feature_dim must be >= 1")
        if self.feature_noise_sigma < 0:
            raise DataError("feature_noise_sigma must be >= 0")
        if not 0 <= self.concept_flip_prob < 0.5:
            raise DataError("concept_flip_prob must lie in [0, 0.5)")
        if self.n_classes < 2:
            raise DataError("n_classes must be >= 2")

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_factors": self.n_factors,
            "bins_per_factor": self.bins_per_factor,
            "revealed": list(self.revealed),
            "feature_dim": self.feature_dim,
            "feature_noise_sigma": self.feature_noise_sigma,
            "concept_flip_prob": self.concept_flip_prob,
            "n_classes": self.n_classes,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "revealed" in d:
            d["revealed"] = tuple(d["revealed"])
        return cls(**d)


def bin_index(z: np.ndarray, n_bins: int) -> np.ndarray:
    """Equal-width bins on [0, 1] with cuts at j/n_bins; a value on a cut goes low."""
    cuts = np.arange(1, n_bins) / n_bins
    return np.searchsorted(cuts, z, side="left")


def synth_schema(spec: SynthSpec) -> ConceptSchema:
    names, groups = [], []
    for j in spec.revealed:
        start = len(names)
        names.extend(f"z{j}::bin{b}" for b in range(spec.bins_per_factor))
        groups.append(tuple(range(start, len(names))))
    classes = tuple(f"class_{i}" for i in range(spec.n_classes))
    return ConceptSchema(tuple(names), tuple(groups), (), classes)


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Draw a dataset whose labels depend on every factor but whose concepts
    only describe the revealed ones.

    The mixing matrix and the label lookup table depend only on the seed,
    through their own random streams, so changing ``n_samples`` or
    ``revealed`` leaves them fixed.
    """
    G, B = spec.n_factors, spec.bins_per_factor
    root = np.random.SeedSequence(spec.seed)
    s_mix, s_table, s_z, s_noise, s_flip = (np.random.default_rng(s) for s in root.spawn(5))

    A = s_mix.normal(size=(spec.feature_dim, G))
    table = s_table.integers(0, spec.n_classes, size=B ** G)

    n = spec.n_samples
    z = s_z.uniform(0.0, 1.0, size=(n, G))
    bins = bin_index(z, B)
    X = z @ A.T + s_noise.normal(0.0, 1.0, size=(n, spec.feature_dim)) * spec.feature_noise_sigma

    cell = np.zeros(n, dtype=np.int64)
    for j in range(G):
        cell = cell * B + bins[:, j]
    y = table[cell]

    schema = synth_schema(spec)
    C = np.zeros((n, schema.k), dtype=np.int8)
    for gi, j in enumerate(spec.revealed):
        b = bins[:, j].copy()
        if spec.concept_flip_prob > 0:
            # a flipped row moves its one-hot bit to a different, uniformly chosen bin
            flip = s_flip.random(n) < spec.concept_flip_prob
            shift = s_flip.integers(1, B, size=n)
            b = np.where(flip, (b + shift) % B, b)
        C[np.arange(n), np.asarray(schema.groups[gi])[b]] = 1
    return Dataset(X, C, y, schema)

