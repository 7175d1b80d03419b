"""Concept predictor: an MLP trained with hand-written backpropagation.

The network maps features to concept logits.  Independent concepts are read
through a sigmoid and mutually exclusive groups through a softmax.  Training is
either independent (concept loss only) or joint, where a linear label head on
top of the concept probabilities adds a cross-entropy task loss and the
concept loss is weighted by ``lambda_c``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .calibration import (
    CalibrationParams,
    apply_calibration,
    log_softmax,
    logits_to_probs,
    softmax,
)
from .data import ConceptSchema, Dataset
from .utils import rng_for

PROB_EPS = 1e-12
SEQ, JOINT = "seq", "joint"


class TrainingDiverged(RuntimeError):
    pass


class SourceError(ValueError):
    pass


@dataclass
class MlpParams:
    """Weights ``W[l]`` have shape (in, out) so a layer is ``h @ W + b``."""

    weights: list
    biases: list
    activation: str
    schema: ConceptSchema

    def __post_init__(self):
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights[-1].shape[1] != self.schema.k:
            raise ValueError("output layer width must equal the number of concepts")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def copy(self) -> "MlpParams":
        return replace(self, weights=[W.copy() for W in self.weights], biases=[b.copy() for b in self.biases])

    def to_dict(self) -> dict:
        return {
            "layer_sizes": self.sizes,
            "activation": self.activation,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "schema_hash": self.schema.digest(),
        }

    @classmethod
    def from_dict(cls, d: dict, schema: ConceptSchema) -> "MlpParams":
        if d.get("schema_hash") != schema.digest():
            raise SourceError("model file was trained on a different concept schema")
        weights = [np.asarray(W, dtype=np.float64) for W in d["weights"]]
        biases = [np.asarray(b, dtype=np.float64) for b in d["biases"]]
        p = cls(weights, biases, d["activation"], schema)
        if p.sizes != list(d["layer_sizes"]):
            raise SourceError("layer_sizes do not match the stored weights")
        return p


@dataclass
class LinearHead:
    """Label head used only by joint training: class logits = probs @ W + b."""

    W: np.ndarray
    b: np.ndarray

    def to_dict(self) -> dict:
        return {"W": self.W.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearHead":
        return cls(np.asarray(d["W"], dtype=np.float64), np.asarray(d["b"], dtype=np.float64))


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    lambda_c: float = 1.0
    hidden: tuple[int, ...] = (64,)
    activation: str = "relu"
    joint_epochs: int | None = None
    warm_start: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.joint_epochs is not None and self.joint_epochs < 1:
            raise ValueError("joint_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.lambda_c < 0:
            raise ValueError("lambda_c must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        return cls(**d)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def init_mlp(sizes, schema: ConceptSchema, activation: str = "relu", rng=None) -> MlpParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt((2.0 if activation == "relu" else 1.0) / fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation, schema)


def zero_mlp(sizes, schema: ConceptSchema, activation: str = "relu") -> MlpParams:
    return MlpParams([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                     [np.zeros(b) for b in sizes[1:]], activation, schema)


def _act(a, kind):
    return np.maximum(a, 0.0) if kind == "relu" else np.tanh(a)


def _dact(a, h, kind):
    return (a > 0).astype(np.float64) if kind == "relu" else 1.0 - h * h


def forward(params: MlpParams, X):
    """Concept logits and the activations needed for backprop."""
    h = np.asarray(X, dtype=np.float64)
    cache = [(None, h)]
    L = len(params.weights)
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ W + b
        h = a if l == L - 1 else _act(a, params.activation)
        cache.append((a, h))
    return h, cache


def backward(params: MlpParams, cache, dlogits):
    gW, gb = [None] * len(params.weights), [None] * len(params.weights)
    delta = dlogits
    for l in range(len(params.weights) - 1, -1, -1):
        h_in = cache[l][1]
        gW[l] = h_in.T @ delta
        gb[l] = delta.sum(axis=0)
        if l:
            a, h = cache[l]
            delta = (delta @ params.weights[l].T) * _dact(a, h, params.activation)
    return gW, gb


def _concept_loss_terms(logits, C, schema: ConceptSchema):
    """Mean concept loss and d(loss)/d(logits)."""
    n = logits.shape[0]
    probs = logits_to_probs(logits, schema)
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    C = np.asarray(C, dtype=np.float64)
    loss = 0.0
    ind = list(schema.independents)
    if ind:
        loss -= np.sum(C[:, ind] * np.log(p[:, ind]) + (1.0 - C[:, ind]) * np.log(1.0 - p[:, ind]))
    for g in schema.groups:
        g = list(g)
        loss -= np.sum(C[:, g] * np.log(p[:, g]))
    # sigmoid+BCE and softmax+CE share the gradient probs - targets
    return loss / n, (probs - C) / n, probs


def _probs_vjp(probs, dprobs, schema: ConceptSchema):
    """Pull a gradient w.r.t. concept probabilities back to concept logits."""
    dz = np.empty_like(probs)
    ind = list(schema.independents)
    if ind:
        dz[:, ind] = dprobs[:, ind] * probs[:, ind] * (1.0 - probs[:, ind])
    for g in schema.groups:
        g = list(g)
        pg, dg = probs[:, g], dprobs[:, g]
        dz[:, g] = pg * (dg - np.sum(dg * pg, axis=1, keepdims=True))
    return dz


def _label_loss_terms(probs, y, head: LinearHead):
    n = probs.shape[0]
    scores = probs @ head.W + head.b
    ls = log_softmax(scores, axis=1)
    loss = -ls[np.arange(n), y].sum() / n
    dscores = softmax(scores, axis=1)
    dscores[np.arange(n), y] -= 1.0
    dscores /= n
    return loss, dscores


def loss_and_grads(params: MlpParams, X, C, y=None, head: LinearHead | None = None, lambda_c: float = 1.0):
    """Loss and gradients for the concept objective (``head is None``) or the
    joint objective ``label CE + lambda_c * concept loss``.

    Returns ``(loss, (gW, gb), (gHW, gHb) or None)``.
    """
    logits, cache = forward(params, X)
    lc, dlogits_c, probs = _concept_loss_terms(logits, C, params.schema)
    if head is None:
        gW, gb = backward(params, cache, dlogits_c)
        return lc, (gW, gb), None
    y = np.asarray(y, dtype=np.int64)
    ly, dscores = _label_loss_terms(probs, y, head)
    gHW = probs.T @ dscores
    gHb = dscores.sum(axis=0)
    dlogits = _probs_vjp(probs, dscores @ head.W.T, params.schema) + lambda_c * dlogits_c
    gW, gb = backward(params, cache, dlogits)
    return ly + lambda_c * lc, (gW, gb), (gHW, gHb)


def concept_loss(params: MlpParams, batch: Dataset) -> float:
    """Mean over samples of summed BCE (independents) and CE (groups), in nats."""
    if batch.n == 0:
        raise ValueError("empty batch")
    if batch.schema.digest() != params.schema.digest():
        raise ValueError("batch schema does not match the model schema")
    logits, _ = forward(params, batch.X)
    return float(_concept_loss_terms(logits, batch.C, params.schema)[0])


def label_loss(params: MlpParams, head: LinearHead, batch: Dataset) -> float:
    logits, _ = forward(params, batch.X)
    probs = logits_to_probs(logits, params.schema)
    return float(_label_loss_terms(probs, batch.y, head)[0])


def joint_loss(params: MlpParams, head: LinearHead, batch: Dataset, lambda_c: float) -> float:
    return label_loss(params, head, batch) + lambda_c * concept_loss(params, batch)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class _Adam:
    def __init__(self, arrays, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = arrays
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            if self.wd:
                g = g + self.wd * a
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _run_epochs(train: Dataset, hyper: TrainHyper, epochs: int, params: MlpParams,
                head: LinearHead | None, stream: str):
    arrays = params.weights + params.biases + ([head.W, head.b] if head is not None else [])
    opt = _Adam(arrays, hyper.learning_rate, hyper.weight_decay)
    rng = rng_for(hyper.seed, stream)
    n = train.n
    L = len(params.weights)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            loss, (gW, gb), hg = loss_and_grads(params, train.X[idx], train.C[idx], train.y[idx],
                                                head, hyper.lambda_c)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch}")
            total += loss * idx.size
            grads = gW + gb + (list(hg) if hg is not None else [])
            opt.step(grads)
        if not np.isfinite(total) or not all(np.all(np.isfinite(a)) for a in arrays[:2 * L]):
            raise TrainingDiverged(f"parameters became non-finite in epoch {epoch}")
    return params, head


def train_independent(train: Dataset, hyper: TrainHyper) -> MlpParams:
    """Fit the concept predictor on the concept loss alone, with Adam."""
    if train.n == 0:
        raise ValueError("training set is empty")
    sizes = [train.d, *hyper.hidden, train.schema.k]
    params = init_mlp(sizes, train.schema, hyper.activation, rng_for(hyper.seed, "init"))
    params, _ = _run_epochs(train, hyper, hyper.epochs, params, None, "shuffle")
    return params


def train_joint(train: Dataset, hyper: TrainHyper, init: MlpParams | None = None):
    """Fine-tune a concept predictor jointly with a linear label head.

    With ``hyper.warm_start`` the network starts from ``init`` (or from a
    fresh :func:`train_independent` run); otherwise from a random init.
    """
    if train.n == 0:
        raise ValueError("training set is empty")
    if hyper.warm_start:
        params = (init if init is not None else train_independent(train, hyper)).copy()
    else:
        sizes = [train.d, *hyper.hidden, train.schema.k]
        params = init_mlp(sizes, train.schema, hyper.activation, rng_for(hyper.seed, "init"))
    r = train.schema.n_classes
    hrng = rng_for(hyper.seed, "init-head")
    head = LinearHead(hrng.normal(0.0, 1.0 / np.sqrt(train.schema.k), size=(train.schema.k, r)), np.zeros(r))
    epochs = hyper.joint_epochs or hyper.epochs
    return _run_epochs(train, hyper, epochs, params, head, "shuffle-joint")


def gradient_check(params: MlpParams, head: LinearHead | None, batch: Dataset, lambda_c: float = 1.0,
                   step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is ``|ga - gn| / max(1, |ga| + |gn|)``.
    """
    X, C, y = batch.X, batch.C, batch.y
    _, (gW, gb), hg = loss_and_grads(params, X, C, y, head, lambda_c)
    arrays = params.weights + params.biases
    analytic = gW + gb
    if head is not None:
        arrays = arrays + [head.W, head.b]
        analytic = analytic + list(hg)

    def f():
        return loss_and_grads(params, X, C, y, head, lambda_c)[0]

    worst = 0.0
    for a, ga in zip(arrays, analytic):
        flat, gflat = a.reshape(-1), ga.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = f()
            flat[i] = old - step
            fm = f()
            flat[i] = old
            gn = (fp - fm) / (2.0 * step)
            err = abs(gflat[i] - gn) / max(1.0, abs(gflat[i]) + abs(gn))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Probability sources
# ---------------------------------------------------------------------------


def binarize(probs, schema: ConceptSchema) -> np.ndarray:
    """Independents: 1 iff p > 0.5.  Groups: one-hot at the argmax (lowest index on ties)."""
    probs = np.asarray(probs, dtype=np.float64)
    out = np.zeros(probs.shape, dtype=np.int8)
    ind = list(schema.independents)
    if ind:
        out[..., ind] = probs[..., ind] > 0.5
    for g in schema.groups:
        g = np.asarray(g)
        hot = g[np.argmax(probs[..., g], axis=-1)]
        np.put_along_axis(out, np.asarray(hot)[..., None], 1, axis=-1)
    return out


def probs_to_logits(probs, schema: ConceptSchema) -> np.ndarray:
    """Inverse of the output heads: logit for independents, log for groups."""
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    z = np.log(p)
    ind = list(schema.independents)
    if ind:
        z[:, ind] = np.log(p[:, ind]) - np.log1p(-p[:, ind])
    return z


@dataclass
class ProbabilitySource:
    """Where concept probabilities come from: a trained MLP or a file.

    ``mode`` is ``"seq"`` for an independently trained predictor (optionally
    calibrated) or ``"joint"`` for a jointly trained one, which is never
    calibrated.
    """

    schema: ConceptSchema
    mode: str = SEQ
    params: MlpParams | None = None
    calibration: CalibrationParams | None = None
    file_ids: np.ndarray | None = None
    file_probs: np.ndarray | None = None
    _row_of: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.mode not in (SEQ, JOINT):
            raise SourceError(f"mode must be 'seq' or 'joint', got {self.mode!r}")
        if (self.params is None) == (self.file_probs is None):
            raise SourceError("exactly one of params or file_probs must be given")
        if self.mode == JOINT and self.calibration is not None:
            raise SourceError("joint-mode probabilities are never calibrated")
        if self.file_probs is not None:
            self.file_probs = np.asarray(self.file_probs, dtype=np.float64)
            self.file_ids = np.asarray(self.file_ids, dtype=np.int64)
            if self.file_probs.shape != (self.file_ids.shape[0], self.schema.k):
                raise SourceError("probability matrix must be n x k and aligned with ids")
            self._row_of = {int(s): i for i, s in enumerate(self.file_ids)}

    @property
    def calibrated(self) -> bool:
        return self.calibration is not None

    def with_calibration(self, cal: CalibrationParams | None) -> "ProbabilitySource":
        return ProbabilitySource(self.schema, self.mode, self.params, cal, self.file_ids, self.file_probs)

    def _rows(self, ids):
        if ids is None:
            raise SourceError("file-backed probabilities need sample ids")
        try:
            return np.array([self._row_of[int(s)] for s in np.asarray(ids).ravel()], dtype=np.int64)
        except KeyError as e:
            raise SourceError(f"sample id {e.args[0]} missing from probability file") from None

    def raw_logits(self, X=None, ids=None) -> np.ndarray:
        if self.params is not None:
            X = np.asarray(X, dtype=np.float64)
            if X.ndim != 2 or X.shape[1] != self.params.sizes[0]:
                raise SourceError(f"expected X with {self.params.sizes[0]} columns")
            return forward(self.params, X)[0]
        return probs_to_logits(self.file_probs[self._rows(ids)], self.schema)

    def logits(self, X=None, ids=None) -> np.ndarray:
        return self.raw_logits(X, ids)

    def probs(self, X=None, ids=None) -> np.ndarray:
        if self.calibration is not None:
            return apply_calibration(self.calibration, self.raw_logits(X, ids), self.schema)
        if self.params is not None:
            return logits_to_probs(self.raw_logits(X), self.schema)
        return self.file_probs[self._rows(ids)].copy()

    def dataset_probs(self, ds: Dataset) -> np.ndarray:
        return self.probs(ds.X, ds.ids)

    def dataset_logits(self, ds: Dataset) -> np.ndarray:
        return self.logits(ds.X, ds.ids)


def predict_probs(src: ProbabilitySource, X=None, ids=None) -> np.ndarray:
    return src.probs(X, ids)


def predict_logits(src: ProbabilitySource, X=None, ids=None) -> np.ndarray:
    return src.logits(X, ids)


def write_probabilities(path, ids, probs, schema: ConceptSchema) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", *schema.concepts])
        for s, row in zip(np.asarray(ids), np.asarray(probs, dtype=np.float64)):
            w.writerow([str(int(s)), *(repr(float(v)) for v in row)])


def load_probability_source(path, schema: ConceptSchema, mode: str = SEQ) -> ProbabilitySource:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["sample_id", *schema.concepts]:
            raise SourceError(f"{path}: header must be sample_id followed by the schema concepts")
        ids, rows = [], []
        for i, row in enumerate(reader):
            ids.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    probs = np.asarray(rows, dtype=np.float64).reshape(len(rows), schema.k)
    if probs.size and (probs.min() < 0 or probs.max() > 1):
        raise SourceError(f"{path}: probabilities must lie in [0, 1]")
    for g in schema.groups:
        if probs.size and np.max(np.abs(probs[:, list(g)].sum(axis=1) - 1.0)) > 1e-9:
            raise SourceError(f"{path}: group {list(g)} probabilities do not sum to 1")
    return ProbabilitySource(schema, mode, file_ids=np.asarray(ids), file_probs=probs)
