"""Post-hoc calibration of concept probabilities.

Independent concepts get Platt scaling, ``sigmoid(a * z + b)``; each mutually
exclusive group gets a single temperature, ``softmax(z / T)``.  Both are fitted
by minimising negative log-likelihood on a held-out calibration split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ConceptSchema

T_MIN, T_MAX = 0.05, 20.0


class CalibrationError(ValueError):
    pass


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    s = z - z.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def logits_to_probs(logits, schema: ConceptSchema) -> np.ndarray:
    """Sigmoid on independent columns, softmax within each group."""
    logits = np.asarray(logits, dtype=np.float64)
    probs = np.empty_like(logits)
    ind = list(schema.independents)
    if ind:
        probs[..., ind] = sigmoid(logits[..., ind])
    for g in schema.groups:
        g = list(g)
        probs[..., g] = softmax(logits[..., g])
    return probs


# ---------------------------------------------------------------------------
# Platt scaling
# ---------------------------------------------------------------------------


def _platt_nll(a, b, z, t):
    s = a * z + b
    # -[t log sig(s) + (1 - t) log(1 - sig(s))], written with logaddexp
    return float(np.sum(t * np.logaddexp(0.0, -s) + (1.0 - t) * np.logaddexp(0.0, s)))


def platt_targets(targets, corrected: bool = True) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64)
    if not corrected:
        return t
    n_pos = float(np.sum(t == 1))
    n_neg = float(np.sum(t == 0))
    return np.where(t == 1, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))


def fit_platt(logits, targets, corrected: bool = True, max_iter: int = 100, tol: float = 1e-10):
    """Fit ``(a, b)`` of ``sigmoid(a * z + b)`` by damped Newton iterations.

    With ``corrected`` (the default) the 0/1 targets are replaced by Platt's
    ``(N+ + 1)/(N+ + 2)`` and ``1/(N- + 2)``, which keeps separable sets finite.
    """
    z = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(targets).ravel()
    if z.shape != y.shape:
        raise CalibrationError("logits and targets must have the same length")
    if z.size < 2 or np.all(y == y[0]):
        raise CalibrationError("degenerate calibration set: need both classes present")
    t = platt_targets(y, corrected)

    n_pos, n_neg = float(np.sum(y == 1)), float(np.sum(y == 0))
    a, b = 0.0, float(np.log((n_pos + 1.0) / (n_neg + 1.0)))
    f = _platt_nll(a, b, z, t)
    for _ in range(max_iter):
        p = sigmoid(a * z + b)
        r = p - t
        g = np.array([np.dot(r, z), r.sum()])
        w = p * (1.0 - p)
        H = np.array([[np.dot(w, z * z), np.dot(w, z)], [np.dot(w, z), w.sum()]])
        H += 1e-12 * np.eye(2)
        step = -np.linalg.solve(H, g)
        lam = 1.0
        while lam >= 1e-10:
            na, nb = a + lam * step[0], b + lam * step[1]
            nf = _platt_nll(na, nb, z, t)
            if nf < f + 1e-4 * lam * float(np.dot(g, step)):
                break
            lam *= 0.5
        else:
            break
        delta = max(abs(na - a), abs(nb - b))
        a, b, f = na, nb, nf
        if delta < tol:
            break
    if _platt_nll(1.0, 0.0, z, t) < f:
        a, b = 1.0, 0.0
    return float(a), float(b)


# ---------------------------------------------------------------------------
# Temperature scaling
# ---------------------------------------------------------------------------


def temperature_nll(T: float, logits, target_idx) -> float:
    ls = log_softmax(np.asarray(logits, dtype=np.float64) / T, axis=1)
    return float(-ls[np.arange(ls.shape[0]), target_idx].mean())


def fit_temperature(group_logits, targets, lo: float = T_MIN, hi: float = T_MAX, width: float = 1e-6) -> float:
    """Golden-section search for the NLL-minimising temperature on ``[lo, hi]``.

    NLL is convex in ``1/T``, hence unimodal in ``T``.  ``targets`` may be
    one-hot rows or class indices.
    """
    Z = np.asarray(group_logits, dtype=np.float64)
    tg = np.asarray(targets)
    idx = tg.argmax(axis=1) if tg.ndim == 2 else tg.astype(np.int64)
    if Z.ndim != 2 or Z.shape[0] != idx.shape[0]:
        raise CalibrationError("group logits must be n x g and aligned with targets")
    if Z.shape[0] < 2 or np.unique(idx).size < 2:
        raise CalibrationError("degenerate calibration set: need at least two target classes")

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = temperature_nll(c, Z, idx), temperature_nll(d, Z, idx)
    while b - a > width:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = temperature_nll(c, Z, idx)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = temperature_nll(d, Z, idx)
    T = 0.5 * (a + b)
    if lo <= 1.0 <= hi and temperature_nll(1.0, Z, idx) < temperature_nll(T, Z, idx):
        T = 1.0
    return float(T)


# ---------------------------------------------------------------------------
# Parameters and application
# ---------------------------------------------------------------------------


@dataclass
class CalibrationParams:
    """``platt`` maps concept index -> (a, b); ``temperature`` maps group index -> T."""

    platt: dict = field(default_factory=dict)
    temperature: dict = field(default_factory=dict)

    def __post_init__(self):
        for j, (a, b) in self.platt.items():
            if not (np.isfinite(a) and np.isfinite(b)):
                raise CalibrationError(f"non-finite Platt parameters for concept {j}")
        for g, T in self.temperature.items():
            if not (np.isfinite(T) and T > 0):
                raise CalibrationError(f"temperature of group {g} must be positive, got {T}")

    @classmethod
    def identity(cls, schema: ConceptSchema) -> "CalibrationParams":
        return cls({j: (1.0, 0.0) for j in schema.independents},
                   {gi: 1.0 for gi in range(len(schema.groups))})

    def to_dict(self, schema: ConceptSchema) -> dict:
        return {
            "platt": {schema.concepts[j]: [float(a), float(b)] for j, (a, b) in sorted(self.platt.items())},
            "temperature": {str(g): float(T) for g, T in sorted(self.temperature.items())},
        }

    @classmethod
    def from_dict(cls, d: dict, schema: ConceptSchema) -> "CalibrationParams":
        index = {c: i for i, c in enumerate(schema.concepts)}
        try:
            platt = {index[name]: (float(a), float(b)) for name, (a, b) in d.get("platt", {}).items()}
        except KeyError as e:
            raise CalibrationError(f"unknown concept {e.args[0]!r} in calibration file") from None
        temps = {int(g): float(T) for g, T in d.get("temperature", {}).items()}
        return cls(platt, temps)


def apply_calibration(cal: CalibrationParams, logits, schema: ConceptSchema) -> np.ndarray:
    """Calibrated probabilities for a logit row (or matrix of rows)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != schema.k:
        raise CalibrationError(f"logit width {logits.shape[-1]} != k={schema.k}")
    probs = np.empty_like(logits)
    for j in schema.independents:
        a, b = cal.platt.get(j, (1.0, 0.0))
        probs[..., j] = sigmoid(a * logits[..., j] + b)
    for gi, g in enumerate(schema.groups):
        g = list(g)
        probs[..., g] = softmax(logits[..., g] / cal.temperature.get(gi, 1.0))
    return probs


def fit_calibration(logits, C, schema: ConceptSchema, corrected: bool = True) -> CalibrationParams:
    """Fit Platt parameters per independent concept and a temperature per group."""
    logits = np.asarray(logits, dtype=np.float64)
    C = np.asarray(C)
    platt = {}
    for j in schema.independents:
        try:
            platt[j] = fit_platt(logits[:, j], C[:, j], corrected=corrected)
        except CalibrationError as e:
            raise CalibrationError(f"concept {schema.concepts[j]!r}: {e}") from None
    temps = {}
    for gi, g in enumerate(schema.groups):
        g = list(g)
        try:
            temps[gi] = fit_temperature(logits[:, g], C[:, g])
        except CalibrationError as e:
            raise CalibrationError(f"group {gi}: {e}") from None
    return CalibrationParams(platt, temps)


# ---------------------------------------------------------------------------
# Quality metrics
# ---------------------------------------------------------------------------


def expected_calibration_error(probs, outcomes, n_bins: int = 15) -> float:
    """Equal-width-bin ECE of event probabilities against 0/1 outcomes."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    o = np.asarray(outcomes, dtype=np.float64).ravel()
    if p.size == 0:
        return 0.0
    bins = np.minimum((p * n_bins).astype(np.int64), n_bins - 1)
    cnt = np.bincount(bins, minlength=n_bins)
    conf = np.bincount(bins, weights=p, minlength=n_bins)
    acc = np.bincount(bins, weights=o, minlength=n_bins)
    nz = cnt > 0
    return float(np.sum(np.abs(acc[nz] - conf[nz])) / p.size)


def concept_ece(probs, C, schema: ConceptSchema, n_bins: int = 15) -> float:
    """Mean ECE over concept heads: per-concept for independents, top-label per group."""
    probs = np.asarray(probs, dtype=np.float64)
    C = np.asarray(C)
    vals = [expected_calibration_error(probs[:, j], C[:, j], n_bins) for j in schema.independents]
    for g in schema.groups:
        g = list(g)
        pg = probs[:, g]
        vals.append(expected_calibration_error(pg.max(axis=1), pg.argmax(axis=1) == C[:, g].argmax(axis=1), n_bins))
    return float(np.mean(vals)) if vals else 0.0


def nll(probs, C, schema: ConceptSchema) -> float:
    """Mean per-sample concept negative log-likelihood (natural log)."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-12, 1 - 1e-12)
    C = np.asarray(C)
    total = np.zeros(p.shape[0])
    for j in schema.independents:
        total -= C[:, j] * np.log(p[:, j]) + (1 - C[:, j]) * np.log(1 - p[:, j])
    for g in schema.groups:
        g = list(g)
        total -= np.log(p[:, g][C[:, g] == 1])
    return float(total.mean())
