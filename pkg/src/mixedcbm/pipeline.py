"""End-to-end training: split, concept predictor, calibration, mixed trees."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .calibration import CalibrationParams, fit_calibration
from .data import Dataset, split_dataset
from .mcbm import BASELINES, BaselineModel, McbmModel, fit_baseline, fit_mcbm
from .predictor import (
    JOINT,
    SEQ,
    LinearHead,
    MlpParams,
    ProbabilitySource,
    TrainHyper,
    train_independent,
    train_joint,
)

DEFAULT_FRACTIONS = (0.7, 0.15, 0.15)


@dataclass
class PipelineResult:
    train: Dataset
    calib: Dataset
    test: Dataset
    params: MlpParams | None
    calibration: CalibrationParams | None
    source: ProbabilitySource
    model: McbmModel
    baselines: dict = field(default_factory=dict)
    joint_head: LinearHead | None = None


def train_source(train: Dataset, calib: Dataset, hyper: TrainHyper, mode: str = SEQ,
                 calibrate: bool = True, base: MlpParams | None = None):
    """Train the concept predictor for ``mode`` and wrap it as a probability source.

    Returns ``(source, params, calibration, joint_head)``.
    """
    params = base if base is not None else train_independent(train, hyper)
    if mode == JOINT:
        jparams, head = train_joint(train, hyper, init=params)
        return ProbabilitySource(train.schema, JOINT, jparams), jparams, None, head
    src = ProbabilitySource(train.schema, SEQ, params)
    cal = None
    if calibrate:
        cal = fit_calibration(src.dataset_logits(calib), calib.C, train.schema)
        src = src.with_calibration(cal)
    return src, params, cal, None


def run_pipeline(ds: Dataset, hyper: TrainHyper, msl: int, mode: str = SEQ, seed: int = 0,
                 fractions=DEFAULT_FRACTIONS, calibrate: bool | None = None,
                 baselines=BASELINES) -> PipelineResult:
    """Split ``ds``, train and (for seq mode) calibrate the predictor, then fit
    the mixed model and the requested baselines."""
    if calibrate is None:
        calibrate = mode == SEQ
    hyper = replace(hyper, seed=seed)
    train, calib, test = split_dataset(ds, fractions, seed)
    src, params, cal, head = train_source(train, calib, hyper, mode, calibrate)
    P = src.dataset_probs(train)
    model = fit_mcbm(train, src, msl, mode, allow_uncalibrated=not calibrate, probs=P)
    fitted = {v: fit_baseline(train, src, msl, v, probs=P) for v in baselines}
    return PipelineResult(train, calib, test, params, cal, src, model, fitted, head)


def training_accuracy(model: McbmModel | BaselineModel, train: Dataset, probs=None) -> float:
    """Accuracy on the training split with annotated concepts for routing."""
    from .mcbm import evaluate_dataset

    P = model.source.dataset_probs(train) if probs is None else probs
    if isinstance(model, McbmModel):
        pred = evaluate_dataset(model, train, "annotated", probs=P)
    else:
        pred = model.predict(concept_mode="annotated", C=train.C, probs=P)
    return float(np.mean(pred == train.y)) if train.n else float("nan")
