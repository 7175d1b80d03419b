import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixedcbm.data import ConceptSchema, Dataset, SynthSpec, generate_synthetic
from mixedcbm.predictor import (
    LinearHead,
    MlpParams,
    ProbabilitySource,
    SourceError,
    TrainHyper,
    binarize,
    concept_loss,
    gradient_check,
    init_mlp,
    joint_loss,
    label_loss,
    load_probability_source,
    loss_and_grads,
    predict_probs,
    train_independent,
    train_joint,
    write_probabilities,
    zero_mlp,
)

MIXED = ConceptSchema(("a", "g0", "g1", "g2"), ((1, 2, 3),), (0,), ("x", "y"))


def _ds(schema, X, C, y=None):
    X = np.asarray(X, dtype=float)
    return Dataset(X, np.asarray(C), np.zeros(len(X), dtype=int) if y is None else np.asarray(y), schema)


def test_zero_weights_loss_values():
    one = ConceptSchema(("a",), (), (0,), ("x", "y"))
    p = zero_mlp([2, 3, 1], one)
    assert concept_loss(p, _ds(one, [[1.0, 2.0]], [[1]])) == pytest.approx(math.log(2), abs=1e-12)
    grp = ConceptSchema(("g0", "g1", "g2"), ((0, 1, 2),), (), ("x", "y"))
    p = zero_mlp([2, 3], grp)
    assert concept_loss(p, _ds(grp, [[0.3, -1.0]], [[0, 0, 1]])) == pytest.approx(math.log(3), abs=1e-12)


def test_hand_computed_two_sample_loss():
    W1 = np.array([[0.5, -1.0], [0.25, 0.75]])
    b1 = np.array([0.1, -0.2])
    W2 = np.array([[1.0, -0.5, 0.3, 0.2], [-0.4, 0.6, 0.1, -0.8]])
    b2 = np.array([0.05, 0.0, 0.1, -0.1])
    p = MlpParams([W1, W2], [b1, b2], "tanh", MIXED)
    X = [[1.0, 2.0], [-0.5, 0.3]]
    C = [[1, 0, 1, 0], [0, 0, 0, 1]]

    def scalar_loss(x, c):
        h = [math.tanh(x[0] * W1[0, j] + x[1] * W1[1, j] + b1[j]) for j in range(2)]
        z = [h[0] * W2[0, o] + h[1] * W2[1, o] + b2[o] for o in range(4)]
        pa = 1 / (1 + math.exp(-z[0]))
        bce = -(c[0] * math.log(pa) + (1 - c[0]) * math.log(1 - pa))
        lse = math.log(sum(math.exp(v) for v in z[1:]))
        ce = -sum(ci * (zi - lse) for ci, zi in zip(c[1:], z[1:]))
        return bce + ce

    expected = (scalar_loss(X[0], C[0]) + scalar_loss(X[1], C[1])) / 2
    assert concept_loss(p, _ds(MIXED, X, C)) == pytest.approx(expected, abs=1e-12)


def test_zero_model_probabilities():
    p = zero_mlp([3, 4], MIXED)
    src = ProbabilitySource(MIXED, params=p)
    P = src.probs(np.random.default_rng(0).normal(size=(5, 3)))
    assert np.allclose(P[:, 0], 0.5) and np.allclose(P[:, 1:], 1 / 3)


def test_separable_toy_reaches_full_accuracy():
    # x = c + small noise is separable by a threshold at 0.5, so logistic
    # regression attains 100% training accuracy; the MLP must too
    rng = np.random.default_rng(0)
    c = rng.integers(0, 2, 200)
    X = (c + rng.normal(0, 0.05, 200))[:, None]
    one = ConceptSchema(("a",), (), (0,), ("x", "y"))
    ds = _ds(one, X, c[:, None])
    p = train_independent(ds, TrainHyper(epochs=20, learning_rate=1e-2, hidden=(8,)))
    P = ProbabilitySource(one, params=p).probs(X)
    assert np.mean(binarize(P, one)[:, 0] == c) == 1.0


def test_epochs_zero_rejected():
    with pytest.raises(ValueError):
        TrainHyper(epochs=0)


def _small_ds(seed=0, n=300):
    return generate_synthetic(SynthSpec(n_samples=n, n_factors=3, revealed=(0, 1), feature_dim=5, seed=seed))


def test_training_is_deterministic():
    ds = _small_ds()
    h = TrainHyper(epochs=2, hidden=(16,))
    a, b = train_independent(ds, h), train_independent(ds, h)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights + a.biases, b.weights + b.biases))
    ja, ha = train_joint(ds, h, init=a)
    jb, hb = train_joint(ds, h, init=b)
    assert np.array_equal(ha.W, hb.W) and all(np.array_equal(x, y) for x, y in zip(ja.weights, jb.weights))


def test_joint_large_lambda_keeps_concept_accuracy():
    ds = _small_ds(1, 600)
    # a converged independent model, so extra concept-dominated epochs cannot move it much
    h = TrainHyper(epochs=150, hidden=(16,), learning_rate=3e-3)
    base = train_independent(ds, h)
    jp, _ = train_joint(ds, TrainHyper(**{**h.to_dict(), "lambda_c": 1e6, "joint_epochs": 10}), init=base)

    def acc(p):
        P = ProbabilitySource(ds.schema, params=p).probs(ds.X)
        return np.mean(binarize(P, ds.schema) == ds.C)

    assert abs(acc(jp) - acc(base)) <= 0.005


def test_joint_concept_loss_non_increasing_in_lambda():
    ds = _small_ds(2, 600)
    h = TrainHyper(epochs=5, hidden=(16,), learning_rate=3e-3)
    base = train_independent(ds, h)
    losses = []
    for lam in (0.1, 1.0, 100.0):
        jp, _ = train_joint(ds, TrainHyper(**{**h.to_dict(), "lambda_c": lam, "joint_epochs": 10}), init=base)
        losses.append(concept_loss(jp, ds))
    assert losses[0] >= losses[1] >= losses[2]


def test_lambda_zero_drops_concept_gradient():
    ds = _small_ds(3, 40)
    rng = np.random.default_rng(0)
    p = init_mlp([5, 6, ds.schema.k], ds.schema, "tanh", rng)
    head = LinearHead(rng.normal(size=(ds.schema.k, 3)), rng.normal(size=3))
    assert joint_loss(p, head, ds, 0.0) == pytest.approx(label_loss(p, head, ds), abs=1e-14)
    # with the concept term switched off, the concept targets cannot matter
    other_C = ds.C[::-1]
    _, g0, _ = loss_and_grads(p, ds.X, ds.C, ds.y, head, 0.0)
    _, g1, _ = loss_and_grads(p, ds.X, other_C, ds.y, head, 0.0)
    assert all(np.array_equal(a, b) for a, b in zip(g0[0] + g0[1], g1[0] + g1[1]))
    assert gradient_check(p, head, ds, lambda_c=0.0) <= 1e-4


def test_gradient_check_constant_region():
    one = ConceptSchema(("a",), (), (0,), ("x", "y"))
    p = zero_mlp([2, 3, 1], one, "relu")
    ds = _ds(one, np.zeros((4, 2)), [[0], [1], [0], [1]])
    assert gradient_check(p, None, ds) < 1e-8


def test_binarize_conventions():
    P = np.array([[0.5, 0.2, 0.5, 0.3], [0.51, 0.4, 0.3, 0.3], [0.0, 0.4, 0.4, 0.2]])
    assert binarize(P, MIXED).tolist() == [[0, 0, 1, 0], [1, 1, 0, 0], [0, 1, 0, 0]]
    two = ConceptSchema(("p", "q"), ((0, 1),), (), ("x", "y"))
    assert binarize(np.array([[0.5, 0.5]]), two).tolist() == [[1, 0]]


@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 50.0))
@settings(max_examples=25, deadline=None)
def test_probability_validity(seed, scale):
    rng = np.random.default_rng(seed)
    p = init_mlp([3, 7, 4], MIXED, "relu", rng)
    P = predict_probs(ProbabilitySource(MIXED, params=p), rng.normal(0, scale, size=(1000, 3)))
    assert np.all((P >= 0) & (P <= 1))
    assert np.max(np.abs(P[:, 1:].sum(axis=1) - 1)) <= 1e-9


def test_file_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    p = init_mlp([3, 5, 4], MIXED, "tanh", rng)
    X = rng.normal(size=(50, 3))
    P = predict_probs(ProbabilitySource(MIXED, params=p), X)
    ids = np.arange(100, 150)
    write_probabilities(tmp_path / "p.csv", ids, P, MIXED)
    src = load_probability_source(tmp_path / "p.csv", MIXED)
    assert np.max(np.abs(src.probs(ids=ids) - P)) <= 1e-12
    assert np.max(np.abs(src.probs(ids=ids[::-1]) - P[::-1])) <= 1e-12
    with pytest.raises(SourceError, match="sample id 7 missing"):
        src.probs(ids=[7])


def test_params_json_round_trip_and_schema_check():
    p = init_mlp([3, 5, 4], MIXED, "relu", np.random.default_rng(0))
    back = MlpParams.from_dict(p.to_dict(), MIXED)
    assert all(np.array_equal(a, b) for a, b in zip(back.weights, p.weights))
    other = ConceptSchema(("a", "g0", "g1", "zz"), ((1, 2, 3),), (0,), ("x", "y"))
    with pytest.raises(SourceError):
        MlpParams.from_dict(p.to_dict(), other)


def test_joint_source_cannot_be_calibrated():
    from mixedcbm.calibration import CalibrationParams
    p = zero_mlp([3, 4], MIXED)
    with pytest.raises(SourceError):
        ProbabilitySource(MIXED, "joint", p, CalibrationParams.identity(MIXED))
