from __future__ import annotations

import math

import numpy as np
import numpy.testing as npt
import pytest

from fedsim.model import (
    Batch,
    ModelSpec,
    evaluate,
    finite_diff_grad,
    init_params,
    loss_and_grad,
    mean_loss,
)
from fedsim.params import ParamVector


LOGISTIC = ModelSpec("logistic", 5, 3)
MLP_RELU = ModelSpec("mlp1", 4, 3, hidden_dim=6, activation="relu")
MLP_TANH = ModelSpec("mlp1", 4, 3, hidden_dim=6, activation="tanh")


def random_batch(spec: ModelSpec, seed: int, n: int = 12) -> Batch:
    rng = np.random.default_rng(seed)
    return Batch(
        rng.normal(size=(n, spec.input_dim)),
        rng.integers(0, spec.num_classes, size=n),
    )


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("cnn", 4, 2)
    with pytest.raises(ValueError):
        ModelSpec("logistic", 4, 1)
    with pytest.raises(ValueError):
        ModelSpec("mlp1", 4, 2)  # missing hidden_dim/activation
    with pytest.raises(ValueError):
        ModelSpec("mlp1", 4, 2, hidden_dim=3, activation="gelu")
    with pytest.raises(ValueError):
        ModelSpec("logistic", 4, 2, hidden_dim=3)


def test_param_count():
    assert ModelSpec("logistic", 3, 2).param_count == 3 * 2 + 2
    assert ModelSpec("mlp1", 4, 3, hidden_dim=6, activation="relu").param_count == (
        4 * 6 + 6 + 6 * 3 + 3
    )


def test_init_layout_biases_zero():
    spec = ModelSpec("mlp1", 4, 3, hidden_dim=6, activation="relu")
    params = init_params(spec, 0)
    assert len(params) == spec.param_count
    vals = params.values
    b1 = vals[4 * 6 : 4 * 6 + 6]
    b2 = vals[4 * 6 + 6 + 6 * 3 :]
    npt.assert_array_equal(b1, np.zeros(6))
    npt.assert_array_equal(b2, np.zeros(3))
    assert np.any(vals[: 4 * 6] != 0)


def test_init_deterministic():
    a = init_params(LOGISTIC, 42)
    b = init_params(LOGISTIC, 42)
    c = init_params(LOGISTIC, 43)
    assert a.same_bits(b)
    assert not a.same_bits(c)


def test_weight_layout_is_row_major_fan_in_by_fan_out():
    # W = [[1, 0], [0, 1]], b = [0, 5]: logits must equal x + b.
    spec = ModelSpec("logistic", 2, 2)
    params = ParamVector([1.0, 0.0, 0.0, 1.0, 0.0, 5.0])
    batch = Batch(np.array([[3.0, -1.0]]), np.array([1]))
    loss, _ = loss_and_grad(spec, params, batch)
    # logits = [3, 4]; loss = -log softmax_1 = log(1 + e^(3-4))
    assert loss == pytest.approx(math.log(1.0 + math.exp(-1.0)), rel=1e-12)
    _, acc = evaluate(spec, params, batch)
    assert acc == 1.0


def test_zero_params_loss_is_log_num_classes():
    for spec in (LOGISTIC, MLP_RELU):
        batch = random_batch(spec, 1)
        loss, _ = loss_and_grad(spec, ParamVector.zeros(spec.param_count), batch)
        assert loss == pytest.approx(math.log(spec.num_classes), rel=1e-14)


def test_logistic_gradient_matches_hand_derivation():
    # One sample, d=1, K=2: dW = x * (p - onehot), db = p - onehot.
    spec = ModelSpec("logistic", 1, 2)
    w00, w01, b0, b1 = 0.3, -0.2, 0.1, 0.05
    x, y = 2.0, 1
    z0, z1 = w00 * x + b0, w01 * x + b1
    e0, e1 = math.exp(z0), math.exp(z1)
    p0, p1 = e0 / (e0 + e1), e1 / (e0 + e1)
    expected_loss = -math.log(p1)
    expected_grad = [x * p0, x * (p1 - 1.0), p0, p1 - 1.0]

    params = ParamVector([w00, w01, b0, b1])
    loss, grad = loss_and_grad(spec, params, Batch(np.array([[x]]), np.array([y])))
    assert loss == pytest.approx(expected_loss, rel=1e-12)
    npt.assert_allclose(grad.values, expected_grad, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("spec", [LOGISTIC, MLP_RELU, MLP_TANH], ids=lambda s: s.kind + (s.activation or ""))
def test_gradient_matches_finite_differences(spec):
    params = init_params(spec, 3)
    batch = random_batch(spec, 4)
    _, grad = loss_and_grad(spec, params, batch)
    fd = finite_diff_grad(spec, params, batch)
    scale = np.maximum(np.abs(fd.values), 1e-8)
    assert float(np.max(np.abs(grad.values - fd.values) / scale)) < 1e-6


def test_finite_diff_step_validation():
    with pytest.raises(ValueError):
        finite_diff_grad(LOGISTIC, ParamVector.zeros(LOGISTIC.param_count), random_batch(LOGISTIC, 0), h=0.0)


def test_mean_semantics_duplication_invariance():
    # Duplicating every sample must not change mean loss or gradient.
    spec = LOGISTIC
    params = init_params(spec, 5)
    batch = random_batch(spec, 6, n=8)
    doubled = Batch(
        np.vstack([batch.features, batch.features]),
        np.concatenate([batch.labels, batch.labels]),
    )
    loss1, grad1 = loss_and_grad(spec, params, batch)
    loss2, grad2 = loss_and_grad(spec, params, doubled)
    assert loss2 == pytest.approx(loss1, rel=1e-12)
    npt.assert_allclose(grad2.values, grad1.values, atol=1e-12)


def test_permutation_invariance():
    spec = MLP_TANH
    params = init_params(spec, 7)
    batch = random_batch(spec, 8, n=10)
    perm = np.random.default_rng(9).permutation(10)
    shuffled = Batch(batch.features[perm], batch.labels[perm])
    loss1, grad1 = loss_and_grad(spec, params, batch)
    loss2, grad2 = loss_and_grad(spec, params, shuffled)
    assert loss2 == pytest.approx(loss1, rel=1e-12)
    npt.assert_allclose(grad2.values, grad1.values, atol=1e-12)


def test_large_logits_stay_finite():
    spec = ModelSpec("logistic", 2, 2)
    params = ParamVector([500.0, -500.0, 0.0, 0.0, 0.0, 0.0])
    batch = Batch(np.array([[2.0, 2.0]]), np.array([1]))
    loss, grad = loss_and_grad(spec, params, batch)
    assert math.isfinite(loss)
    assert np.all(np.isfinite(grad.values))


def test_evaluate_argmax_ties_pick_lowest_class():
    spec = ModelSpec("logistic", 2, 3)
    params = ParamVector.zeros(spec.param_count)  # all logits equal
    batch = Batch(np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]]), np.array([0, 1, 0]))
    loss, acc = evaluate(spec, params, batch)
    assert acc == pytest.approx(2.0 / 3.0)
    assert loss == pytest.approx(math.log(3), rel=1e-14)


def test_evaluate_perfect_and_chance():
    spec = ModelSpec("logistic", 2, 2)
    perfect = ParamVector([10.0, -10.0, -10.0, 10.0, 0.0, 0.0])
    batch = Batch(np.array([[1.0, -1.0], [-1.0, 1.0]]), np.array([0, 1]))
    _, acc = evaluate(spec, perfect, batch)
    assert acc == 1.0
    flipped = ParamVector([-10.0, 10.0, 10.0, -10.0, 0.0, 0.0])
    _, acc0 = evaluate(spec, flipped, batch)
    assert acc0 == 0.0


def test_label_and_shape_validation():
    params = ParamVector.zeros(LOGISTIC.param_count)
    with pytest.raises(ValueError):
        loss_and_grad(LOGISTIC, params, Batch(np.zeros((2, 5)), np.array([0, 3])))
    with pytest.raises(ValueError):
        loss_and_grad(LOGISTIC, params, Batch(np.zeros((2, 4)), np.array([0, 1])))
    with pytest.raises(ValueError):
        loss_and_grad(LOGISTIC, ParamVector.zeros(7), random_batch(LOGISTIC, 0))


def test_batch_validation():
    with pytest.raises(ValueError):
        Batch(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        Batch(np.array([[np.nan, 1.0]]), np.array([0]))
    with pytest.raises(ValueError):
        Batch(np.zeros((2, 2)), np.array([0.5, 1.0]))
    with pytest.raises(ValueError):
        Batch(np.zeros((2, 2)), np.array([-1, 0]))
    with pytest.raises(ValueError):
        Batch(np.zeros(4), np.array([0]))


def test_activations_differ():
    params = init_params(MLP_RELU, 11)
    batch = random_batch(MLP_RELU, 12)
    loss_r, _ = loss_and_grad(MLP_RELU, params, batch)
    loss_t, _ = loss_and_grad(MLP_TANH, params, batch)
    assert loss_r != loss_t


def test_mean_loss_matches_loss_and_grad():
    params = init_params(MLP_TANH, 13)
    batch = random_batch(MLP_TANH, 14)
    assert mean_loss(MLP_TANH, params, batch) == loss_and_grad(MLP_TANH, params, batch)[0]
