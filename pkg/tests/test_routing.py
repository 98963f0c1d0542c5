import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.strategies import integers

from core.errors import InvalidInput
from core.routing import (
    GateConfig,
    RouterState,
    balance_backward,
    balance_loss,
    balance_loss_from_batch,
    dense_gate,
    estimate_moments,
    gate_backward,
    gaussian_logits,
    load_fractions,
    softmax,
    theoretical_moments,
    topk_gate,
    topk_weights,
)


def test_gate_config_validation():
    with pytest.raises(InvalidInput):
        GateConfig(0, 1)
    with pytest.raises(InvalidInput):
        GateConfig(4, 5)
    with pytest.raises(InvalidInput):
        GateConfig(4, 0)
    with pytest.raises(InvalidInput):
        GateConfig(4, 2, balance_coefficient=-1.0)


def test_dense_gate_is_softmax(rng):
    router = RouterState(rng.standard_normal((5, 4)))
    x = rng.standard_normal(5)
    probs = dense_gate(router, x)
    assert probs.sum() == pytest.approx(1.0)
    assert np.allclose(probs, np.exp(x @ router.w_z) / np.exp(x @ router.w_z).sum())


def test_dense_gate_equal_logits_is_uniform():
    router = RouterState(np.zeros((3, 4)))
    assert np.allclose(dense_gate(router, np.ones(3)), 0.25)


def test_topk_gate_renormalizes_selected():
    router = RouterState(np.eye(4))
    gate = topk_gate(router, np.array([3.0, 1.0, 2.0, 0.0]), GateConfig(4, 2))
    assert list(gate.selected) == [0, 2]
    expected = np.exp([3.0, 2.0]) / np.exp([3.0, 2.0]).sum()
    assert gate.weights[0] == pytest.approx(expected[0])
    assert gate.weights[2] == pytest.approx(expected[1])
    assert gate.weights[1] == 0.0 and gate.weights[3] == 0.0
    assert gate.dense_probs.sum() == pytest.approx(1.0)


def test_topk_gate_ties_go_to_lower_index():
    router = RouterState(np.zeros((2, 4)))
    gate = topk_gate(router, np.ones(2), GateConfig(4, 2))
    assert list(gate.selected) == [0, 1]
    assert gate.weights[0] == pytest.approx(0.5)


def test_topk_gate_single_expert():
    router = RouterState(np.ones((3, 1)))
    gate = topk_gate(router, np.array([1.0, -2.0, 0.5]), GateConfig(1, 1))
    assert gate.weights[0] == 1.0


def test_topk_gate_shape_mismatch(rng):
    router = RouterState(rng.standard_normal((5, 4)))
    with pytest.raises(InvalidInput):
        topk_gate(router, np.ones(3), GateConfig(4, 2))
    with pytest.raises(InvalidInput):
        topk_gate(router, np.ones(5), GateConfig(3, 2))


@given(integers(1, 8), integers(0, 2 ** 32 - 1))
@settings(max_examples=50, deadline=None)
def test_topk_weights_sum_to_one(n_experts, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, n_experts + 1))
    logits = rng.standard_normal((10, n_experts))
    selected, weights = topk_weights(logits, k)
    assert selected.shape == (10, k)
    assert np.allclose(weights.sum(axis=1), 1.0)
    assert np.all(np.count_nonzero(weights, axis=1) <= k)


def test_topk_weights_with_k_equal_n_is_softmax(rng):
    logits = rng.standard_normal((6, 5))
    _, weights = topk_weights(logits, 5)
    assert np.allclose(weights, softmax(logits))


def test_balance_loss_perfect_balance_is_one():
    config = GateConfig(4, 2)
    assert balance_loss([5, 5, 5, 5], [0.25] * 4, config, 10) == pytest.approx(1.0)


def test_balance_loss_collapse_is_n_over_k():
    config = GateConfig(4, 1)
    assert balance_loss([10, 0, 0, 0], [1.0, 0.0, 0.0, 0.0], config, 10) == pytest.approx(4.0)


def test_balance_loss_validation():
    config = GateConfig(4, 2)
    with pytest.raises(InvalidInput):
        balance_loss([1, 1, 1, 1], [0.25] * 4, config, 0)
    with pytest.raises(InvalidInput):
        balance_loss([1, 1, 1], [0.25] * 4, config, 2)
    with pytest.raises(InvalidInput):
        balance_loss([1, 1, 1, 1], [0.25] * 4, config, 3)


def test_balance_loss_from_batch_matches_direct(rng):
    config = GateConfig(5, 2)
    logits = rng.standard_normal((32, 5))
    loss, counts, probs = balance_loss_from_batch(logits, config)
    assert counts.sum() == 64
    assert loss == pytest.approx(balance_loss(counts, probs, config, 32))


def test_load_fractions_sum_to_one():
    fractions = load_fractions(np.array([[0, 1], [0, 2], [0, 1]]), 4)
    assert np.allclose(fractions, [0.5, 2 / 6, 1 / 6, 0.0])


def test_theoretical_moments():
    assert theoretical_moments(8, 2) == pytest.approx((0.125, 0.046875))
    assert theoretical_moments(4, 4)[1] == 0.0
    assert theoretical_moments(1, 1) == (1.0, 0.0)


def test_estimated_mean_matches_identity():
    estimate = estimate_moments(GateConfig(8, 2), gaussian_logits(1.0), 200_000, seed=0, shards=2)
    assert np.max(np.abs(estimate.mean - 0.125)) < 3e-3
    assert np.min(estimate.variance) >= 0.046875 - 2e-3


def test_estimated_variance_exact_for_near_equal_logits():
    estimate = estimate_moments(GateConfig(8, 2), gaussian_logits(1e-6), 200_000, seed=1)
    assert np.max(np.abs(estimate.variance - 0.046875)) < 2e-3


def test_two_of_two_experts_have_zero_variance_for_equal_logits():
    estimate = estimate_moments(GateConfig(2, 2), gaussian_logits(1e-6), 10_000, seed=2)
    assert np.allclose(estimate.mean, 0.5)
    assert np.max(estimate.variance) < 1e-10


def test_estimate_moments_independent_of_jobs():
    config = GateConfig(4, 2)
    serial = estimate_moments(config, gaussian_logits(), 20_000, seed=9, shards=4, jobs=1, chunk_size=3000)
    parallel = estimate_moments(config, gaussian_logits(), 20_000, seed=9, shards=4, jobs=3, chunk_size=3000)
    assert np.array_equal(serial.mean, parallel.mean)
    assert np.array_equal(serial.variance, parallel.variance)


def test_logit_sampler_survives_pickling():
    sampler = pickle.loads(pickle.dumps(gaussian_logits(0.5)))
    first = sampler(np.random.default_rng(3), 4, 8)
    second = gaussian_logits(0.5)(np.random.default_rng(3), 4, 8)
    assert np.array_equal(first, second)


def test_estimate_moments_rejects_zero_samples():
    with pytest.raises(InvalidInput):
        estimate_moments(GateConfig(2, 1), gaussian_logits(), 0, seed=0)


def test_symmetric_router_columns_are_orthogonal_with_equal_norm(rng):
    router = RouterState.initialize(16, 4, rng, mode="symmetric", std=0.02)
    gram = router.w_z.T @ router.w_z
    assert np.allclose(gram, (0.02 ** 2 * 16) * np.eye(4))


def test_symmetric_router_falls_back_when_too_few_inputs(rng):
    router = RouterState.initialize(2, 4, rng, mode="symmetric")
    assert router.w_z.shape == (2, 4)
    with pytest.raises(InvalidInput):
        RouterState.initialize(2, 4, rng, mode="sparse")


def test_gate_backward_matches_finite_differences(rng):
    logits = rng.standard_normal(5)
    contributions = rng.standard_normal(5)
    selected, weights = topk_weights(logits, 3)
    grad = gate_backward(weights, contributions)
    eps = 1e-6
    for j in range(5):
        step = np.zeros(5)
        step[j] = eps
        upper = topk_weights(logits + step, 3)[1] @ contributions
        lower = topk_weights(logits - step, 3)[1] @ contributions
        assert grad[j] == pytest.approx((upper - lower) / (2 * eps), abs=1e-8)
    assert np.all(grad[weights == 0] == 0.0)


def test_balance_backward_matches_finite_differences(rng):
    config = GateConfig(4, 2)
    logits = rng.standard_normal((6, 4))
    selected, _ = topk_weights(logits, 2)
    loss, grad = balance_backward(logits, selected, config)
    assert loss == pytest.approx(balance_loss_from_batch(logits, config)[0])
    eps = 1e-6
    for index in np.ndindex(logits.shape):
        step = np.zeros_like(logits)
        step[index] = eps
        upper = balance_backward(logits + step, selected, config)[0]
        lower = balance_backward(logits - step, selected, config)[0]
        assert grad[index] == pytest.approx((upper - lower) / (2 * eps), abs=1e-8)
