import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiergate import tensor as T
from hiergate.policy import (LOGIT_CLAMP, PolicyDistribution, advance_curriculum, curriculum_frontier,
                             default_cadence, expected_plan, export_policy, policy_csv,
                             relaxed_policy_weights, sample_plan, task_weights)

from conftest import N_INSTANCES, check_gradients


def full_policy(L=4, K=2, always_on=None, logits=None):
    dist = PolicyDistribution(L, K, always_on, logits)
    dist.set_frontier(dist.max_frontier)
    if logits is not None:
        dist.logits.data = np.asarray(logits, dtype=float)
    return dist


def test_initial_policy_is_pure_hard_sharing():
    dist = PolicyDistribution(5, 3)
    assert dist.frontier == 0
    assert np.array_equal(dist.alpha(), np.ones((5, 3)))


@pytest.mark.parametrize(("epoch", "cadence", "expected"), [(12, 5, 2), (0, 5, 0), (4, 5, 0), (5, 5, 1), (1000, 5, 4)])
def test_curriculum_frontier(epoch, cadence, expected):
    assert curriculum_frontier(epoch, cadence, 4) == expected


def test_frontier_grows_from_last_block():
    dist = PolicyDistribution(5, 2, always_on=[True, False, False, False, False])
    advance_curriculum(dist, 12, 5)
    assert dist.learnable_blocks().tolist() == [False, False, False, True, True]
    advance_curriculum(dist, 100, 5)
    assert dist.frontier == 4  # always-on block never becomes learnable
    assert dist.learnable_blocks().tolist() == [False, True, True, True, True]


def test_entering_blocks_start_unbiased():
    dist = PolicyDistribution(3, 2, logits=np.full((3, 2, 2), [0.0, 3.0]))
    dist.set_frontier(1)
    np.testing.assert_array_equal(dist.alpha()[2], [0.5, 0.5])
    np.testing.assert_array_equal(dist.alpha()[:2], np.ones((2, 2)))


def test_frontier_change_keeps_trained_logits():
    dist = full_policy(3, 1)
    dist.set_frontier(1)
    dist.logits.data = dist.logits.data + 2.0 * np.array([0, 1])
    before = dist.logits.data[2].copy()
    dist.set_frontier(2)
    np.testing.assert_array_equal(dist.logits.data[2], before)


@pytest.mark.parametrize(("P", "B", "c"), [(30, 4, 6), (10, 4, 2), (3, 4, 1), (0, 2, 1)])
def test_default_cadence(P, B, c):
    assert default_cadence(P, B) == c


def test_alpha_matches_logits():
    rng = np.random.default_rng(0)
    dist = full_policy(4, 3, logits=rng.normal(size=(4, 3, 2)))
    z = dist.logits.data
    manual = np.exp(z[..., 1]) / np.exp(z).sum(-1)
    np.testing.assert_allclose(dist.alpha(), manual, atol=1e-12)
    np.testing.assert_allclose(dist.alpha_tensor().data, manual, atol=1e-12)


def test_clamp_keeps_alpha_strictly_inside():
    dist = full_policy(2, 2, logits=np.full((2, 2, 2), [-500.0, 500.0]))
    dist.clamp()
    gap = dist.logits.data[..., 1] - dist.logits.data[..., 0]
    assert np.all(np.abs(gap) <= LOGIT_CLAMP + 1e-9)
    a = dist.alpha()
    assert np.all((a > 0) & (a < 1))


def test_relaxed_weight_near_one_for_confident_alpha():
    z = np.log(0.999 / 0.001)
    dist = full_policy(1, 1, logits=[[[0.0, z]]])
    rng = np.random.default_rng(1)
    draws = [relaxed_policy_weights(dist, 0.5, rng).data[0, 0, 1] for _ in range(10_000)]
    assert np.mean(draws) > 0.99


def test_relaxed_weight_half_for_symmetric_logits_without_noise():
    dist = full_policy(2, 2)
    w = relaxed_policy_weights(dist, 0.7, None)
    np.testing.assert_array_equal(w.data[..., 1], np.full((2, 2), 0.5))


def test_pinned_blocks_weight_one_and_no_gradient():
    dist = PolicyDistribution(4, 2, always_on=[True, False, False, False])
    dist.set_frontier(2)
    w = relaxed_policy_weights(dist, 1.0, np.random.default_rng(0))
    np.testing.assert_array_equal(w.data[:2, :, 1], np.ones((2, 2)))
    cols = task_weights(w, dist, 0)
    assert cols[0] == 1 and cols[1] == 1 and isinstance(cols[3], T.Tensor)
    T.sum_(T.mul(w[:, :, 1], T.Tensor(np.arange(8.0).reshape(4, 2) + 1))).backward()
    g = dist.logits.grad
    assert not np.any(g[:2])
    assert np.all(np.abs(g[2:]).sum(-1) > 0)


def test_sparsity_gradient_only_reaches_learnable_logits():
    from hiergate.losses import sparsity_loss
    dist = PolicyDistribution(3, 2)
    dist.set_frontier(1)
    sparsity_loss(dist.alpha_tensor(), dist.learnable_mask()).backward()
    g = dist.logits.grad
    assert not np.any(g[:2]) and np.all(g[2, :, 1] != 0)


def test_relaxed_policy_gradient():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(N_INSTANCES):
        logits = rng.normal(size=(3, 2, 2))
        c = rng.normal(size=(3, 2))
        dist = full_policy(3, 2)
        noise_rng_seed = int(rng.integers(1 << 30))

        def build(z):
            dist.logits = z
            w = relaxed_policy_weights(dist, 0.8, np.random.default_rng(noise_rng_seed))
            return T.sum_(T.mul(w[:, :, 1], T.Tensor(c)))
        worst = max(worst, check_gradients(build, [logits]))
    assert worst < 1e-3


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_clamp_bounds_alpha_for_any_logits(z0, z1):
    dist = full_policy(1, 1, logits=[[[z0, z1]]])
    dist.clamp()
    a = dist.alpha()[0, 0]
    assert 0 < a < 1


def test_sample_plan_saturated_alpha_gives_all_ones():
    dist = full_policy(4, 3, logits=np.full((4, 3, 2), [-30.0, 30.0]))
    plan = sample_plan(dist, np.random.default_rng(0))
    assert np.array_equal(plan.u, np.ones((4, 3)))


def test_sample_plan_frequency_matches_alpha():
    dist = full_policy(2, 2)
    rng = np.random.default_rng(2)
    n = 10_000
    freq = sum(sample_plan(dist, rng).u for _ in range(n)) / n
    assert np.all(np.abs(freq - 0.5) < 0.015)


def test_sample_plan_frequency_three_sigma():
    a = np.array([[0.1, 0.3], [0.7, 0.95]])
    dist = full_policy(2, 2, logits=np.stack([np.zeros_like(a), np.log(a / (1 - a))], -1))
    rng = np.random.default_rng(3)
    n = 10_000
    freq = sum(sample_plan(dist, rng).u for _ in range(n)) / n
    assert np.all(np.abs(freq - a) < 3 * np.sqrt(a * (1 - a) / n))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2**31 - 1), st.integers(0, 10))
def test_sampled_plans_respect_pins(L, K, seed, frontier):
    rng = np.random.default_rng(seed)
    always_on = rng.random(L) < 0.3
    dist = PolicyDistribution(L, K, always_on, logits=np.full((L, K, 2), [5.0, -5.0]))
    dist.set_frontier(frontier)
    assert dist.frontier <= L - always_on.sum()
    plan = sample_plan(dist, rng)
    assert np.all(plan.u[dist.pinned()] == 1)
    assert np.all(plan.u[always_on] == 1)


def test_expected_plan_thresholds_at_half():
    a = np.array([[0.2, 0.5], [0.8, 0.49]])
    dist = full_policy(2, 2, logits=np.stack([np.zeros_like(a), np.log(a / (1 - a))], -1))
    assert expected_plan(dist).u.tolist() == [[0, 1], [1, 0]]


def test_clone_and_state_round_trip():
    dist = full_policy(3, 2, logits=np.random.default_rng(0).normal(size=(3, 2, 2)))
    dist.set_frontier(2)
    twin = dist.clone()
    assert twin.frontier == 2
    assert twin.logits.data.tobytes() == dist.logits.data.tobytes()
    twin.logits.data = twin.logits.data + 1
    assert not np.array_equal(twin.logits.data, dist.logits.data)


def test_export_and_csv():
    dist = PolicyDistribution(2, 2)
    doc = export_policy(dist, [expected_plan(dist)])
    assert doc["alpha"] == [[1.0, 1.0], [1.0, 1.0]] and doc["plans"] == [[[1, 1], [1, 1]]]
    text = policy_csv(dist.alpha(), ["seg", "depth"])
    assert text.splitlines() == ["block,seg,depth", "0,1.0,1.0", "1,1.0,1.0"]


def test_bad_shapes_rejected():
    with pytest.raises(T.ShapeError):
        PolicyDistribution(2, 2, logits=np.zeros((2, 2)))
    with pytest.raises(ValueError):
        PolicyDistribution(2, 2, always_on=[True])
