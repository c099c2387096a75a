"""Diffusion math: schedules, forward closed form, reverse steps, sampling."""

import numpy as np
import pytest

from floodsr.diffusion import (
    NoiseSchedule,
    SamplerConfig,
    linear_schedule,
    p_sample_step,
    q_sample,
    sample,
    scaled_linear_schedule,
    strided_schedule,
    training_loss,
    truncated_start,
)
from floodsr.errors import ContractError, DimensionError


class OracleEpsModel:
    """Recovers the exact forward noise from a known clean map."""

    def __init__(self, x0, sched):
        self.x0 = np.asarray(x0, dtype=np.float32)
        self.sched = sched

    def predict(self, x_t, cond, t):
        g = self.sched.gamma_at(int(t))
        return ((x_t - np.sqrt(g) * self.x0) / np.sqrt(1.0 - g)).astype(np.float32)

    def predict_tensor(self, x_t, cond, t):
        from floodsr.nn import Tensor

        t = np.atleast_1d(t)
        g = self.sched.gamma[t].reshape((-1,) + (1,) * (x_t.data.ndim - 1))
        return Tensor(
            ((x_t.data - np.sqrt(g) * self.x0) / np.sqrt(1.0 - g)).astype(np.float32)
        )


class ZeroModel:
    def predict(self, x_t, cond, t):
        return np.zeros_like(x_t)

    def predict_tensor(self, x_t, cond, t):
        from floodsr.nn import Tensor

        return Tensor(np.zeros_like(x_t.data))


# ---- schedules ---------------------------------------------------------------


def test_single_step_schedule():
    sched = linear_schedule(1, 0.3, 0.3)
    assert sched.T == 1
    assert sched.gamma_at(1) == pytest.approx(0.7)
    assert sched.gamma_at(0) == 1.0


def test_gamma_strictly_decreasing():
    sched = linear_schedule(500)
    assert (np.diff(sched.gamma) < 0).all()


def test_gamma_golden_value_default_schedule():
    # frozen output of an explicit 64-bit running-product loop
    sched = linear_schedule(1000, 1e-4, 0.02)
    assert sched.gamma_at(1000) == pytest.approx(4.035829765375676e-05, rel=1e-12)


def test_gamma_matches_bruteforce_product():
    sched = linear_schedule(137, 2e-4, 0.05)
    g = 1.0
    for t in range(1, 138):
        g *= 1.0 - sched.alpha_at(t)
        assert sched.gamma_at(t) == pytest.approx(g, rel=1e-14)


def test_gamma_recurrence_exact():
    sched = linear_schedule(1000)
    for t in range(1, 1001):
        assert sched.gamma[t] == sched.gamma[t - 1] * (1.0 - sched.alpha[t - 1])


def test_scaled_schedule_preserves_tail():
    short = scaled_linear_schedule(200)
    # frozen brute-force product for the scaled 200-step endpoints
    assert short.gamma_at(200) == pytest.approx(3.0318371672319075e-05, rel=1e-12)


def test_schedule_bounds_checked():
    with pytest.raises(ContractError):
        linear_schedule(10, 0.0, 0.5)
    with pytest.raises(ContractError):
        linear_schedule(10, 0.5, 0.2)
    with pytest.raises(ContractError):
        NoiseSchedule(alpha=np.array([0.1]), gamma=np.array([0.9, 0.8]))


# ---- forward closed form -----------------------------------------------------


def test_q_sample_zero_noise():
    sched = linear_schedule(100)
    x0 = np.full((2, 1, 4, 4), 0.8, np.float32)
    out = q_sample(x0, 40, np.zeros_like(x0), sched)
    np.testing.assert_allclose(out, np.sqrt(sched.gamma_at(40)) * x0, rtol=1e-6)


def test_q_sample_deep_tail_is_noise():
    sched = linear_schedule(1000)
    rng = np.random.default_rng(0)
    x0 = np.full((1, 1, 8, 8), 0.5, np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    out = q_sample(x0, 1000, eps, sched)
    np.testing.assert_allclose(out, eps, atol=2e-2)


def test_q_sample_shape_mismatch():
    sched = linear_schedule(10)
    with pytest.raises(DimensionError):
        q_sample(np.zeros((1, 1, 4, 4)), 5, np.zeros((1, 1, 4, 5)), sched)


def test_q_sample_monte_carlo_moments():
    # sample mean within 4 standard errors, variance within 5%, at N = 1e5
    sched = linear_schedule(1000)
    rng = np.random.default_rng(42)
    n = 100_000
    for t in (50, 500, 1000):
        g = sched.gamma_at(t)
        eps = rng.standard_normal(n)
        xs = q_sample(np.ones(n), t, eps, sched)
        se = np.sqrt((1.0 - g) / n)
        assert abs(xs.mean() - np.sqrt(g)) < 4 * se
        assert abs(xs.var() - (1.0 - g)) / (1.0 - g) < 0.05


def test_marginal_matches_composed_single_steps():
    # walking the per-step kernel must land on the closed-form marginal
    sched = linear_schedule(30, 0.01, 0.08)
    rng = np.random.default_rng(7)
    n = 100_000
    x = np.full(n, 1.0)
    for t in range(1, 31):
        a = sched.alpha_at(t)
        x = np.sqrt(1.0 - a) * x + np.sqrt(a) * rng.standard_normal(n)
    g = sched.gamma_at(30)
    se_mean = np.sqrt((1.0 - g) / n)
    assert abs(x.mean() - np.sqrt(g)) < 4 * se_mean
    se_var = (1.0 - g) * np.sqrt(2.0 / n)
    assert abs(x.var() - (1.0 - g)) < 4 * se_var


# ---- training loss -----------------------------------------------------------


def test_training_loss_oracle_is_zero():
    sched = linear_schedule(100)
    rng = np.random.default_rng(1)
    fine = rng.uniform(0, 1, (8, 1, 8, 8)).astype(np.float32)
    cond = rng.uniform(0, 1, (8, 2, 8, 8)).astype(np.float32)
    loss = training_loss(OracleEpsModel(fine, sched), fine, cond, sched, rng)
    assert loss.item() < 1e-9


def test_training_loss_zero_model_near_one():
    # E[eps^2] = 1; a large batch pins the chi-square mean down tightly
    sched = linear_schedule(100)
    rng = np.random.default_rng(2)
    fine = np.zeros((64, 1, 16, 16), np.float32)
    cond = np.zeros((64, 2, 16, 16), np.float32)
    loss = training_loss(ZeroModel(), fine, cond, sched, rng)
    assert abs(loss.item() - 1.0) < 0.05


def test_training_loss_finite_nonnegative():
    sched = linear_schedule(50)
    rng = np.random.default_rng(3)
    fine = rng.uniform(0, 1, (4, 1, 8, 8)).astype(np.float32)
    cond = rng.uniform(0, 1, (4, 2, 8, 8)).astype(np.float32)
    loss = training_loss(ZeroModel(), fine, cond, sched, rng)
    assert np.isfinite(loss.item()) and loss.item() >= 0.0


# ---- reverse steps -----------------------------------------------------------


def test_p_sample_final_step_deterministic():
    sched = linear_schedule(100)
    x1 = np.full((1, 1, 4, 4), 0.3, np.float32)
    model = OracleEpsModel(np.full_like(x1, 0.6), sched)
    a = p_sample_step(model, x1, 1, None, sched, np.random.default_rng(1))
    b = p_sample_step(model, x1, 1, None, sched, np.random.default_rng(999))
    np.testing.assert_array_equal(a, b)


def test_p_sample_shape_contract_and_range():
    sched = linear_schedule(100)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 1, 6, 6)).astype(np.float32)
    model = OracleEpsModel(np.zeros_like(x), sched)
    for t in (1, 37, 100):
        out = p_sample_step(model, x, t, None, sched, rng)
        assert out.shape == x.shape
    with pytest.raises(ContractError):
        p_sample_step(model, x, 0, None, sched, rng)
    with pytest.raises(ContractError):
        p_sample_step(model, x, 101, None, sched, rng)


def test_p_sample_posterior_mean_one_pixel():
    # with an oracle noise model the step mean must equal the closed-form
    # posterior mean (gamma_prev-weighted mix of x0 and x_t)
    sched = linear_schedule(50, 0.01, 0.2)
    x0 = 0.7
    t = 20
    g_t = sched.gamma_at(t)
    g_p = sched.gamma_at(t - 1)
    a_t = sched.alpha_at(t)
    x_t = 0.3
    model = OracleEpsModel(np.full((1, 1, 1, 1), x0, np.float32), sched)
    draws = np.array(
        [
            p_sample_step(
                model,
                np.full((1, 1, 1, 1), x_t, np.float32),
                t,
                None,
                sched,
                np.random.default_rng(i),
            ).item()
            for i in range(4000)
        ]
    )
    posterior_mean = (
        np.sqrt(g_p) * a_t * x0 + np.sqrt(1.0 - a_t) * (1.0 - g_p) * x_t
    ) / (1.0 - g_t)
    sigma = np.sqrt(a_t * (1.0 - g_p) / (1.0 - g_t))
    assert abs(draws.mean() - posterior_mean) < 4 * sigma / np.sqrt(len(draws))
    assert abs(draws.std() - sigma) / sigma < 0.05


# ---- truncated starts --------------------------------------------------------


def test_truncated_start_zero_is_identity():
    sched = linear_schedule(100)
    x = np.random.default_rng(5).uniform(0, 1, (1, 1, 8, 8)).astype(np.float32)
    out = truncated_start(x, 0, sched, np.random.default_rng(6))
    np.testing.assert_array_equal(out, x)


def test_truncated_start_full_depth_is_noise():
    sched = linear_schedule(1000)
    assert sched.gamma_at(1000) < 1e-4
    x = np.full((1, 1, 128, 128), 0.8, np.float32)
    out = truncated_start(x, 1000, sched, np.random.default_rng(7))
    n = out.size
    assert abs(out.mean()) < 4 / np.sqrt(n)
    assert abs(out.var() - 1.0) < 4 * np.sqrt(2.0 / n)


def test_truncated_start_deterministic():
    sched = linear_schedule(100)
    x = np.random.default_rng(8).uniform(0, 1, (1, 1, 8, 8)).astype(np.float32)
    a = truncated_start(x, 50, sched, np.random.default_rng(9))
    b = truncated_start(x, 50, sched, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_truncation_consistency_with_pure_noise():
    # first two moments of truncated_start(x, T) match pure noise (4 SE)
    sched = linear_schedule(1000)
    n = 100_000
    x = np.full(n, 0.9)
    noised = truncated_start(x, 1000, sched, np.random.default_rng(10))
    pure = np.random.default_rng(11).standard_normal(n)
    se_mean = np.sqrt(2.0 / n)  # difference of two unit-variance means
    assert abs(noised.mean() - pure.mean()) < 4 * se_mean
    se_var = np.sqrt(2.0 / n) * 2
    assert abs(noised.var() - pure.var()) < 4 * se_var


# ---- strided schedules -------------------------------------------------------


def test_strided_identity():
    assert strided_schedule(100, 10, 10) == list(range(10, 0, -1))


def test_strided_single_jump():
    assert strided_schedule(100, 1, 73) == [73]


def test_strided_even_spacing():
    ts = strided_schedule(1000, 50, 1000)
    assert len(ts) == 50
    assert ts[0] == 1000 and ts[-1] == 1
    gaps = -np.diff(ts)
    assert (gaps > 0).all()
    assert gaps.max() - gaps.min() <= 1


def test_strided_rejects_oversampling():
    with pytest.raises(ContractError):
        strided_schedule(100, 20, 10)


# ---- end-to-end sampler ------------------------------------------------------


def _toy_setup(seed=0):
    sched = linear_schedule(60, 0.002, 0.15)
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.2, 0.8, (3, 1, 4, 4)).astype(np.float32)
    cond = np.concatenate([x0, np.zeros_like(x0)], axis=1)
    return sched, x0, cond


def test_sample_full_matches_manual_ancestral_loop():
    sched, x0, cond = _toy_setup()
    model = OracleEpsModel(x0, sched)
    cfg = SamplerConfig(start="random_noise", infer_steps=sched.T, seed=123)
    got = sample(model, cond, sched, cfg)
    rng = np.random.default_rng(123)
    x = rng.standard_normal((3, 1, 4, 4)).astype(np.float32)
    for t in range(sched.T, 0, -1):
        x = p_sample_step(model, x, t, cond, sched, rng)
    np.testing.assert_array_equal(got, x)


def test_sample_m0_passthrough():
    sched, x0, cond = _toy_setup()
    cfg = SamplerConfig(start="truncated", m=0, infer_steps=1, seed=0)
    out = sample(ZeroModel(), cond, sched, cfg)
    np.testing.assert_array_equal(out, cond[:, :1])


def test_sample_deterministic_per_seed():
    sched, x0, cond = _toy_setup()
    model = OracleEpsModel(x0, sched)
    cfg = SamplerConfig(start="truncated", m=30, infer_steps=10, seed=7)
    a = sample(model, cond, sched, cfg)
    b = sample(model, cond, sched, cfg)
    np.testing.assert_array_equal(a, b)


def test_truncated_sampling_tracks_full_sampling():
    # one-pixel oracle: a short truncated run stays within 5% of the
    # full-run output mean
    sched = linear_schedule(200, 0.001, 0.06)
    x0 = np.full((1, 1, 1, 1), 0.6, np.float32)
    cond = np.concatenate([x0, np.zeros_like(x0)], axis=1)
    model = OracleEpsModel(x0, sched)
    full = np.array(
        [
            sample(
                model, cond, sched,
                SamplerConfig(start="random_noise", infer_steps=200, seed=s),
            ).item()
            for s in range(200)
        ]
    )
    trunc = np.array(
        [
            sample(
                model, cond, sched,
                SamplerConfig(start="truncated", m=20, infer_steps=20, seed=s),
            ).item()
            for s in range(200)
        ]
    )
    assert abs(trunc.mean() - full.mean()) / abs(full.mean()) < 0.05
