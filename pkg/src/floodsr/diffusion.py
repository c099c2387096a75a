"""Denoising diffusion: schedules, forward corruption, training loss and
ancestral reverse sampling, including truncated starts from the upsampled
coarse-grid map and strided inference schedules decoupled from training.

Notation: alpha_t is the per-step noise variance increment and
gamma_t = prod_{s<=t}(1 - alpha_s) the cumulative signal retention, with
gamma_0 = 1. The forward marginal of a clean map x0 at step t is
N(sqrt(gamma_t) x0, (1 - gamma_t) I); samplers invert it one (possibly
strided) step at a time with the noise-prediction parameterization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from .nn import Tensor, mse, no_grad


@dataclass
class NoiseSchedule:
    """Per-step variance increments and their running retention products.

    alpha[t-1] holds alpha_t for t = 1..T; gamma[t] holds gamma_t for
    t = 0..T with gamma[0] = 1. Both are float64: the retention product
    underflows float32 long before the schedule tail.
    """

    alpha: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if len(self.gamma) != len(self.alpha) + 1:
            raise ContractError("gamma must have one more entry than alpha")
        if self.gamma[0] != 1.0:
            raise ContractError("gamma_0 must be 1")
        if not ((self.alpha > 0) & (self.alpha < 1)).all():
            raise ContractError("alpha_t must lie strictly inside (0, 1)")
        if not (np.diff(self.gamma) < 0).all():
            raise ContractError("gamma must be strictly decreasing")

    @property
    def T(self):
        return len(self.alpha)

    def alpha_at(self, t):
        self._check_t(t)
        return float(self.alpha[t - 1])

    def gamma_at(self, t):
        if not 0 <= t <= self.T:
            raise ContractError(f"timestep {t} outside [0, {self.T}]")
        return float(self.gamma[t])

    def _check_t(self, t):
        if not 1 <= t <= self.T:
            raise ContractError(f"timestep {t} outside [1, {self.T}]")

    def to_dict(self):
        return {"T": self.T, "alpha": self.alpha.tolist()}

    @classmethod
    def from_alpha(cls, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        gamma = np.concatenate([[1.0], np.cumprod(1.0 - alpha)])
        return cls(alpha=alpha, gamma=gamma)


def linear_schedule(T, alpha_start=1e-4, alpha_end=0.02):
    """Variance increments interpolated linearly from t=1 to t=T."""
    if T < 1:
        raise ContractError("T must be >= 1")
    if not 0.0 < alpha_start <= alpha_end < 1.0:
        raise ContractError("need 0 < alpha_start <= alpha_end < 1")
    alpha = np.linspace(alpha_start, alpha_end, T, dtype=np.float64)
    return NoiseSchedule.from_alpha(alpha)


def scaled_linear_schedule(T, base_T=1000, base_start=1e-4, base_end=0.02):
    """A T-step schedule whose endpoints are scaled to keep the final
    retention close to the base_T-step reference schedule."""
    factor = base_T / T
    return linear_schedule(T, base_start * factor, base_end * factor)


@dataclass
class SamplerConfig:
    """How to run the reverse process.

    start: "random_noise" (begin at t=T from pure noise) or "truncated"
    (begin at t=m from a noised copy of the upsampled coarse-grid map).
    m is ignored for random-noise starts. m = 0 degenerates to returning
    the conditioning map untouched.
    """

    start: str = "random_noise"
    m: int = 0
    infer_steps: int = 0
    seed: int = 0

    def validate(self, T):
        if self.start not in ("random_noise", "truncated"):
            raise ContractError(f"unknown start mode {self.start!r}")
        if self.start == "truncated" and not 0 <= self.m <= T:
            raise ContractError(f"m={self.m} outside [0, {T}]")
        start_at = T if self.start == "random_noise" else self.m
        if start_at > 0 and not 1 <= self.infer_steps <= start_at:
            raise ContractError(
                f"infer_steps={self.infer_steps} outside [1, {start_at}]"
            )


def q_sample(x0, t, eps, sched):
    """Forward closed form: sqrt(gamma_t) x0 + sqrt(1-gamma_t) eps.

    t may be a scalar or a per-sample integer array matching x0's batch.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise DimensionError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    if np.isscalar(t) or np.ndim(t) == 0:
        sched._check_t(int(t))
        g = sched.gamma[int(t)]
        return (np.sqrt(g) * x0 + np.sqrt(1.0 - g) * eps).astype(x0.dtype)
    t = np.asarray(t)
    if t.ndim != 1 or t.shape[0] != x0.shape[0]:
        raise DimensionError("per-sample t must be a vector matching the batch")
    if ((t < 1) | (t > sched.T)).any():
        raise ContractError("timesteps outside [1, T]")
    g = sched.gamma[t].reshape((-1,) + (1,) * (x0.ndim - 1))
    return (np.sqrt(g) * x0 + np.sqrt(1.0 - g) * eps).astype(x0.dtype)


def training_loss(model, fine, cond, sched, rng):
    """Noise-prediction loss on one batch.

    Draws a timestep per sample uniformly from [1, T] and unit Gaussian
    noise, corrupts the fine maps with the forward closed form, and
    returns the autograd scalar mean((model(x_t, cond, t) - eps)^2).
    """
    fine = np.asarray(fine, dtype=np.float32)
    cond = np.asarray(cond, dtype=np.float32)
    if fine.shape[0] != cond.shape[0] or fine.shape[2:] != cond.shape[2:]:
        raise DimensionError("fine and conditioning batches must be aligned")
    n = fine.shape[0]
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(fine.shape).astype(np.float32)
    x_t = q_sample(fine, t, eps, sched)
    pred = model.predict_tensor(Tensor(x_t), Tensor(cond), t)
    loss = mse(pred, Tensor(eps))
    if not np.isfinite(loss.data).all():
        raise NumericError("training loss is not finite")
    return loss


def _reverse_step(x_t, eps_hat, gamma_t, gamma_prev, rng):
    """Shared reverse-update arithmetic for unit and strided steps.

    The effective increment for the jump is alpha = 1 - gamma_t/gamma_prev;
    the injected variance is the posterior variance
    alpha * (1 - gamma_prev) / (1 - gamma_t), which vanishes when
    gamma_prev = 1 (the final step), making it deterministic.
    """
    alpha = 1.0 - gamma_t / gamma_prev
    mean = (x_t - (alpha / np.sqrt(1.0 - gamma_t)) * eps_hat) / np.sqrt(1.0 - alpha)
    var = alpha * (1.0 - gamma_prev) / (1.0 - gamma_t)
    if var > 0:
        z = rng.standard_normal(x_t.shape)
        mean = mean + np.sqrt(var) * z
    return mean.astype(x_t.dtype)


def p_sample_step(model, x_t, t, cond, sched, rng):
    """One ancestral reverse step from t to t-1."""
    sched._check_t(int(t))
    x_t = np.asarray(x_t)
    with no_grad():
        eps_hat = model.predict(x_t, cond, int(t))
    return _reverse_step(
        x_t, eps_hat, sched.gamma_at(int(t)), sched.gamma_at(int(t) - 1), rng
    )


def truncated_start(cg_upsampled, m, sched, rng):
    """Noise the (normalized) upsampled coarse map to timestep m.

    m = 0 returns the map unchanged, skipping all denoising.
    """
    cg_upsampled = np.asarray(cg_upsampled)
    if not 0 <= m <= sched.T:
        raise ContractError(f"m={m} outside [0, {sched.T}]")
    if m == 0:
        return cg_upsampled.copy()
    eps = rng.standard_normal(cg_upsampled.shape).astype(cg_upsampled.dtype)
    return q_sample(cg_upsampled, m, eps, sched)


def strided_schedule(T, infer_steps, m):
    """infer_steps timesteps evenly spaced from m down to 1, inclusive."""
    if not 1 <= m <= T:
        raise ContractError(f"m={m} outside [1, {T}]")
    if not 1 <= infer_steps <= m:
        raise ContractError(f"infer_steps={infer_steps} outside [1, m={m}]")
    if infer_steps == 1:
        return [m]
    raw = np.linspace(m, 1, infer_steps)
    # floor(x + 0.5) keeps the sequence strictly decreasing; numpy rint's
    # round-half-even can collapse adjacent values when the stride is small
    ts = np.floor(raw + 0.5).astype(int)
    ts[0], ts[-1] = m, 1
    return [int(t) for t in ts]


def sample(model, cond, sched, cfg, norm=None, cg_channel=0, target_channels=1):
    """Run the reverse process and return the predicted clean map.

    cond: [N, C, H, W] conditioning batch whose channels starting at
    ``cg_channel`` hold the normalized upsampled coarse-grid map (one
    channel in pixel space, the encoded latent in latent space); they seed
    truncated starts and the m = 0 passthrough. Returns a float32 array
    with ``target_channels`` channels; when ``norm`` is given the result
    is mapped back to depths in cm, otherwise it stays in model space.
    """
    cond = np.asarray(cond, dtype=np.float32)
    if cond.ndim != 4:
        raise DimensionError("cond must be [N, C, H, W]")
    cfg.validate(sched.T)
    rng = np.random.default_rng(cfg.seed)
    cg = cond[:, cg_channel : cg_channel + target_channels]

    if cfg.start == "random_noise":
        m = sched.T
        x = rng.standard_normal(cg.shape).astype(np.float32)
    else:
        m = cfg.m
        if m == 0:
            return _finish(cg, norm)
        x = truncated_start(cg, m, sched, rng)

    ts = strided_schedule(sched.T, cfg.infer_steps, m)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        with no_grad():
            eps_hat = model.predict(x, cond, t)
        x = _reverse_step(x, eps_hat, sched.gamma_at(t), sched.gamma_at(t_prev), rng)
    return _finish(x, norm)


def _finish(x, norm):
    x = np.asarray(x, dtype=np.float32)
    if norm is None:
        return x
    return norm.denormalize(x)
