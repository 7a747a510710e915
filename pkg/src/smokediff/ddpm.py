"""Diffusion-chain mathematics: schedule constants, forward corruption,
posterior formulas, the training loss, condition assembly, time embedding,
and the ancestral sampler.

Indexing convention: diffusion steps run t = 1..T. alpha_bar is stored with
an extra leading slot so that alpha_bar[0] = 1, which makes the t = 1
posterior exact (mu = x0, sigma2 = 0) and lets the sampler skip noise at the
final step without a special case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from smokediff.rng import Rng


class SamplingError(RuntimeError):
    """Denoiser produced non-finite output during sampling; carries the step."""

    def __init__(self, message: str, t: int):
        super().__init__(message)
        self.t = t


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray  # (T,), beta[t-1] is the step-t variance
    alpha: np.ndarray  # (T,), 1 - beta
    alpha_bar: np.ndarray  # (T+1,), cumulative products with alpha_bar[0] = 1
    sigma2: np.ndarray  # (T+1,), posterior variances; sigma2[1] = 0

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"diffusion step t={t} outside [1, {self.T}]")
        return t


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear variance schedule from beta_start (t=1) to beta_end (t=T)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.empty(T + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(alpha)
    sigma2 = np.zeros(T + 1, dtype=np.float64)
    sigma2[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma2=sigma2)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal: sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps."""
    t = sched.check_t(t)
    if np.shape(eps) != np.shape(x0):
        raise ValueError(f"eps shape {np.shape(eps)} != x0 shape {np.shape(x0)}")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def iterate_forward(x0: np.ndarray, t: int, sched: NoiseSchedule, rng) -> np.ndarray:
    """Step-by-step corruption x_s = sqrt(1-beta_s)*x_{s-1} + sqrt(beta_s)*z_s.

    Exists to validate q_sample's closed form; rng needs a .normal(shape).
    """
    t = sched.check_t(t)
    x = np.asarray(x0, dtype=np.float64).copy()
    for s in range(1, t + 1):
        b = sched.beta[s - 1]
        z = rng.normal(x.shape)
        x = np.sqrt(1.0 - b) * x + np.sqrt(b) * z
    return x


def posterior_mean_var(x0: np.ndarray, xt: np.ndarray, t: int, sched: NoiseSchedule):
    """Mean and variance of the reverse-chain posterior given (x0, xt)."""
    t = sched.check_t(t)
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    beta_t = sched.beta[t - 1]
    alpha_t = sched.alpha[t - 1]
    mu = (np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)) * x0 + (
        np.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    ) * xt
    return mu, float(sched.sigma2[t])


def eps_to_posterior_mean(xt: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Noise-parameterized posterior mean, the sampler's drift term."""
    t = sched.check_t(t)
    alpha_t = sched.alpha[t - 1]
    ab_t = sched.alpha_bar[t]
    return (xt - (1.0 - alpha_t) / np.sqrt(1.0 - ab_t) * eps) / np.sqrt(alpha_t)


def sinusoidal_embed(s: float, d: int) -> np.ndarray:
    """Interleaved sin/cos embedding: v[2k] = sin(w_k s), v[2k+1] = cos(w_k s),
    w_k = 10000^(-2k/d)."""
    if d < 2 or d % 2 != 0:
        raise ValueError(f"embedding size must be even and >= 2, got {d}")
    k = np.arange(d // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * k / d)
    v = np.empty(d, dtype=np.float64)
    v[0::2] = np.sin(omega * s)
    v[1::2] = np.cos(omega * s)
    return v


@dataclass(frozen=True)
class ConditionTensor:
    """Two stacked condition channels: initial density and a constant
    normalized-time map tau/total_time."""

    channels: np.ndarray  # (2, H, W)
    tau: float
    total_time: float


def build_condition(rho0: np.ndarray, tau: float, total_time: float) -> ConditionTensor:
    if not 0.0 <= tau <= total_time:
        raise ValueError(f"tau={tau} outside [0, {total_time}]")
    rho0 = np.asarray(rho0)
    channels = np.stack([rho0, np.full_like(rho0, tau / total_time)])
    return ConditionTensor(channels=channels, tau=float(tau), total_time=float(total_time))


def diffusion_loss(eps_pred: np.ndarray, eps: np.ndarray) -> float:
    """Mean squared error over all elements."""
    if np.shape(eps_pred) != np.shape(eps):
        raise ValueError(f"shape mismatch: {np.shape(eps_pred)} vs {np.shape(eps)}")
    d = np.asarray(eps_pred, dtype=np.float64) - np.asarray(eps, dtype=np.float64)
    return float(np.mean(d * d))


def ancestral_sample(
    denoiser,
    y: ConditionTensor,
    sched: NoiseSchedule,
    seed: int,
    shape: tuple | None = None,
) -> np.ndarray:
    """Run the learned reverse chain from pure noise down to an x0 estimate.

    denoiser(xt, t, y) -> eps_pred. Noise is injected at every step except
    the last (t = 1); the whole path is a pure function of the seed.
    """
    rng = Rng(seed)
    if shape is None:
        shape = (2,) + y.channels.shape[1:]
    x = rng.normal(shape)
    for t in range(sched.T, 0, -1):
        eps = np.asarray(denoiser(x, t, y), dtype=np.float64)
        if not np.all(np.isfinite(eps)):
            raise SamplingError(f"denoiser returned non-finite values at step t={t}", t=t)
        x = eps_to_posterior_mean(x, eps, t, sched)
        if t > 1:
            x = x + np.sqrt(sched.sigma2[t]) * rng.normal(shape)
    return x


def variational_terms(
    denoiser,
    x0: np.ndarray,
    y: ConditionTensor,
    sched: NoiseSchedule,
    rng,
    ts,
) -> dict[int, float]:
    """Diagnostic per-step terms of the variational bound (t > 1 only):
    1/(2 sigma2_t) * mean||mu_post - mu_theta||^2, single-draw Monte Carlo.

    Not a training objective; the trainer optimizes the simple noise MSE.
    """
    out = {}
    for t in ts:
        t = sched.check_t(t)
        if t == 1:
            raise ValueError("variational term is defined for t > 1 (sigma2_1 = 0)")
        eps = rng.normal(np.shape(x0))
        xt = q_sample(x0, t, eps, sched)
        mu_post, s2 = posterior_mean_var(x0, xt, t, sched)
        eps_hat = np.asarray(denoiser(xt, t, y), dtype=np.float64)
        mu_theta = eps_to_posterior_mean(xt, eps_hat, t, sched)
        out[t] = float(np.mean((mu_post - mu_theta) ** 2) / (2.0 * s2))
    return out
