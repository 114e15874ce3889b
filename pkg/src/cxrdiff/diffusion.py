"""Gaussian forward process, closed-form marginal, and reverse samplers.

All operations are shape generic: they accept numpy arrays or torch
tensors and scale them by scalar schedule coefficients, so the same code
serves scalar oracle tests and batched latent tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError


@dataclass(frozen=True)
class VarianceSchedule:
    """Precomputed beta / alpha / alpha_bar tables, float64, 1-based timesteps."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for 1-based t, with the t=0 convention alpha_bar=1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])


def make_schedule(kind: str = "linear", T: int = 100,
                  beta_start: float = 1e-4, beta_end: float = 0.02) -> VarianceSchedule:
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind: {kind!r}")
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return VarianceSchedule(beta, alpha, alpha_bar)


def _check_t(t: int, sched: VarianceSchedule) -> None:
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")


def _check_shapes(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_step(x_prev, t: int, eps, sched: VarianceSchedule):
    """One forward step: sqrt(1-beta_t) * x_prev + sqrt(beta_t) * eps."""
    _check_t(t, sched)
    _check_shapes(x_prev, eps, "q_step")
    b = float(sched.beta[t - 1])
    return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * eps


def q_marginal(x0, t: int, eps, sched: VarianceSchedule):
    """Closed-form marginal: sqrt(abar_t) * x0 + sqrt(1-abar_t) * eps."""
    _check_t(t, sched)
    _check_shapes(x0, eps, "q_marginal")
    ab = sched.alpha_bar_at(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def posterior_sigma(t: int, sched: VarianceSchedule) -> float:
    """Posterior std: sigma_t^2 = (1-abar_{t-1})/(1-abar_t) * beta_t; sigma_1 = 0."""
    _check_t(t, sched)
    if t == 1:
        return 0.0
    ab_t = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t - 1)
    return math.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * float(sched.beta[t - 1]))


def ddpm_reverse_step(x_t, t: int, eps_hat, noise, sched: VarianceSchedule):
    """Ancestral reverse step with the posterior variance; deterministic at t=1."""
    _check_t(t, sched)
    _check_shapes(x_t, eps_hat, "ddpm_reverse_step")
    _check_shapes(x_t, noise, "ddpm_reverse_step")
    b = float(sched.beta[t - 1])
    a = float(sched.alpha[t - 1])
    ab = sched.alpha_bar_at(t)
    mu = (x_t - (b / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    sigma = posterior_sigma(t, sched)
    return mu + sigma * noise


def ddim_reverse_step(x_t, t: int, eps_hat, sched: VarianceSchedule,
                      eta: float = 0.0, noise=None, t_prev: int | None = None):
    """DDIM update from t to t_prev (default t-1); eta=0 is deterministic."""
    _check_t(t, sched)
    _check_shapes(x_t, eps_hat, "ddim_reverse_step")
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"eta must be in [0,1], got {eta}")
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev {t_prev} must be in [0, {t})")
    ab_t = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)
    dir_coef = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
    out = math.sqrt(ab_prev) * x0_hat + dir_coef * eps_hat
    if eta > 0.0 and sigma > 0.0:
        if noise is None:
            raise ValueError("eta > 0 requires an explicit noise tensor")
        _check_shapes(x_t, noise, "ddim_reverse_step")
        out = out + sigma * noise
    return out


def step_noise(seed: int, t: int, shape) -> torch.Tensor:
    """Per-step Gaussian stream derived from (seed, t); step order cannot race."""
    mixed = int(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, t]).generate_state(1)[0])
    g = torch.Generator().manual_seed(mixed)
    return torch.randn(shape, generator=g)


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced decreasing 1-based timesteps ending at 1."""
    if steps <= 0:
        return []
    ts = np.linspace(1, T, steps).round().astype(int)
    return sorted(set(int(t) for t in ts), reverse=True)


def sample(denoiser, condition, sched: VarianceSchedule, steps: int, seed: int,
           shape, eta: float = 0.0) -> torch.Tensor:
    """Iterate reverse steps from pure noise at t=T down to t=1.

    ``denoiser(z_t, t, condition)`` must return an eps estimate of the same
    shape. With eta=0 the trajectory is fully deterministic given the seed.
    """
    if steps > sched.T:
        raise ConfigError(f"steps {steps} exceeds schedule length {sched.T}")
    x = step_noise(seed, sched.T + 1, shape)
    ts = sampling_timesteps(sched.T, steps)
    for i, t in enumerate(ts):
        eps_hat = denoiser(x, t, condition)
        if tuple(eps_hat.shape) != tuple(x.shape):
            raise ValueError(
                f"denoiser output shape {tuple(eps_hat.shape)} != input {tuple(x.shape)}"
            )
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        noise = step_noise(seed, t, shape) if eta > 0.0 else None
        x = ddim_reverse_step(x, t, eps_hat, sched, eta=eta, noise=noise, t_prev=t_prev)
    return x
