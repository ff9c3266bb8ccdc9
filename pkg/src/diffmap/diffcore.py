"""Diffusion mathematics: schedules, forward noising, the two-branch loss, and the sampler step.

Step indices are 1-based: ``t`` in ``[1, T]`` addresses ``alpha_bar[t - 1]``,
and ``t = 0`` means clean data with ``alpha_bar_0 = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from diffmap.errors import ConfigError, ContractError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Immutable variance schedule with cached square-root terms (float64)."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).copy()
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigError("beta must be a non-empty 1-D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ConfigError("beta values must lie in (0, 1)")
        if np.any(np.diff(beta) < 0):
            raise ConfigError("beta must be non-decreasing")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for name, arr in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar),
                          ("sqrt_alpha_bar", np.sqrt(alpha_bar)),
                          ("sqrt_one_minus_alpha_bar", np.sqrt(1.0 - alpha_bar))):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def ab(self, t) -> np.ndarray:
        """``alpha_bar`` at (possibly array-valued) step ``t`` with ``ab(0) = 1``."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.clip(t, 1, self.T) - 1])

    def check_t(self, t, allow_zero: bool = False):
        t = np.asarray(t)
        lo = 0 if allow_zero else 1
        if np.any(t < lo) or np.any(t > self.T):
            raise ContractError(f"step index out of range [{lo}, {self.T}]: {t}")

    def to_dict(self):
        return {"T": self.T, "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d):
        sched = cls(np.asarray(d["beta"], dtype=np.float64))
        if sched.T != int(d["T"]):
            raise ConfigError("schedule T does not match beta length")
        return sched

    def __eq__(self, other):
        return isinstance(other, NoiseSchedule) and np.array_equal(self.beta, other.beta)


def make_linear_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_1 <= beta_T < 1.0:
        raise ConfigError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    return NoiseSchedule(np.linspace(beta_1, beta_T, T, dtype=np.float64))


def _coef(values, t, like: torch.Tensor) -> torch.Tensor:
    """Gather per-sample coefficients shaped to broadcast against ``like``."""
    c = torch.as_tensor(np.asarray(values)[np.asarray(t)], dtype=like.dtype, device=like.device)
    return c.reshape(c.shape + (1,) * (like.dim() - c.dim()))


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps``; ``t`` is an int or a per-sample array."""
    sched.check_t(t)
    if eps.shape != z0.shape:
        raise ContractError(f"eps {tuple(eps.shape)} vs z0 {tuple(z0.shape)}")
    idx = np.asarray(t) - 1
    return _coef(sched.sqrt_alpha_bar, idx, z0) * z0 + _coef(sched.sqrt_one_minus_alpha_bar, idx, z0) * eps


def predict_z0_from_eps(z_t, eps_hat, t, sched: NoiseSchedule):
    sched.check_t(t)
    idx = np.asarray(t) - 1
    return (z_t - _coef(sched.sqrt_one_minus_alpha_bar, idx, z_t) * eps_hat) / _coef(
        sched.sqrt_alpha_bar, idx, z_t)


def diffusion_loss(z_hat, z, eps_hat, eps):
    """Two-branch objective: ``mean((z_hat - z)^2) + mean((eps_hat - eps)^2)``."""
    if not (z_hat.shape == z.shape == eps_hat.shape == eps.shape):
        raise ContractError("diffusion_loss needs four equally shaped tensors")
    return F.mse_loss(z_hat, z) + F.mse_loss(eps_hat, eps)


def fuse_z0(z_t, z0_hat, eps_hat, t, sched: NoiseSchedule, lam: float = 0.5):
    """Blend the direct clean-latent estimate with the one implied by ``eps_hat``."""
    if lam == 1.0:
        return z0_hat
    from_eps = predict_z0_from_eps(z_t, eps_hat, t, sched)
    if lam == 0.0:
        return from_eps
    return lam * z0_hat + (1.0 - lam) * from_eps


def sampler_step(z_t, z0_hat, eps_hat, t: int, t_prev: int, eta: float, sched: NoiseSchedule,
                 noise=None, lam: float = 0.5):
    """One reverse update from step ``t`` to ``t_prev``.

    Uses the eta-parameterized interpolation
    ``z_prev = sqrt(ab_prev) * z0_fused + sqrt(1 - ab_prev - sigma^2) * eps_hat + sigma * noise``
    with ``sigma = eta * sqrt((1 - ab_prev) / (1 - ab_t)) * sqrt(1 - ab_t / ab_prev)``
    and ``z0_fused = lam * z0_hat + (1 - lam) * z0_from_eps``. Landing on
    ``t_prev = 0`` returns ``z0_fused`` exactly.
    """
    if not 0 <= t_prev < t <= sched.T:
        raise ContractError(f"need T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ContractError(f"eta must lie in [0, 1], got {eta}")
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    z0_fused = fuse_z0(z_t, z0_hat, eps_hat, t, sched, lam)
    if t_prev == 0:
        return z0_fused
    ab_t = float(sched.ab(t))
    ab_prev = float(sched.ab(t_prev))
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    out = np.sqrt(ab_prev) * z0_fused + np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps_hat
    if sigma > 0:
        if noise is None:
            raise ContractError("eta > 0 needs a noise draw")
        out = out + sigma * noise
    return out


def timestep_subset(T: int, steps: int) -> list[int]:
    """Uniform-stride descending steps ``[T, T - s, ..., s]`` followed by 0."""
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    if steps > T:
        raise ContractError(f"steps {steps} exceeds T={T}")
    ts = np.floor(np.arange(steps, 0, -1) * (T / steps)).astype(int)
    return [int(v) for v in ts] + [0]
