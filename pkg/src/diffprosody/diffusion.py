"""Discrete-time Gaussian diffusion over flattened prosody latents.

Steps are 1-indexed: ``t`` runs over ``1..T`` and ``alpha_bar(0) == 1``
(the empty product).  Schedules are kept in float64; tensors passed
through the forward/reverse process keep their own dtype (float32 in
training and sampling).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ConfigError, DivergenceError

logger = logging.getLogger(__name__)

# eps_theta(z_t, s_current, t, context) -> eps_hat, all batched
NoisePredictor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, object], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    # 1 - alpha_bar without cancellation when the betas are small
    one_minus_alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_step(self, t: int, lo: int = 1) -> None:
        if not lo <= int(t) <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")

    def alpha_at(self, t: int) -> float:
        self.check_step(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product up to ``t``; ``alpha_bar_at(0) == 1``."""
        self.check_step(t, lo=0)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def noise_level_at(self, t: int) -> float:
        """``1 - alpha_bar_at(t)``, computed as ``-expm1(sum(log1p(-beta)))``."""
        self.check_step(t, lo=0)
        return 0.0 if t == 0 else float(self.one_minus_alpha_bar[t - 1])

    def to_dict(self) -> dict:
        return {"beta": [float(b) for b in self.beta]}

    @classmethod
    def from_beta(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) < 1:
            raise ConfigError("schedule needs at least one step")
        if np.any(beta < 0) or np.any(beta >= 1):
            raise ConfigError("beta values must lie in [0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        complement = -np.expm1(np.cumsum(np.log1p(-beta)))
        for arr in (beta, alpha, alpha_bar, complement):
            arr.setflags(write=False)
        return cls(beta=beta, alpha=alpha, alpha_bar=alpha_bar, one_minus_alpha_bar=complement)


def linear_beta_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Betas linearly spaced from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not (0.0 <= beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 <= beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    return NoiseSchedule.from_beta(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _per_row(values, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-batch vector of coefficients against ``like``."""
    coef = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if coef.ndim == 1:
        coef = coef.reshape(-1, *([1] * (like.ndim - 1)))
    return coef


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Corrupt ``z0`` to step ``t`` in closed form.

    ``t`` is an int or a 1-D integer tensor with one step per batch row.
    """
    _check_shapes(z0, eps, "q_sample")
    steps = torch.as_tensor(t).long()
    if steps.numel() == 0 or int(steps.min()) < 1 or int(steps.max()) > sched.T:
        raise ValueError(f"steps must lie in [1, {sched.T}]")
    idx = steps.cpu().numpy() - 1
    ab = sched.alpha_bar[idx]
    return _per_row(np.sqrt(ab), z0) * z0 + _per_row(np.sqrt(sched.one_minus_alpha_bar[idx]), z0) * eps


def posterior_sigma(t: int, sched: NoiseSchedule) -> float:
    """Reverse-step noise scale ``(1 - ab[t-1]) / (1 - ab[t]) * (1 - alpha[t])``.

    Returns 0 when ``1 - ab[t]`` vanishes (a zero-noise schedule prefix).
    """
    sched.check_step(t)
    denom = sched.noise_level_at(t)
    if denom == 0.0:
        logger.debug("posterior_sigma: zero-noise prefix at t=%d, returning 0", t)
        return 0.0
    return sched.noise_level_at(t - 1) / denom * float(sched.beta[t - 1])


def reverse_noise_scale(t: int, sched: NoiseSchedule, sigma: str = "std") -> float:
    """Multiplier on the fresh Gaussian draw in one reverse step.

    ``"variance"`` uses :func:`posterior_sigma` verbatim; ``"std"`` uses
    its square root, i.e. the standard deviation of the forward-process
    posterior.
    """
    value = posterior_sigma(t, sched)
    if sigma == "variance":
        return value
    if sigma == "std":
        return math.sqrt(value)
    raise ConfigError(f"unknown sigma convention {sigma!r}")


def denoise_step(
    z_t: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    x: torch.Tensor,
    sched: NoiseSchedule,
    sigma: str = "variance",
) -> torch.Tensor:
    """One ancestral step from ``z_t`` to ``z_{t-1}``.

    ``x`` is the fresh standard-normal draw; pass zeros at ``t == 1``.
    """
    sched.check_step(t)
    _check_shapes(z_t, eps_hat, "denoise_step")
    _check_shapes(z_t, x, "denoise_step")
    a = sched.alpha_at(t)
    beta = float(sched.beta[t - 1])
    coef = 0.0 if beta == 0.0 else beta / math.sqrt(sched.noise_level_at(t))
    scale = reverse_noise_scale(t, sched, sigma)
    return (z_t - coef * eps_hat) / math.sqrt(a) + scale * x


def diffusion_loss(
    z0: torch.Tensor,
    cond,
    denoiser: NoisePredictor,
    sched: NoiseSchedule,
    generator: torch.Generator,
) -> torch.Tensor:
    """Noise-prediction mean squared error for one batch.

    ``cond`` is ``(s_current, context)``.  Each row gets its own uniform
    step in ``[1, T]`` and its own noise draw from ``generator``.
    """
    if z0.shape[0] == 0:
        raise ValueError("empty batch")
    s_current, context = cond
    B = z0.shape[0]
    t = torch.randint(1, sched.T + 1, (B,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = q_sample(z0, t, eps, sched)
    eps_hat = denoiser(z_t, s_current, t, context)
    loss = torch.mean((eps - eps_hat) ** 2)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite diffusion loss {loss.item()}")
    return loss


@torch.no_grad()
def sample_prosody(
    denoiser: NoisePredictor,
    s_current: torch.Tensor,
    context,
    sched: NoiseSchedule,
    generator: torch.Generator,
    latent_dim: int,
    sigma: str = "variance",
    z_T: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Ancestral sampling from pure noise down to ``z_0``.

    One latent is drawn per row of ``s_current``; the result has shape
    ``(B, latent_dim)`` and the caller reshapes to ``(m, d)``.
    """
    B = s_current.shape[0]
    z = z_T if z_T is not None else torch.randn(
        (B, latent_dim), generator=generator, dtype=s_current.dtype
    )
    for t in range(sched.T, 0, -1):
        steps = torch.full((B,), t, dtype=torch.long)
        eps_hat = denoiser(z, s_current, steps, context)
        if t > 1:
            x = torch.randn(z.shape, generator=generator, dtype=z.dtype)
        else:
            x = torch.zeros_like(z)
        z = denoise_step(z, t, eps_hat, x, sched, sigma=sigma)
        if not torch.all(torch.isfinite(z)):
            raise DivergenceError(
                f"non-finite latent at step {t} (norm {torch.linalg.vector_norm(z).item()})"
            )
    return z
