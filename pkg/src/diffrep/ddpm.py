"""Noise schedules, forward noising, the simple epsilon loss and ancestral sampling.

Timesteps are 1-based throughout: ``t`` ranges over ``1..T`` and
``alpha_bar(0) == 1`` by convention. Schedule tables live in float64; the
tensors handed to the model may be any floating dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

__all__ = [
    "NoiseSchedule",
    "NoisedSample",
    "build_linear_schedule",
    "forward_noise",
    "simple_loss",
    "reverse_step",
    "generate",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta / alpha / alpha-bar tables.

    ``betas[i]`` holds beta_{i+1}; use :meth:`beta`, :meth:`alpha` and
    :meth:`alpha_bar` for 1-based access.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float
    beta_end: float

    def _check(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep t={t} outside 1..{self.T}")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check(t) - 1])

    def alpha_bar(self, t: int) -> float:
        if int(t) == 0:
            return 1.0
        return float(self.alpha_bars[self._check(t) - 1])

    def params(self) -> dict:
        return {"kind": "linear", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


@dataclass(frozen=True)
class NoisedSample:
    x_t: torch.Tensor
    t: int
    eps: torch.Tensor


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` (t=1) to ``beta_end`` (t=T)."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_start < 1.0:
        raise ValueError(f"beta_start must lie in (0, 1), got {beta_start!r}")
    if not 0.0 < beta_end < 1.0:
        raise ValueError(f"beta_end must lie in (0, 1), got {beta_end!r}")
    if beta_start > beta_end:
        raise ValueError(f"beta_start ({beta_start}) must not exceed beta_end ({beta_end})")

    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if alpha_bars[-1] < np.finfo(np.float64).tiny:
        raise ValueError(
            f"T={T} with beta_end={beta_end} drives alpha_bar_T to {alpha_bars[-1]:.3g}, "
            "below the smallest normal double; shorten T or lower the betas"
        )
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(int(T), betas, alphas, alpha_bars, float(beta_start), float(beta_end))


def forward_noise(schedule: NoiseSchedule, x0: torch.Tensor, t: int, eps: torch.Tensor) -> NoisedSample:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} does not match x0 shape {tuple(x0.shape)}")
    abar = schedule.alpha_bar(schedule._check(t))
    x_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
    return NoisedSample(x_t, int(t), eps)


def noise_batch(schedule: NoiseSchedule, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Batched forward noising with a per-item timestep vector ``t`` (1-based)."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} does not match x0 shape {tuple(x0.shape)}")
    tt = t.long().cpu().numpy()
    if tt.min() < 1 or tt.max() > schedule.T:
        raise ValueError(f"timesteps outside 1..{schedule.T}")
    abar = torch.as_tensor(schedule.alpha_bars[tt - 1], dtype=x0.dtype, device=x0.device)
    shape = (-1,) + (1,) * (x0.dim() - 1)
    return abar.sqrt().view(shape) * x0 + (1.0 - abar).sqrt().view(shape) * eps


def simple_loss(eps_pred: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise."""
    if eps_pred.shape != eps.shape:
        raise ValueError(f"shape mismatch: eps_pred {tuple(eps_pred.shape)} vs eps {tuple(eps.shape)}")
    return ((eps_pred - eps) ** 2).mean()


def reverse_step(
    schedule: NoiseSchedule,
    eps_pred: torch.Tensor,
    x_t: torch.Tensor,
    t: int,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1} with fixed variance beta_t I.

    ``noise`` is required for t > 1 and forbidden at t = 1, where the step
    returns the posterior mean.
    """
    t = schedule._check(t)
    if t == 1 and noise is not None:
        raise ValueError("noise must be None at t=1 (final step is deterministic)")
    if t > 1 and noise is None:
        raise ValueError(f"noise is required at t={t}")
    beta = schedule.beta(t)
    mean = (x_t - (beta / np.sqrt(1.0 - schedule.alpha_bar(t))) * eps_pred) / np.sqrt(schedule.alpha(t))
    if t == 1:
        return mean
    if noise.shape != x_t.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} does not match x_t shape {tuple(x_t.shape)}")
    return mean + np.sqrt(beta) * noise


@torch.no_grad()
def generate(
    model: Callable,
    schedule: NoiseSchedule,
    shape: tuple,
    seed: int,
    *,
    noise_scale: float = 1.0,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Run the reverse chain from seeded Gaussian x_T down to an x_0 estimate.

    ``model`` is called as ``model(x_t, t_batch)``. ``shape`` is either a
    single image shape (C, H, W) or a batch shape (N, C, H, W). Setting
    ``noise_scale=0`` zeroes every injected noise term.
    """
    shape = tuple(int(s) for s in shape)
    single = len(shape) == 3
    full = (1,) + shape if single else shape
    if len(full) != 4:
        raise ValueError(f"shape must be (C, H, W) or (N, C, H, W), got {shape}")
    expected = _model_input_shape(model)
    if expected is not None and tuple(full[1:]) != expected:
        raise ValueError(f"model expects images of shape {expected}, got {tuple(full[1:])}")

    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(full, generator=gen, dtype=dtype)
    for t in range(schedule.T, 0, -1):
        tb = torch.full((full[0],), t, dtype=torch.long)
        eps_pred = model(x, tb)
        if eps_pred.shape != x.shape:
            raise ValueError(f"model output shape {tuple(eps_pred.shape)} != input shape {tuple(x.shape)}")
        noise = None
        if t > 1:
            noise = torch.randn(full, generator=gen, dtype=dtype) * noise_scale
        x = reverse_step(schedule, eps_pred.to(dtype), x, t, noise)
    return x[0] if single else x


def _model_input_shape(model) -> Optional[tuple]:
    config = getattr(model, "config", None)
    if config is None:
        return None
    return (config.in_channels, config.image_size, config.image_size)
