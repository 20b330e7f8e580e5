"""Diffusion training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import torch

from ..ddpm import NoiseSchedule, noise_batch, simple_loss
from ..rng import torch_gen
from .checkpoint import save_checkpoint
from .data import random_flip
from .optim import Adam

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainResult:
    losses: List[float]
    running: List[float]
    checkpoints: List[str] = field(default_factory=list)

    @property
    def initial_running(self) -> float:
        return self.running[0] if self.running else math.nan

    @property
    def final_running(self) -> float:
        return self.running[-1] if self.running else math.nan


def running_mean(values: List[float], window: int) -> List[float]:
    """Mean of each consecutive block of ``window`` losses (last block may be short)."""
    return [sum(values[i:i + window]) / len(values[i:i + window]) for i in range(0, len(values), window)]


def train_diffusion(
    model,
    schedule: NoiseSchedule,
    images: torch.Tensor,
    *,
    steps: int,
    batch_size: int = 8,
    lr: float = 1e-3,
    seed: int = 0,
    flip: bool = False,
    checkpoint_every: int = 0,
    out_dir: Optional[str] = None,
    window: int = 50,
) -> TrainResult:
    """Minimise the noise-prediction MSE with Adam.

    Step ``s`` draws its batch indices, timesteps (uniform on 1..T) and
    noise from a generator named by ``(seed, "train", s)``, so the run is a
    pure function of the inputs.
    """
    if steps < 0 or batch_size < 1:
        raise ValueError(f"invalid training length steps={steps} batch_size={batch_size}")
    n = images.shape[0]
    if n == 0:
        raise ValueError("training set is empty")
    dtype = model.time_in.weight.dtype
    opt = Adam(model.named_parameters(), lr=lr)
    model.train()
    losses: List[float] = []
    saved: List[str] = []
    out = Path(out_dir) if out_dir else None

    for step in range(1, steps + 1):
        gen = torch_gen(seed, "train", step)
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        x0 = images[idx].to(dtype)
        if flip:
            x0 = random_flip(x0, gen)
        t = torch.randint(1, schedule.T + 1, (batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=dtype)
        loss = simple_loss(model(noise_batch(schedule, x0, t, eps), t), eps)
        value = float(loss.detach())
        if not math.isfinite(value):
            last = next((v for v in reversed(losses) if math.isfinite(v)), None)
            raise NonFiniteLossError(
                f"non-finite loss {value} at step {step} (t in [{int(t.min())}, {int(t.max())}], "
                f"last finite loss {last}, lr {lr})"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(value)
        if out and checkpoint_every and step % checkpoint_every == 0:
            path = out / f"checkpoint-{step:06d}.bin"
            save_checkpoint(model, path, schedule=schedule, step=step)
            saved.append(str(path))
        if step % 100 == 0:
            log.info("step %d loss %.5f", step, value)

    model.eval()
    if out:
        path = out / "checkpoint.bin"
        save_checkpoint(model, path, schedule=schedule, step=steps)
        saved.append(str(path))
    return TrainResult(losses, running_mean(losses, window), saved)
