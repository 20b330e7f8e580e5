"""Diffusion features f(x0, t, b): noise an image, run the U-Net, keep block b."""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .ddpm import NoiseSchedule, noise_batch
from .rng import derive_seed, torch_gen
from .unet import UNet

__all__ = [
    "FeatureRequest",
    "FeatureMap",
    "FeatureStore",
    "adaptive_avg_pool",
    "extract_feature",
    "extract_features",
    "class_balanced_subsample",
    "precompute_features",
    "image_seeds",
    "Standardizer",
]

NOISE_POLICIES = ("fixed-seed", "fresh")
_fresh_counter = itertools.count()


@dataclass(frozen=True)
class FeatureRequest:
    t: int
    b: int
    pool_size: Optional[int] = None
    noise_policy: str = "fixed-seed"

    def validate(self, catalog, T: int) -> None:
        if not 1 <= int(self.t) <= T:
            raise ValueError(f"t={self.t} outside 1..{T}")
        catalog.entry(self.b)
        if self.pool_size is not None and self.pool_size < 1:
            raise ValueError(f"pool_size must be >= 1, got {self.pool_size}")
        if self.noise_policy not in NOISE_POLICIES:
            raise ValueError(f"noise_policy must be one of {NOISE_POLICIES}, got {self.noise_policy!r}")

    def to_dict(self) -> dict:
        return {"t": self.t, "b": self.b, "pool_size": self.pool_size, "noise_policy": self.noise_policy}


@dataclass
class FeatureMap:
    data: torch.Tensor  # C x H x W
    source: tuple  # (t, b)
    provenance: dict = field(default_factory=dict)


def adaptive_avg_pool(x: torch.Tensor, out: int) -> torch.Tensor:
    """Average-pool the trailing two dims to ``out x out``.

    Window i spans ``[floor(i H / out), ceil((i + 1) H / out))``. Maps whose
    side is already ``<= out`` are returned unchanged.
    """
    if out < 1:
        raise ValueError(f"pool size must be >= 1, got {out}")
    H, W = x.shape[-2:]
    if out >= H and out >= W:
        return x
    oh, ow = min(out, H), min(out, W)
    if H % oh == 0 and W % ow == 0:
        lead = x.shape[:-2]
        return x.reshape(*lead, oh, H // oh, ow, W // ow).mean(dim=(-3, -1))
    rows = [(i * H // oh, -(-(i + 1) * H // oh)) for i in range(oh)]
    cols = [(j * W // ow, -(-(j + 1) * W // ow)) for j in range(ow)]
    cells = [
        torch.stack([x[..., r0:r1, c0:c1].mean(dim=(-2, -1)) for c0, c1 in cols], dim=-1)
        for r0, r1 in rows
    ]
    return torch.stack(cells, dim=-2)


def image_seeds(seed: int, n: int, offset: int = 0) -> List[int]:
    """Per-image noise seeds derived from a master seed."""
    return [derive_seed(seed, "image", offset + i) for i in range(n)]


def _eps(shape, dtype, seeds: Sequence[int], policy: str, epoch: Optional[int]) -> torch.Tensor:
    if policy == "fresh" and epoch is None:
        epoch = 1 + next(_fresh_counter)
    stream = 0 if policy == "fixed-seed" else int(epoch)
    return torch.stack([torch.randn(shape, generator=torch_gen(s, "eps", stream), dtype=dtype) for s in seeds])


def extract_features(
    model: UNet,
    schedule: NoiseSchedule,
    images: torch.Tensor,
    request: FeatureRequest,
    seeds: Sequence[int],
    *,
    epoch: Optional[int] = None,
    inject: Optional[Dict[int, torch.Tensor]] = None,
    eps: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Batched extraction: returns ``(N, C, H', W')`` features for block ``request.b``.

    With the ``fresh`` policy, ``epoch`` selects the noise stream (a process
    counter is used when it is omitted). An explicit ``eps`` bypasses the
    policy entirely.
    """
    request.validate(model.catalog, schedule.T)
    if len(seeds) != images.shape[0]:
        raise ValueError(f"{len(seeds)} seeds for {images.shape[0]} images")
    dtype = model.time_in.weight.dtype
    x0 = images.to(dtype)
    if eps is None:
        eps = _eps(x0.shape[1:], dtype, seeds, request.noise_policy, epoch)
    eps = eps.to(dtype)
    t = torch.full((x0.shape[0],), int(request.t), dtype=torch.long)
    x_t = noise_batch(schedule, x0, t, eps)
    _, feats = model.run(x_t, t, taps=[request.b], inject=inject, stop_after=request.b)
    f = feats[request.b]
    if request.pool_size is not None:
        f = adaptive_avg_pool(f, request.pool_size)
    return f


def extract_feature(
    model: UNet,
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    request: FeatureRequest,
    seed: int,
    *,
    image_id=None,
    epoch: Optional[int] = None,
    eps: Optional[torch.Tensor] = None,
) -> FeatureMap:
    """Single-image feature ``f(x0, t, b)``, pooled if the request asks for it."""
    if x0.dim() != 3:
        raise ValueError(f"expected a single C x H x W image, got shape {tuple(x0.shape)}")
    with torch.no_grad():
        data = extract_features(model, schedule, x0[None], request, [seed], epoch=epoch,
                                eps=None if eps is None else eps[None])[0]
    return FeatureMap(data, (request.t, request.b), {"image_id": image_id, "noise_seed": seed,
                                                      "noise_policy": request.noise_policy})


def class_balanced_subsample(labels, fraction: float, seed: int) -> List[int]:
    """Per class keep ``max(1, round(fraction * n_c))`` indices (round half up)."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot subsample an empty dataset")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    keep: List[int] = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = max(1, int(math.floor(fraction * len(idx) + 0.5)))
        rng = np.random.Generator(np.random.Philox(derive_seed(seed, "subsample", int(c))))
        keep.extend(int(i) for i in rng.choice(idx, size=min(k, len(idx)), replace=False))
    return sorted(keep)


@dataclass
class FeatureStore:
    """Precomputed features (N x D, or N x C x H x W) with labels and provenance."""

    features: torch.Tensor
    labels: torch.Tensor
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.features.shape[0]

    def save(self, path) -> None:
        from .harness.checkpoint import save_container

        save_container(path, {"features": self.features, "labels": self.labels}, {"kind": "feature-store", **self.meta})

    @classmethod
    def load(cls, path) -> "FeatureStore":
        from .harness.checkpoint import load_container

        tensors, meta = load_container(path, kind="feature-store")
        meta.pop("kind", None)
        return cls(tensors["features"], tensors["labels"], meta)


def precompute_features(
    model: UNet,
    schedule: NoiseSchedule,
    images: torch.Tensor,
    labels: Optional[torch.Tensor],
    request: FeatureRequest,
    seed: int,
    *,
    flatten: bool = True,
    workers: int = 1,
    chunk: int = 32,
    epoch: Optional[int] = None,
) -> FeatureStore:
    """Extract features for a whole image tensor.

    Image ``i`` uses noise seed ``derive_seed(seed, "image", i)``. The work
    is split into fixed chunks of ``chunk`` images, so the result does not
    depend on ``workers``.
    """
    n = images.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")
    request.validate(model.catalog, schedule.T)
    seeds = image_seeds(seed, n)
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]

    def job(bound):
        s, e = bound
        with torch.no_grad():
            return extract_features(model, schedule, images[s:e], request, seeds[s:e], epoch=epoch)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(b) for b in bounds]
    feats = torch.cat(parts)
    if flatten:
        feats = feats.reshape(n, -1)
    lab = labels if labels is not None else torch.full((n,), -1, dtype=torch.long)
    meta = {"request": request.to_dict(), "seed": int(seed), "chunk": chunk, "flatten": flatten,
            "block": model.catalog.entry(request.b).to_dict()}
    return FeatureStore(feats.contiguous(), lab.clone(), meta)


@dataclass
class Standardizer:
    """Optional per-dimension standardisation fitted on training features (off by default)."""

    mean: torch.Tensor
    std: torch.Tensor

    @classmethod
    def fit(cls, features: torch.Tensor, eps: float = 1e-6) -> "Standardizer":
        return cls(features.mean(dim=0, keepdim=True), features.std(dim=0, keepdim=True).clamp_min(eps))

    def __call__(self, features: torch.Tensor) -> torch.Tensor:
        return (features - self.mean) / self.std
