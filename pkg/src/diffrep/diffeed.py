"""Two-pass feedback extraction.

Pass 1 stores selected decoder activations. A feedback branch per selected
block (nearest resample if needed, 1x1 conv, batch norm, ReLU, zero-initialised
gate) maps each one to the channel count of its target encoder block, and
pass 2 repeats the forward computation with the branch outputs added to the
targets' output activations. The final feature is tapped from pass 2.

Strategies:

* ``all``        every decoder block, each fed to its mirror encoder block.
* ``bottleneck`` decoder blocks whose mirror is the first residual unit of
  an encoder stage (21, 24, 27, 30, 33, 36 at paper scale).
* ``windowed``   the first five decoder blocks, each fed to its mirror.
* ``multi-scale`` the windowed blocks, all fed to the mirror of the last one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .ddpm import NoiseSchedule, noise_batch
from .features import FeatureMap, _eps, image_seeds
from .rng import derive_seed, seeded_init
from .unet import BlockCatalog, UNet, symmetric_partner

__all__ = [
    "STRATEGIES",
    "FeedbackPlan",
    "FeedbackNet",
    "make_feedback_plan",
    "build_feedback_net",
    "feedback_param_count",
    "diffeed_extract",
    "diffeed_features",
    "DifFeedSource",
    "choose_final_block",
]

STRATEGIES = ("all", "bottleneck", "windowed", "multi-scale")
WINDOW = 5


@dataclass(frozen=True)
class FeedbackPlan:
    strategy: str
    decoder_blocks: tuple
    injection: Dict[int, int]
    final_block: int
    t: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_blocks"] = list(self.decoder_blocks)
        d["injection"] = {str(k): v for k, v in self.injection.items()}
        return d


def _bottleneck_ids(catalog: BlockCatalog) -> List[int]:
    out = []
    for d in catalog.decoder_ids:
        e = symmetric_partner(catalog, d)
        if catalog.entry(e).kind == "res" and catalog.entry(e - 1).kind in ("stem", "down"):
            out.append(d)
    return out


def make_feedback_plan(strategy: str, catalog: BlockCatalog, final_block: int, t: int) -> FeedbackPlan:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown feedback strategy {strategy!r}; choose from {STRATEGIES}")
    if catalog.entry(final_block).stage != "decoder":
        raise ValueError(f"final block {final_block} is not a decoder block")
    dec = catalog.decoder_ids
    if strategy == "all":
        blocks = dec
    elif strategy == "bottleneck":
        blocks = _bottleneck_ids(catalog)
    else:
        if len(dec) < WINDOW:
            raise ValueError(f"catalog has {len(dec)} decoder blocks, {strategy!r} needs at least {WINDOW}")
        blocks = dec[:WINDOW]
    if not blocks:
        raise ValueError(f"strategy {strategy!r} selects no decoder blocks in this catalog")
    if strategy == "multi-scale":
        target = symmetric_partner(catalog, blocks[-1])
        injection = {d: target for d in blocks}
    else:
        injection = {d: symmetric_partner(catalog, d) for d in blocks}
    return FeedbackPlan(strategy, tuple(blocks), injection, int(final_block), int(t))


class FeedbackBranch(nn.Module):
    def __init__(self, cin: int, cout: int, out_size: int):
        super().__init__()
        self.out_size = out_size
        self.conv = nn.Conv2d(cin, cout, 1)
        self.bn = nn.BatchNorm2d(cout)
        self.gate = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        if x.shape[-1] != self.out_size:
            x = F.interpolate(x, size=(self.out_size, self.out_size), mode="nearest")
        return self.gate * F.relu(self.bn(self.conv(x)))


class FeedbackNet(nn.Module):
    def __init__(self, plan: FeedbackPlan, catalog: BlockCatalog):
        super().__init__()
        self.plan = plan
        branches = {}
        for d in plan.decoder_blocks:
            e = plan.injection[d]
            src, dst = catalog.entry(d), catalog.entry(e)
            if dst.stage != "encoder":
                raise ValueError(f"injection target {e} for block {d} is not an encoder block")
            branches[str(d)] = FeedbackBranch(src.channels, dst.channels, dst.spatial)
        self.branches = nn.ModuleDict(branches)

    def forward(self, decoder_feats: Dict[int, torch.Tensor]) -> Dict[int, torch.Tensor]:
        out: Dict[int, torch.Tensor] = {}
        for d in self.plan.decoder_blocks:
            y = self.branches[str(d)](decoder_feats[d])
            e = self.plan.injection[d]
            out[e] = out[e] + y if e in out else y
        return out


def build_feedback_net(plan: FeedbackPlan, catalog: BlockCatalog, seed: int = 0) -> FeedbackNet:
    """Branch convolutions are seeded-random; gates start at zero so the
    net adds exactly nothing until trained."""
    for d in plan.decoder_blocks:
        catalog.entry(d)
        catalog.entry(plan.injection[d])
    with seeded_init(derive_seed(seed, "feedback")):
        net = FeedbackNet(plan, catalog)
    return net


def feedback_param_count(plan: FeedbackPlan, catalog: BlockCatalog) -> int:
    total = 0
    for d in plan.decoder_blocks:
        c_dec = catalog.entry(d).channels
        c_enc = catalog.entry(plan.injection[d]).channels
        total += c_dec * c_enc + c_enc + 2 * c_enc + 1
    return total


def _pass1_stop(plan: FeedbackPlan) -> int:
    return max(plan.decoder_blocks)


def diffeed_features(
    model: UNet,
    schedule: NoiseSchedule,
    net: FeedbackNet,
    plan: FeedbackPlan,
    images: torch.Tensor,
    seeds: Sequence[int],
    *,
    pass1: Optional[Dict[int, torch.Tensor]] = None,
) -> torch.Tensor:
    """Batched two-pass extraction with fixed per-image noise.

    ``pass1`` may carry cached first-pass decoder activations for these
    images (then only the second pass is run).
    """
    dtype = model.time_in.weight.dtype
    x0 = images.to(dtype)
    eps = _eps(x0.shape[1:], dtype, seeds, "fixed-seed", None)
    t = torch.full((x0.shape[0],), plan.t, dtype=torch.long)
    x_t = noise_batch(schedule, x0, t, eps)
    if pass1 is None:
        with torch.no_grad():
            _, pass1 = model.run(x_t, t, taps=plan.decoder_blocks, stop_after=_pass1_stop(plan))
    inject = net({d: pass1[d] for d in plan.decoder_blocks})
    _, feats = model.run(x_t, t, taps=[plan.final_block], inject=inject, stop_after=plan.final_block)
    return feats[plan.final_block]


def diffeed_extract(
    model: UNet,
    schedule: NoiseSchedule,
    net: FeedbackNet,
    plan: FeedbackPlan,
    x0: torch.Tensor,
    seed: int,
) -> FeatureMap:
    """Feature at ``plan.final_block`` after the feedback pass, for one image."""
    if plan.final_block not in model.catalog:
        raise ValueError(f"plan final block {plan.final_block} not in model catalog")
    for d in plan.decoder_blocks:
        if model.catalog.entry(d).stage != "decoder":
            raise ValueError(f"plan block {d} is not a decoder block of this model")
    if not 1 <= plan.t <= schedule.T:
        raise ValueError(f"plan timestep {plan.t} outside 1..{schedule.T}")
    before = model.forward_count
    with torch.no_grad():
        f = diffeed_features(model, schedule, net, plan, x0[None], [seed])[0]
    passes = model.forward_count - before
    return FeatureMap(f, (plan.t, plan.final_block), {"noise_seed": seed, "forward_passes": passes,
                                                      "strategy": plan.strategy})


class DifFeedSource:
    """Feature source for training a feedback net jointly with a head.

    First-pass decoder activations are computed once with fixed seeds and
    every batch re-runs the second pass. The backbone's parameters are
    frozen (``requires_grad`` switched off) on construction.
    """

    live = False

    def __init__(self, model, schedule, net: FeedbackNet, plan: FeedbackPlan, images, seed: int, chunk: int = 64):
        self.model, self.schedule, self.net, self.plan = model, schedule, net, plan
        model.requires_grad_(False)
        self.images = images
        self.seed = seed
        self.seeds = image_seeds(seed, images.shape[0])
        dtype = model.time_in.weight.dtype
        cache: Dict[int, List[torch.Tensor]] = {d: [] for d in plan.decoder_blocks}
        with torch.no_grad():
            for s in range(0, images.shape[0], chunk):
                x0 = images[s:s + chunk].to(dtype)
                eps = _eps(x0.shape[1:], dtype, self.seeds[s:s + chunk], "fixed-seed", None)
                t = torch.full((x0.shape[0],), plan.t, dtype=torch.long)
                _, f = model.run(noise_batch(schedule, x0, t, eps), t, taps=plan.decoder_blocks,
                                 stop_after=_pass1_stop(plan))
                for d in plan.decoder_blocks:
                    cache[d].append(f[d])
        self.pass1 = {d: torch.cat(v) for d, v in cache.items()}

    def __len__(self):
        return self.images.shape[0]

    def batch(self, idx, epoch=None, train=False):
        idx = torch.as_tensor(idx)
        ctx = torch.enable_grad() if train else torch.no_grad()
        with ctx:
            return diffeed_features(
                self.model, self.schedule, self.net, self.plan, self.images[idx],
                [self.seeds[i] for i in idx.tolist()], pass1={d: v[idx] for d, v in self.pass1.items()},
            )

    def trainable(self, mode: str):
        return []

    def describe(self) -> dict:
        return {"source": "diffeed", "plan": self.plan.to_dict(), "noise_policy": "fixed-seed", "seed": self.seed}


def choose_final_block(catalog: BlockCatalog, candidates: Sequence[int], score: Callable[[int], float]) -> dict:
    """Score every candidate decoder block; pick the best, lowest id on ties."""
    candidates = [int(c) for c in candidates]
    if not candidates:
        raise ValueError("no candidate blocks given")
    for c in candidates:
        if catalog.entry(c).stage != "decoder":
            raise ValueError(f"candidate {c} is not a decoder block")
    rows = [{"block": c, "accuracy": float(score(c))} for c in candidates]
    best = min(rows, key=lambda r: (-r["accuracy"], r["block"]))
    return {"rows": rows, "selected": best["block"]}
