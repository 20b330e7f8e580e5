"""A guided-diffusion style U-Net whose units carry ordinal block ids.

Numbering rule: ids are handed out in forward-execution order, one per
unit. Encoder units are the stem convolution, every residual unit (with
its attention, if any) and every downsampling residual unit. The middle
(res, attn, res) stack is a single unit. A decoder unit is one residual
unit consuming one skip connection; the upsampling residual block that
moves between decoder stages is fused into the front of the next stage's
first unit, so every decoder tap has the same spatial size as its mirror
encoder tap ``2M - d``.

With the 256x256 unconditional guided-diffusion hyper-parameters this
yields 37 units with the middle at 19.
"""

from __future__ import annotations

import math
import threading
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .rng import seeded_init

__all__ = [
    "UNetConfig",
    "BlockEntry",
    "BlockCatalog",
    "UNet",
    "build_unet",
    "forward_denoise",
    "forward_with_taps",
    "symmetric_partner",
    "time_embedding",
    "count_parameters",
    "toy_config",
    "paper_config",
    "mini_config",
]


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: Tuple[int, ...] = (1, 2, 2)
    res_blocks_per_stage: int = 1
    attention_sizes: Tuple[int, ...] = (8,)
    time_embed_dim: int = 0  # 0 -> 4 * base_channels
    num_heads: int = 4
    num_head_channels: int = -1  # >0 overrides num_heads per layer
    norm_groups: int = 32

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        object.__setattr__(self, "attention_sizes", tuple(sorted({int(s) for s in self.attention_sizes})))
        if not self.channel_mults:
            raise ValueError("channel_mults must not be empty")
        for name in ("image_size", "in_channels", "base_channels", "res_blocks_per_stage", "num_heads", "norm_groups"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if any(m < 1 for m in self.channel_mults):
            raise ValueError(f"channel_mults must be positive, got {self.channel_mults}")
        if self.time_embed_dim < 0:
            raise ValueError(f"time_embed_dim must be non-negative, got {self.time_embed_dim}")
        factor = 2 ** (len(self.channel_mults) - 1)
        if self.image_size % factor:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by 2^{len(self.channel_mults) - 1}={factor}"
            )

    @property
    def embed_dim(self) -> int:
        return self.time_embed_dim or 4 * self.base_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attention_sizes"] = list(self.attention_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def toy_config() -> UNetConfig:
    """Reference CPU-sized model used by the tests and the CLI defaults."""
    return UNetConfig(
        image_size=32, in_channels=3, base_channels=32, channel_mults=(1, 2, 2),
        res_blocks_per_stage=1, attention_sizes=(8,), num_heads=4,
    )


def paper_config() -> UNetConfig:
    """Unconditional 256x256 guided-diffusion hyper-parameters."""
    return UNetConfig(
        image_size=256, in_channels=3, base_channels=256, channel_mults=(1, 1, 2, 2, 4, 4),
        res_blocks_per_stage=2, attention_sizes=(32, 16, 8), num_heads=4, num_head_channels=64,
    )


def mini_config() -> UNetConfig:
    """Miniature model for finite-difference gradient checks."""
    return UNetConfig(
        image_size=8, in_channels=3, base_channels=8, channel_mults=(1, 2),
        res_blocks_per_stage=1, attention_sizes=(4,), num_heads=2, norm_groups=4,
    )


# --------------------------------------------------------------------------
# catalog
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockEntry:
    block_id: int
    stage: str  # encoder | mid | decoder
    spatial: int
    channels: int
    level: int
    kind: str  # stem | res | down | mid | res+up

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BlockCatalog:
    entries: Tuple[BlockEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, block_id) -> bool:
        return 1 <= int(block_id) <= len(self.entries)

    def entry(self, block_id: int) -> BlockEntry:
        if int(block_id) not in self:
            raise KeyError(f"unknown block id {block_id} (catalog has 1..{len(self.entries)})")
        return self.entries[int(block_id) - 1]

    @property
    def mid_id(self) -> int:
        return next(e.block_id for e in self.entries if e.stage == "mid")

    @property
    def encoder_ids(self) -> List[int]:
        return [e.block_id for e in self.entries if e.stage == "encoder"]

    @property
    def decoder_ids(self) -> List[int]:
        return [e.block_id for e in self.entries if e.stage == "decoder"]

    def shape(self, block_id: int) -> Tuple[int, int, int]:
        e = self.entry(block_id)
        return (e.channels, e.spatial, e.spatial)

    def to_list(self) -> List[dict]:
        return [e.to_dict() for e in self.entries]


def symmetric_partner(catalog: BlockCatalog, decoder_id: int) -> int:
    """Encoder id mirroring a decoder id: ``2M - d``."""
    entry = catalog.entry(decoder_id)
    if entry.stage != "decoder":
        raise ValueError(f"block {decoder_id} is a {entry.stage} block, not a decoder block")
    return 2 * catalog.mid_id - int(decoder_id)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

def time_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding: ``[sin(t f_i), cos(t f_i)]`` with f_i = max_period^(-i/half).

    ``t`` may be a scalar or a 1-D tensor; output is ``(dim,)`` or ``(N, dim)``.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    tt = torch.as_tensor(t, dtype=torch.float64)
    scalar = tt.dim() == 0
    tt = tt.reshape(-1)
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = tt[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb[0] if scalar else emb


def _groups(channels: int, wanted: int) -> int:
    return math.gcd(channels, wanted)


def _zero(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    """Residual block with scale-shift time conditioning, optional resampling."""

    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int, resample: Optional[str] = None):
        super().__init__()
        self.resample = resample
        self.in_norm = nn.GroupNorm(_groups(cin, groups), cin)
        self.in_conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * cout)
        self.out_norm = nn.GroupNorm(_groups(cout, groups), cout)
        self.out_conv = _zero(nn.Conv2d(cout, cout, 3, padding=1))
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)

    def _resample(self, x):
        if self.resample == "up":
            return F.interpolate(x, scale_factor=2, mode="nearest")
        if self.resample == "down":
            return F.avg_pool2d(x, 2)
        return x

    def forward(self, x, emb):
        h = F.silu(self.in_norm(x))
        if self.resample:
            h = self._resample(h)
            x = self._resample(x)
        h = self.in_conv(h)
        scale, shift = self.emb(F.silu(emb))[:, :, None, None].chunk(2, dim=1)
        h = self.out_norm(h) * (1 + scale) + shift
        h = self.out_conv(F.silu(h))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    def __init__(self, channels: int, heads: int, groups: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(channels, groups), channels)
        self.qkv = nn.Conv1d(channels, 3 * channels, 1)
        self.proj = _zero(nn.Conv1d(channels, channels, 1))

    def forward(self, x, emb=None):
        n, c, hh, ww = x.shape
        qkv = self.qkv(self.norm(x).reshape(n, c, -1))
        d = c // self.heads
        q, k, v = qkv.reshape(n * self.heads, 3 * d, -1).split(d, dim=1)
        w = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(d), dim=-1)
        a = torch.einsum("bij,bcj->bci", w, v).reshape(n, c, -1)
        return x + self.proj(a).reshape(n, c, hh, ww)


class Unit(nn.Module):
    """Sequence of layers that together form one numbered block."""

    def __init__(self, layers: Iterable[nn.Module]):
        super().__init__()
        self.layers = nn.ModuleList(layers)

    def forward(self, h, emb):
        for layer in self.layers:
            h = layer(h) if isinstance(layer, nn.Conv2d) else layer(h, emb)
        return h


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        cfg = config
        base, groups, emb_dim = cfg.base_channels, cfg.norm_groups, cfg.embed_dim
        R = cfg.res_blocks_per_stage
        levels = len(cfg.channel_mults)

        def heads(ch):
            return ch // cfg.num_head_channels if cfg.num_head_channels > 0 else cfg.num_heads

        self.time_in = nn.Linear(base, emb_dim)
        self.time_out = nn.Linear(emb_dim, emb_dim)

        entries: List[BlockEntry] = []
        encoder: List[Unit] = []
        skip_ch: List[int] = []

        def add(stage, spatial, ch, level, kind):
            entries.append(BlockEntry(len(entries) + 1, stage, spatial, ch, level, kind))

        size, ch = cfg.image_size, base
        encoder.append(Unit([nn.Conv2d(cfg.in_channels, ch, 3, padding=1)]))
        add("encoder", size, ch, 0, "stem")
        skip_ch.append(ch)
        for level, mult in enumerate(cfg.channel_mults):
            for _ in range(R):
                layers = [ResBlock(ch, mult * base, emb_dim, groups)]
                ch = mult * base
                if size in cfg.attention_sizes:
                    layers.append(AttentionBlock(ch, heads(ch), groups))
                encoder.append(Unit(layers))
                add("encoder", size, ch, level, "res")
                skip_ch.append(ch)
            if level != levels - 1:
                encoder.append(Unit([ResBlock(ch, ch, emb_dim, groups, "down")]))
                size //= 2
                add("encoder", size, ch, level + 1, "down")
                skip_ch.append(ch)
        self.encoder = nn.ModuleList(encoder)

        self.mid = Unit([
            ResBlock(ch, ch, emb_dim, groups),
            AttentionBlock(ch, heads(ch), groups),
            ResBlock(ch, ch, emb_dim, groups),
        ])
        add("mid", size, ch, levels - 1, "mid")

        decoder: List[Unit] = []
        for level, mult in reversed(list(enumerate(cfg.channel_mults))):
            for i in range(R + 1):
                layers: List[nn.Module] = []
                kind = "res"
                if i == 0 and level != levels - 1:
                    layers.append(ResBlock(ch, ch, emb_dim, groups, "up"))
                    size *= 2
                    kind = "res+up"
                layers.append(ResBlock(ch + skip_ch.pop(), mult * base, emb_dim, groups))
                ch = mult * base
                if size in cfg.attention_sizes:
                    layers.append(AttentionBlock(ch, heads(ch), groups))
                decoder.append(Unit(layers))
                add("decoder", size, ch, level, kind)
        self.decoder = nn.ModuleList(decoder)

        self.out_norm = nn.GroupNorm(_groups(ch, groups), ch)
        self.out_conv = _zero(nn.Conv2d(ch, cfg.in_channels, 3, padding=1))
        self.catalog = BlockCatalog(tuple(entries))
        self._count_lock = threading.Lock()
        self.forward_count = 0

    # ------------------------------------------------------------------
    def check_input(self, x: torch.Tensor) -> None:
        cfg = self.config
        want = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != want:
            raise ValueError(f"expected input of shape (N, {want[0]}, {want[1]}, {want[2]}), got {tuple(x.shape)}")

    def run(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        taps: Sequence[int] = (),
        inject: Optional[Dict[int, torch.Tensor]] = None,
        stop_after: Optional[int] = None,
    ):
        """Single forward pass.

        Returns ``(eps_pred or None, {block_id: activation})``. ``inject``
        adds tensors to encoder unit outputs (before they are passed on and
        stored as skips). ``stop_after`` truncates the pass after that unit
        and then ``eps_pred`` is None.
        """
        self.check_input(x)
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        with self._count_lock:
            self.forward_count += 1
        wanted = set(int(b) for b in taps)
        inject = inject or {}
        feats: Dict[int, torch.Tensor] = {}
        dtype = self.time_in.weight.dtype
        emb = self.time_out(F.silu(self.time_in(time_embedding(t, self.config.base_channels).to(dtype))))

        bid = 0
        h = x
        skips = []
        for unit in self.encoder:
            bid += 1
            h = unit(h, emb)
            if bid in inject:
                h = h + inject[bid]
            skips.append(h)
            if bid in wanted:
                feats[bid] = h
            if stop_after == bid:
                return None, feats
        bid += 1
        h = self.mid(h, emb)
        if bid in wanted:
            feats[bid] = h
        if stop_after == bid:
            return None, feats
        for unit in self.decoder:
            bid += 1
            first, rest = unit.layers[0], unit.layers[1:]
            if first.resample == "up":
                h = first(h, emb)
                first, rest = rest[0], rest[1:]
            h = first(torch.cat([h, skips.pop()], dim=1), emb)
            for layer in rest:
                h = layer(h, emb)
            if bid in wanted:
                feats[bid] = h
            if stop_after == bid:
                return None, feats
        out = self.out_conv(F.silu(self.out_norm(h)))
        return out, feats

    def forward(self, x, t):
        return self.run(x, t)[0]


def build_unet(config: UNetConfig, seed: int = 0, device=None, dtype=None) -> UNet:
    """Construct a model with parameters drawn deterministically from ``seed``.

    ``device="meta"`` builds the graph without allocating parameter storage
    (useful for counting parameters of large configs).
    """
    if device is not None and torch.device(device).type == "meta":
        with torch.device("meta"):
            return UNet(config)
    with seeded_init(seed):
        model = UNet(config)
    if device is not None:
        model = model.to(device)
    if dtype is not None:
        model = model.to(dtype)
    return model


def _check_t(t, T: Optional[int]):
    if T is None:
        return
    tt = torch.as_tensor(t)
    if tt.min() < 1 or tt.max() > T:
        raise ValueError(f"timestep outside 1..{T}")


def forward_denoise(model: UNet, x_t: torch.Tensor, t, T: Optional[int] = None) -> torch.Tensor:
    _check_t(t, T)
    return model.run(x_t, t)[0]


def forward_with_taps(model: UNet, x_t: torch.Tensor, t, taps: Iterable[int], T: Optional[int] = None):
    """Return ``(features, eps_pred)`` with one activation per requested block id."""
    taps = [int(b) for b in taps]
    for b in taps:
        model.catalog.entry(b)
    _check_t(t, T)
    eps, feats = model.run(x_t, t, taps=taps)
    return feats, eps


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
