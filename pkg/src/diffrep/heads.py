"""Classification heads over diffusion features and the probe protocol.

Attention head: tokenizer (adaptive pool -> per-position LayerNorm -> 1x1
projection) -> learned CLS + pre-norm transformer layers -> linear layer
on the CLS output. No positional embeddings are used, so the head is
invariant to permutations of the spatial tokens.

DifFormer: one tokenizer per block, token sets of all blocks at the same
timestep are concatenated and pooled by a shared transformer; the CLS
outputs of every timestep are concatenated before the final linear layer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .features import adaptive_avg_pool, extract_features, image_seeds
from .harness.optim import Adam, step_lr
from .rng import derive_seed, seeded_init, torch_gen

__all__ = [
    "Tokenizer",
    "TokenSequence",
    "TransformerLayer",
    "AttentionHeadConfig",
    "AttentionHead",
    "DifFormerConfig",
    "DifFormer",
    "build_difformer",
    "LinearHead",
    "MLPHead",
    "CNNHead",
    "HeadKind",
    "build_head",
    "head_param_count",
    "tokenize",
    "attention_head_forward",
    "difformer_forward",
    "ProbeProtocol",
    "ProbeReport",
    "StoreSource",
    "BackboneSource",
    "MultiStoreSource",
    "train_probe",
    "evaluate_head",
    "topk_accuracy",
]


# --------------------------------------------------------------------------
# tokenizer and transformer
# --------------------------------------------------------------------------

@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (N, K, d) or (K, d)
    has_cls: bool = False
    origin: List[tuple] = field(default_factory=list)


class Tokenizer(nn.Module):
    def __init__(self, in_channels: int, d_model: int = 128, pool_threshold: int = 16, project: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.pool_threshold = pool_threshold
        self.norm = nn.LayerNorm(in_channels)
        if project:
            self.proj = nn.Linear(in_channels, d_model)  # 1x1 convolution on channel-last maps
            self.d_model = d_model
        else:
            self.proj = nn.Identity()
            self.d_model = in_channels

    def num_tokens(self, side: int) -> int:
        return min(side, self.pool_threshold) ** 2

    def normalized(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled, layer-normalized map in channel-last layout ``(N, H', W', C)``."""
        if x.shape[1] != self.in_channels:
            raise ValueError(f"tokenizer expects {self.in_channels} channels, got {x.shape[1]}")
        if max(x.shape[-2:]) > self.pool_threshold:
            x = adaptive_avg_pool(x, self.pool_threshold)
        return self.norm(x.permute(0, 2, 3, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.proj(self.normalized(x))
        return h.reshape(h.shape[0], -1, h.shape[-1])


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"d_model {d} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)

    def forward(self, x):
        n, k, d = x.shape
        hd = d // self.heads
        q, kk, v = self.qkv(x).reshape(n, k, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        w = torch.softmax(q @ kk.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        return self.proj((w @ v).transpose(1, 2).reshape(n, k, d))


class TransformerLayer(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Linear(mlp_ratio * d, d))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class CLSTransformer(nn.Module):
    """Prepends a learned CLS token, runs the layers, returns the CLS row."""

    def __init__(self, d: int, num_layers: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.cls = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.layers = nn.ModuleList(TransformerLayer(d, heads, mlp_ratio) for _ in range(num_layers))
        self.norm = nn.LayerNorm(d)

    def with_cls(self, tokens: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.cls.expand(tokens.shape[0], -1, -1).to(tokens.dtype), tokens], dim=1)

    def encode(self, seq: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            seq = layer(seq)
        return self.norm(seq[:, 0])

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.encode(self.with_cls(tokens))


# --------------------------------------------------------------------------
# attention head and DifFormer
# --------------------------------------------------------------------------

@dataclass
class AttentionHeadConfig:
    in_channels: int
    num_classes: int
    d_model: int = 128
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    pool_threshold: int = 16
    project: bool = True

    def __post_init__(self):
        d = self.d_model if self.project else self.in_channels
        if d % self.num_heads:
            raise ValueError(f"d_model {d} is not divisible by num_heads {self.num_heads}")


class AttentionHead(nn.Module):
    def __init__(self, cfg: AttentionHeadConfig):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = Tokenizer(cfg.in_channels, cfg.d_model, cfg.pool_threshold, cfg.project)
        d = self.tokenizer.d_model
        self.transformer = CLSTransformer(d, cfg.num_layers, cfg.num_heads, cfg.mlp_ratio)
        self.classifier = nn.Linear(d, cfg.num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.transformer(self.tokenizer(x)))


@dataclass
class DifFormerConfig:
    time_set: Tuple[int, ...]
    block_set: Tuple[int, ...]
    block_channels: Dict[int, int]
    num_classes: int
    d_model: int = 128
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    pool_threshold: int = 16

    def __post_init__(self):
        self.time_set = tuple(int(t) for t in self.time_set)
        self.block_set = tuple(int(b) for b in self.block_set)
        if not self.time_set or not self.block_set:
            raise ValueError("time_set and block_set must be non-empty")
        missing = [b for b in self.block_set if b not in self.block_channels]
        if missing:
            raise ValueError(f"no channel count for blocks {missing}")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by num_heads {self.num_heads}")

    @property
    def fused_dim(self) -> int:
        return self.d_model * len(self.time_set)


class DifFormer(nn.Module):
    def __init__(self, cfg: DifFormerConfig):
        super().__init__()
        self.cfg = cfg
        self.tokenizers = nn.ModuleDict(
            {str(b): Tokenizer(cfg.block_channels[b], cfg.d_model, cfg.pool_threshold) for b in cfg.block_set}
        )
        self.transformer = CLSTransformer(cfg.d_model, cfg.num_layers, cfg.num_heads, cfg.mlp_ratio)
        self.classifier = nn.Linear(cfg.fused_dim, cfg.num_classes)

    def tokens_per_timestep(self, sides: Dict[int, int]) -> int:
        return sum(self.tokenizers[str(b)].num_tokens(sides[b]) for b in self.cfg.block_set)

    def fused(self, features: Dict[Tuple[int, int], torch.Tensor]) -> torch.Tensor:
        missing = [(t, b) for t in self.cfg.time_set for b in self.cfg.block_set if (t, b) not in features]
        if missing:
            raise KeyError(f"missing features for (t, b) pairs {missing}")
        outs = []
        for t in self.cfg.time_set:
            tokens = torch.cat([self.tokenizers[str(b)](features[(t, b)]) for b in self.cfg.block_set], dim=1)
            outs.append(self.transformer(tokens))
        return torch.cat(outs, dim=-1)

    def forward(self, features: Dict[Tuple[int, int], torch.Tensor]) -> torch.Tensor:
        return self.classifier(self.fused(features))

    def load_from_attention_head(self, head: AttentionHead) -> None:
        """Share an attention head's weights (single block, single timestep only)."""
        if len(self.cfg.block_set) != 1 or len(self.cfg.time_set) != 1:
            raise ValueError("weight sharing with an attention head needs |T| = |B| = 1")
        self.tokenizers[str(self.cfg.block_set[0])].load_state_dict(head.tokenizer.state_dict())
        self.transformer.load_state_dict(head.transformer.state_dict())
        self.classifier.load_state_dict(head.classifier.state_dict())


def tokenize(feature, tokenizer: Tokenizer, origin=None) -> TokenSequence:
    """Tokenize one map (C, H, W) or a batch (N, C, H, W); no CLS is added."""
    data = getattr(feature, "data", feature)
    single = data.dim() == 3
    tokens = tokenizer(data[None] if single else data)
    origin = origin or [getattr(feature, "source", None)]
    return TokenSequence(tokens[0] if single else tokens, False, list(origin))


def attention_head_forward(seq: TokenSequence, head: AttentionHead) -> torch.Tensor:
    """Logits from a token sequence that already carries its CLS row at index 0."""
    if not seq.has_cls:
        raise ValueError("token sequence has no CLS token; use head.transformer.with_cls first")
    tokens = seq.tokens
    single = tokens.dim() == 2
    out = head.classifier(head.transformer.encode(tokens[None] if single else tokens))
    return out[0] if single else out


def add_cls(seq: TokenSequence, head: AttentionHead) -> TokenSequence:
    tokens = seq.tokens
    single = tokens.dim() == 2
    full = head.transformer.with_cls(tokens[None] if single else tokens)
    return TokenSequence(full[0] if single else full, True, seq.origin)


def difformer_forward(features: Dict[Tuple[int, int], torch.Tensor], head: DifFormer) -> torch.Tensor:
    return head(features)


# --------------------------------------------------------------------------
# linear / MLP / CNN heads
# --------------------------------------------------------------------------

def _flat_dim(shape: Sequence[int], pool: Optional[int]) -> int:
    if len(shape) == 1:
        if pool is not None:
            raise ValueError("cannot pool a flat feature vector")
        return int(shape[0])
    c, h, w = shape
    if pool is not None:
        h, w = min(h, pool), min(w, pool)
    return c * h * w


class _PoolFlatten(nn.Module):
    def __init__(self, pool: Optional[int]):
        super().__init__()
        self.pool = pool

    def forward(self, x):
        if self.pool is not None and x.dim() == 4:
            x = adaptive_avg_pool(x, self.pool)
        return x.reshape(x.shape[0], -1)


class LinearHead(nn.Module):
    def __init__(self, feature_shape, num_classes: int, pool: Optional[int] = None):
        super().__init__()
        self.prep = _PoolFlatten(pool)
        self.fc = nn.Linear(_flat_dim(feature_shape, pool), num_classes)

    def forward(self, x):
        return self.fc(self.prep(x))


class MLPHead(nn.Module):
    def __init__(self, feature_shape, num_classes: int, hidden: Sequence[int] = (2048,), pool: Optional[int] = None):
        super().__init__()
        self.prep = _PoolFlatten(pool)
        dims = [_flat_dim(feature_shape, pool), *hidden]
        layers: List[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        layers.append(nn.Linear(dims[-1], num_classes))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(self.prep(x))


class CNNHead(nn.Module):
    """3x3 conv -> ReLU -> 1x1 conv -> ReLU -> global average -> linear."""

    def __init__(self, feature_shape, num_classes: int, channels: Sequence[int] = (256, 256)):
        super().__init__()
        if len(feature_shape) != 3:
            raise ValueError(f"CNN head needs a C x H x W feature shape, got {tuple(feature_shape)}")
        c1, c2 = channels
        self.conv1 = nn.Conv2d(feature_shape[0], c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 1)
        self.fc = nn.Linear(c2, num_classes)

    def forward(self, x):
        h = F.relu(self.conv2(F.relu(self.conv1(x))))
        return self.fc(h.mean(dim=(-2, -1)))


@dataclass(frozen=True)
class HeadKind:
    kind: str  # linear | mlp | cnn | attention
    params: dict = field(default_factory=dict)


def build_head(kind: HeadKind, feature_shape, num_classes: int, seed: int = 0) -> nn.Module:
    """Deterministically initialised head for features of ``feature_shape``."""
    feature_shape = tuple(int(s) for s in feature_shape)
    p = dict(kind.params)
    with seeded_init(derive_seed(seed, "head", kind.kind)):
        if kind.kind == "linear":
            return LinearHead(feature_shape, num_classes, p.get("pool"))
        if kind.kind == "mlp":
            return MLPHead(feature_shape, num_classes, tuple(p.get("hidden", (2048,))), p.get("pool"))
        if kind.kind == "cnn":
            return CNNHead(feature_shape, num_classes, tuple(p.get("channels", (256, 256))))
        if kind.kind == "attention":
            if len(feature_shape) != 3:
                raise ValueError(f"attention head needs a C x H x W feature shape, got {feature_shape}")
            return AttentionHead(AttentionHeadConfig(in_channels=feature_shape[0], num_classes=num_classes, **p))
    raise ValueError(f"unknown head kind {kind.kind!r}")


def head_param_count(kind: HeadKind, feature_shape, num_classes: int) -> int:
    """Closed-form parameter count matching :func:`build_head`."""
    p = kind.params
    if kind.kind == "linear":
        d = _flat_dim(feature_shape, p.get("pool"))
        return d * num_classes + num_classes
    if kind.kind == "mlp":
        dims = [_flat_dim(feature_shape, p.get("pool")), *p.get("hidden", (2048,)), num_classes]
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if kind.kind == "cnn":
        c = feature_shape[0]
        c1, c2 = p.get("channels", (256, 256))
        return (9 * c * c1 + c1) + (c1 * c2 + c2) + (c2 * num_classes + num_classes)
    if kind.kind == "attention":
        cfg = AttentionHeadConfig(in_channels=feature_shape[0], num_classes=num_classes, **p)
        c = cfg.in_channels
        d = cfg.d_model if cfg.project else c
        tok = 2 * c + (c * d + d if cfg.project else 0)
        hid = cfg.mlp_ratio * d
        layer = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * hid + hid) + (hid * d + d)
        return tok + d + cfg.num_layers * layer + 2 * d + d * num_classes + num_classes
    raise ValueError(f"unknown head kind {kind.kind!r}")


# --------------------------------------------------------------------------
# feature sources
# --------------------------------------------------------------------------

class StoreSource:
    """Precomputed features; fixed noise, frozen backbone."""

    live = False

    def __init__(self, features: torch.Tensor):
        self.features = features

    def __len__(self):
        return self.features.shape[0]

    def batch(self, idx, epoch=None, train=False):
        return self.features[idx]

    def trainable(self, mode: str):
        return []

    def describe(self) -> dict:
        return {"source": "store", "noise_policy": "fixed-seed (precomputed)", "shape": list(self.features.shape[1:])}


class MultiStoreSource(StoreSource):
    """Precomputed features keyed by (t, b), for DifFormer."""

    def __init__(self, features: Dict[Tuple[int, int], torch.Tensor]):
        self.features = features
        self._n = next(iter(features.values())).shape[0]

    def __len__(self):
        return self._n

    def batch(self, idx, epoch=None, train=False):
        return {k: v[idx] for k, v in self.features.items()}

    def describe(self) -> dict:
        return {"source": "multi-store", "noise_policy": "fixed-seed (precomputed)",
                "keys": [list(k) for k in self.features]}


class BackboneSource:
    """Runs the U-Net on demand.

    Training batches use ``train_policy`` (default fresh noise per epoch);
    evaluation always uses the fixed per-image seeds.
    """

    live = True

    def __init__(self, model, schedule, images, request, seed: int, train_policy: str = "fresh"):
        self.model, self.schedule, self.images, self.request = model, schedule, images, request
        self.seed = seed
        self.seeds = image_seeds(seed, images.shape[0])
        self.train_policy = train_policy
        self.finetune = False

    def __len__(self):
        return self.images.shape[0]

    def batch(self, idx, epoch=None, train=False):
        from dataclasses import replace

        idx = torch.as_tensor(idx)
        policy = self.train_policy if train else "fixed-seed"
        req = replace(self.request, noise_policy=policy)
        seeds = [self.seeds[i] for i in idx.tolist()]
        with torch.set_grad_enabled(train and self.finetune):
            return extract_features(self.model, self.schedule, self.images[idx], req, seeds, epoch=epoch or 0)

    def trainable(self, mode: str):
        self.finetune = mode == "finetune"
        return list(self.model.named_parameters()) if self.finetune else []

    def describe(self) -> dict:
        return {"source": "backbone", "request": self.request.to_dict(), "train_noise_policy": self.train_policy,
                "eval_noise_policy": "fixed-seed", "seed": self.seed}


# --------------------------------------------------------------------------
# probe protocol
# --------------------------------------------------------------------------

@dataclass
class ProbeProtocol:
    epochs: int = 28
    lr: float = 1e-3
    step_gamma: float = 0.1
    step_every: int = 7
    batch_size: int = 64

    def lr_at(self, epoch: int) -> float:
        return step_lr(self.lr, epoch, self.step_gamma, self.step_every)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProbeReport:
    epoch_losses: List[float]
    lr_trace: List[float]
    top1: float
    top5: float
    train_top1: float
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)


def topk_accuracy(logits: torch.Tensor, labels: torch.Tensor, ks=(1, 5)) -> Dict[int, float]:
    """Top-k hit rates; on exact logit ties the lower class index ranks first."""
    logits = logits.detach()
    labels = labels.long()
    true = logits.gather(1, labels[:, None])
    cls = torch.arange(logits.shape[1])[None]
    rank = (logits > true).sum(1) + ((logits == true) & (cls < labels[:, None])).sum(1)
    n = max(1, labels.shape[0])
    return {k: float((rank < k).sum()) / n for k in ks}


def _predict(head, source, n: int, batch_size: int) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for s in range(0, n, batch_size):
            idx = torch.arange(s, min(s + batch_size, n))
            out.append(head(source.batch(idx, train=False)))
    return torch.cat(out)


def evaluate_head(head, source, labels: torch.Tensor, batch_size: int = 256) -> Dict[str, float]:
    labels = torch.as_tensor(labels)
    if len(source) != labels.shape[0]:
        raise ValueError(f"feature count {len(source)} does not match label count {labels.shape[0]}")
    was_training = head.training
    head.eval()
    try:
        logits = _predict(head, source, labels.shape[0], batch_size)
    finally:
        head.train(was_training)
    acc = topk_accuracy(logits, labels)
    return {"top1": acc[1], "top5": acc[5]}


def train_probe(
    head: nn.Module,
    source,
    labels: torch.Tensor,
    protocol: ProbeProtocol = ProbeProtocol(),
    mode: str = "frozen",
    seed: int = 0,
    *,
    eval_source=None,
    eval_labels: Optional[torch.Tensor] = None,
    extra_modules: Sequence[nn.Module] = (),
    provenance: Optional[dict] = None,
) -> ProbeReport:
    """Cross-entropy + Adam with a step learning-rate schedule.

    ``extra_modules`` are trained together with the head (e.g. a feedback
    network). ``mode="finetune"`` also trains the backbone of a live source.
    """
    labels = torch.as_tensor(labels).long()
    if len(source) != labels.shape[0]:
        raise ValueError(f"feature count {len(source)} does not match label count {labels.shape[0]}")
    if mode not in ("frozen", "finetune"):
        raise ValueError(f"mode must be 'frozen' or 'finetune', got {mode!r}")
    if mode == "finetune" and not getattr(source, "live", False):
        raise ValueError("finetune mode needs a live backbone source, not a precomputed store")
    if eval_source is not None and eval_labels is not None and len(eval_source) != len(eval_labels):
        raise ValueError(f"eval feature count {len(eval_source)} does not match label count {len(eval_labels)}")

    named = list(head.named_parameters())
    for i, m in enumerate(extra_modules):
        named += [(f"extra{i}.{n}", p) for n, p in m.named_parameters()]
    named += [(f"backbone.{n}", p) for n, p in source.trainable(mode)]
    opt = Adam(named, lr=protocol.lr)
    gen = torch_gen(seed, "probe-shuffle")
    n = labels.shape[0]
    losses, lrs = [], []
    modules = [head, *extra_modules]

    for epoch in range(1, protocol.epochs + 1):
        opt.lr = protocol.lr_at(epoch)
        lrs.append(opt.lr)
        for m in modules:
            m.train()
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for s in range(0, n, protocol.batch_size):
            idx = perm[s:s + protocol.batch_size]
            x = source.batch(idx, epoch=epoch, train=True)
            loss = F.cross_entropy(head(x), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        losses.append(total / count)

    for m in modules:
        m.eval()
    train_acc = evaluate_head(head, source, labels)["top1"]
    if eval_source is not None:
        acc = evaluate_head(head, eval_source, eval_labels)
    else:
        acc = evaluate_head(head, source, labels)
    config = {
        "protocol": protocol.to_dict(),
        "mode": mode,
        "seed": seed,
        "head": type(head).__name__,
        "head_params": sum(p.numel() for p in head.parameters()),
        "source": source.describe(),
        "noise_policy_note": "training: fresh noise per epoch for live sources; evaluation: fixed per-image seeds",
        "eval_split": "eval" if eval_source is not None else "train",
        **(provenance or {}),
    }
    return ProbeReport(losses, lrs, acc["top1"], acc["top5"], train_acc, config)


def build_difformer(cfg: DifFormerConfig, seed: int = 0) -> DifFormer:
    with seeded_init(derive_seed(seed, "head", "difformer")):
        return DifFormer(cfg)
