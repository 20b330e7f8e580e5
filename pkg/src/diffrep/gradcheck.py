"""Central finite-difference checks of autograd gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import torch

from .rng import torch_gen


@dataclass
class GradCheckRow:
    name: str
    analytic: float
    numeric: float
    rel_error: float


_EPS64 = float(torch.finfo(torch.float64).eps)


def _rel(a: float, b: float, floor: float, noise: float = 0.0) -> float:
    return max(0.0, abs(a - b) - noise) / max(abs(a), abs(b), floor)


def randomize_(module: torch.nn.Module, seed: int = 0, scale: float = 0.1) -> None:
    """Overwrite every parameter with small seeded noise (zero-initialised
    layers would otherwise hide gradient bugs behind exact zeros)."""
    with torch.no_grad():
        for i, (name, p) in enumerate(module.named_parameters()):
            p.copy_(torch.randn(p.shape, generator=torch_gen(seed, "randomize", name), dtype=p.dtype) * scale)


def directional_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Dict[str, torch.Tensor],
    *,
    seed: int = 0,
    h: float = 1e-5,
    floor: float = 1e-8,
    directions: int = 1,
) -> List[GradCheckRow]:
    """Compare ``<grad, v>`` with ``(L(p + h v) - L(p - h v)) / 2h`` per tensor.

    ``v`` is a seeded unit-norm random direction for each parameter tensor.
    Each tensor is perturbed on its own, so a wrong gradient in any one of
    them shows up in its own row. The rounding noise of the difference
    quotient, ``4 eps |L| / h``, is subtracted from the absolute error
    before dividing; without it a gradient that is exactly zero would be
    judged against pure rounding.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    noise = 4 * _EPS64 * abs(float(loss.detach())) / h
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    rows = []
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            g = torch.zeros_like(p) if g is None else g
            for k in range(directions):
                v = torch.randn(p.shape, generator=torch_gen(seed, "direction", name, k), dtype=p.dtype)
                v /= v.norm()
                analytic = float((g * v).sum())
                p.add_(h * v)
                up = float(loss_fn())
                p.sub_(2 * h * v)
                down = float(loss_fn())
                p.add_(h * v)
                numeric = (up - down) / (2 * h)
                rows.append(GradCheckRow(name if directions == 1 else f"{name}#{k}", analytic, numeric,
                                         _rel(analytic, numeric, floor, noise)))
    return rows


def worst(rows: List[GradCheckRow]) -> Optional[GradCheckRow]:
    return max(rows, key=lambda r: r.rel_error) if rows else None


# --------------------------------------------------------------------------
# the standard component suite (double precision, small shapes)
# --------------------------------------------------------------------------

def _ce_loss(module, x, y):
    return lambda: torch.nn.functional.cross_entropy(module(x), y)


def check_unet(seed: int = 0) -> List[GradCheckRow]:
    """Denoising loss of the miniature U-Net w.r.t. every parameter tensor."""
    from .ddpm import build_linear_schedule, noise_batch, simple_loss
    from .unet import build_unet, mini_config

    m = build_unet(mini_config(), seed=seed, dtype=torch.float64)
    randomize_(m, seed=seed + 1, scale=0.2)
    s = build_linear_schedule(20, 1e-3, 0.05)
    g = torch_gen(seed, "gradcheck", "unet")
    x0 = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    t = torch.tensor([3, 17])
    x_t = noise_batch(s, x0, t, eps)
    return directional_check(lambda: simple_loss(m(x_t, t), eps), dict(m.named_parameters()), seed=seed)


HEAD_CASES = {
    "linear": {},
    "mlp": {"hidden": (7, 5)},
    "cnn": {"channels": (6, 5)},
    "attention": {"d_model": 8, "num_heads": 2, "pool_threshold": 2},
}


def check_head(kind: str, seed: int = 0) -> List[GradCheckRow]:
    """Cross-entropy of one head kind on 4x3x3 features (the attention head pools to 2x2)."""
    from .heads import HeadKind, build_head

    shape = (4, 3, 3)
    head = build_head(HeadKind(kind, HEAD_CASES[kind]), shape, 3, seed=seed).double()
    randomize_(head, seed=seed + 3, scale=0.3)
    g = torch_gen(seed, "gradcheck", kind)
    x = torch.randn(5, *shape, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 1, 0])
    return directional_check(_ce_loss(head, x, y), dict(head.named_parameters()), seed=seed)


def check_difformer(seed: int = 0) -> List[GradCheckRow]:
    from .heads import DifFormerConfig, build_difformer

    cfg = DifFormerConfig((1, 2), (3, 4), {3: 4, 4: 6}, 3, d_model=8, num_heads=2, num_layers=1, pool_threshold=2)
    head = build_difformer(cfg, seed).double()
    randomize_(head, seed=seed + 5, scale=0.3)
    g = torch_gen(seed, "gradcheck", "difformer")
    feats = {(t, b): torch.randn(4, cfg.block_channels[b], 3, 3, generator=g, dtype=torch.float64)
             for t in (1, 2) for b in (3, 4)}
    y = torch.tensor([0, 2, 1, 2])
    return directional_check(_ce_loss(head, feats, y), dict(head.named_parameters()), seed=seed)


def check_feedback(strategy: str = "bottleneck", seed: int = 0, plan=None) -> List[GradCheckRow]:
    """Feedback-net parameters through the second U-Net pass (backbone frozen).

    Batch-norm shifts are moved up by 2 so every ReLU input is positive:
    a finite difference straddling the kink would measure the kink, not
    the gradient.
    """
    from .diffeed import build_feedback_net, make_feedback_plan
    from .unet import build_unet, mini_config

    m = build_unet(mini_config(), seed=seed, dtype=torch.float64)
    randomize_(m, seed=seed + 7, scale=0.2)
    m.requires_grad_(False)
    cat = m.catalog
    plan = plan or make_feedback_plan(strategy, cat, cat.decoder_ids[-1], 5)
    net = build_feedback_net(plan, cat, seed).double()
    randomize_(net, seed=seed + 8, scale=0.3)
    with torch.no_grad():
        for b in net.branches.values():
            b.bn.bias.add_(2.0)
    net.train()
    g = torch_gen(seed, "gradcheck", "feedback")
    x = torch.randn(3, 3, 8, 8, generator=g, dtype=torch.float64)
    t = torch.full((3,), 5)
    _, pass1 = m.run(x, t, taps=plan.decoder_blocks)
    target = torch.randn(3, *cat.shape(plan.final_block), generator=g, dtype=torch.float64)

    def loss():
        _, f = m.run(x, t, taps=[plan.final_block], inject=net(pass1), stop_after=plan.final_block)
        return ((f[plan.final_block] - target) ** 2).mean()

    return directional_check(loss, dict(net.named_parameters()), seed=seed)


def standard_suite(seed: int = 0) -> Dict[str, List[GradCheckRow]]:
    """Rows for every trainable component, keyed by component name."""
    out = {"unet-mini": check_unet(seed)}
    for kind in HEAD_CASES:
        out[f"head-{kind}"] = check_head(kind, seed)
    out["difformer"] = check_difformer(seed)
    out["feedback-net"] = check_feedback("bottleneck", seed)
    return out
