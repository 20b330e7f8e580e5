"""Adam with bias correction, and a step learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Tuple

import torch


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_update(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
) -> Tuple[Mapping[str, torch.Tensor], AdamState]:
    """One Adam step, applied in place to ``params``.

    Parameters without an entry in ``grads`` (or with a ``None`` gradient)
    are left untouched and keep their moments.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(params[name].shape)} for {name!r}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params, state


class Adam:
    """Thin driver around :func:`adam_update` for named module parameters."""

    def __init__(self, named_params: Iterable[Tuple[str, torch.nn.Parameter]], lr: float = 1e-3, **kw):
        self.params = {n: p for n, p in named_params if p.requires_grad}
        self.state = AdamState(lr=lr, **kw)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_update(self.params, {n: p.grad for n, p in self.params.items()}, self.state)


def step_lr(base_lr: float, epoch: int, gamma: float = 0.1, every: int = 7) -> float:
    """Learning rate for 1-based ``epoch``: ``base * gamma ** ((epoch - 1) // every)``."""
    return base_lr * gamma ** ((int(epoch) - 1) // int(every))
