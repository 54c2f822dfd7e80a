"""AdamW with decoupled weight decay and bias correction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import ConfigError, NonFiniteError


@dataclass
class OptimHyper:
    lr: float = 5e-3
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 4
    max_steps: int | None = None
    epochs: int = 1
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.betas = tuple(self.betas)

    @classmethod
    def tokmem(cls, **kw) -> "OptimHyper":
        return cls(**{"lr": 5e-3, "weight_decay": 0.0, **kw})

    @classmethod
    def finetune(cls, **kw) -> "OptimHyper":
        return cls(**{"lr": 5e-5, "weight_decay": 1e-2, **kw})


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)


def clip_grad_norm(grads: Sequence[torch.Tensor], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g.mul_(scale)
    return total


@torch.no_grad()
def adamw_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: AdamWState,
    hyper: OptimHyper,
) -> tuple[Sequence[torch.Tensor], AdamWState]:
    """One AdamW update applied in place; returns ``(params, state)``.

    theta <- theta - lr*wd*theta - lr * m_hat / (sqrt(v_hat) + eps)
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"param {i}: shape {tuple(p.shape)} vs grad {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            bad = int((~torch.isfinite(g)).sum())
            raise NonFiniteError(f"gradient {i} (shape {tuple(g.shape)}) has {bad} non-finite entries at step {state.step + 1}")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    beta1, beta2 = hyper.betas
    state.step += 1
    bc1 = 1 - beta1**state.step
    bc2 = 1 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        if hyper.weight_decay:
            p.sub_(hyper.lr * hyper.weight_decay * p)
        denom = (v / bc2).sqrt_().add_(hyper.eps)
        p.sub_(hyper.lr * (m / bc1) / denom)
    return params, state
