"""AdamW with decoupled weight decay, and the learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import StateError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices only: not biases, norms, [CLS] or positions."""
    return value.ndim >= 2 and not name.endswith(("pos_embed", "cls_token"))


def optimizer_step(params: dict, lr: float, weight_decay: float, state: AdamState,
                   beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS) -> None:
    """One bias-corrected Adam update with decoupled weight decay.

    Every parameter that requires grad must carry a populated ``grad``.
    """
    trainable = {n: p for n, p in params.items() if p.requires_grad}
    missing = [n for n, p in trainable.items() if p.grad is None]
    if missing:
        raise StateError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[0]}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in trainable.items():
        g = p.grad.astype(p.data.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        data = p.data
        if weight_decay and decays(name, data):
            data = data * (1.0 - lr * weight_decay)
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def learning_rate(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.1,
                  final_lr: float = 1e-6) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then cosine decay."""
    warm = int(round(warmup_fraction * total_steps))
    if step < warm:
        return base_lr * (step + 1) / warm
    span = max(1, total_steps - warm)
    progress = min(1.0, (step - warm) / span)
    return final_lr + (base_lr - final_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))
