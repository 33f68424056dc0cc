"""AdamW with decoupled weight decay and the warmup/cosine learning-rate rule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError
from .tensor import Tensor

DECAY_EXEMPT_NAMES = ("theta", "pos", "cls")


@dataclass
class OptimizerState:
    """Per-parameter moment buffers plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls(m={k: np.zeros(p.shape) for k, p in params.items()},
                   v={k: np.zeros(p.shape) for k, p in params.items()})


def decay_exempt(name: str, param: Tensor) -> bool:
    """θ, positional tables, CLS, and every 1-D parameter (biases, LN gains)
    skip weight decay."""
    base = name.split(".")[-1]
    return param.ndim < 2 or base in DECAY_EXEMPT_NAMES or name in DECAY_EXEMPT_NAMES


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float, beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8,
               weight_decay: float = 0.05) -> None:
    """One decoupled-weight-decay Adam update, in place, in fixed dict order."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay != 0.0 and not decay_exempt(name, p):
            update = update + weight_decay * p.data
        p.data = p.data - lr * update


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to base_lr, then cosine decay to 0 at total_steps.

    `step` is 1-based (the step about to be applied).
    """
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
