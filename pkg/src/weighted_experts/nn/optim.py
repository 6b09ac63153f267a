from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError
from .autograd import Parameter


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Parameter], **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place. Frozen parameters are skipped
    but keep their moment slots so indices stay aligned."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("adam_step: params, grads and state have different lengths")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise ShapeError(f"adam_step: {p.name} has shape {p.data.shape}, grad {g.shape}")
        if not p.trainable:
            continue
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / (1 - b1**t)
        vhat = state.v[i] / (1 - b2**t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f"parameter {p.name} became non-finite")


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, **kw):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.for_params(self.params, **kw)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)
