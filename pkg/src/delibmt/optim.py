"""Adam optimizer and the warmup learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import OptimizerError
from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moments and the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> AdamState:
    """One Adam update with bias correction, in place on the parameter arrays.

    Missing gradients count as zero. Non-finite gradients abort, naming the
    parameter. Deterministic given (params, grads, state, lr).
    """
    state.t += 1
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if m.shape != p.data.shape:
            raise OptimizerError(
                f"optimizer state for {name!r} has shape {m.shape}, "
                f"parameter has {p.data.shape}"
            )
        kernels.adam_update(
            p.data, g, m, v, state.t, lr, state.beta1, state.beta2, state.eps
        )
    return state


class Adam:
    """Stateful wrapper around `adam_step` for a fixed parameter dict."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self, lr: float) -> None:
        adam_step(self.params, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def lr_schedule(step: int, base: float, warmup: int, d_model: int) -> float:
    """Noam rate: base * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).

    Rises linearly for step < warmup, decays as step^-0.5 after; peak at
    step == warmup.
    """
    if step < 1:
        raise ValueError(f"schedule step must be >= 1, got {step}")
    return base * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)
