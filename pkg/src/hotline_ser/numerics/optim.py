"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.step_count < 0:
            raise ValueError("step_count must be non-negative")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """Apply one Adam update in place and return ``(params, state)``.

    Parameters whose gradient is None are left untouched and keep their
    accumulators. Every parameter shares the global step counter.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p -= update.astype(p.dtype, copy=False)
    return params, state


class Adam:
    """Optimizer wrapper over named ``Tensor`` parameters."""

    def __init__(self, params: dict[str, Tensor], lr=3e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items()}
        adam_step(arrays, grads, self.state)
