"""Adam with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from affect_e2e.autodiff.tensor import Tensor
from affect_e2e.errors import DimensionError

DEFAULT_LEARNING_RATE = 1e-4


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kwargs) -> "AdamState":
        return cls(
            first_moment=[np.zeros(np.shape(p)) for p in params],
            second_moment=[np.zeros(np.shape(p)) for p in params],
            **kwargs,
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float = DEFAULT_LEARNING_RATE):
    """Apply one Adam update to ``params`` in place and return ``(params, state)``."""
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise DimensionError("params, grads and Adam moments must have equal counts")
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise DimensionError(f"parameter shape {p.shape} does not match gradient {np.shape(g)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
    return params, state


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(np.sum([float(np.vdot(g, g)) for g in grads])))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


@dataclass
class Adam:
    """Stateful wrapper around :func:`adam_step` for a list of tensors."""

    params: list[Tensor]
    lr: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float | None = None
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        self.state = AdamState.zeros_like(
            [p.data for p in self.params], beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = clip_grad_norm(grads, self.clip_norm) if self.clip_norm else float("nan")
        adam_step([p.data for p in self.params], grads, self.state, self.lr)
        return norm
