"""Adaptive-moment first-order optimizer (Adam with bias correction)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation
from .tensor import Tensor


@dataclass
class OptimizerState:
    """Per-parameter moment accumulators plus a shared step counter.

    Slots are positional: params must be passed in the same order every step.
    """

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractViolation(f"learning rate must be positive, got {self.learning_rate}")


def optimizer_step(state: OptimizerState, params: list[Tensor],
                   grads: list[np.ndarray] | None = None) -> None:
    """One in-place adaptive-moment update; bit-reproducible for equal inputs."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ContractViolation(f"{len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ContractViolation(f"parameter {i} has no gradient")
        if g.shape != p.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} does not match parameter shape {p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractViolation("optimizer state was created for a different parameter list")

    state.step_count += 1
    t = state.step_count
    dt = params[0].data.dtype if params else np.dtype(np.float32)
    b1 = dt.type(state.beta1)
    b2 = dt.type(state.beta2)
    lr = dt.type(state.learning_rate)
    eps = dt.type(state.eps)
    c1 = dt.type(1.0 - state.beta1 ** t)
    c2 = dt.type(1.0 - state.beta2 ** t)
    one = dt.type(1.0)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.data.dtype, copy=False)
        m *= b1
        m += (one - b1) * g
        v *= b2
        v += (one - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.zero_grad()
