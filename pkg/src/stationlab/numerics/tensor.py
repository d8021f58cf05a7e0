"""Dense float tensors with a recorded-operation graph for reverse-mode autodiff.

Values are float32 by default (training mode). Verification code (finite
difference checks) can switch to float64 via `precision("float64")`; the same
kernels run in either width.

Graphs are explicit: ops take a `graph` argument and append one node per
recorded operation in execution order. `backward` replays the tape in reverse
and accumulates gradients into `Tensor.grad`.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractViolation

_DTYPE = np.float32


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPE)


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractViolation(f"unsupported dtype {dtype!r}")
    _DTYPE = dt.type


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (float64 for gradient checks)."""
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """A dense array plus autodiff bookkeeping.

    `grad`, when populated, always has the same shape as `data`. Gradients
    accumulate across backward calls; callers zero them between steps.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} does not match value shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Node:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.name = name
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Tape of recorded operations in execution order.

    Also tracks leaf tensors (requires_grad inputs that no node produced), so
    backward can zero-fill parameters that did not participate in the loss.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def record(self, name: str, inputs: Sequence[Tensor], output: Tensor,
               backward_fn) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves[id(t)] = t
        self._produced.add(id(output))
        self.nodes.append(Node(name, inputs, output, backward_fn))

    def watch(self, tensor: Tensor) -> None:
        """Register a parameter so backward zero-fills it even when unused."""
        if tensor.requires_grad:
            self._leaves[id(tensor)] = tensor

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())


def backward(loss: Tensor, graph: Graph) -> None:
    """Populate grads of every requires_grad tensor reachable from `loss`.

    Leaf parameters known to the graph that do not participate in the loss
    receive an explicit zero grad.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        holders.pop(id(node.output), None)
        input_grads = node.backward_fn(g)
        for t, ig in zip(node.inputs, input_grads):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                holders[key] = t
    # whatever remains was never consumed by a producing node: the leaves
    for key, t in holders.items():
        t.accumulate_grad(np.asarray(grads[key], dtype=t.data.dtype))
    for t in graph.leaves:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
