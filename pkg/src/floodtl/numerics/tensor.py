"""Tensor value type and the reverse-mode sweep.

Ops build a graph of ``Node`` objects; ``Tensor.backward`` walks it in
reverse topological order. A node may produce several outputs (the LSTM ops
return hidden and cell state together).
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import NumericsError

FLOAT_TYPES = (np.float32, np.float64)


class Node:
    __slots__ = ("inputs", "outputs", "backward_fn", "name")

    def __init__(self, inputs, backward_fn: Callable, name: str):
        self.inputs = inputs
        self.outputs: list = []
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """Dense float array with an optional gradient buffer.

    Integer or Python inputs are stored as float32; float64 input is kept as is
    so gradient checks can replay the same graph at 64-bit.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        self.accumulate(grad)
        if self._node is None:
            return
        for node in reversed(_topo_order(self._node)):
            gs = [o.grad for o in node.outputs]
            if all(g is None for g in gs):
                continue
            gs = [np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, gs)]
            node.backward_fn(*gs)
            for o in node.outputs:
                if o is not self:
                    o.grad = None


def _topo_order(root: Node) -> list:
    order, seen = [], {id(root)}
    stack = [(root, iter(root.inputs))]
    while stack:
        node, it = stack[-1]
        for t in it:
            parent = t._node
            if parent is not None and id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent.inputs)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericsError(f"{op} produced a non-finite value")
    return arr


def make_outputs(arrays: Sequence[np.ndarray], inputs: Sequence[Tensor], backward_fn: Callable, op: str):
    """Wrap op results in Tensors and attach a graph node when any input needs grad."""
    outs = [Tensor(check_finite(a, op)) for a in arrays]
    if any(t.requires_grad for t in inputs):
        node = Node([t for t in inputs if t.requires_grad], backward_fn, op)
        for o in outs:
            o.requires_grad = True
            o._node = node
        node.outputs = outs
    return outs
