"""Tensor and Tape: the recording half of the reverse-mode engine."""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from ..errors import BackwardError, BackwardWithoutForward, ShapeMismatch

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An ndarray with an optional gradient accumulator.

    Leaves (parameters) carry ``requires_grad=True`` and receive gradients in
    ``.grad``; intermediates produced under an active Tape are tracked by it.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; the functional forms live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)

    def backward(self, seed=None):
        if self.tape is None:
            raise BackwardWithoutForward("tensor was not produced on a tape")
        self.tape.backward(self, seed)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Records primitive applications while active and replays them backwards once.

    Usage::

        with Tape() as tape:
            loss = f(params)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
        if self.consumed:
            raise BackwardError("cannot record onto a tape that has already been replayed")
        for t in inputs:
            if t.tape is not None and t.tape is not self:
                raise BackwardError("tensor belongs to a different tape")
        out.tape = self
        out.requires_grad = True
        self.nodes.append(_Node(out, tuple(inputs), backward_fn))
        return out

    def backward(self, root: Tensor, seed=None):
        if self.consumed:
            raise BackwardError("tape already replayed; record a new forward pass")
        if root.tape is not self:
            raise BackwardWithoutForward("root tensor was not recorded on this tape")
        if seed is None:
            if root.data.size != 1:
                raise ShapeMismatch("backward on a non-scalar needs an explicit seed")
            seed = np.ones_like(root.data)
        seed = np.asarray(seed, dtype=root.dtype)
        if seed.shape != root.shape:
            raise ShapeMismatch(f"seed shape {seed.shape} != output shape {root.shape}")
        self.consumed = True
        grads = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gt in zip(node.inputs, in_grads):
                if gt is None or not t.requires_grad:
                    continue
                if gt.shape != t.shape:
                    raise ShapeMismatch(f"backward produced {gt.shape} for input of shape {t.shape}")
                if t.tape is None:
                    if t.grad is None:
                        t.grad = np.array(gt, dtype=t.dtype, copy=True)
                    else:
                        t.grad += gt
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gt if prev is None else prev + gt
        self.nodes = []


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a forward result, recording it when some input needs a gradient."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
