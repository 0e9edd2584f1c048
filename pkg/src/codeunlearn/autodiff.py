"""Tape-based reverse-mode autodiff over dense float64 arrays, plus AdamW.

Ops record onto the innermost active :class:`Tape` (a per-thread stack), so
code outside a ``with Tape():`` block runs as plain numpy with no bookkeeping.
Broadcasting is limited to a trailing-shape operand repeated over leading
batch dimensions (biases, position embeddings).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class DegenerateDistributionError(AutodiffError, ValueError):
    """A row with no finite logit cannot be normalised."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable ops; use as a context manager."""

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, rule) -> None:
        if self.consumed:
            raise AutodiffError("tape already consumed by backward(); open a new tape")
        self.nodes.append(_Node(inputs, output, rule))


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    out.name = None
    stack = _stack()
    if needs and stack:
        stack[-1].record(inputs, out, rule)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead < 0 or grad.shape[lead:] != shape:
        raise ShapeError(f"cannot reduce gradient of shape {grad.shape} to {shape}")
    return grad.sum(axis=tuple(range(lead)))


def _check_trailing(a: Tensor, b: Tensor, op: str) -> None:
    big, small = (a, b) if a.data.ndim >= b.data.ndim else (b, a)
    k = small.data.ndim
    if k and big.shape[big.data.ndim - k:] != small.shape:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    if not k and small.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def rule(g):
        return g @ B.T, A.T @ g

    return _emit(A @ B, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "add")
    sa, sb = a.shape, b.shape

    def rule(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit(a.data + b.data, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "sub")
    sa, sb = a.shape, b.shape

    def rule(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _emit(a.data - b.data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "mul")
    A, B = a.data, b.data

    def rule(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _emit(A * B, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x < 0):
        raise AutodiffError("log of a negative value")
    with np.errstate(divide="ignore"):
        y = np.log(x)
    return _emit(y, (a,), lambda g: (g / x,))


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # log σ(x) = -softplus(-x), evaluated without overflow
    y = -np.logaddexp(0.0, -x)
    sig_neg = np.exp(-np.logaddexp(0.0, x))  # σ(-x)
    return _emit(y, (a,), lambda g: (g * sig_neg,))


def log_softmax(h: Tensor) -> Tensor:
    """Stable log-softmax over the last axis; ``-inf`` logits stay ``-inf``."""
    x = h.data
    m = np.max(x, axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateDistributionError("log_softmax: a row has no finite logit")
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def rule(g):
        # masked outputs carry no upstream gradient
        g = np.where(np.isneginf(y), 0.0, g)
        return (g - p * np.sum(g, axis=-1, keepdims=True),)

    return _emit(y, (h,), rule)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if weight.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")
    W = weight.data

    def rule(g):
        flat = ids.reshape(-1)
        onehot = np.zeros((flat.size, W.shape[0]))
        onehot[np.arange(flat.size), flat] = 1.0
        return (onehot.T @ g.reshape(-1, W.shape[1]),)

    return _emit(W[ids], (weight,), rule)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def pick(a: Tensor, ids: np.ndarray) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, ids[i]]`` for a 2-D ``a``."""
    ids = np.asarray(ids, dtype=np.int64)
    if a.data.ndim != 2 or ids.shape != (a.shape[0],):
        raise ShapeError(f"pick: need (N, V) and (N,), got {a.shape} and {ids.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        out[rows, ids] = g
        return (out,)

    return _emit(a.data[rows, ids], (a,), rule)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.data.ndim

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _emit(a.data.sum(axis=ax), (a,), rule)


def mean(a: Tensor) -> Tensor:
    n = a.size
    if n == 0:
        raise AutodiffError("mean of an empty tensor")
    return scale(sum(a), 1.0 / n)


def segment_sum(a: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Sum a 1-D tensor into ``n_segments`` buckets given per-element ids."""
    seg = np.asarray(segments, dtype=np.int64)
    if a.data.ndim != 1 or seg.shape != a.shape:
        raise ShapeError(f"segment_sum: need matching 1-D inputs, got {a.shape} and {seg.shape}")
    out = np.zeros(n_segments)
    np.add.at(out, seg, a.data)
    return _emit(out, (a,), lambda g: (g[seg],))


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise AutodiffError("backward already called on this tape")
    if not tape.nodes or not any(n.output is loss for n in tape.nodes):
        raise AutodiffError("loss was not produced on this tape (detached graph)")

    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    tape.consumed = True

    leaves = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in produced:
                leaves[id(inp)] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=DTYPE).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamWState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[Tensor], state: AdamWState) -> None:
    """One decoupled-weight-decay Adam update; clears grads afterwards."""
    for p in params:
        if p.grad is None:
            raise AutodiffError(f"parameter {p.name or p.shape} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise AutodiffError("optimiser state does not match the parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        if m.shape != p.data.shape:
            raise AutodiffError("optimiser moment shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None
