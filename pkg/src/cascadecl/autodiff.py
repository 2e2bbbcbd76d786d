"""Dense matrices with tape-based reverse-mode differentiation.

Only the handful of primitives the graph classifier needs are provided.
Everything is float64. A tensor is a matrix or a stack of equally shaped
matrices (leading batch axis); matrix primitives act on each matrix of a
stack, and a plain matrix combined with a stack is shared by every member.
A primitive records itself on the innermost active :class:`Tape` when at
least one input requires a gradient::

    with Tape() as tape:
        loss = frobenius_sq(matmul(x, w))
    (gw,) = backward(tape, loss, [w])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DisconnectedLoss, LengthMismatch, NonFiniteInput, ShapeMismatch

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", _check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim not in (2, 3):
            raise ShapeMismatch(f"Tensor must be 2-D or a 3-D stack, got shape {arr.shape}")
        if _check and not np.isfinite(arr).all():
            raise NonFiniteInput(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    out: Tensor
    parents: tuple[Tensor, ...]
    grad_fn: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


def _emit(value: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = value
    out.name = ""
    tracked = bool(_ACTIVE) and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    if tracked:
        _ACTIVE[-1].records.append(_Record(out, parents, grad_fn))
    return out


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(msg)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _batch_ok(a: Tensor, b: Tensor) -> bool:
    return a.data.ndim == 2 or b.data.ndim == 2 or a.shape[0] == b.shape[0]


# -- primitives ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need(a.cols == b.rows and _batch_ok(a, b), f"matmul {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    ga, gb = a.requires_grad, b.requires_grad
    if A.ndim == 3 and B.ndim == 2:
        # shared right factor: fold the stack into rows so its gradient is one product
        def grad(g):
            gB = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if gb else None
            return (g @ B.T if ga else None, gB)
        return _emit(A @ B, (a, b), grad)
    return _emit(A @ B, (a, b), lambda g: (_unbroadcast(g @ _swap(B), A.shape) if ga else None,
                                           _unbroadcast(_swap(A) @ g, B.shape) if gb else None))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a single row (or matrix) shared across rows (or the stack) of ``a``."""
    if a.shape == b.shape:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g))
    _need(b.data.ndim <= a.data.ndim and (b.rows == 1 or b.rows == a.rows) and b.cols == a.cols
          and _batch_ok(a, b), f"add {a.shape} + {b.shape}")
    shape = b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _need(a.shape == b.shape, f"hadamard {a.shape} * {b.shape}")
    A, B = a.data, b.data
    ga, gb = a.requires_grad, b.requires_grad
    return _emit(A * B, (a, b), lambda g: (g * B if ga else None, g * A if gb else None))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _emit(a.data * mask, (a,), lambda g: (g * mask,))


def transpose(a: Tensor) -> Tensor:
    return _emit(_swap(a.data).copy(), (a,), lambda g: (_swap(g),))


def slice_cols(a: Tensor, k: int) -> Tensor:
    """First ``k`` columns of ``a``."""
    _need(0 < k <= a.cols, f"slice_cols k={k} of {a.shape}")
    if k == a.cols:
        return a
    shape = a.shape

    def grad(g):
        full = np.zeros(shape)
        full[..., :k] = g
        return (full,)

    return _emit(a.data[..., :k].copy(), (a,), grad)


def row_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return _emit(p, (a,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def mean_rows(a: Tensor) -> Tensor:
    """Column means as a 1 x cols tensor (per matrix of a stack)."""
    r, shape = a.rows, a.shape
    return _emit(a.data.mean(axis=-2, keepdims=True), (a,), lambda g: (np.broadcast_to(g / r, shape),))


def frobenius_sq(a: Tensor) -> Tensor:
    A = a.data
    return _emit(np.sum(A * A, axis=(-2, -1), keepdims=True), (a,), lambda g: (2.0 * g * A,))


def batch_sum(a: Tensor) -> Tensor:
    """Sum of the matrices of a stack; a plain matrix passes through."""
    if a.data.ndim == 2:
        return a
    shape = a.shape
    return _emit(a.data.sum(axis=0), (a,), lambda g: (np.broadcast_to(g, shape),))


def cross_entropy(logits: Tensor, label) -> Tensor:
    """``-log softmax(logits)[label]`` for a 1 x C row of logits.

    For a stack of rows ``label`` holds one class per member and the result
    is a stack of 1 x 1 losses.
    """
    _need(logits.rows == 1, f"cross_entropy expects one row, got {logits.shape}")
    labels = np.atleast_1d(np.asarray(label, dtype=int))
    batch = logits.data.shape[0] if logits.data.ndim == 3 else 1
    _need(labels.shape == (batch,), f"{labels.size} labels for {batch} rows of logits")
    if labels.min() < 0 or labels.max() >= logits.cols:
        raise ShapeMismatch(f"label {label} out of range for {logits.cols} classes")
    z = logits.data.reshape(batch, -1)
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    p = np.exp(z - lse)
    rows = np.arange(batch)
    d = p.copy()
    d[rows, labels] -= 1.0
    out = (lse[:, 0] - z[rows, labels]).reshape(logits.shape[:-1] + (1,))
    shape = logits.shape
    return _emit(out, (logits,), lambda g: ((g.reshape(batch, 1) * d).reshape(shape),))


def mean_row_entropy(logits: Tensor) -> Tensor:
    """Mean over rows of the entropy of ``row_softmax(logits)``, computed from logits."""
    Z = logits.data
    m = Z.max(axis=-1, keepdims=True)
    e = np.exp(Z - m)
    s = e.sum(axis=-1, keepdims=True)
    P = e / s
    lse = m + np.log(s)
    zbar = (P * Z).sum(axis=-1, keepdims=True)
    H = lse - zbar
    n = Z.shape[-2]
    return _emit(H.mean(axis=-2, keepdims=True), (logits,), lambda g: (-(g / n) * P * (Z - zbar),))


def gcn_normalize(a: Tensor) -> Tensor:
    """``D^-1/2 (A + I) D^-1/2`` for a nonnegative weighted adjacency, with D the row sums of ``A + I``."""
    _need(a.rows == a.cols, f"gcn_normalize needs a square matrix, got {a.shape}")
    At = a.data + np.eye(a.rows)
    d = At.sum(axis=-1)
    r = 1.0 / np.sqrt(d)
    ri, rj = r[..., :, None], r[..., None, :]
    N = At * ri * rj

    def grad(g):
        gA = g * ri * rj
        # contribution through the degrees
        dr = (g * At * rj).sum(axis=-1) + (g * At * ri).sum(axis=-2)
        dd = dr * (-0.5) * d ** -1.5
        return (gA + dd[..., :, None],)

    return _emit(N, (a,), grad)


# -- reverse pass -------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, params):
    """Gradients of the scalar ``loss`` with respect to ``params``.

    ``params`` is either a :class:`ParamVector` (a flat gradient vector is
    returned) or a sequence of tensors (one array per tensor). The tape is
    cleared afterwards.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"loss must be scalar, got {loss.shape}")
    if not any(r.out is loss for r in reversed(tape.records)):
        raise DisconnectedLoss("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for parent, pg in zip(rec.parents, rec.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    tape.clear()
    if isinstance(params, ParamVector):
        return np.concatenate([grads.get(id(t), np.zeros(t.shape)).ravel() for t in params.tensors])
    return [np.asarray(grads.get(id(t), np.zeros(t.shape))) for t in params]


# -- flat parameter view ------------------------------------------------------


class ParamVector:
    """Ordered flat view over named trainable tensors."""

    def __init__(self, named: Sequence[tuple[str, Tensor]]):
        self.names = [n for n, _ in named]
        self.tensors = [t for _, t in named]
        self.offsets: dict[str, tuple[int, tuple[int, int]]] = {}
        pos = 0
        for n, t in named:
            self.offsets[n] = (pos, t.shape)
            pos += t.data.size
        self.size = pos

    def __len__(self) -> int:
        return self.size

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors])

    def unflatten(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise LengthMismatch(f"expected {self.size} values, got {vec.shape}")
        for n, t in zip(self.names, self.tensors):
            start, shape = self.offsets[n]
            t.data = vec[start:start + t.data.size].reshape(shape).copy()


def sgd_step(params: ParamVector, grads: np.ndarray, lr: float) -> None:
    if len(grads) != len(params):
        raise LengthMismatch(f"{len(grads)} gradients for {len(params)} parameters")
    params.unflatten(params.flatten() - lr * np.asarray(grads))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(params: ParamVector, grads: np.ndarray, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    grads = np.asarray(grads)
    if len(grads) != len(params) or len(state.m) != len(params):
        raise LengthMismatch(f"{len(grads)} gradients / {len(state.m)} moments for {len(params)} parameters")
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * grads
    state.v = beta2 * state.v + (1 - beta2) * grads * grads
    mhat = state.m / (1 - beta1 ** state.t)
    vhat = state.v / (1 - beta2 ** state.t)
    params.unflatten(params.flatten() - lr * mhat / (np.sqrt(vhat) + eps))
