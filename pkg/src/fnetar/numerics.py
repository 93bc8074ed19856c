"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op reads ``Tensor.data`` (a float64 ndarray), computes its result
with numpy, and, when any input requires a gradient, appends a record
to the active :class:`Tape`. :func:`backward` replays that tape in
reverse exactly once.

Broadcasting is limited to what the model needs: a lower-rank operand
is aligned on the trailing axes (bias vectors, shared weight matrices,
positional tables) and its gradient is summed over the leading axes.
"""

from __future__ import annotations

import contextlib
import functools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateDistributionError,
    DomainError,
    NumericalError,
    ShapeError,
    TapeError,
)

LN_EPS = 1e-5


class Tensor:
    """A float64 array that may carry a gradient and a tape position."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_tensor(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable ops; consumed by one backward pass."""

    records: list[_Record] = field(default_factory=list)
    consumed: bool = False

    def __len__(self) -> int:
        return len(self.records)


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def new_tape() -> Tape:
    """Discard the current recording and start an empty tape."""
    _state.tape = Tape()
    return _state.tape


@contextlib.contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def recording():
    """Record into a fresh tape for the duration of the block."""
    prev = _state.tape
    tape = Tape()
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


def _check_finite(out: np.ndarray, inputs: Iterable[Tensor], name: str) -> None:
    if np.isfinite(out).all():
        return
    if all(np.isfinite(t.data).all() for t in inputs):
        raise NumericalError(f"{name}: non-finite value produced from finite inputs")


def _emit(out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, name: str) -> Tensor:
    _check_finite(out, inputs, name)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.node = None
    result._tape = None
    result.requires_grad = False
    if _state.enabled and any(t.requires_grad for t in inputs):
        tape = _state.tape
        if tape.consumed:
            tape = new_tape()
        for t in inputs:
            if t.node is not None and t._tape is not tape:
                raise TapeError(f"{name}: input was recorded on a different tape")
        tape.records.append(_Record(inputs, backward_fn))
        result.requires_grad = True
        result.node = len(tape.records) - 1
        result._tape = tape
    return result


def _quiet(fn):
    """Silence numpy float warnings; non-finite results are reported by ``_check_finite``."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return fn(*args, **kwargs)
    return wrapper


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_trailing(a: Tensor, b: Tensor, name: str) -> None:
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    tail = big.shape[big.ndim - small.ndim:]
    if any(s != t and s != 1 for s, t in zip(small.shape, tail)):
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not align")


# ---------------------------------------------------------------- elementwise

@_quiet
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "add")
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), back, "add")


@_quiet
def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "multiply")
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(out, (a, b), back, "multiply")


@_quiet
def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * c
    return _emit(out, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    out = np.where(keep, x.data, 0.0)
    return _emit(out, (x,), lambda g: (g * keep,), "relu")


def reduce_sum(x: Tensor) -> Tensor:
    out = np.array(x.data.sum())
    return _emit(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "reduce_sum")


# ---------------------------------------------------------------- linear algebra

@_quiet
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    n = min(len(lead_a), len(lead_b))
    if n and lead_a[len(lead_a) - n:] != lead_b[len(lead_b) - n:]:
        raise ShapeError(f"matmul: batch extents differ in {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # shared weight: flatten leading axes into one BLAS call
        k, n_out = b.shape
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n_out,))

        def back(g):
            g2 = g.reshape(-1, n_out)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a.data.reshape(-1, k).T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit(out, (a, b), back, "matmul")

    out = a.data @ b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit(out, (a, b), back, "matmul")


@_quiet
def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilized softmax. ``mask`` (True = allowed) and ``-inf`` entries give exact zeros."""
    data = x.data
    if mask is not None:
        data = np.where(mask, data, -np.inf)
    if np.isnan(data).any():
        raise NumericalError("softmax: NaN input")
    peak = data.max(axis=axis, keepdims=True)
    if np.isneginf(peak).any():
        raise DegenerateDistributionError("softmax: every entry along the axis is masked")
    e = np.exp(data - peak)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (x,), back, "softmax")


@_quiet
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last extent {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _emit(out, (x, gain, bias), back, "layer_norm")


@_quiet
def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits[..., V]``."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy: target id outside [0, {v})")
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1).astype(np.intp)
    n = t.size
    if n == 0:
        raise DomainError("cross_entropy: no targets")
    peak = flat.max(axis=1, keepdims=True)
    shifted = flat - peak
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    out = np.array(np.mean(lse - shifted[rows, t]))

    def back(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return _emit(out, (logits,), back, "cross_entropy")


# ---------------------------------------------------------------- structural

def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in xs]} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, xs, back, "concat")


def slice_tensor(x: Tensor, key) -> Tensor:
    """Basic (view) indexing with ints and slices."""
    out = x.data[key].copy()

    def back(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _emit(out, (x,), back, "slice")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _emit(out, (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {x.shape} -> {tuple(shape)}") from exc
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; the backward pass scatter-adds into it."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id outside [0, {table.shape[0]})")
    out = table.data[ids]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit(out, (table,), back, "embedding_lookup")


# ---------------------------------------------------------------- differentiation

def backward(loss: Tensor, leaves: Iterable[Tensor] = ()) -> None:
    """Populate ``.grad`` of every leaf reached from ``loss``.

    Leaf gradients accumulate, as is conventional. Leaves passed in
    ``leaves`` that the loss does not depend on get a zero gradient.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.node is None:
        raise TapeError("backward: loss was not recorded on a tape")
    if tape.consumed:
        raise TapeError("backward: tape already consumed; re-run the forward pass")
    tape.consumed = True

    pending: dict[int, np.ndarray] = {loss.node: np.ones(())}
    for idx in range(loss.node, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        rec = tape.records[idx]
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node is not None:
                prev = pending.get(t.node)
                pending[t.node] = gi if prev is None else prev + gi
            elif t.grad is None:
                t.grad = np.array(gi, dtype=np.float64)
            else:
                t.grad += gi
    tape.records.clear()
    if _state.tape is tape:
        new_tape()
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the taped gradient and central differences.

    The error per coordinate is ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with recording():
        loss = f(probe)
        backward(loss, leaves=[probe])
    analytic = probe.grad
    base = x.data.copy()
    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(Tensor(base)).item()
            flat[i] = orig - h
            down = f(Tensor(base)).item()
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
