"""Dense float64 tensors with a reverse-mode gradient tape.

Only the handful of primitives the lifetime model needs are provided:
matmul, add, sub, mul, tanh, sigmoid, relu, softmax, concat, slice,
reshape, sum, mean, mse_loss and a fused GRU sequence op whose kernels
live in :mod:`fedlaser.kernels`.

Usage::

    tape = Tape()
    with tape:
        w = tape.watch("w", np.array([2.0]))
        loss = mse_loss(w, np.zeros(1))
    grads = backward(loss, tape)
"""

from __future__ import annotations

import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from fedlaser import kernels

__all__ = [
    "NumericError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "finite_diff_check",
    "gru_sequence",
    "matmul",
    "mean",
    "mse_loss",
    "mul",
    "relu",
    "reshape",
    "sigmoid",
    "slice_axis",
    "softmax",
    "sub",
    "sum_axis",
    "tanh",
]


class NumericError(ArithmeticError):
    """A NaN or infinity appeared where only finite values are allowed."""


class ShapeError(ValueError):
    def __init__(self, op: str, a_shape, b_shape=None, detail: str = ""):
        self.op = op
        self.a_shape = tuple(a_shape)
        self.b_shape = None if b_shape is None else tuple(b_shape)
        msg = f"{op}: incompatible shapes {self.a_shape}"
        if self.b_shape is not None:
            msg += f" and {self.b_shape}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


_Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of primitive ops applied while the tape is active.

    A tape is activated with ``with tape:``; activation is per-thread so
    independent tapes can run concurrently.
    """

    _local = threading.local()

    def __init__(self):
        self.records: List[Tuple[Tensor, Tuple[Tensor, ...], _Backward]] = []
        self.params: Dict[str, Tensor] = {}

    @classmethod
    def active(cls) -> Optional["Tape"]:
        return getattr(cls._local, "tape", None)

    def __enter__(self) -> "Tape":
        self._prev = Tape.active()
        Tape._local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._local.tape = self._prev

    def watch(self, name: str, value) -> Tensor:
        """Register a named parameter whose gradient ``backward`` will report."""
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __len__(self) -> int:
        return len(self.records)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite value in result")


def _emit(op: str, data: np.ndarray, parents: Tuple[Tensor, ...], grad_fn: _Backward) -> Tensor:
    _check_finite(op, data)
    tape = Tape.active()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.records.append((out, parents, grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    # Supported: equal shapes, scalars, or trailing-aligned bias vectors.
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    if out != a.shape and out != b.shape:
        raise ShapeError(op, a.shape, b.shape, "two-sided broadcasting")
    return out


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow warnings
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and a 2-D ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    k, n = bd.shape

    def grad_fn(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), grad_fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat", (), None, "no inputs")
    ref = list(ts[0].shape)
    ax = axis % len(ref)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or other[:ax] + other[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError("concat", ts[0].shape, t.shape)
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _emit("concat", np.concatenate([t.data for t in ts], axis=ax), ts, grad_fn)


def slice_axis(a, index, axis: int) -> Tensor:
    """Index along ``axis`` with an int (axis dropped) or a ``slice`` (kept)."""
    a = as_tensor(a)
    shape = a.shape
    if isinstance(index, int) and not -shape[axis] <= index < shape[axis]:
        raise ShapeError("slice", shape, None, f"index {index} on axis {axis}")
    idx = [slice(None)] * len(shape)
    idx[axis] = index
    idx = tuple(idx)

    def grad_fn(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _emit("slice", a.data[idx].copy(), (a,), grad_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    ax = axis % len(shape)
    return _emit("sum", a.data.sum(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    if n == 0:
        raise ShapeError("mean", shape, None, "empty")
    return _emit("mean", np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(shape, float(g) / n),))


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max subtracted first)."""
    a = as_tensor(a)
    if a.data.size == 0 or a.shape[axis] == 0:
        raise ShapeError("softmax", a.shape, None, "empty input")
    if not np.isfinite(a.data).all():
        raise NumericError("softmax: non-finite input")
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (a,), grad_fn)


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences, returned as a 0-d tensor."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size
    if n == 0:
        raise ShapeError("mse_loss", pred.shape, None, "empty")

    def grad_fn(g):
        scale = 2.0 * float(g) / n
        return scale * diff, -scale * diff

    return _emit("mse_loss", np.asarray(np.mean(diff * diff)), (pred, target), grad_fn)


def gru_sequence(x, W, U, b) -> Tensor:
    """Run a GRU layer over a whole sequence with zero initial state.

    ``x`` is (batch, steps, in), ``W`` (in, 3h), ``U`` (h, 3h), ``b`` (3h,)
    with gate blocks ordered update, reset, candidate. Returns every hidden
    state, shape (batch, steps, h).
    """
    x, W, U, b = (as_tensor(t) for t in (x, W, U, b))
    if x.data.ndim != 3 or W.data.ndim != 2 or x.shape[2] != W.shape[0]:
        raise ShapeError("gru_sequence", x.shape, W.shape)
    h3 = W.shape[1]
    if h3 % 3 or U.shape != (h3 // 3, h3) or b.shape != (h3,):
        raise ShapeError("gru_sequence", W.shape, U.shape, f"bias {b.shape}")
    hs, cache = kernels.gru_forward(x.data, W.data, U.data, b.data)
    xd, Wd, Ud = x.data, W.data, U.data

    def grad_fn(g):
        return kernels.gru_backward(np.ascontiguousarray(g), xd, Wd, Ud, hs, cache)

    return _emit("gru_sequence", hs, (x, W, U, b), grad_fn)


# ---------------------------------------------------------------------------
# gradients


def backward(loss: Tensor, tape: Tape) -> Dict[str, np.ndarray]:
    """Replay ``tape`` in reverse; return one gradient per watched parameter.

    Parameters that never reached ``loss`` get a zero gradient.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError("backward", loss.shape, None, "loss must be scalar")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for out, parents, grad_fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {
        name: np.array(grads.get(id(t), np.zeros(t.shape)), dtype=np.float64).reshape(t.shape)
        for name, t in tape.params.items()
    }


def finite_diff_check(f: Callable[[Dict[str, Tensor]], Tensor],
                      params: Dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The error for each entry is ``|analytic - numeric| / max(1, |numeric|)``.
    ``f`` maps a dict of tensors to a scalar tensor and must be deterministic.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values: Dict[str, np.ndarray]) -> float:
        return float(f({k: Tensor(v) for k, v in values.items()}).data)

    f0 = evaluate(base)
    if evaluate(base) != f0:
        raise RuntimeError("finite_diff_check: f is not deterministic")

    tape = Tape()
    with tape:
        watched = {k: tape.watch(k, v) for k, v in base.items()}
        loss = f(watched)
    analytic = backward(loss, tape)

    worst = 0.0
    for name, value in base.items():
        flat = value.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = evaluate(base)
            flat[i] = orig - eps
            lo = evaluate(base)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(grad[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst

