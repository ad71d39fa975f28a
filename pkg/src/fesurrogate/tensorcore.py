"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations record a backward closure on the active :class:`Tape`; when no
tape is active (inference) nothing is recorded.  Usage::

    with Tape() as tape:
        loss = mse(forward(x), y)
    grads = tape.backward(loss)
"""
from __future__ import annotations

import os
from typing import Callable, Optional, Sequence

import numpy as np

DEBUG = bool(os.environ.get("FESURROGATE_DEBUG"))


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of operations for one backward pass."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)

    def __len__(self):
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by backward()")
        self._nodes.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> dict:
        """Reverse sweep from a scalar ``loss``.

        Sets ``.grad`` on every leaf tensor that requires gradients and
        returns ``{leaf: grad}`` in first-use order.
        """
        if self._consumed:
            raise TapeError("backward() already called on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._leaf:
                    leaves[key] = t
        result = {}
        for key, t in leaves.items():
            t.grad = grads.get(key, np.zeros_like(t.data))
            result[t] = t.grad
        self._nodes.clear()
        return result


def current_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def _make(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(B, m, k) @ (B, k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def back(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2
        return _make(out, (a, b), back)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}")

    def back_batched(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    return _make(a.data @ b.data, (a, b), back_batched)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def total(x) -> Tensor:
    """Sum of all elements."""
    x = as_tensor(x)
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _make(np.asarray(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def expand_points(x, n_points: int) -> Tensor:
    """Repeat a per-set vector ``(B, C)`` onto every point: ``(B, S, C)``."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"expand_points expects (B, C), got {x.shape}")
    out = np.broadcast_to(x.data[:, None, :], (x.shape[0], n_points, x.shape[1])).copy()
    return _make(out, (x,), lambda g: (g.sum(axis=1),))


def max_over_points(x) -> Tensor:
    """Max over the point axis of ``(B, S, C)``; ties go to the lowest point index."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"max_over_points expects (B, S, C), got {x.shape}")
    idx = np.argmax(x.data, axis=1)
    out = np.take_along_axis(x.data, idx[:, None, :], axis=1)[:, 0, :]

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[:, None, :], g[:, None, :], axis=1)
        return (gx,)
    t = _make(out, (x,), back)
    t.name = "max"
    return t


class BatchNormState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        # when set, overrides the momentum passed to batch_norm (used for recalibration)
        self.momentum: Optional[float] = None


def batch_norm(x, gamma, beta, state: BatchNormState, train: bool,
               momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Normalise over every axis except the last (channel) axis.

    Train mode uses batch statistics and updates the running estimates as
    ``running = momentum * running + (1 - momentum) * batch``; infer mode is
    a fixed affine map from the running estimates.  A train-mode batch with a
    single row falls back to the running estimates.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: channel mismatch {x.shape} vs {gamma.shape}/{beta.shape}")
    n = x.data.size // C
    x2 = x.data.reshape(n, C)
    if train and n > 1:
        mu = x2.mean(axis=0)
        xhat = x2 - mu
        var = np.einsum("ij,ij->j", xhat, xhat) / n
        inv = 1.0 / np.sqrt(var + eps)
        xhat *= inv
        m = momentum if state.momentum is None else state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mu
        state.running_var = m * state.running_var + (1 - m) * var * n / (n - 1)

        def back(g):
            g2 = g.reshape(n, C)
            dbeta = g2.sum(axis=0)
            dgamma = np.einsum("ij,ij->j", g2, xhat)
            # dx = gamma/sigma * (g - mean(g) - xhat * mean(g * xhat))
            dx = xhat * (-dgamma / n)
            dx += g2
            dx -= dbeta / n
            dx *= gamma.data * inv
            return dx.reshape(x.shape), dgamma, dbeta
    else:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x2 - state.running_mean) * inv

        def back(g):
            g2 = g.reshape(n, C)
            return ((g2 * (gamma.data * inv)).reshape(x.shape), np.einsum("ij,ij->j", g2, xhat),
                    g2.sum(axis=0))
    out = xhat * gamma.data
    out += beta.data
    return _make(out.reshape(x.shape), (x, gamma, beta), back)


def dropout(x, rate: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; identity in infer mode."""
    x = as_tensor(x)
    if not train or rate <= 0:
        return x
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def mse(pred, target) -> Tensor:
    """Mean of squared errors over all points and components."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _make(np.asarray((diff * diff).sum() / n), (pred,), lambda g: (g * 2.0 * diff / n,))
