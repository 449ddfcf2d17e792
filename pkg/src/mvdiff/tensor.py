"""Dense N-D array with reverse-mode automatic differentiation.

numpy holds the storage and does the arithmetic; this module adds the tape.
Tensors are immutable from the caller's side once built (training code
updates parameter .data in place through the optimizer, which owns that
exception). Supported dtypes are float32 and float64, never mixed inside
one expression.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "NumericError",
    "no_grad",
    "tensor",
    "zeros",
    "ones",
    "concat",
    "softmax",
    "attention_probs",
    "masked_fill",
    "take_rows",
    "grad_check",
]

_GRAD_ENABLED = True

_ALLOWED = (np.float32, np.float64)


class DimensionError(ValueError):
    """Shape or dtype mismatch between operands."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (cheap inference passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data, dtype):
    a = np.asarray(data, dtype=dtype)
    if a.dtype.type not in _ALLOWED:
        raise DimensionError(f"unsupported dtype {a.dtype}")
    return a


def _check_same_dtype(a: "Tensor", b: "Tensor"):
    if a.data.dtype != b.data.dtype:
        raise DimensionError(f"mixed dtypes {a.data.dtype} vs {b.data.dtype}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "meta")

    def __init__(self, data, dtype=np.float32, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad = None
        self._parents = ()
        self._backward = None
        self.meta = None

    # -- construction of op results -------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.meta = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.meta = None
        return t

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), dtype=dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            _check_same_dtype(self, other)
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype), dtype=self.data.dtype)

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return Tensor._result(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._coerce(other)
        out_data = self.data - other.data

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)

        return Tensor._result(out_data, (self, other), backward)

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        out_data = self.data * other.data
        a, b = self, other

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._result(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out_data = self.data / other.data
        a, b = self, other

        def backward(g):
            ga = g / b.data
            gb = -g * a.data / (b.data * b.data)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._result(out_data, (self, other), backward)

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise DimensionError("only scalar exponents are supported")
        out_data = self.data ** p
        x = self

        def backward(g):
            return (g * p * x.data ** (p - 1),)

        return Tensor._result(out_data, (self,), backward)

    def __matmul__(self, other):
        other = self._coerce(other)
        if self.ndim < 1 or other.ndim < 1:
            raise DimensionError("matmul needs at least 1-D operands")
        if self.shape[-1] != other.shape[-2 if other.ndim > 1 else -1]:
            raise DimensionError(f"matmul inner dims disagree: {self.shape} x {other.shape}")
        out_data = np.matmul(self.data, other.data)
        a, b = self, other

        def backward(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._result(out_data, (self, other), backward)

    # -- elementwise functions ---------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._result(out_data, (self,), lambda g: (g * out_data,))

    def log(self):
        x = self
        return Tensor._result(np.log(self.data), (self,), lambda g: (g / x.data,))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return Tensor._result(out_data, (self,), lambda g: (g * 0.5 / out_data,))

    def tanh(self):
        out_data = np.tanh(self.data)
        return Tensor._result(out_data, (self,), lambda g: (g * (1.0 - out_data * out_data),))

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._result(out_data, (self,), lambda g: (g * out_data * (1.0 - out_data),))

    def silu(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        out_data = self.data * s
        x = self

        def backward(g):
            return (g * (s + x.data * s * (1.0 - s)),)

        return Tensor._result(out_data, (self,), backward)

    def relu(self):
        keep = self.data > 0
        return Tensor._result(self.data * keep, (self,), lambda g: (g * keep,))

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(g.dtype, copy=False),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape),)

        return Tensor._result(out_data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out_data = self.data.reshape(shape)
        return Tensor._result(out_data, (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out_data = self.data.transpose(axes)
        return Tensor._result(out_data, (self,), lambda g: (g.transpose(inv),))

    def __getitem__(self, idx):
        out_data = self.data[idx]
        shape, dtype = self.shape, self.data.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            full[idx] = g
            return (full,)

        return Tensor._result(out_data, (self,), backward)

    # -- autodiff -----------------------------------------------------------

    def backward(self):
        if self.size != 1:
            raise DimensionError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen = set()

        def visit(t: Tensor):
            stack = [(t, iter(t._parents))]
            seen.add(id(t))
            while stack:
                node, it = stack[-1]
                advanced = False
                for p in it:
                    if id(p) not in seen and p.requires_grad:
                        seen.add(id(p))
                        stack.append((p, iter(p._parents)))
                        advanced = True
                        break
                if not advanced:
                    topo.append(node)
                    stack.pop()

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if not parent.requires_grad or g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.ascontiguousarray(g, dtype=parent.data.dtype)
                else:
                    parent.grad = parent.grad + g

    def zero_grad(self):
        self.grad = None


# -- free functions ------------------------------------------------------


def tensor(data, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), dtype=dtype, requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), dtype=dtype, requires_grad=requires_grad)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out_data, tuple(tensors), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax; -inf logits get exact zero weight.

    A slice that is entirely -inf yields an all-zero slice instead of NaN;
    the returned tensor's meta carries {"all_masked_slices": n} when that
    happens so callers can tell empty-mask output from a real distribution.
    """
    d = x.data
    m = np.max(d, axis=axis, keepdims=True)
    np.copyto(m, 0.0, where=~np.isfinite(m))  # all -inf slice: exp(-inf) = 0 below
    e = d - m
    np.exp(e, out=e)
    s = e.sum(axis=axis, keepdims=True)
    dead = s == 0.0
    if dead.any():
        s = np.where(dead, 1.0, s)
    e /= s
    y = e

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    out = Tensor._result(y, (x,), backward)
    n_dead = int(dead.sum())
    if n_dead:
        out.meta = {"all_masked_slices": n_dead}
    return out


def attention_probs(q: Tensor, k: Tensor, scale: float, keep: np.ndarray | None = None) -> Tensor:
    """softmax(q @ k^T * scale) with optional key mask, fused for speed.

    q, k: [..., T, d] head tensors. keep broadcasts over the logit shape;
    excluded keys enter the softmax as -inf, so their weight is exactly 0,
    and an all-excluded row comes back all-zero. Semantics match
    masked_fill + softmax; this version owns its buffers and works in place.
    """
    _check_same_dtype(q, k)
    raw = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    raw *= scale
    if keep is not None:
        keep_b = np.broadcast_to(np.asarray(keep, dtype=bool), raw.shape)
        np.copyto(raw, -np.inf, where=~keep_b)
    m = raw.max(axis=-1, keepdims=True)
    np.copyto(m, 0.0, where=~np.isfinite(m))
    raw -= m
    np.exp(raw, out=raw)
    s = raw.sum(axis=-1, keepdims=True)
    dead = s == 0.0
    n_dead = int(dead.sum())
    if n_dead:
        np.copyto(s, 1.0, where=dead)
    raw /= s
    y = raw

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        gl = g - dot
        gl *= y
        gq = np.matmul(gl, k.data)
        gq *= scale
        gk = np.matmul(np.swapaxes(gl, -1, -2), q.data)
        gk *= scale
        return _unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape)

    out = Tensor._result(y, (q, k), backward)
    if n_dead:
        out.meta = {"all_masked_slices": n_dead}
    return out


def masked_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Where keep is True pass x through bit-exactly, else the constant."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    out_data = np.where(keep, x.data, np.asarray(value, dtype=x.data.dtype))

    def backward(g):
        return (g * keep,)

    return Tensor._result(out_data, (x,), backward)


def gather_tokens(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch token gather: x [B,T,C], idx [B,K] -> [B,K,C]."""
    idx = np.asarray(idx, dtype=np.int64)
    b = np.arange(idx.shape[0])[:, None]
    out_data = x.data[b, idx]
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (b, idx), g)
        return (full,)

    return Tensor._result(out_data, (x,), backward)


def scatter_tokens(x_sub: Tensor, idx: np.ndarray, t: int) -> Tensor:
    """Inverse of gather_tokens into an all-zero [B,T,C]; pad rows must be zero."""
    idx = np.asarray(idx, dtype=np.int64)
    b = np.arange(idx.shape[0])[:, None]
    bsz, k, c = x_sub.shape
    out_data = np.zeros((bsz, t, c), dtype=x_sub.data.dtype)
    np.add.at(out_data, (b, idx), x_sub.data)

    def backward(g):
        return (g[b, idx],)

    return Tensor._result(out_data, (x_sub,), backward)


def take_rows(w: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather (embedding lookup) with scatter-add backward."""
    idx = np.asarray(idx, dtype=np.int64)
    out_data = w.data[idx]
    shape, dtype = w.shape, w.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(out_data, (w,), backward)


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    f must be a scalar-valued function of a single float64 tensor. The
    denominator is max(|g_fd|, |g_ad|, 1e-8) per element.
    """
    if x.data.dtype != np.float64:
        raise DimensionError("grad_check requires a float64 input")
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-4]")
    probe = Tensor(x.data.copy(), dtype=np.float64, requires_grad=True)
    out = f(probe)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("f(x) is not finite")
    out.backward()
    g_ad = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.copy().reshape(-1)
    g_fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            hi = f(Tensor(flat.reshape(x.shape), dtype=np.float64)).item()
        flat[i] = orig - eps
        with no_grad():
            lo = f(Tensor(flat.reshape(x.shape), dtype=np.float64)).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError("finite differences hit non-finite values")
        g_fd[i] = (hi - lo) / (2.0 * eps)
    g_fd = g_fd.reshape(x.shape)
    denom = np.maximum(np.maximum(np.abs(g_fd), np.abs(g_ad)), 1e-8)
    return float(np.max(np.abs(g_ad - g_fd) / denom))
