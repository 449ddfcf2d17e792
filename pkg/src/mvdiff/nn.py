"""Layers and optimizer built on the autodiff tensor.

Convolutions are stride-1 im2col + GEMM; resolution changes go through
explicit average pooling and nearest-neighbour upsampling so every op has
a simple exact backward. Parameter init is always driven by a labelled
RngStream, which keeps weight draws independent of construction order.
"""

from __future__ import annotations

import math

import numpy as np

from .rng import RngStream
from .tensor import DimensionError, Tensor

__all__ = [
    "conv2d",
    "avg_pool2d",
    "upsample_nearest2",
    "max_pool2d_np",
    "Linear",
    "Conv2d",
    "GroupNorm",
    "AdamW",
    "TokenAttention",
    "pos_basis_2d",
    "sinusoidal_embedding",
    "collect_params",
]


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, k, k, ho, wo), strides=(sb, sc, sh, sw, sh, sw), writeable=False
    )
    return np.ascontiguousarray(view).reshape(b, c * k * k, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, padding: int = 0) -> Tensor:
    """Stride-1 2-D convolution (cross-correlation); x [B,C,H,W], w [O,C,k,k]."""
    bb, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise DimensionError(f"conv2d kernel {w.shape} does not match input {x.shape}")
    ho, wo = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    cols = _im2col(x.data, k, padding)
    w2 = w.data.reshape(o, c * k * k)
    out = np.matmul(w2, cols)
    if b is not None:
        out = out + b.data.reshape(1, o, 1)
    out = out.reshape(bb, o, ho, wo)

    def backward(g):
        g2 = g.reshape(bb, o, ho * wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, k, k)
        gcols = np.matmul(w2.T, g2).reshape(bb, c, k, k, ho, wo)
        hp, wp = h + 2 * padding, wd + 2 * padding
        gx = np.zeros((bb, c, hp, wp), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + ho, j : j + wo] += gcols[:, :, i, j]
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    if b is None:
        return Tensor._result(out, parents, lambda g: backward(g)[:2])
    return Tensor._result(out, parents, backward)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    b, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    r = x.data.reshape(b, c, h // k, k, w // k, k)
    out = r.mean(axis=(3, 5))

    def backward(g):
        gg = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gg,)

    return Tensor._result(out, (x,), backward)


def upsample_nearest2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._result(out, (x,), backward)


def max_pool2d_np(m: np.ndarray, k: int = 2) -> np.ndarray:
    """Plain numpy max pool for binary masks (no gradient)."""
    *lead, h, w = m.shape
    return m.reshape(*lead, h // k, k, w // k, k).max(axis=(-3, -1))


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: RngStream, bias: bool = True, scale: float | None = None):
        s = scale if scale is not None else 1.0 / math.sqrt(n_in)
        self.w = Tensor(rng.normal((n_in, n_out)) * s, requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class Conv2d:
    def __init__(self, c_in: int, c_out: int, k: int, rng: RngStream, padding: int | None = None, zero_init: bool = False):
        self.padding = (k // 2) if padding is None else padding
        if zero_init:
            w = np.zeros((c_out, c_in, k, k), dtype=np.float32)
        else:
            w = rng.normal((c_out, c_in, k, k)) / math.sqrt(c_in * k * k)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, padding=self.padding)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class GroupNorm:
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        self.groups = groups if channels % groups == 0 else 1
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        g = self.groups
        xg = x.data.reshape(b, g, -1)
        mu = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mu) * inv).reshape(b, c, h, w)
        gamma, beta = self.gamma, self.beta
        out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

        def backward(gr):
            dgamma = (gr * xhat).sum(axis=(0, 2, 3))
            dbeta = gr.sum(axis=(0, 2, 3))
            dxhat = (gr * gamma.data.reshape(1, c, 1, 1)).reshape(b, g, -1)
            xh = xhat.reshape(b, g, -1)
            m1 = dxhat.mean(axis=2, keepdims=True)
            m2 = (dxhat * xh).mean(axis=2, keepdims=True)
            dx = ((dxhat - m1 - xh * m2) * inv).reshape(b, c, h, w)
            return dx, dgamma, dbeta

        return Tensor._result(out, (x, gamma, beta), backward)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


class AdamW:
    """Adam with decoupled weight decay; slot state is keyed by param name."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            mhat = self.m[k] / b1t
            vhat = self.v[k] / b2t
            if self.wd:
                p.data -= self.lr * self.wd * p.data
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class TokenAttention:
    """Multi-head attention over token sequences [B, T, C]."""

    def __init__(self, dim: int, heads: int, rng: RngStream):
        if dim % heads:
            raise DimensionError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.wq = Linear(dim, dim, rng.fork("q"), bias=False)
        self.wk = Linear(dim, dim, rng.fork("k"), bias=False)
        self.wv = Linear(dim, dim, rng.fork("v"), bias=False)
        self.wo = Linear(dim, dim, rng.fork("o"), bias=False)

    def _split(self, t: Tensor) -> Tensor:
        b, n, c = t.shape
        return t.reshape(b, n, self.heads, c // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, q_tok: Tensor, kv_tok: Tensor) -> Tensor:
        from .tensor import attention_probs

        b, tq, c = q_tok.shape
        q = self._split(self.wq(q_tok))
        k = self._split(self.wk(kv_tok))
        v = self._split(self.wv(kv_tok))
        w = attention_probs(q, k, 1.0 / math.sqrt(c // self.heads))
        out = (w @ v).transpose(0, 2, 1, 3).reshape(b, tq, c)
        return self.wo(out)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name, lin in (("q", self.wq), ("k", self.wk), ("v", self.wv), ("o", self.wo)):
            out.update(lin.params(f"{prefix}.{name}"))
        return out


def pos_basis_2d(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal basis over normalized pixel-center coords; [h*w, dim]."""
    n = dim // 4
    freqs = (2.0 ** np.arange(n)) * math.pi
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    parts = []
    for coord in (yy.ravel(), xx.ravel()):
        ang = coord[:, None] * freqs[None, :]
        parts.extend([np.sin(ang), np.cos(ang)])
    out = np.concatenate(parts, axis=1)
    if out.shape[1] < dim:
        out = np.pad(out, ((0, 0), (0, dim - out.shape[1])))
    return out.astype(np.float32)


def sinusoidal_embedding(t: int, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Classic sin/cos position code for a scalar timestep."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float32) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)


def collect_params(*groups: dict[str, Tensor]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for g in groups:
        for k, v in g.items():
            if k in out:
                raise KeyError(f"duplicate parameter name {k}")
            out[k] = v
    return out
