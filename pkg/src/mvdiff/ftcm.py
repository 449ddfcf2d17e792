"""Cross-frame attention between features of adjacent frames.

Two branches run at each network depth, per view: a scene branch that lets
every current-frame position attend over all previous-frame positions, and
an instance branch restricted to foreground regions by binary masks. Mask
semantics are exact, not approximate: excluded key tokens are removed from
the softmax by -inf logits (their weight is exactly zero) and excluded
query rows are zeroed outright, so a frame with no foreground produces an
all-zero instance branch instead of a degenerate uniform attention.

Each branch feeds back through a 1x1 convolution whose weights and bias
start at exactly zero plus a per-channel gain, so an untrained block is a
bit-exact identity on the features flowing through it.
"""

from __future__ import annotations

import math

import numpy as np

from .nn import Conv2d, Linear
from .rng import RngStream
from .tensor import DimensionError, Tensor, attention_probs, gather_tokens, masked_fill, scatter_tokens

__all__ = ["CrossFrameAttention", "ZeroFusion", "FtcmBlock", "scene_attention", "instance_attention", "ftcm_fuse"]


def _to_tokens(x: Tensor) -> Tensor:
    v, c, h, w = x.shape
    return x.reshape(v, c, h * w).transpose(0, 2, 1)


def _to_map(tok: Tensor, h: int, w: int) -> Tensor:
    v, t, c = tok.shape
    return tok.transpose(0, 2, 1).reshape(v, c, h, w)


def _token_mask(mask: np.ndarray, v: int, t: int) -> np.ndarray:
    m = np.asarray(mask).reshape(v, t)
    if not np.all((m == 0) | (m == 1)):
        raise DimensionError("instance masks must be exactly 0/1 valued")
    return m.astype(bool)


def _pack_indices(keep: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Active token indices per view, zero-padded to the max count."""
    v, _ = keep.shape
    counts = keep.sum(axis=1)
    k = max(1, int(counts.max()))
    idx = np.zeros((v, k), dtype=np.int64)
    pad = np.zeros((v, k), dtype=bool)
    for i in range(v):
        a = np.nonzero(keep[i])[0]
        idx[i, : len(a)] = a
        pad[i, : len(a)] = True
    return idx, pad


class CrossFrameAttention:
    """Multi-head attention with Q from the current frame, K/V from the cache."""

    def __init__(self, channels: int, heads: int, rng: RngStream):
        if channels % heads:
            raise DimensionError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.wq = Linear(channels, channels, rng.fork("q"), bias=False)
        self.wk = Linear(channels, channels, rng.fork("k"), bias=False)
        self.wv = Linear(channels, channels, rng.fork("v"), bias=False)
        self.wo = Linear(channels, channels, rng.fork("o"), bias=False)

    def set_identity(self):
        for lin in (self.wq, self.wk, self.wv, self.wo):
            lin.w.data[:] = np.eye(self.channels, dtype=np.float32)

    def _heads(self, tok: Tensor) -> Tensor:
        v, t, c = tok.shape
        return tok.reshape(v, t, self.heads, c // self.heads).transpose(0, 2, 1, 3)

    def _weights(self, q_feat: Tensor, cache: Tensor, mask_kv: np.ndarray | None):
        if cache is None:
            raise DimensionError("cross-frame attention needs a cache; frame 0 goes through the self-fallback")
        if q_feat.shape != cache.shape:
            raise DimensionError(f"query {q_feat.shape} vs cache {cache.shape}")
        v, c, h, w = q_feat.shape
        t = h * w
        q = self._heads(self.wq(_to_tokens(q_feat)))
        k = self._heads(self.wk(_to_tokens(cache)))
        vv = self._heads(self.wv(_to_tokens(cache)))
        keep = None
        if mask_kv is not None:
            keep = _token_mask(mask_kv, v, t).reshape(v, 1, 1, t)
        weights = attention_probs(q, k, 1.0 / math.sqrt(c // self.heads), keep)
        return weights, vv, (v, c, h, w, t)

    def __call__(
        self,
        q_feat: Tensor,
        cache: Tensor,
        mask_q: np.ndarray | None = None,
        mask_kv: np.ndarray | None = None,
    ) -> Tensor:
        v, c, h, w = q_feat.shape
        t = h * w
        if mask_q is not None and mask_kv is not None:
            kq = _token_mask(mask_q, v, t)
            kk = _token_mask(mask_kv, v, t)
            if min(kq.mean(), kk.mean()) < 0.5:
                return self._sparse(q_feat, cache, kq, kk)
        weights, vv, (v, c, h, w, t) = self._weights(q_feat, cache, mask_kv)
        out = weights @ vv
        out = out.transpose(0, 2, 1, 3).reshape(v, t, c)
        out = self.wo(out)
        if mask_q is not None:
            keep = _token_mask(mask_q, v, t).reshape(v, t, 1)
            out = masked_fill(out, keep, 0.0)
        return _to_map(out, h, w)

    def _sparse(self, q_feat: Tensor, cache: Tensor, keep_q: np.ndarray, keep_kv: np.ndarray) -> Tensor:
        """Gather active tokens instead of masking logits; same math, padded
        slots are excluded from the softmax and zeroed before scatter."""
        if cache is None:
            raise DimensionError("cross-frame attention needs a cache; frame 0 goes through the self-fallback")
        if q_feat.shape != cache.shape:
            raise DimensionError(f"query {q_feat.shape} vs cache {cache.shape}")
        v, c, h, w = q_feat.shape
        t = h * w
        idx_q, pad_q = _pack_indices(keep_q)
        idx_k, pad_k = _pack_indices(keep_kv)
        q = self._heads(self.wq(gather_tokens(_to_tokens(q_feat), idx_q)))
        cache_tok = _to_tokens(cache)
        k = self._heads(self.wk(gather_tokens(cache_tok, idx_k)))
        vv = self._heads(self.wv(gather_tokens(cache_tok, idx_k)))
        weights = attention_probs(q, k, 1.0 / math.sqrt(c // self.heads),
                                  pad_k.reshape(v, 1, 1, -1))
        out = (weights @ vv).transpose(0, 2, 1, 3).reshape(v, idx_q.shape[1], c)
        out = self.wo(out)
        out = masked_fill(out, pad_q.reshape(v, -1, 1), 0.0)
        return _to_map(scatter_tokens(out, idx_q, t), h, w)

    def attention_map(self, q_feat: Tensor, cache: Tensor, mask_kv: np.ndarray | None = None) -> np.ndarray:
        """The [V, heads, T, T] weight matrix, for inspection."""
        weights, _, _ = self._weights(q_feat, cache, mask_kv)
        return weights.data

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name, lin in (("q", self.wq), ("k", self.wk), ("v", self.wv), ("o", self.wo)):
            out.update(lin.params(f"{prefix}.{name}"))
        return out


class ZeroFusion:
    """Residual merge q + gain * zero_conv(branch); exact identity at init."""

    def __init__(self, channels: int, rng: RngStream):
        self.conv = Conv2d(channels, channels, 1, rng, padding=0, zero_init=True)
        self.gain = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)

    def __call__(self, q_feat: Tensor, branch_out: Tensor) -> Tensor:
        if q_feat.shape != branch_out.shape:
            raise DimensionError(f"fuse shapes disagree: {q_feat.shape} vs {branch_out.shape}")
        c = q_feat.shape[1]
        return q_feat + self.gain.reshape(1, c, 1, 1) * self.conv(branch_out)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.conv.params(f"{prefix}.conv")
        out[f"{prefix}.gain"] = self.gain
        return out


def scene_attention(attn: CrossFrameAttention, q_feat: Tensor, cache: Tensor) -> Tensor:
    return attn(q_feat, cache)


def instance_attention(
    attn: CrossFrameAttention,
    q_feat: Tensor,
    cache: Tensor,
    mask_n: np.ndarray,
    mask_prev: np.ndarray,
) -> Tensor:
    return attn(q_feat, cache, mask_q=mask_n, mask_kv=mask_prev)


def ftcm_fuse(q_feat: Tensor, branch_out: Tensor, fusion: ZeroFusion) -> Tensor:
    return fusion(q_feat, branch_out)


class FtcmBlock:
    """Scene branch, then masked instance branch, each zero-fused."""

    def __init__(self, channels: int, heads: int, rng: RngStream):
        self.scene = CrossFrameAttention(channels, heads, rng.fork("scene"))
        self.ins = CrossFrameAttention(channels, heads, rng.fork("ins"))
        self.fuse_scene = ZeroFusion(channels, rng.fork("fuse_scene"))
        self.fuse_ins = ZeroFusion(channels, rng.fork("fuse_ins"))

    def __call__(
        self,
        h: Tensor,
        cache: Tensor | None,
        mask_n: np.ndarray | None,
        mask_prev: np.ndarray | None,
    ) -> Tensor:
        if cache is None:
            # first frame of a stream: attend over the frame's own features
            cache = h.detach()
            mask_prev = mask_n
        s = scene_attention(self.scene, h, cache)
        h = ftcm_fuse(h, s, self.fuse_scene)
        if mask_n is None:
            v, _, hh, ww = h.shape
            mask_n = np.ones((v, 1, hh, ww), dtype=np.float32)
            mask_prev = mask_n
        i = instance_attention(self.ins, h, cache, mask_n, mask_prev)
        return ftcm_fuse(h, i, self.fuse_ins)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.scene.params(f"{prefix}.scene"))
        out.update(self.ins.params(f"{prefix}.ins"))
        out.update(self.fuse_scene.params(f"{prefix}.fuse.scene"))
        out.update(self.fuse_ins.params(f"{prefix}.fuse.ins"))
        return out
