"""Conditional noise predictor: a three-depth U-Net over multi-view frames.

One forward pass handles one frame of all V views. Timestep and camera
pose condition every residual block through an added vector; layout
rasters are patchified into tokens and cross-attended at each decoder
depth; attribute ("text") tokens and cross-view mixing happen at the
bottleneck. Cross-frame attention blocks sit at every decoder depth and
consume the previous frame's per-depth features, which the forward pass
also returns so a streaming sampler can chain frames with O(1) memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layout as L
from .ftcm import FtcmBlock
from .nn import (
    AdamW,
    Conv2d,
    GroupNorm,
    Linear,
    TokenAttention,
    avg_pool2d,
    collect_params,
    pos_basis_2d,
    sinusoidal_embedding,
    upsample_nearest2,
)
from .rng import RngStream
from .tensor import DimensionError, Tensor, concat, take_rows

__all__ = ["DenoiserConfig", "ConditionBundle", "Denoiser", "count_params", "build_condition", "build_masks", "ATTR_VOCAB"]

# attribute token ids: weather(4) | time(2) | locale(2) | vehicle colors(8)
_N_WEATHER, _N_TIME, _N_LOCALE, _N_COLOR = 4, 2, 2, 8
ATTR_VOCAB = _N_WEATHER + _N_TIME + _N_LOCALE + _N_COLOR


@dataclass(frozen=True)
class DenoiserConfig:
    depths: int = 3
    base_channels: int = 32
    heads: int = 4
    image: int = 32
    channels: int = 3
    views: int = 3
    patch: int = 4
    use_ftcm: bool = True
    layout_channels: int = L.LAYOUT_CHANNELS

    def __post_init__(self):
        if self.image % (2 ** (self.depths - 1)):
            raise ValueError(f"image {self.image} not divisible by 2^{self.depths - 1}")

    @property
    def channel_ladder(self) -> list[int]:
        return [self.base_channels * (2**i) for i in range(self.depths)]

    @property
    def resolutions(self) -> list[int]:
        return [self.image // (2**i) for i in range(self.depths)]

    @property
    def cond_dim(self) -> int:
        return self.base_channels * 4


@dataclass
class ConditionBundle:
    """Deterministic per-frame conditioning inputs (no learned state)."""

    layout_tokens: np.ndarray  # [V, n_tok, patch*patch*layout_channels]
    layout_pos: np.ndarray     # [n_tok, 2] normalized patch centers
    attr_ids: np.ndarray       # active attribute token ids, sorted
    text_vec: np.ndarray       # fixed-width multi-hot over ATTR_VOCAB
    cam_vec: np.ndarray        # [V, 6] camera pose encoding
    t: int = 0

    def with_t(self, t: int) -> "ConditionBundle":
        return ConditionBundle(self.layout_tokens, self.layout_pos, self.attr_ids,
                               self.text_vec, self.cam_vec, t=t)


def attr_token_ids(weather: int, time: int, locale: int, colors: list[int]) -> np.ndarray:
    ids = [int(weather), _N_WEATHER + int(time), _N_WEATHER + _N_TIME + int(locale)]
    ids += [_N_WEATHER + _N_TIME + _N_LOCALE + int(c) for c in sorted(set(int(c) for c in colors))]
    return np.array(ids, dtype=np.int64)


def _patchify(raster: np.ndarray, patch: int) -> np.ndarray:
    c, h, w = raster.shape
    hp, wp = h // patch, w // patch
    x = raster.reshape(c, hp, patch, wp, patch)
    return x.transpose(1, 3, 0, 2, 4).reshape(hp * wp, c * patch * patch)


def build_condition(scene, frame_idx: int, rig, cfg: DenoiserConfig, t: int = 0) -> ConditionBundle:
    """Rasterize and tokenize everything the denoiser conditions on."""
    boxes = scene.boxes_at(frame_idx)
    lanes = scene.lanes_ego(frame_idx)
    toks, cams = [], []
    for cam in rig:
        raster = L.rasterize_layout(boxes, lanes, cam, cfg.image)
        toks.append(_patchify(raster, cfg.patch))
        cams.append([math.sin(cam.yaw), math.cos(cam.yaw), cam.height,
                     cam.fx / cam.W, cam.hfov, 1.0])
    hp = cfg.image // cfg.patch
    ys = (np.arange(hp) + 0.5) / hp
    yy, xx = np.meshgrid(ys, ys, indexing="ij")
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float32)
    ids = attr_token_ids(int(scene.weather), int(scene.time), int(scene.locale),
                         [int(scene.object_color(o)) for o in scene.objects])
    vec = np.zeros(ATTR_VOCAB, dtype=np.float32)
    vec[ids] = 1.0
    vec /= max(np.linalg.norm(vec), 1e-8)
    return ConditionBundle(layout_tokens=np.stack(toks).astype(np.float32), layout_pos=pos,
                           attr_ids=ids, text_vec=vec,
                           cam_vec=np.array(cams, dtype=np.float32), t=t)


def build_masks(scene, frame_idx: int, rig, cfg: DenoiserConfig) -> list[np.ndarray]:
    """Per-depth foreground masks [V, 1, r_i, r_i] for the instance branch."""
    boxes = scene.boxes_at(frame_idx)
    per_view = [L.instance_mask(boxes, cam, cfg.resolutions) for cam in rig]
    return [np.stack([pv[d] for pv in per_view]) for d in range(cfg.depths)]


class ResBlock:
    def __init__(self, c_in: int, c_out: int, cond_dim: int, rng: RngStream):
        self.gn1 = GroupNorm(c_in)
        self.conv1 = Conv2d(c_in, c_out, 3, rng.fork("c1"))
        self.cond = Linear(cond_dim, c_out, rng.fork("cond"))
        self.gn2 = GroupNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng.fork("c2"))
        self.skip = Conv2d(c_in, c_out, 1, rng.fork("skip"), padding=0) if c_in != c_out else None

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        v, _, _, _ = x.shape
        h = self.conv1(self.gn1(x).silu())
        h = h + self.cond(cond).reshape(v, -1, 1, 1)
        h = self.conv2(self.gn2(h).silu())
        return h + (self.skip(x) if self.skip else x)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = collect_params(self.gn1.params(f"{prefix}.gn1"), self.conv1.params(f"{prefix}.conv1"),
                             self.cond.params(f"{prefix}.cond"), self.gn2.params(f"{prefix}.gn2"),
                             self.conv2.params(f"{prefix}.conv2"))
        if self.skip:
            out.update(self.skip.params(f"{prefix}.skip"))
        return out


class CrossAttnLayer:
    """Pre-norm cross-attention of feature maps onto side tokens."""

    def __init__(self, channels: int, kv_dim: int, heads: int, rng: RngStream, pos_dim: int = 16):
        self.gn = GroupNorm(channels)
        self.attn = TokenAttention(channels, heads, rng.fork("attn"))
        self.kv_proj = Linear(kv_dim, channels, rng.fork("kv"))
        self.q_pos = Linear(pos_dim, channels, rng.fork("qpos"))
        self.kv_pos = Linear(pos_dim, channels, rng.fork("kvpos"))
        self.out_gain = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.pos_dim = pos_dim

    def __call__(self, x: Tensor, kv_raw: Tensor, kv_pos: np.ndarray) -> Tensor:
        v, c, h, w = x.shape
        dt = self.gn.gamma.data.dtype
        tok = self.gn(x).reshape(v, c, h * w).transpose(0, 2, 1)
        qp = self.q_pos(Tensor(pos_basis_2d(h, w, self.pos_dim), dtype=dt))
        q = tok + qp.reshape(1, h * w, c)
        kv = self.kv_proj(kv_raw)
        kp = self.kv_pos(Tensor(_pos_to_basis(kv_pos, self.pos_dim), dtype=dt))
        kv = kv + kp.reshape(1, -1, c)
        out = self.attn(q, kv)
        out = out * self.out_gain.reshape(1, 1, c)
        return x + out.transpose(0, 2, 1).reshape(v, c, h, w)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = collect_params(self.gn.params(f"{prefix}.gn"), self.attn.params(f"{prefix}.attn"),
                             self.kv_proj.params(f"{prefix}.kv"), self.q_pos.params(f"{prefix}.qpos"),
                             self.kv_pos.params(f"{prefix}.kvpos"))
        out[f"{prefix}.gain"] = self.out_gain
        return out


def _pos_to_basis(pos: np.ndarray, dim: int) -> np.ndarray:
    """Normalized (y, x) coords -> the same sinusoidal basis pos_basis_2d uses."""
    n = dim // 4
    freqs = (2.0 ** np.arange(n)) * math.pi
    parts = []
    for coord in (pos[:, 0], pos[:, 1]):
        ang = coord[:, None] * freqs[None, :]
        parts.extend([np.sin(ang), np.cos(ang)])
    out = np.concatenate(parts, axis=1)
    if out.shape[1] < dim:
        out = np.pad(out, ((0, 0), (0, dim - out.shape[1])))
    return out.astype(np.float32)


class Denoiser:
    def __init__(self, cfg: DenoiserConfig, rng: RngStream):
        self.cfg = cfg
        ch = cfg.channel_ladder
        cd = cfg.cond_dim
        self.stem = Conv2d(cfg.channels, ch[0], 3, rng.fork("stem"))
        self.t1 = Linear(64, cd, rng.fork("t1"))
        self.t2 = Linear(cd, cd, rng.fork("t2"))
        self.cam = Linear(6, cd, rng.fork("cam"))
        self.attr_emb = Tensor(rng.fork("attr").normal((ATTR_VOCAB, ch[-1])) * 0.2, requires_grad=True)
        self.enc = []
        for i in range(cfg.depths):
            c_in = ch[0] if i == 0 else ch[i - 1]
            self.enc.append(ResBlock(c_in, ch[i], cd, rng.fork("enc", i)))
        self.mid_view = TokenAttention(ch[-1], cfg.heads, rng.fork("vattn"))
        self.mid_view_gn = GroupNorm(ch[-1])
        self.mid_view_gain = Tensor(np.zeros(ch[-1], dtype=np.float32), requires_grad=True)
        self.view_pos = Linear(16, ch[-1], rng.fork("vpos"))
        self.view_cam = Linear(6, ch[-1], rng.fork("vcam"))
        self.mid_text = TokenAttention(ch[-1], cfg.heads, rng.fork("tattn"))
        self.mid_text_gn = GroupNorm(ch[-1])
        self.mid_text_gain = Tensor(np.zeros(ch[-1], dtype=np.float32), requires_grad=True)
        self.mid_rb = ResBlock(ch[-1], ch[-1], cd, rng.fork("midrb"))
        patch_dim = cfg.layout_channels * cfg.patch * cfg.patch
        self.dec_rb, self.dec_up, self.ftcm, self.lay_attn = [], [], [], []
        for i in reversed(range(cfg.depths)):
            if i < cfg.depths - 1:
                self.dec_up.append(Conv2d(ch[i + 1], ch[i], 3, rng.fork("up", i)))
                self.dec_rb.append(ResBlock(2 * ch[i], ch[i], cd, rng.fork("dec", i)))
            if cfg.use_ftcm:
                self.ftcm.append(FtcmBlock(ch[i], cfg.heads, rng.fork("ftcm", i)))
            self.lay_attn.append(CrossAttnLayer(ch[i], patch_dim, cfg.heads, rng.fork("lay", i)))
        self.out_gn = GroupNorm(ch[0])
        self.out_conv = Conv2d(ch[0], cfg.channels, 3, rng.fork("out"), zero_init=True)

    # depth index helpers: decoder lists run from deepest (i = depths-1) to 0
    def _dec_slot(self, depth: int) -> int:
        return self.cfg.depths - 1 - depth

    def params(self) -> dict[str, Tensor]:
        groups = [
            self.stem.params("stem"), self.t1.params("temb.l1"), self.t2.params("temb.l2"),
            self.cam.params("cam"), {"attr.emb": self.attr_emb},
            self.mid_view.params("mid.view.attn"), self.mid_view_gn.params("mid.view.gn"),
            {"mid.view.gain": self.mid_view_gain},
            self.view_pos.params("mid.view.pos"), self.view_cam.params("mid.view.cam"),
            self.mid_text.params("mid.text.attn"), self.mid_text_gn.params("mid.text.gn"),
            {"mid.text.gain": self.mid_text_gain},
            self.mid_rb.params("mid.rb"),
            self.out_gn.params("out.gn"), self.out_conv.params("out.conv"),
        ]
        for i, rb in enumerate(self.enc):
            groups.append(rb.params(f"enc{i}"))
        for k, conv in enumerate(self.dec_up):
            groups.append(conv.params(f"dec{self.cfg.depths - 2 - k}.up"))
        for k, rb in enumerate(self.dec_rb):
            groups.append(rb.params(f"dec{self.cfg.depths - 2 - k}.rb"))
        for k, blk in enumerate(self.ftcm):
            groups.append(blk.params(f"ftcm.depth{self.cfg.depths - k}"))
        for k, att in enumerate(self.lay_attn):
            groups.append(att.params(f"dec{self.cfg.depths - 1 - k}.layout"))
        return collect_params(*groups)

    @property
    def dtype(self):
        return self.stem.w.data.dtype

    def _cond_vec(self, t: int, cam_vec: np.ndarray) -> Tensor:
        te = Tensor(sinusoidal_embedding(t, 64)[None], dtype=self.dtype)
        base = self.t2(self.t1(te).silu())
        return base + self.cam(Tensor(cam_vec, dtype=self.dtype))

    def forward(
        self,
        z: Tensor | np.ndarray,
        t: int,
        cond: ConditionBundle,
        cache: list | None = None,
        masks: tuple[list, list] | None = None,
    ) -> tuple[Tensor, list[Tensor]]:
        """Predict noise for one frame; returns (eps_pred, new per-depth cache).

        cache is the previous frame's feature list (finest depth first);
        masks is (current_frame_masks, previous_frame_masks), each a per-depth
        list of [V, 1, r, r] binary maps.
        """
        cfg = self.cfg
        if not isinstance(z, Tensor):
            z = Tensor(z, dtype=self.dtype)
        if z.shape != (cfg.views, cfg.channels, cfg.image, cfg.image):
            raise DimensionError(f"latent {z.shape} does not match config {(cfg.views, cfg.channels, cfg.image, cfg.image)}")
        if cache is not None and len(cache) != cfg.depths:
            raise DimensionError(f"cache has {len(cache)} depths, config has {cfg.depths}")
        if masks is not None and (len(masks[0]) != cfg.depths or len(masks[1]) != cfg.depths):
            raise DimensionError(f"masks must carry {cfg.depths} depths")
        cvec = self._cond_vec(t, cond.cam_vec)
        v = cfg.views

        h = self.stem(z)
        skips = []
        for i, rb in enumerate(self.enc):
            if i > 0:
                h = avg_pool2d(h, 2)
            h = rb(h, cvec)
            skips.append(h)

        # bottleneck: all views attend jointly, then attribute tokens
        c = cfg.channel_ladder[-1]
        r = cfg.resolutions[-1]
        tok = self.mid_view_gn(h).reshape(v, c, r * r).transpose(0, 2, 1)
        pos = self.view_pos(Tensor(pos_basis_2d(r, r, 16), dtype=self.dtype))
        camt = self.view_cam(Tensor(cond.cam_vec, dtype=self.dtype))
        tok = tok + pos.reshape(1, r * r, c) + camt.reshape(v, 1, c)
        joint = tok.reshape(1, v * r * r, c)
        mixed = self.mid_view(joint, joint).reshape(v, r * r, c)
        h = h + (mixed * self.mid_view_gain.reshape(1, 1, c)).transpose(0, 2, 1).reshape(v, c, r, r)

        text_kv = take_rows(self.attr_emb, cond.attr_ids).reshape(1, -1, c)
        qtok = self.mid_text_gn(h).reshape(v, c, r * r).transpose(0, 2, 1)
        ttok = self.mid_text(qtok, text_kv)
        h = h + (ttok * self.mid_text_gain.reshape(1, 1, c)).transpose(0, 2, 1).reshape(v, c, r, r)
        h = self.mid_rb(h, cvec)

        new_cache: list = [None] * cfg.depths
        layout_kv = Tensor(cond.layout_tokens, dtype=self.dtype)
        for depth in reversed(range(cfg.depths)):
            slot = self._dec_slot(depth)
            if depth < cfg.depths - 1:
                h = self.dec_up[slot - 1](upsample_nearest2(h))
                h = self.dec_rb[slot - 1](concat([h, skips[depth]], axis=1), cvec)
            if cfg.use_ftcm:
                prev = cache[depth] if cache is not None else None
                m_n = masks[0][depth] if masks is not None else None
                m_p = masks[1][depth] if masks is not None else None
                h = self.ftcm[slot](h, prev, m_n, m_p)
            h = self.lay_attn[slot](h, layout_kv, cond.layout_pos)
            new_cache[depth] = h.detach()

        eps = self.out_conv(self.out_gn(h).silu())
        return eps, new_cache

    def __call__(self, *a, **k):
        return self.forward(*a, **k)


def count_params(cfg: DenoiserConfig) -> int:
    model = Denoiser(cfg, RngStream(0))
    return sum(p.data.size for p in model.params().values())
