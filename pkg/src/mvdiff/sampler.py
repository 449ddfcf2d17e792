"""Training and sampling for the multi-view denoiser.

Training draws one timestep per step, noises every frame of a clip window
with the shared-noise field, and regresses the predicted noise against the
composite per frame. Frame n is conditioned on a cache harvested from a
no-grad pass over the clean previous frame (the cache passes run first,
then the noisy passes in frame order).

Sampling is a pseudo linear multistep solver over a subsampled timestep
grid: the first steps use lower-order updates while the epsilon history
fills, then fourth-order Adams-Bashforth. "ddim" is the same loop pinned
to first order. Streaming generation runs one frame at a time, seeding
frame n with correlated noise (motion term redrawn per noise window,
panoramic term fresh per frame) and carrying only the previous frame's
feature cache, so clip length is unbounded at constant memory.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .bundle import load_bundle, save_bundle
from .denoiser import ConditionBundle, Denoiser, DenoiserConfig, build_condition, build_masks
from .nn import AdamW
from .rng import RngStream
from .schedule import NoiseSchedule, make_linear_schedule, q_sample, sample_shared_noise
from .tensor import NumericError, Tensor, no_grad

__all__ = [
    "TrainConfig",
    "SampleConfig",
    "train_step",
    "train",
    "plms_sample",
    "stream_generate",
    "save_checkpoint",
    "load_checkpoint",
    "FramePrep",
    "write_ppm",
]


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.01
    batch: int = 1      # clip windows per optimizer step
    window: int = 10    # frames per training clip
    steps: int = 2000
    seed: int = 0
    nrm: bool = True
    log_every: int = 100

    def __post_init__(self):
        if self.window < 2:
            raise ValueError(f"window must be >= 2 (adjacent-frame pair), got {self.window}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


@dataclass
class SampleConfig:
    num_steps: int = 50
    sampler: str = "plms"
    frame_count: int = 40
    seed: int = 0
    nrm: bool = True
    noise_window: int = 10   # frames sharing one motion-noise draw
    clamp: bool = True

    def __post_init__(self):
        if self.sampler not in ("plms", "ddim"):
            raise ValueError(f"sampler must be plms or ddim, got {self.sampler!r}")
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")


class FramePrep:
    """Memoized per-(scene, frame) conditioning and masks."""

    def __init__(self, rig, cfg: DenoiserConfig, limit: int = 512):
        self.rig = rig
        self.cfg = cfg
        self.limit = limit
        self._cache: OrderedDict = OrderedDict()

    def get(self, scene, frame: int):
        key = (scene.scene_id, frame, tuple(sorted(scene.colors_override.items())),
               int(scene.weather), int(scene.time), int(scene.locale))
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        cond = build_condition(scene, frame, self.rig, self.cfg)
        masks = build_masks(scene, frame, self.rig, self.cfg)
        if len(self._cache) >= self.limit:
            self._cache.popitem(last=False)
        self._cache[key] = (cond, masks)
        return self._cache[key]


def _to_latent(frames01: np.ndarray) -> np.ndarray:
    return (2.0 * frames01 - 1.0).astype(np.float32)


def _to_image(lat: np.ndarray) -> np.ndarray:
    return ((lat + 1.0) * 0.5).astype(np.float32)


def train_step(model: Denoiser, opt: AdamW, sched: NoiseSchedule, window_frames: np.ndarray,
               conds: list[ConditionBundle], masks: list, rng: RngStream, nrm: bool = True,
               step_index: int = 0) -> float:
    """One optimizer step on one clip window.

    window_frames: [w, V, C, H, W] in [0, 1]. Cache passes (t=0, clean frames)
    run first when the model has cross-frame blocks; then each frame is noised
    with its slice of the shared field and scored against the composite.
    """
    w, v, c, hh, ww = window_frames.shape
    t = int(rng.fork("t").integers(0, sched.T))
    noise = sample_shared_noise(v, w, c, hh, ww, rng.fork("noise"), enabled=nrm)
    x = _to_latent(window_frames)

    caches = [None] * w
    if model.cfg.use_ftcm and w > 1:
        with no_grad():
            for n in range(w - 1):
                _, caches[n] = model.forward(x[n], 0, conds[n], cache=None, masks=(masks[n], masks[n]))

    opt.zero_grad()
    total = 0.0
    inv_w = 1.0 / w
    for n in range(w):
        eps_true = np.ascontiguousarray(noise.composite[:, n])
        z = q_sample(x[n], t, eps_true, sched)
        prev_cache = caches[n - 1] if n > 0 else None
        m = (masks[n], masks[n - 1] if n > 0 else masks[n])
        eps_pred, _ = model.forward(z, t, conds[n].with_t(t), cache=prev_cache, masks=m)
        diff = eps_pred - Tensor(eps_true)
        loss_n = (diff * diff).mean() * inv_w
        loss_n.backward()
        total += loss_n.item()
    if not np.isfinite(total):
        raise NumericError(f"non-finite training loss at step {step_index}")
    opt.step()
    return total


def train(model: Denoiser, corpus, cfg: TrainConfig, sched: NoiseSchedule | None = None,
          split: str = "train", log=None) -> list[float]:
    """Optimize the denoiser on clip windows drawn from a corpus split."""
    sched = sched or make_linear_schedule(1000)
    opt = AdamW(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    root = RngStream(cfg.seed)
    ids = corpus.ids(split)
    if not ids:
        raise ValueError(f"corpus split {split!r} is empty")
    prep = FramePrep(corpus.rig, model.cfg)
    losses = []
    for k in range(cfg.steps):
        srng = root.fork("step", k)
        step_loss = 0.0
        for b in range(cfg.batch):
            brng = srng.fork("item", b)
            sid = ids[int(brng.fork("scene").integers(0, len(ids)))]
            scene, frames = corpus.load(sid)
            w = min(cfg.window, scene.n_frames)
            start = int(brng.fork("start").integers(0, scene.n_frames - w + 1))
            conds, masks = [], []
            for n in range(start, start + w):
                cond, mk = prep.get(scene, n)
                conds.append(cond)
                masks.append(mk)
            step_loss += train_step(model, opt, sched, frames[start:start + w], conds, masks,
                                    brng, nrm=cfg.nrm, step_index=k) / cfg.batch
        losses.append(step_loss)
        if log and (k % cfg.log_every == 0 or k == cfg.steps - 1):
            log(f"step {k}: loss {step_loss:.4f}")
    return losses


_ADAMS = {
    1: (1.0,),
    2: (3.0 / 2.0, -1.0 / 2.0),
    3: (23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0),
    4: (55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0),
}


def _step_grid(T: int, num_steps: int) -> np.ndarray:
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps {num_steps} outside [1, {T}]")
    return np.unique(np.linspace(0, T - 1, num_steps).round().astype(int))[::-1]


def plms_sample(eps_fn, shape: tuple, sched: NoiseSchedule, scfg: SampleConfig,
                rng: RngStream | None = None, init_noise: np.ndarray | None = None):
    """Run the multistep sampler from pure noise down to an image in [0, 1].

    eps_fn(z, t) -> (eps ndarray, cache) does one denoiser evaluation; the
    cache of the final (smallest-t) call is returned alongside the frame so
    streaming callers can chain it into the next frame.
    """
    if init_noise is None:
        if rng is None:
            raise ValueError("need either init_noise or an rng stream")
        init_noise = rng.fork("init").normal(shape, dtype=np.float32)
    z = init_noise.astype(np.float32, copy=True)
    ts = _step_grid(sched.T, scfg.num_steps)
    max_order = 1 if scfg.sampler == "ddim" else 4
    hist: list[np.ndarray] = []
    last_cache = None
    for i, t in enumerate(ts):
        eps, last_cache = eps_fn(z, int(t))
        order = min(len(hist) + 1, max_order)
        coeffs = _ADAMS[order]
        eps_prime = coeffs[0] * eps
        for c, e_old in zip(coeffs[1:], reversed(hist)):
            eps_prime = eps_prime + c * e_old
        a_t = sched.alpha_hat[t]
        a_prev = sched.alpha_hat[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x0 = (z - np.sqrt(1.0 - a_t) * eps_prime) / np.sqrt(a_t)
        if scfg.clamp:
            # keep the running clean estimate in the image box; the effective
            # eps is re-derived so the transfer stays self-consistent
            x0c = np.clip(x0, -1.0, 1.0)
            if a_t < 1.0:
                eps_prime = (z - np.sqrt(a_t) * x0c) / np.sqrt(1.0 - a_t)
            x0 = x0c
        z = np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps_prime
        hist.append(eps)
        if len(hist) > 3:
            hist.pop(0)
    if scfg.clamp:
        z = np.clip(z, -1.0, 1.0)
    return _to_image(z), last_cache


def _model_eps_fn(model: Denoiser, cond: ConditionBundle, cache, masks):
    def eps_fn(z, t):
        with no_grad():
            eps, new_cache = model.forward(z, t, cond.with_t(t), cache=cache, masks=masks)
        return eps.data, new_cache
    return eps_fn


def stream_generate(model: Denoiser, scene, rig, sched: NoiseSchedule, scfg: SampleConfig,
                    prep: FramePrep | None = None) -> np.ndarray:
    """Generate scene.n_frames sequentially; returns [N, V, 3, H, W] in [0, 1].

    Frame 0 bootstraps through the self-fallback; afterwards each frame
    conditions on the cache captured from the previous frame's final
    denoising evaluation. Only one cache is alive at any time.
    """
    cfg = model.cfg
    n_frames = min(scfg.frame_count, scene.n_frames) if scene.n_frames else scfg.frame_count
    prep = prep or FramePrep(rig, cfg)
    root = RngStream(scfg.seed).fork("stream")
    out = np.empty((n_frames, cfg.views, cfg.channels, cfg.image, cfg.image), dtype=np.float32)
    cache = None
    prev_masks = None
    w = scfg.noise_window
    window_noise = None
    for n in range(n_frames):
        k, j = divmod(n, w)
        if j == 0:
            count = min(w, n_frames - k * w)
            window_noise = sample_shared_noise(cfg.views, count, cfg.channels, cfg.image,
                                               cfg.image, root.fork("window", k), enabled=scfg.nrm)
        cond, masks = prep.get(scene, n)
        m = (masks, prev_masks if prev_masks is not None else masks)
        eps_fn = _model_eps_fn(model, cond, cache, m)
        init = np.ascontiguousarray(window_noise.composite[:, j])
        frame, cache = plms_sample(eps_fn, init.shape, sched, scfg, init_noise=init)
        out[n] = frame
        prev_masks = masks
    return out


def save_checkpoint(path, model: Denoiser, sched: NoiseSchedule) -> None:
    cfg = model.cfg
    entries: dict[str, np.ndarray] = {}
    for k, p in model.params().items():
        entries[f"param.{k}"] = p.data
    entries["sched.betas"] = sched.betas
    entries["sched.alpha_hat"] = sched.alpha_hat
    for k, v in (("depths", cfg.depths), ("base_channels", cfg.base_channels), ("heads", cfg.heads),
                 ("image", cfg.image), ("channels", cfg.channels), ("views", cfg.views),
                 ("patch", cfg.patch), ("use_ftcm", int(cfg.use_ftcm)),
                 ("layout_channels", cfg.layout_channels)):
        entries[f"cfg.{k}"] = np.array(float(v))
    save_bundle(path, entries)


def load_checkpoint(path) -> tuple[Denoiser, NoiseSchedule]:
    e = load_bundle(path)
    cfg = DenoiserConfig(
        depths=int(e["cfg.depths"]), base_channels=int(e["cfg.base_channels"]),
        heads=int(e["cfg.heads"]), image=int(e["cfg.image"]), channels=int(e["cfg.channels"]),
        views=int(e["cfg.views"]), patch=int(e["cfg.patch"]), use_ftcm=bool(int(e["cfg.use_ftcm"])),
        layout_channels=int(e["cfg.layout_channels"]))
    model = Denoiser(cfg, RngStream(0))
    for k, p in model.params().items():
        p.data = e[f"param.{k}"].astype(p.data.dtype).reshape(p.data.shape)
    betas = e["sched.betas"]
    sched = NoiseSchedule(betas=betas, alphas=1.0 - betas, alpha_hat=e["sched.alpha_hat"])
    return model, sched


def write_ppm(path, img: np.ndarray) -> None:
    """img [3, H, W] in [0, 1] -> binary PPM."""
    c, h, w = img.shape
    data = (np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())
