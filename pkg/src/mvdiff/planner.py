"""Toy end-to-end planner trained by imitation.

A shared conv encoder reads each camera view, the pooled descriptors are
concatenated with the ego speed and yaw rate, and an MLP head emits six
(x, y) waypoints at 0.5 s spacing in the current ego frame. Training
minimizes L2 against the scripted ego future. Generated clips enter
training exactly like real ones: a sample is (scene, pixels, split), and
the labels always come from the scene geometry, never from pixels.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .bundle import load_bundle, save_bundle
from .metrics import collision_rate, summarize_rates
from .nn import AdamW, Conv2d, Linear, avg_pool2d, collect_params
from .rng import RngStream
from .tensor import Tensor, concat, no_grad

__all__ = [
    "PlannerConfig",
    "PlannerTrainConfig",
    "PlannerModel",
    "Sample",
    "corpus_samples",
    "train_planner",
    "plan",
    "evaluate_planner",
    "eval_frames_of",
    "save_planner",
    "load_planner",
    "planner_hash",
]


@dataclass(frozen=True)
class PlannerConfig:
    image: int = 32
    views: int = 3
    channels: int = 3
    width: int = 12
    hidden: int = 96
    waypoints: int = 6


@dataclass
class PlannerTrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    steps: int = 1200
    batch: int = 16
    seed: int = 0
    log_every: int = 200


@dataclass
class Sample:
    """One clip usable for planner training or evaluation."""

    scene: object           # geometry and labels
    frames: np.ndarray      # [N, V, 3, H, W] pixels in [0, 1]
    split: str              # train | val | gen

    def usable_frames(self) -> list[int]:
        return list(range(0, self.scene.n_frames - 7))


def corpus_samples(corpus, split: str) -> list[Sample]:
    out = []
    for sid in corpus.ids(split):
        scene, frames = corpus.load(sid)
        out.append(Sample(scene=scene, frames=frames, split=split))
    return out


class PlannerModel:
    def __init__(self, cfg: PlannerConfig, rng: RngStream):
        self.cfg = cfg
        w = cfg.width
        self.c1 = Conv2d(cfg.channels, w, 3, rng.fork("c1"))
        self.c2 = Conv2d(w, 2 * w, 3, rng.fork("c2"))
        self.c3 = Conv2d(2 * w, 4 * w, 3, rng.fork("c3"))
        feat = 4 * w * cfg.views + 2
        self.f1 = Linear(feat, cfg.hidden, rng.fork("f1"))
        self.f2 = Linear(cfg.hidden, cfg.hidden, rng.fork("f2"))
        self.head = Linear(cfg.hidden, 2 * cfg.waypoints, rng.fork("head"), scale=1e-3)

    def params(self) -> dict[str, Tensor]:
        return collect_params(
            self.c1.params("enc.c1"), self.c2.params("enc.c2"), self.c3.params("enc.c3"),
            self.f1.params("mlp.f1"), self.f2.params("mlp.f2"), self.head.params("mlp.head"))

    def forward_batch(self, frames: np.ndarray, ego: np.ndarray) -> Tensor:
        """frames [B, V, 3, H, W] in [0,1], ego [B, 2] -> waypoints [B, K, 2]."""
        b, v, c, hh, ww = frames.shape
        x = Tensor((frames.reshape(b * v, c, hh, ww) - 0.5).astype(np.float32))
        h = avg_pool2d(self.c1(x).relu(), 2)
        h = avg_pool2d(self.c2(h).relu(), 2)
        h = self.c3(h).relu()
        desc = h.mean(axis=(2, 3)).reshape(b, v * 4 * self.cfg.width)
        ego_t = Tensor(np.asarray(ego, dtype=np.float32).reshape(b, 2) * np.array([0.1, 1.0], dtype=np.float32))
        z = concat([desc, ego_t], axis=1)
        z = self.f1(z).relu()
        z = self.f2(z).relu()
        out = self.head(z)
        return out.reshape(b, self.cfg.waypoints, 2)


def _ego_state(scene, n: int) -> np.ndarray:
    return np.array([scene.ego_speed(n), scene.ego_yaw_rate(n)], dtype=np.float32)


def plan(model: PlannerModel, frames: np.ndarray, ego_state) -> np.ndarray:
    """One V-view frame + ego state -> [waypoints, 2] ego-frame trajectory."""
    cfg = model.cfg
    frames = np.asarray(frames)
    if frames.shape != (cfg.views, cfg.channels, cfg.image, cfg.image):
        from .tensor import DimensionError

        raise DimensionError(f"planner input {frames.shape}, config wants "
                             f"{(cfg.views, cfg.channels, cfg.image, cfg.image)}")
    with no_grad():
        out = model.forward_batch(frames[None], np.asarray(ego_state, dtype=np.float32)[None])
    wp = out.data[0].astype(np.float64)
    if not np.all(np.isfinite(wp)):
        from .tensor import NumericError

        raise NumericError("planner produced non-finite waypoints")
    return wp


def train_planner(samples: list[Sample], cfg: PlannerTrainConfig, model: PlannerModel | None = None,
                  planner_cfg: PlannerConfig | None = None, finetune: bool = False, log=None) -> PlannerModel:
    """Imitation training; finetune=True restarts from `model` at lr/10.

    Validation-split pixels must never flow through here.
    """
    if not samples:
        raise ValueError("planner training needs a non-empty sample list")
    for s in samples:
        if s.split == "val":
            raise ValueError("validation clips may not enter planner training")
    if model is None:
        model = PlannerModel(planner_cfg or PlannerConfig(), RngStream(cfg.seed).fork("init"))
    lr = cfg.lr / 10.0 if finetune else cfg.lr
    opt = AdamW(model.params(), lr=lr, weight_decay=cfg.weight_decay)
    root = RngStream(cfg.seed)
    usable = [(i, n) for i, s in enumerate(samples) for n in s.usable_frames()]
    if not usable:
        raise ValueError("no frames with a full 3 s future in the sample list")
    for k in range(cfg.steps):
        srng = root.fork("step", k)
        pick = srng.fork("pick").integers(0, len(usable), (cfg.batch,))
        frames = np.stack([samples[usable[j][0]].frames[usable[j][1]] for j in pick])
        ego = np.stack([_ego_state(samples[usable[j][0]].scene, usable[j][1]) for j in pick])
        target = np.stack([samples[usable[j][0]].scene.ego_future(usable[j][1]) for j in pick])
        opt.zero_grad()
        pred = model.forward_batch(frames, ego)
        diff = pred - Tensor(target.astype(np.float32))
        loss = (diff * diff).mean()
        loss.backward()
        opt.step()
        if log and (k % cfg.log_every == 0 or k == cfg.steps - 1):
            log(f"planner step {k}: loss {loss.item():.4f}")
    return model


def eval_frames_of(scene, stride: int = 2) -> list[int]:
    return list(range(0, scene.n_frames - 7, stride))


def evaluate_planner(plan_fn, samples: list[Sample], stride: int = 2) -> dict[str, float]:
    """Pooled collision rates of a plan function over all evaluation frames.

    plan_fn(scene, frames, n) -> [6, 2] ego-frame waypoints at frame n.
    """
    if not samples:
        raise ValueError("evaluation needs a non-empty sample list")
    totals = {"1s": 0.0, "2s": 0.0, "3s": 0.0}
    n_frames = 0
    for s in samples:
        frames_idx = eval_frames_of(s.scene, stride)
        if not frames_idx:
            continue
        wps = np.stack([plan_fn(s.scene, s.frames, n) for n in frames_idx])
        rates = collision_rate(frames_idx, wps, s.scene)
        for h in totals:
            totals[h] += rates[h] * len(frames_idx)
        n_frames += len(frames_idx)
    if n_frames == 0:
        raise ValueError("no evaluable frames in the sample list")
    return summarize_rates({h: totals[h] / n_frames for h in totals})


def model_plan_fn(model: PlannerModel):
    def fn(scene, frames, n):
        return plan(model, frames[n], _ego_state(scene, n))
    return fn


def save_planner(path, model: PlannerModel) -> None:
    entries = {f"param.{k}": p.data for k, p in model.params().items()}
    cfg = model.cfg
    for k in ("image", "views", "channels", "width", "hidden", "waypoints"):
        entries[f"cfg.{k}"] = np.array(float(getattr(cfg, k)))
    save_bundle(path, entries)


def load_planner(path) -> PlannerModel:
    e = load_bundle(path)
    cfg = PlannerConfig(**{k: int(e[f"cfg.{k}"]) for k in
                           ("image", "views", "channels", "width", "hidden", "waypoints")})
    model = PlannerModel(cfg, RngStream(0).fork("init"))
    for k, p in model.params().items():
        p.data = e[f"param.{k}"].astype(np.float32).reshape(p.data.shape)
    return model


def planner_hash(model: PlannerModel) -> str:
    h = hashlib.sha256()
    for k in sorted(model.params()):
        h.update(k.encode())
        h.update(model.params()[k].data.tobytes())
    return h.hexdigest()
