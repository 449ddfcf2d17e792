"""Evaluation metrics over generated clips and planner trajectories.

The Frechet scores here are mechanically the usual ones but run over a
random-weight (never trained) convolutional descriptor whose weights come
from one published seed, so numbers are self-consistent across runs of
this package and deliberately not comparable to any pretrained-backbone
scores. Descriptors use tanh activations, which keeps white-noise inputs
near zero and makes cosine similarities behave (identical inputs 1,
independent noise about 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .layout import oriented_rects_intersect
from .nn import _im2col
from .rng import RngStream
from .scenegen import EGO_SIZE, Scene
from .tensor import NumericError

__all__ = [
    "EXTRACTOR_SEED",
    "FeatureExtractor",
    "frechet_distance",
    "moments",
    "toy_fid",
    "toy_fvd",
    "cross_view_score",
    "temporal_score",
    "collision_rate",
    "first_collision_waypoint",
    "horizon_of_waypoint",
    "summarize_rates",
    "MetricReport",
    "evaluate_generation",
]

EXTRACTOR_SEED = 0x7A5C0DE  # published constant; all metric weights derive from it


def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    c_out, c_in, k, _ = w.shape
    cols = _im2col(x[None], k, k // 2)[0]
    h, wd = x.shape[1], x.shape[2]
    return (w.reshape(c_out, -1) @ cols).reshape(c_out, h, wd)


def _pool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    h2, w2 = (h // 2) * 2, (w // 2) * 2
    if h2 == 0 or w2 == 0:
        return x
    x = x[:, :h2, :w2]
    return x.reshape(c, h2 // 2, 2, w2 // 2, 2).mean(axis=(2, 4))


class FeatureExtractor:
    """Random conv pyramid -> fixed-width descriptor; weights never train."""

    def __init__(self, in_channels: int = 3, out_dim: int = 64, seed: int = EXTRACTOR_SEED):
        rng = RngStream(seed).fork("extractor", in_channels)
        widths = [in_channels, 4 * out_dim // 16, 8 * out_dim // 16, 12 * out_dim // 16]
        self.kernels = []
        for i in range(3):
            w = rng.fork("conv", i).normal((widths[i + 1], widths[i], 3, 3), dtype=np.float64)
            self.kernels.append(w / math.sqrt(widths[i] * 9))
        total = sum(widths[1:])
        self.proj = rng.fork("proj").normal((total, out_dim), dtype=np.float64) / math.sqrt(total)
        self.out_dim = out_dim

    def __call__(self, img: np.ndarray) -> np.ndarray:
        """img [C, H, W] in [0, 1] -> descriptor [out_dim], float64."""
        x = np.asarray(img, dtype=np.float64)
        x = x - 0.5  # fixed mid-range shift keeps white noise zero-mean
        levels = []
        for w in self.kernels:
            x = np.tanh(_conv(x, w))
            levels.append(x.mean(axis=(1, 2)))
            x = _pool2(x)
        feat = np.concatenate(levels)
        return np.tanh(feat @ self.proj)


_FRAME_EXTRACTOR: FeatureExtractor | None = None
_STACK_EXTRACTOR: FeatureExtractor | None = None


def frame_extractor() -> FeatureExtractor:
    global _FRAME_EXTRACTOR
    if _FRAME_EXTRACTOR is None:
        _FRAME_EXTRACTOR = FeatureExtractor(in_channels=3, out_dim=64)
    return _FRAME_EXTRACTOR


def stack_extractor() -> FeatureExtractor:
    """Spatiotemporal variant: 8 frames stacked on channels -> 128-dim."""
    global _STACK_EXTRACTOR
    if _STACK_EXTRACTOR is None:
        _STACK_EXTRACTOR = FeatureExtractor(in_channels=24, out_dim=128)
    return _STACK_EXTRACTOR


def moments(desc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    desc = np.asarray(desc, dtype=np.float64)
    return desc.mean(axis=0), np.cov(desc, rowvar=False)


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), eigendecomposed.

    The cross term uses Tr((Sb^1/2 Sa Sb^1/2)^1/2), which equals
    Tr((Sa Sb)^1/2) but stays symmetric; negative eigenvalues clamp to 0.
    """
    mu_a = np.asarray(mu_a, dtype=np.float64).ravel()
    mu_b = np.asarray(mu_b, dtype=np.float64).ravel()
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    for x in (mu_a, mu_b, cov_a, cov_b):
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite moments in frechet_distance")
    cov_a = 0.5 * (cov_a + cov_a.T)
    cov_b = 0.5 * (cov_b + cov_b.T)
    wb, vb = np.linalg.eigh(cov_b)
    rb = (vb * np.sqrt(np.clip(wb, 0.0, None))) @ vb.T
    inner = rb @ cov_a @ rb
    wi = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    cross = np.sqrt(np.clip(wi, 0.0, None)).sum()
    d2 = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(d2, 0.0)


def _frame_descriptors(clips: np.ndarray) -> np.ndarray:
    """clips [n, N, V, 3, H, W] -> descriptors for every frame-view image."""
    ex = frame_extractor()
    out = []
    for clip in clips:
        for frame in clip:
            for view in frame:
                out.append(ex(view))
    return np.stack(out)


def toy_fid(real_clips: np.ndarray, gen_clips: np.ndarray) -> float:
    da = _frame_descriptors(real_clips)
    db = _frame_descriptors(gen_clips)
    return frechet_distance(*moments(da), *moments(db))


def _stack_descriptors(clips: np.ndarray, frame_limit: int) -> np.ndarray:
    ex = stack_extractor()
    out = []
    for clip in clips:
        n = min(frame_limit, clip.shape[0])
        for start in range(0, n - 7, 8):
            for v in range(clip.shape[1]):
                stack = clip[start:start + 8, v].reshape(-1, clip.shape[-2], clip.shape[-1])
                out.append(ex(stack))
    return np.stack(out)


def toy_fvd(real_clips: np.ndarray, gen_clips: np.ndarray, frame_limit: int) -> float:
    """Frechet distance over 8-frame spatiotemporal stacks drawn from the
    first frame_limit frames (8 scores the head of the clip, 40 the whole)."""
    da = _stack_descriptors(real_clips, frame_limit)
    db = _stack_descriptors(gen_clips, frame_limit)
    return frechet_distance(*moments(da), *moments(db))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def _angular_strip(img: np.ndarray, cam, lo: float, hi: float, n_cols: int = 8) -> np.ndarray:
    """Resample the columns covering world angles [lo, hi] onto a uniform
    angular grid, so strips from two cameras correspond ray-for-ray."""
    angles = lo + (np.arange(n_cols) + 0.5) * (hi - lo) / n_cols
    cols = cam.cx + cam.fx * np.tan(angles - cam.yaw)
    cols = np.clip(np.round(cols - 0.5).astype(int), 0, cam.W - 1)
    return img[:, :, cols]


def cross_view_score(frame: np.ndarray, rig) -> float:
    """Mean cosine similarity of adjacent views' overlapping angular strips."""
    ex = frame_extractor()
    scores = []
    for i in range(len(rig) - 1):
        a, b = rig[i], rig[i + 1]
        lo = b.yaw - b.hfov / 2
        hi = a.yaw + a.hfov / 2
        if hi - lo <= math.radians(1.0):
            raise ValueError(f"views {i} and {i + 1} share no field of view")
        strip_a = _angular_strip(frame[i], a, lo, hi)
        strip_b = _angular_strip(frame[i + 1], b, lo, hi)
        scores.append(_cosine(ex(strip_a), ex(strip_b)))
    return float(np.mean(scores))


def temporal_score(clip: np.ndarray) -> float:
    """Mean adjacent-frame descriptor cosine, averaged over views."""
    if clip.shape[0] < 2:
        raise ValueError("temporal_score needs at least 2 frames")
    ex = frame_extractor()
    desc = np.stack([[ex(clip[n, v]) for v in range(clip.shape[1])] for n in range(clip.shape[0])])
    scores = [
        _cosine(desc[n, v], desc[n + 1, v])
        for n in range(clip.shape[0] - 1)
        for v in range(clip.shape[1])
    ]
    return float(np.mean(scores))


# "within k seconds" is half-open: a hit exactly at the k-second waypoint
# counts toward the next horizon up (a frame +2 hit at 2 Hz is a 2 s failure)
_HORIZON_WAYPOINTS = {"1s": 1, "2s": 3, "3s": 5}


def summarize_rates(rates: dict[str, float]) -> dict[str, float]:
    out = dict(rates)
    out["avg"] = float(np.mean([rates["1s"], rates["2s"], rates["3s"]]))
    return out


def first_collision_waypoint(scene: Scene, n: int, waypoints: np.ndarray) -> int | None:
    """First waypoint index (1-based) whose ego rectangle hits an object at
    the matching future frame, or None. waypoints are ego-frame at frame n."""
    waypoints = np.asarray(waypoints, dtype=np.float64)
    if waypoints.ndim != 2 or waypoints.shape[0] < 6:
        raise ValueError(f"waypoints must cover 3 s (6 points at 2 Hz), got {waypoints.shape}")
    if n + 6 >= scene.n_frames:
        raise ValueError(f"frame {n} lacks a 3 s future in a {scene.n_frames}-frame scene")
    world_wp = scene.ego_to_world(n, waypoints)
    for k in range(6):
        prev = world_wp[k - 1] if k > 0 else scene.ego_traj[n, :2]
        d = world_wp[k] - prev
        heading = math.atan2(d[0], d[1]) if np.linalg.norm(d) > 1e-6 else scene.ego_traj[n, 2]
        t_future = (n + k + 1) * scene.dt
        for obj in scene.objects:
            x, y, h = obj.state_at(t_future)
            if oriented_rects_intersect(world_wp[k], EGO_SIZE, heading, (x, y), obj.size, h):
                return k + 1
    return None


def horizon_of_waypoint(k: int | None) -> str | None:
    """Smallest horizon containing 1-based waypoint k, or None."""
    if k is None:
        return None
    for h in ("1s", "2s", "3s"):
        if k <= _HORIZON_WAYPOINTS[h]:
            return h
    return None


def collision_rate(eval_frames: list[int], waypoints: np.ndarray, scene: Scene,
                   horizons=("1s", "2s", "3s")) -> dict[str, float]:
    """Fraction of evaluation frames whose plan collides within each horizon.

    waypoints: [len(eval_frames), 6, 2] ego-frame positions at 0.5 s spacing.
    The ego rectangle is placed at every waypoint inside the horizon and
    tested against every object rectangle at the matching future frame.
    """
    waypoints = np.asarray(waypoints, dtype=np.float64)
    if waypoints.ndim != 3 or waypoints.shape[1] < 6:
        raise ValueError(f"waypoints must cover 3 s (6 points at 2 Hz), got {waypoints.shape}")
    hits = {h: 0 for h in horizons}
    for fi, n in enumerate(eval_frames):
        first_hit = first_collision_waypoint(scene, n, waypoints[fi])
        for h in horizons:
            if first_hit is not None and first_hit <= _HORIZON_WAYPOINTS[h]:
                hits[h] += 1
    n_eval = max(len(eval_frames), 1)
    return summarize_rates({h: hits[h] / n_eval for h in horizons})


@dataclass
class MetricReport:
    toy_fid: float
    toy_fvd_8: float
    toy_fvd_40: float
    cross_view_score: float
    temporal_score: float
    collision_rates: dict[str, float] | None = None

    def __post_init__(self):
        vals = [self.toy_fid, self.toy_fvd_8, self.toy_fvd_40, self.cross_view_score, self.temporal_score]
        if self.collision_rates is not None:
            vals += list(self.collision_rates.values())
            for k, v in self.collision_rates.items():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"collision rate {k}={v} outside [0, 1]")
        if not all(np.isfinite(v) for v in vals):
            raise NumericError("non-finite metric in report")

    def record(self) -> str:
        parts = [f"toy_fid={self.toy_fid:.6f}", f"toy_fvd_8={self.toy_fvd_8:.6f}",
                 f"toy_fvd_40={self.toy_fvd_40:.6f}", f"cross_view={self.cross_view_score:.6f}",
                 f"temporal={self.temporal_score:.6f}"]
        if self.collision_rates:
            for k in ("1s", "2s", "3s", "avg"):
                parts.append(f"col_{k}={self.collision_rates[k]:.6f}")
        return " ".join(parts)

    def table(self) -> str:
        rows = [("toy-FID (down)", self.toy_fid), ("toy-FVD 8f (down)", self.toy_fvd_8),
                ("toy-FVD 40f (down)", self.toy_fvd_40), ("cross-view (up)", self.cross_view_score),
                ("temporal (up)", self.temporal_score)]
        lines = [f"{name:<22s} {val:10.4f}" for name, val in rows]
        if self.collision_rates:
            for k in ("1s", "2s", "3s", "avg"):
                lines.append(f"{'col rate ' + k:<22s} {self.collision_rates[k]:10.4f}")
        return "\n".join(lines)


def evaluate_generation(real_clips: np.ndarray, gen_clips: np.ndarray, rig,
                        collision_rates: dict | None = None) -> MetricReport:
    cv = float(np.mean([cross_view_score(clip[n], rig)
                        for clip in gen_clips for n in range(0, clip.shape[0], 4)]))
    ts = float(np.mean([temporal_score(clip) for clip in gen_clips]))
    n_frames = gen_clips.shape[1]
    return MetricReport(
        toy_fid=toy_fid(real_clips, gen_clips),
        toy_fvd_8=toy_fvd(real_clips, gen_clips, 8),
        toy_fvd_40=toy_fvd(real_clips, gen_clips, min(40, n_frames)),
        cross_view_score=cv,
        temporal_score=ts,
        collision_rates=collision_rates,
    )
