"""Failure-driven data augmentation loop for the planner.

One pass: evaluate the planner, record every (scene, frame) whose plan
collides within 3 s, tag each failure with a rule-based cause, embed its
scene into a handcrafted descriptor, retrieve the most similar training
scenes by cosine similarity, diversify their appearance attributes (never
the layout), render that many new clips with the diffusion generator, and
fine-tune the planner on the generated clips mixed with the full original
training set. Mixing with the whole train set is deliberate: fine-tuning
on the failure look-alikes alone overfits them.

The tagger stands in for a vision-language model and the descriptor for a
learned image embedding; both are deterministic functions of ground truth
so every stage is auditable and reproducible. Each stage writes a plain
text record when given an output directory.
"""

from __future__ import annotations

import copy
import hashlib
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .layout import BoxCategory
from .metrics import first_collision_waypoint, horizon_of_waypoint
from .planner import (
    PlannerModel,
    PlannerTrainConfig,
    Sample,
    corpus_samples,
    eval_frames_of,
    evaluate_planner,
    model_plan_fn,
    train_planner,
)
from .rng import RngStream
from .sampler import FramePrep, SampleConfig, stream_generate
from .scenegen import Behavior, Locale, Scene, TimeOfDay, VehicleColor, Weather

__all__ = [
    "DESCRIPTOR_DIM",
    "FailureCase",
    "LoopConfig",
    "LoopReport",
    "scene_descriptor",
    "layout_hash",
    "collect_failures",
    "tag_failure",
    "retrieve_similar",
    "diversify_caption",
    "apply_edit",
    "run_loop",
]

DESCRIPTOR_DIM = 25
RARE_CATEGORIES = (BoxCategory.BUS, BoxCategory.BIKE)
# large-near-object rule: nearest object closer than 8 m whose angular width
# exceeds 25% of a 60-degree view
_NEAR_DIST = 8.0
_APPARENT_FRAC = 0.25
_VIEW_FOV = math.radians(60.0)


def _bucket(value: float, edges: list[float]) -> int:
    for i, e in enumerate(edges):
        if value < e:
            return i
    return len(edges)


def _object_geometry(scene: Scene, frame: int):
    """(distance, apparent width fraction) per object at a frame."""
    out = []
    t = frame * scene.dt
    ex, ey, _ = scene.ego_traj[frame]
    for obj in scene.objects:
        x, y, _ = obj.state_at(t)
        d = math.hypot(x - ex, y - ey)
        extent = max(obj.size)
        frac = 2.0 * math.atan(0.5 * extent / max(d, 0.5)) / _VIEW_FOV
        out.append((d, frac, obj))
    return out


def scene_descriptor(scene: Scene, frame: int | None = None) -> np.ndarray:
    """Fixed-width scene embedding: attribute one-hots, object statistics,
    and a behavior histogram, L2-normalized. frame=None summarizes the clip
    by the frame where objects come closest."""
    if frame is None:
        frame = min(range(scene.n_frames),
                    key=lambda f: min((g[0] for g in _object_geometry(scene, f)), default=np.inf))
    d = np.zeros(DESCRIPTOR_DIM)
    d[int(scene.weather)] = 1.0                                  # 0:4
    d[4 + int(scene.time)] = 1.0                                 # 4:6
    d[6 + int(scene.locale)] = 1.0                               # 6:8
    d[8 + _bucket(len(scene.objects), [1, 3, 6])] = 1.0          # 8:12 object count
    geo = _object_geometry(scene, frame)
    if geo:
        nearest = min(g[0] for g in geo)
        largest = max(g[1] for g in geo)
        d[12 + _bucket(nearest, [8.0, 15.0, 30.0])] = 1.0        # 12:16 nearest distance
        d[16 + (0 if largest > _APPARENT_FRAC else (1 if largest > 0.1 else 2))] = 1.0  # 16:19 size
    else:
        d[15] = 1.0
        d[18] = 1.0
    d[19] = float(any(o.behavior == Behavior.CROSS for o in scene.objects))
    for o in scene.objects:                                      # 20:24 behavior histogram
        d[20 + int(o.behavior)] += 1.0
    if scene.objects:
        d[20:24] /= len(scene.objects)
    n = np.linalg.norm(d)
    return d / n if n > 0 else d


def layout_hash(scene: Scene) -> str:
    """Geometry-only fingerprint: trajectories, boxes, lanes; attributes and
    colors excluded, so appearance edits must keep it fixed."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(scene.ego_traj, dtype=np.float64).tobytes())
    for o in sorted(scene.objects, key=lambda o: o.instance_id):
        h.update(np.array([o.center0[0], o.center0[1], o.vel[0], o.vel[1], o.heading,
                           o.size[0], o.size[1], int(o.behavior), int(o.category),
                           o.shift, o.shift_t0, o.shift_t1], dtype=np.float64).tobytes())
    for lane in scene.lanes:
        h.update(np.ascontiguousarray(lane.points, dtype=np.float64).tobytes())
        h.update(bytes([int(lane.lane_class)]))
    return h.hexdigest()


@dataclass
class FailureCase:
    scene_id: str
    frame: int
    horizon: str           # 1s | 2s | 3s
    tag: str
    descriptor: np.ndarray


def tag_failure(scene: Scene, frame: int) -> str:
    """Rule-based cause label, first match wins:
    night-darkness, large-near-object, rare-category, crossing-interaction,
    cut-in-interaction, other."""
    if scene.time == TimeOfDay.NIGHT or scene.weather == Weather.NIGHT:
        return "night-darkness"
    geo = _object_geometry(scene, frame)
    if any(d < _NEAR_DIST and frac > _APPARENT_FRAC for d, frac, _ in geo):
        return "large-near-object"
    if any(o.category in RARE_CATEGORIES for o in scene.objects):
        return "rare-category"
    if any(o.behavior == Behavior.CROSS for o in scene.objects):
        return "crossing-interaction"
    if any(o.behavior == Behavior.CUT_IN for o in scene.objects):
        return "cut-in-interaction"
    return "other"


def collect_failures(plan_fn, samples: list[Sample], stride: int = 2) -> list[FailureCase]:
    """Every (scene, frame) whose plan collides within 3 s, ordered by
    (scene_id, frame)."""
    out = []
    for s in sorted(samples, key=lambda s: s.scene.scene_id):
        for n in eval_frames_of(s.scene, stride):
            wp = plan_fn(s.scene, s.frames, n)
            horizon = horizon_of_waypoint(first_collision_waypoint(s.scene, n, wp))
            if horizon is not None:
                out.append(FailureCase(
                    scene_id=s.scene.scene_id, frame=n, horizon=horizon,
                    tag=tag_failure(s.scene, n),
                    descriptor=scene_descriptor(s.scene, n)))
    return out


def retrieve_similar(query: np.ndarray, index: list[tuple[str, np.ndarray]], k: int) -> list[str]:
    """Top-k scene ids by cosine similarity; ties broken by ascending id."""
    if not index:
        raise ValueError("retrieval index is empty")
    if k > len(index):
        raise ValueError(f"k={k} exceeds index size {len(index)}")
    scored = sorted(index, key=lambda e: (-float(np.dot(query, e[1])), e[0]))
    return [sid for sid, _ in scored[:k]]


# -- caption (attribute) edits ------------------------------------------------


def scene_attrs(scene: Scene) -> dict:
    return {
        "weather": scene.weather,
        "time": scene.time,
        "locale": scene.locale,
        "colors": {o.instance_id: scene.object_color(o) for o in scene.objects},
    }


def _edit_candidates(attrs: dict, mode: str) -> list[tuple]:
    cands = []
    if mode in ("scene", "both"):
        cands += [("weather", w) for w in Weather if w != attrs["weather"]]
        cands += [("time", t) for t in TimeOfDay if t != attrs["time"]]
        cands += [("locale", lc) for lc in Locale if lc != attrs["locale"]]
    if mode in ("instance", "both"):
        for iid, color in sorted(attrs["colors"].items()):
            cands += [("color", iid, c) for c in VehicleColor if c != color]
    return cands


def diversify_caption(attrs: dict, n_edits: int, rng: RngStream, mode: str = "both") -> list[tuple]:
    """n_edits distinct single-attribute edits; layout is untouchable.

    Each edit changes exactly one scene-level field or one vehicle color.
    If the attribute lattice is smaller than n_edits, returns what exists
    and warns.
    """
    if n_edits < 1:
        raise ValueError("n_edits must be >= 1")
    if mode == "none":
        return []
    cands = _edit_candidates(attrs, mode)
    if len(cands) < n_edits:
        warnings.warn(f"attribute space exhausted: {len(cands)} edits available, {n_edits} requested")
        n_edits = len(cands)
    order = rng.fork("edits").permutation(len(cands))
    return [cands[i] for i in order[:n_edits]]


def apply_edit(scene: Scene, edit: tuple | None) -> Scene:
    """Copy of the scene with one attribute edit applied; geometry shared."""
    out = replace(scene, colors_override=dict(scene.colors_override))
    if edit is None:
        return out
    if edit[0] == "weather":
        out.weather = edit[1]
    elif edit[0] == "time":
        out.time = edit[1]
    elif edit[0] == "locale":
        out.locale = edit[1]
    elif edit[0] == "color":
        out.colors_override[edit[1]] = edit[2]
    else:
        raise ValueError(f"unknown edit {edit!r}")
    return out


def _scene_head(scene: Scene, n_frames: int) -> Scene:
    if n_frames >= scene.n_frames:
        return scene
    return replace(scene, n_frames=n_frames, ego_traj=scene.ego_traj[:n_frames])


def edit_label(edit: tuple | None) -> str:
    if edit is None:
        return "original"
    if edit[0] == "color":
        return f"color[{edit[1]}]={edit[2].name.lower()}"
    return f"{edit[0]}={edit[1].name.lower()}"


# -- the loop ---------------------------------------------------------------


@dataclass
class LoopConfig:
    budget_frac: float = 0.04        # generated samples as a fraction of train samples
    budget_samples: int | None = None
    k: int = 5                       # retrieval depth
    edits_per_scene: int = 3
    finetune_steps: int = 400
    finetune_batch: int = 16
    seed: int = 0
    sampling: str = "failure"        # failure | random
    edit_mode: str = "both"          # both | scene | instance | none
    collect_split: str = "val"
    gen_frames: int = 13
    gen_num_steps: int = 8
    eval_stride: int = 2

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("retrieval depth k must be >= 1")
        if self.sampling not in ("failure", "random"):
            raise ValueError(f"sampling mode {self.sampling!r}")
        if self.edit_mode not in ("both", "scene", "instance", "none"):
            raise ValueError(f"edit mode {self.edit_mode!r}")


@dataclass
class LoopReport:
    before: dict[str, float]
    after: dict[str, float]
    budget_samples: int
    n_generated_clips: int
    n_failures: int
    tag_histogram: dict[str, int]
    sampling: str
    edit_mode: str
    noop: bool = False
    lines: list[str] = field(default_factory=list)

    def record(self) -> str:
        parts = [f"sampling={self.sampling}", f"edits={self.edit_mode}",
                 f"budget={self.budget_samples}", f"clips={self.n_generated_clips}",
                 f"failures={self.n_failures}", f"noop={int(self.noop)}"]
        for name, rates in (("before", self.before), ("after", self.after)):
            for h in ("1s", "2s", "3s", "avg"):
                parts.append(f"{name}_{h}={rates[h]:.6f}")
        for tag in sorted(self.tag_histogram):
            parts.append(f"tag[{tag}]={self.tag_histogram[tag]}")
        return " ".join(parts)

    def table(self) -> str:
        head = f"{'arm':<28s} {'cases':>6s} {'1s':>7s} {'2s':>7s} {'3s':>7s} {'avg':>7s}"
        def row(name, cases, r):
            return f"{name:<28s} {cases:>6d} {r['1s']:>7.3f} {r['2s']:>7.3f} {r['3s']:>7.3f} {r['avg']:>7.3f}"
        label = f"{self.sampling}+{self.edit_mode}"
        return "\n".join([head, row("baseline", 0, self.before),
                          row(label, self.budget_samples, self.after)])

    def hash(self) -> str:
        return hashlib.sha256(self.record().encode()).hexdigest()


def clone_planner(model: PlannerModel) -> PlannerModel:
    out = copy.deepcopy(model)
    for p in out.params().values():
        p.data = p.data.copy()
    return out


def generate_augmentation(generator, sched, sources: list[tuple[Scene, tuple | None]], rig,
                          cfg: LoopConfig, prep: FramePrep | None = None) -> list[Sample]:
    """Render one clip per (source scene, edit) with the diffusion model."""
    out = []
    prep = prep or FramePrep(rig, generator.cfg)
    for i, (scene, edit) in enumerate(sources):
        edited = apply_edit(_scene_head(scene, cfg.gen_frames), edit)
        edited.scene_id = f"{scene.scene_id}+gen{i}"
        scfg = SampleConfig(num_steps=cfg.gen_num_steps, frame_count=cfg.gen_frames,
                            seed=cfg.seed * 1_000_003 + i, noise_window=10)
        frames = stream_generate(generator, edited, rig, sched, scfg, prep=prep)
        out.append(Sample(scene=edited, frames=frames, split="gen"))
    return out


def run_loop(planner: PlannerModel, generator, sched, corpus, cfg: LoopConfig,
             out_dir=None) -> tuple[PlannerModel, LoopReport]:
    """One full failure-driven augmentation round; returns the fine-tuned
    planner and a report with before/after collision rates."""
    rng = RngStream(cfg.seed)
    train_samples = corpus_samples(corpus, "train")
    eval_samples = corpus_samples(corpus, cfg.collect_split)
    plan_fn = model_plan_fn(planner)
    before = evaluate_planner(plan_fn, eval_samples, stride=cfg.eval_stride)

    per_clip = max(cfg.gen_frames - 7, 1)
    train_sample_count = sum(len(s.usable_frames()) for s in train_samples)
    budget = cfg.budget_samples if cfg.budget_samples is not None else int(
        round(cfg.budget_frac * train_sample_count))
    lines = [f"train_samples={train_sample_count} budget_samples={budget}"]

    failures: list[FailureCase] = []
    tag_hist: dict[str, int] = {}
    sources: list[tuple[Scene, tuple | None]] = []

    if cfg.sampling == "failure":
        failures = collect_failures(plan_fn, eval_samples, stride=cfg.eval_stride)
        for f in failures:
            tag_hist[f.tag] = tag_hist.get(f.tag, 0) + 1
        lines += [f"failure {f.scene_id} frame={f.frame} horizon={f.horizon} tag={f.tag}"
                  for f in failures]

    if budget < 1 or (cfg.sampling == "failure" and not failures):
        report = LoopReport(before=before, after=before, budget_samples=budget,
                            n_generated_clips=0, n_failures=len(failures),
                            tag_histogram=tag_hist, sampling=cfg.sampling,
                            edit_mode=cfg.edit_mode, noop=True,
                            lines=lines + ["no-op: empty budget or no failures"])
        _persist(out_dir, report)
        return planner, report

    n_clips = math.ceil(budget / per_clip)
    if cfg.sampling == "failure":
        index = [(s.scene.scene_id, scene_descriptor(s.scene)) for s in train_samples]
        by_id = {s.scene.scene_id: s.scene for s in train_samples}
        # budget allocated proportionally to tag frequency, round-robin inside a tag
        tags = sorted(tag_hist)
        quota = {tg: int(round(n_clips * tag_hist[tg] / len(failures))) for tg in tags}
        while sum(quota.values()) < n_clips:
            quota[max(tags, key=lambda tg: tag_hist[tg])] += 1
        grouped = {tg: [f for f in failures if f.tag == tg] for tg in tags}
        for tg in tags:
            cases = grouped[tg]
            for j in range(quota[tg]):
                if len(sources) >= n_clips:
                    break
                case = cases[j % len(cases)]
                ranked = retrieve_similar(case.descriptor, index, min(cfg.k, len(index)))
                src = by_id[ranked[j % len(ranked)]]
                edits = diversify_caption(scene_attrs(src), cfg.edits_per_scene,
                                          rng.fork("edit", len(sources)), mode=cfg.edit_mode)
                edit = edits[j % len(edits)] if edits else None
                sources.append((src, edit))
                lines.append(f"gen[{len(sources) - 1}] tag={tg} case={case.scene_id}@{case.frame} "
                             f"source={src.scene_id} edit={edit_label(edit)} rank={j % len(ranked)}")
    else:
        order = rng.fork("random").permutation(len(train_samples))
        for j in range(n_clips):
            src = train_samples[int(order[j % len(order)])].scene
            sources.append((src, None))
            lines.append(f"gen[{j}] random source={src.scene_id} edit=original")

    gen_samples = generate_augmentation(generator, sched, sources, corpus.rig, cfg)
    ft_cfg = PlannerTrainConfig(steps=cfg.finetune_steps, batch=cfg.finetune_batch,
                                seed=cfg.seed + 17)
    tuned = train_planner(train_samples + gen_samples, ft_cfg,
                          model=clone_planner(planner), finetune=True)
    after = evaluate_planner(model_plan_fn(tuned), eval_samples, stride=cfg.eval_stride)
    report = LoopReport(before=before, after=after, budget_samples=budget,
                        n_generated_clips=len(gen_samples), n_failures=len(failures),
                        tag_histogram=tag_hist, sampling=cfg.sampling, edit_mode=cfg.edit_mode,
                        lines=lines)
    _persist(out_dir, report)
    return tuned, report


def _persist(out_dir, report: LoopReport) -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "loop_log.txt").write_text("\n".join(report.lines) + "\n", encoding="utf-8")
    (out_dir / "loop_report.txt").write_text(
        report.record() + "\n\n" + report.table() + "\n", encoding="utf-8")
