"""Procedural multi-view driving corpus.

A scene is a scripted world: an ego trajectory following a lane, a handful
of objects with closed-form motion (cruise / cut-in / cross / stopped),
lane polylines, and appearance attributes. Four scenario families cover
the interesting cases, including a stopped heavy vehicle dead ahead and an
unprotected left turn across traffic. Ego scripts brake or time the turn
so the ground-truth trajectory is collision-free by construction; any
randomized object that would still clip the ego tube is dropped.

Rendering is flat-shaded: sky/road background, lane lines, objects as
filled projected quads, then a global weather/time tint. Object pixels
coincide exactly with the projected instance masks because both go through
the same polygon fill.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .bundle import load_bundle, save_bundle
from .layout import (
    BEVBox,
    BoxCategory,
    Camera,
    LaneClass,
    LanePolyline,
    VehicleColor,
    box_image_polygon,
    fill_polygon,
    draw_polyline,
    oriented_rects_intersect,
)
from .rng import RngStream

__all__ = [
    "Behavior",
    "Weather",
    "TimeOfDay",
    "Locale",
    "SceneObject",
    "Scene",
    "GenSpec",
    "make_rig",
    "generate_scene",
    "render_views",
    "render_clip",
    "corpus_build",
    "Corpus",
    "EGO_SIZE",
]

EGO_SIZE = (4.0, 1.8)  # meters, length x width
LANE_W = 3.5


class Behavior(IntEnum):
    CRUISE = 0
    CUT_IN = 1
    CROSS = 2
    STOPPED = 3


class Weather(IntEnum):
    SUNNY = 0
    RAINY = 1
    CLOUDY = 2
    NIGHT = 3


class TimeOfDay(IntEnum):
    DAY = 0
    NIGHT = 1


class Locale(IntEnum):
    URBAN = 0
    SUBURBAN = 1


_CATEGORY_SIZE = {
    BoxCategory.CAR: (4.2, 1.9),
    BoxCategory.TRUCK: (8.5, 2.6),
    BoxCategory.BUS: (11.0, 2.9),
    BoxCategory.BIKE: (1.8, 0.7),
}


@dataclass
class SceneObject:
    """World-frame object whose state at any frame is a pure function."""

    center0: tuple[float, float]
    vel: tuple[float, float]
    heading: float
    category: BoxCategory
    color: VehicleColor
    behavior: Behavior
    instance_id: int
    # cut-in parameters: lateral shift delta applied between t0 and t1
    shift: float = 0.0
    shift_t0: float = 0.0
    shift_t1: float = 1.0

    @property
    def size(self) -> tuple[float, float]:
        return _CATEGORY_SIZE[self.category]

    def state_at(self, t: float) -> tuple[float, float, float]:
        """(x, y, heading) in world frame at time t seconds."""
        x = self.center0[0] + self.vel[0] * t
        y = self.center0[1] + self.vel[1] * t
        if self.behavior == Behavior.CUT_IN and self.shift != 0.0:
            if t <= self.shift_t0:
                f = 0.0
            elif t >= self.shift_t1:
                f = 1.0
            else:
                f = (t - self.shift_t0) / (self.shift_t1 - self.shift_t0)
            x += self.shift * f
        return x, y, self.heading


@dataclass
class Scene:
    scene_id: str
    n_frames: int
    dt: float
    ego_traj: np.ndarray            # [N, 3] world (x, y, heading)
    objects: list[SceneObject]
    lanes: list[LanePolyline]       # world-frame polylines
    weather: Weather
    time: TimeOfDay
    locale: Locale
    family: str = ""
    colors_override: dict[int, VehicleColor] = field(default_factory=dict)

    def attrs(self) -> dict:
        return {"weather": self.weather, "time": self.time, "locale": self.locale}

    def object_color(self, obj: SceneObject) -> VehicleColor:
        return self.colors_override.get(obj.instance_id, obj.color)

    def ego_speed(self, n: int) -> float:
        a = self.ego_traj[min(n + 1, self.n_frames - 1), :2]
        b = self.ego_traj[max(n - 1, 0), :2]
        steps = min(n + 1, self.n_frames - 1) - max(n - 1, 0)
        return float(np.linalg.norm(a - b) / (self.dt * max(steps, 1)))

    def ego_yaw_rate(self, n: int) -> float:
        a = self.ego_traj[min(n + 1, self.n_frames - 1), 2]
        b = self.ego_traj[max(n - 1, 0), 2]
        steps = min(n + 1, self.n_frames - 1) - max(n - 1, 0)
        return float(_wrap(a - b) / (self.dt * max(steps, 1)))

    def world_to_ego(self, n: int, pts: np.ndarray) -> np.ndarray:
        ex, ey, eh = self.ego_traj[n]
        d = np.asarray(pts, dtype=np.float64) - [ex, ey]
        fwd = np.array([math.sin(eh), math.cos(eh)])
        right = np.array([math.cos(eh), -math.sin(eh)])
        return np.stack([d @ right, d @ fwd], axis=-1)

    def ego_to_world(self, n: int, pts: np.ndarray) -> np.ndarray:
        ex, ey, eh = self.ego_traj[n]
        pts = np.asarray(pts, dtype=np.float64)
        fwd = np.array([math.sin(eh), math.cos(eh)])
        right = np.array([math.cos(eh), -math.sin(eh)])
        return pts[..., :1] * right + pts[..., 1:] * fwd + [ex, ey]

    def boxes_at(self, n: int) -> list[BEVBox]:
        """Objects as ego-frame boxes at frame n."""
        t = n * self.dt
        _, _, eh = self.ego_traj[n]
        out = []
        for obj in self.objects:
            x, y, h = obj.state_at(t)
            cx, cy = self.world_to_ego(n, np.array([x, y]))
            out.append(BEVBox(center=(float(cx), float(cy)), size=obj.size, heading=_wrap(h - eh),
                              instance_id=obj.instance_id, category=obj.category,
                              color=self.object_color(obj)))
        return out

    def lanes_ego(self, n: int) -> list[LanePolyline]:
        return [LanePolyline(points=self.world_to_ego(n, l.points), lane_class=l.lane_class) for l in self.lanes]

    def ego_future(self, n: int, k: int = 6) -> np.ndarray:
        """Next k ego positions in the ego frame at n; clamps at the last frame."""
        idx = np.minimum(np.arange(n + 1, n + k + 1), self.n_frames - 1)
        return self.world_to_ego(n, self.ego_traj[idx, :2])


def _wrap(a: float) -> float:
    a = math.remainder(a, 2 * math.pi)
    return a - 2 * math.pi if a >= math.pi else a


@dataclass
class GenSpec:
    """Sampling distribution over scenario families and attributes."""

    family_probs: dict[str, float] = field(default_factory=lambda: {
        "cruise": 0.35, "cutin": 0.25, "left_turn": 0.2, "lead_stop": 0.2,
    })
    weather_probs: dict[Weather, float] = field(default_factory=lambda: {
        Weather.SUNNY: 0.45, Weather.RAINY: 0.2, Weather.CLOUDY: 0.2, Weather.NIGHT: 0.15,
    })
    time_probs: dict[TimeOfDay, float] = field(default_factory=lambda: {
        TimeOfDay.DAY: 0.7, TimeOfDay.NIGHT: 0.3,
    })
    locale_probs: dict[Locale, float] = field(default_factory=lambda: {
        Locale.URBAN: 0.5, Locale.SUBURBAN: 0.5,
    })
    n_frames: int = 40
    dt: float = 0.5

    def __post_init__(self):
        for name, probs in (("family", self.family_probs), ("weather", self.weather_probs),
                            ("time", self.time_probs), ("locale", self.locale_probs)):
            total = sum(probs.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"{name} probabilities sum to {total}, not 1")


def _pick(rng: RngStream, probs: dict) -> object:
    keys = list(probs.keys())
    p = np.array([probs[k] for k in keys])
    u = rng.uniform(())
    return keys[int(np.searchsorted(np.cumsum(p), u))]


def make_rig(V: int = 3, H: int = 32, W: int = 32, fov_deg: float = 60.0,
             spacing_deg: float = 45.0, height: float = 1.5) -> list[Camera]:
    """V forward cameras with overlapping frusta (adjacent overlap >= 10 deg)."""
    if fov_deg - spacing_deg < 10.0:
        raise ValueError(f"adjacent views overlap only {fov_deg - spacing_deg} deg")
    fx = 0.5 * W / math.tan(math.radians(fov_deg) / 2)
    yaws = [math.radians((i - (V - 1) / 2) * spacing_deg) for i in range(V)]
    return [Camera(fx=fx, fy=fx, cx=W / 2, cy=H / 2, yaw=y, height=height, H=H, W=W) for y in yaws]


# -- ego speed scripts ----------------------------------------------------


def _integrate_straight(n_frames, dt, speed_fn):
    """Ego along x=0 heading +y with scripted speed."""
    traj = np.zeros((n_frames, 3))
    y = 0.0
    for n in range(n_frames):
        traj[n] = (0.0, y, 0.0)
        y += speed_fn(n * dt) * dt
    return traj


def _left_turn_traj(n_frames, dt, v0, y_turn, radius):
    """Straight approach, quarter arc to heading -x, then straight."""
    traj = np.zeros((n_frames, 3))
    s = 0.0
    arc_len = 0.5 * math.pi * radius
    for n in range(n_frames):
        t = n * dt
        dist_to_turn = y_turn - s if s < y_turn else 0.0
        if s < y_turn:
            v = max(3.0, min(v0, 3.0 + 0.9 * dist_to_turn))
            x, y, h = 0.0, s, 0.0
        elif s < y_turn + arc_len:
            v = 3.0
            phi = (s - y_turn) / radius  # 0..pi/2
            x = -radius * (1 - math.cos(phi))
            y = y_turn + radius * math.sin(phi)
            h = -phi
        else:
            v = min(3.0 + 1.5 * (s - y_turn - arc_len) / max(v0, 1.0), v0)
            d = s - y_turn - arc_len
            x, y, h = -radius - d, y_turn + radius, -math.pi / 2
        traj[n] = (x, y, h)
        s += v * dt
    return traj


def _lead_stop_traj(n_frames, dt, v0, stop_at):
    """Cruise then brake (2.5 m/s^2) so the ego halts before stop_at meters."""
    a = 2.5
    v0 = min(v0, math.sqrt(2 * a * max(stop_at, 1.0) * 0.9))
    traj = np.zeros((n_frames, 3))
    s, v = 0.0, v0
    for n in range(n_frames):
        traj[n] = (0.0, s, 0.0)
        if stop_at - s <= v * v / (2 * a) + v * dt:
            v = max(0.0, v - a * dt)
        s = min(s + v * dt, stop_at)
    return traj


def _road_lanes(y_max: float = 220.0) -> list[LanePolyline]:
    ys = np.array([[-0.0, -40.0], [0.0, y_max]])
    def line(x, cls):
        return LanePolyline(points=np.array([[x, -40.0], [x, y_max]]), lane_class=cls)
    return [
        line(-LANE_W * 1.5, LaneClass.BOUNDARY),
        line(LANE_W * 1.5, LaneClass.BOUNDARY),
        line(-LANE_W * 0.5, LaneClass.DIVIDER),
        line(LANE_W * 0.5, LaneClass.DIVIDER),
        LanePolyline(points=np.array([[0.0, -40.0], [0.0, y_max]]), lane_class=LaneClass.CENTERLINE),
    ]


def _cross_lanes(y_int: float, x_max: float = 120.0) -> list[LanePolyline]:
    def line(y, cls):
        return LanePolyline(points=np.array([[-x_max, y], [x_max, y]]), lane_class=cls)
    return [
        line(y_int - LANE_W, LaneClass.CROSSING),
        line(y_int + LANE_W, LaneClass.CROSSING),
        LanePolyline(points=np.array([[-x_max, y_int], [x_max, y_int]]), lane_class=LaneClass.CENTERLINE),
    ]


def _rand_color(rng: RngStream) -> VehicleColor:
    return VehicleColor(int(rng.integers(0, len(VehicleColor))))


def _parked_cars(rng: RngStream, count: int, iid0: int) -> list[SceneObject]:
    out = []
    for i in range(count):
        side = 1.0 if rng.uniform(()) < 0.5 else -1.0
        y = 8.0 + float(rng.uniform(()) * 150.0)
        out.append(SceneObject(
            center0=(side * (LANE_W * 1.5 + 1.2), y), vel=(0.0, 0.0), heading=0.0,
            category=BoxCategory.CAR, color=_rand_color(rng), behavior=Behavior.STOPPED,
            instance_id=iid0 + i))
    return out


def generate_scene(seed: int, spec: GenSpec | None = None, scene_id: str | None = None) -> Scene:
    """Deterministic scene from a seed and a sampling spec."""
    spec = spec or GenSpec()
    rng = RngStream(seed)
    family = _pick(rng.fork("family"), spec.family_probs)
    weather = _pick(rng.fork("weather"), spec.weather_probs)
    time = _pick(rng.fork("time"), spec.time_probs)
    locale = _pick(rng.fork("locale"), spec.locale_probs)
    n, dt = spec.n_frames, spec.dt
    obj_rng = rng.fork("objects")
    v_ego = 6.0 + float(rng.fork("vego").uniform(()) * 4.0)

    objects: list[SceneObject] = []
    lanes = _road_lanes()
    iid = 1

    if family == "cruise":
        traj = _integrate_straight(n, dt, lambda t: v_ego)
        lead_v = v_ego + float(obj_rng.fork("lead").uniform(()) * 2.0 - 0.5)
        objects.append(SceneObject((0.0, 18.0 + float(obj_rng.fork("gap").uniform(()) * 20.0)),
                                   (0.0, lead_v), 0.0, BoxCategory.CAR, _rand_color(obj_rng.fork("c1")),
                                   Behavior.CRUISE, iid)); iid += 1
        objects.append(SceneObject((-LANE_W, 60.0 + float(obj_rng.fork("onc").uniform(()) * 60.0)),
                                   (0.0, -(v_ego + 2.0)), math.pi, BoxCategory.CAR,
                                   _rand_color(obj_rng.fork("c2")), Behavior.CRUISE, iid)); iid += 1
    elif family == "cutin":
        traj = _integrate_straight(n, dt, lambda t: v_ego)
        t0 = 2.0 + float(obj_rng.fork("t0").uniform(()) * 3.0)
        cut = SceneObject(
            center0=(LANE_W, 6.0 + float(obj_rng.fork("ahead").uniform(()) * 6.0)),
            vel=(0.0, v_ego + 2.5), heading=0.0, category=BoxCategory.CAR,
            color=_rand_color(obj_rng.fork("c1")), behavior=Behavior.CUT_IN, instance_id=iid,
            shift=-LANE_W, shift_t0=t0, shift_t1=t0 + 3.0)
        objects.append(cut); iid += 1
    elif family == "lead_stop":
        d0 = 25.0 + float(obj_rng.fork("d0").uniform(()) * 15.0)
        cat = BoxCategory.TRUCK if obj_rng.fork("cat").uniform(()) < 0.6 else BoxCategory.BUS
        gap = 0.5 * EGO_SIZE[0] + 0.5 * _CATEGORY_SIZE[cat][0] + 5.0
        traj = _lead_stop_traj(n, dt, v_ego, d0 - gap)
        objects.append(SceneObject((0.0, d0), (0.0, 0.0), 0.0, cat,
                                   _rand_color(obj_rng.fork("c1")), Behavior.STOPPED, iid)); iid += 1
    elif family == "left_turn":
        y_int = 25.0 + float(obj_rng.fork("yint").uniform(()) * 10.0)
        traj = _left_turn_traj(n, dt, v_ego, y_int - 6.0, 6.0)
        lanes = lanes + _cross_lanes(y_int)
        # crossing vehicle clears the intersection before the ego arrives
        v_c = 7.0 + float(obj_rng.fork("vc").uniform(()) * 3.0)
        x_start = -30.0 - float(obj_rng.fork("xs").uniform(()) * 15.0)
        objects.append(SceneObject((x_start, y_int), (v_c, 0.0), math.pi / 2, BoxCategory.CAR,
                                   _rand_color(obj_rng.fork("c1")), Behavior.CROSS, iid)); iid += 1
        # oncoming car waiting at the far side
        objects.append(SceneObject((-LANE_W, y_int + 14.0), (0.0, 0.0), math.pi, BoxCategory.CAR,
                                   _rand_color(obj_rng.fork("c2")), Behavior.STOPPED, iid)); iid += 1
    else:
        raise ValueError(f"unknown scenario family {family!r}")

    n_parked = int(obj_rng.fork("nparked").integers(1, 4))
    objects.extend(_parked_cars(obj_rng.fork("parked"), n_parked, iid))

    # rare heavy vehicle parked roadside to exercise the rare-category cases
    if obj_rng.fork("rare").uniform(()) < 0.15:
        objects.append(SceneObject((LANE_W * 1.5 + 2.2, 30.0), (0.0, 0.0), 0.0, BoxCategory.BIKE,
                                   _rand_color(obj_rng.fork("c3")), Behavior.STOPPED, 900))

    scene = Scene(scene_id=scene_id or f"scene{seed:010d}", n_frames=n, dt=dt, ego_traj=traj,
                  objects=objects, lanes=lanes, weather=weather, time=time, locale=locale, family=family)
    scene.objects = [o for o in objects if not _hits_ego_tube(scene, o)]
    return scene


def _hits_ego_tube(scene: Scene, obj: SceneObject) -> bool:
    for f in range(scene.n_frames):
        ex, ey, eh = scene.ego_traj[f]
        x, y, h = obj.state_at(f * scene.dt)
        grow = (EGO_SIZE[0] + 1.0, EGO_SIZE[1] + 1.0)
        if oriented_rects_intersect((ex, ey), grow, eh, (x, y), obj.size, h):
            return True
    return False


# -- rendering -------------------------------------------------------------

_COLOR_RGB = {
    VehicleColor.RED: (0.85, 0.15, 0.15),
    VehicleColor.BLUE: (0.15, 0.25, 0.85),
    VehicleColor.GREEN: (0.15, 0.7, 0.2),
    VehicleColor.YELLOW: (0.9, 0.85, 0.1),
    VehicleColor.WHITE: (0.92, 0.92, 0.92),
    VehicleColor.BLACK: (0.08, 0.08, 0.1),
    VehicleColor.ORANGE: (0.95, 0.55, 0.1),
    VehicleColor.CYAN: (0.1, 0.8, 0.85),
}

_LANE_RGB = {
    LaneClass.BOUNDARY: (0.95, 0.95, 0.95),
    LaneClass.DIVIDER: (0.85, 0.75, 0.2),
    LaneClass.CROSSING: (0.7, 0.85, 0.95),
    LaneClass.CENTERLINE: (0.95, 0.6, 0.3),
}

_SKY = {Locale.URBAN: (0.55, 0.65, 0.8), Locale.SUBURBAN: (0.55, 0.75, 0.9)}
_BAND = {Locale.URBAN: (0.45, 0.45, 0.5), Locale.SUBURBAN: (0.3, 0.55, 0.3)}
_ROAD = (0.33, 0.33, 0.35)


def _tint(img: np.ndarray, weather: Weather, time: TimeOfDay) -> np.ndarray:
    if time == TimeOfDay.NIGHT or weather == Weather.NIGHT:
        img = img * 0.35
    if weather == Weather.RAINY:
        gray = img.mean(axis=0, keepdims=True)
        img = 0.5 * img + 0.5 * gray
        img = img * np.array([0.9, 0.95, 1.05]).reshape(3, 1, 1)
    elif weather == Weather.CLOUDY:
        img = img * 0.8
    return np.clip(img, 0.0, 1.0)


def render_views(scene: Scene, frame_idx: int, rig: list[Camera]) -> np.ndarray:
    """[V, 3, H, W] frame in [0, 1]; deterministic flat-shaded raster."""
    if frame_idx >= scene.n_frames:
        raise ValueError(f"frame {frame_idx} outside scene of {scene.n_frames}")
    boxes = scene.boxes_at(frame_idx)
    lanes = scene.lanes_ego(frame_idx)
    out = np.empty((len(rig), 3, rig[0].H, rig[0].W), dtype=np.float32)
    for vi, cam in enumerate(rig):
        img = np.empty((3, cam.H, cam.W), dtype=np.float32)
        horizon = int(round(cam.cy))
        img[:, :horizon, :] = np.array(_SKY[scene.locale], dtype=np.float32).reshape(3, 1, 1)
        img[:, horizon:, :] = np.array(_ROAD, dtype=np.float32).reshape(3, 1, 1)
        band = np.array(_BAND[scene.locale], dtype=np.float32).reshape(3, 1, 1)
        img[:, max(horizon - 3, 0):horizon, :] = band
        for lane in lanes:
            canvas = np.zeros((cam.H, cam.W), dtype=np.float32)
            draw_polyline(canvas, lane, cam)
            rgb = _LANE_RGB[lane.lane_class]
            for c in range(3):
                img[c][canvas > 0] = rgb[c]
        # painter's order: far to near so close objects occlude
        order = sorted(range(len(boxes)), key=lambda i: -float(boxes[i].center[1] ** 2 + boxes[i].center[0] ** 2))
        for i in order:
            poly = box_image_polygon(boxes[i], cam)
            if poly is None:
                continue
            m = fill_polygon(cam.H, cam.W, poly)
            if not np.any(m):
                continue
            rgb = _COLOR_RGB[boxes[i].color]
            sel = m > 0
            for c in range(3):
                img[c][sel] = rgb[c]
        out[vi] = _tint(img, scene.weather, scene.time)
    return out


def render_clip(scene: Scene, rig: list[Camera]) -> np.ndarray:
    return np.stack([render_views(scene, f, rig) for f in range(scene.n_frames)])


# -- persistence -------------------------------------------------------------


def scene_to_entries(scene: Scene, frames: np.ndarray | None = None) -> dict[str, np.ndarray]:
    obj = np.zeros((len(scene.objects), 13), dtype=np.float64)
    for i, o in enumerate(scene.objects):
        obj[i] = [o.center0[0], o.center0[1], o.vel[0], o.vel[1], o.heading,
                  int(o.category), int(o.color), int(o.behavior), o.instance_id,
                  o.shift, o.shift_t0, o.shift_t1, 0.0]
    pts = np.concatenate([l.points for l in scene.lanes]) if scene.lanes else np.zeros((0, 2))
    meta = np.zeros((len(scene.lanes), 3), dtype=np.float64)
    off = 0
    for j, l in enumerate(scene.lanes):
        meta[j] = [off, len(l.points), int(l.lane_class)]
        off += len(l.points)
    entries = {
        "ego_traj": scene.ego_traj.astype(np.float64),
        "objects": obj,
        "lanes.pts": pts.astype(np.float64),
        "lanes.meta": meta,
        "attrs": np.array([int(scene.weather), int(scene.time), int(scene.locale)], dtype=np.float64),
        "meta": np.array([scene.n_frames, scene.dt], dtype=np.float64),
    }
    if frames is not None:
        entries["frames"] = frames.astype(np.float32)
    return entries


def scene_from_entries(scene_id: str, e: dict[str, np.ndarray]) -> Scene:
    objects = []
    for row in e["objects"]:
        objects.append(SceneObject(
            center0=(row[0], row[1]), vel=(row[2], row[3]), heading=row[4],
            category=BoxCategory(int(row[5])), color=VehicleColor(int(row[6])),
            behavior=Behavior(int(row[7])), instance_id=int(row[8]),
            shift=row[9], shift_t0=row[10], shift_t1=row[11]))
    lanes = []
    for off, count, cls in e["lanes.meta"]:
        lanes.append(LanePolyline(points=e["lanes.pts"][int(off):int(off) + int(count)],
                                  lane_class=LaneClass(int(cls))))
    w, t, lo = (int(v) for v in e["attrs"])
    return Scene(scene_id=scene_id, n_frames=int(e["meta"][0]), dt=float(e["meta"][1]),
                 ego_traj=e["ego_traj"], objects=objects, lanes=lanes,
                 weather=Weather(w), time=TimeOfDay(t), locale=Locale(lo))


def corpus_build(n_train: int, n_val: int, seed: int, out_dir, spec: GenSpec | None = None,
                 V: int = 3, H: int = 32, W: int = 32) -> Path:
    """Render and store a corpus; returns the manifest path."""
    spec = spec or GenSpec()
    out_dir = Path(out_dir)
    scene_dir = out_dir / "scenes"
    try:
        scene_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOError(f"cannot create corpus directory {scene_dir}: {e}") from e
    rig = make_rig(V=V, H=H, W=W)
    root = RngStream(seed)
    lines = []
    for split, count in (("train", n_train), ("val", n_val)):
        for i in range(count):
            sid = f"{split}{i:05d}"
            scene_seed = int(root.fork(split, i).integers(0, 2**63))
            scene = generate_scene(scene_seed, spec, scene_id=sid)
            frames = render_clip(scene, rig)
            path = scene_dir / f"{sid}.bundle"
            try:
                save_bundle(path, scene_to_entries(scene, frames))
            except OSError as e:
                raise IOError(f"cannot write scene bundle {path}: {e}") from e
            lines.append("\t".join([sid, split, scene.weather.name.lower(), scene.time.name.lower(),
                                    scene.locale.name.lower(), f"scenes/{sid}.bundle"]))
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out_dir / "rig.txt").write_text(f"V={V} H={H} W={W}\n", encoding="utf-8")
    return manifest


class Corpus:
    """Manifest-backed clip store with lazy loading and a small cache."""

    def __init__(self, manifest_path, cache_clips: int = 64):
        self.root = Path(manifest_path).parent
        self.records = []
        for line in Path(manifest_path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            sid, split, weather, time, locale, path = line.split("\t")
            self.records.append({"scene_id": sid, "split": split, "weather": weather,
                                 "time": time, "locale": locale, "path": path})
        self._cache: dict[str, tuple[Scene, np.ndarray]] = {}
        self._cache_limit = cache_clips
        rig_txt = (self.root / "rig.txt").read_text().split()
        kv = dict(p.split("=") for p in rig_txt)
        self.rig = make_rig(V=int(kv["V"]), H=int(kv["H"]), W=int(kv["W"]))

    def ids(self, split: str | None = None) -> list[str]:
        return [r["scene_id"] for r in self.records if split is None or r["split"] == split]

    def record(self, scene_id: str) -> dict:
        for r in self.records:
            if r["scene_id"] == scene_id:
                return r
        raise KeyError(f"scene {scene_id} not in manifest")

    def load(self, scene_id: str) -> tuple[Scene, np.ndarray]:
        """(scene, frames [N,V,3,H,W]) for one scene id."""
        if scene_id in self._cache:
            return self._cache[scene_id]
        rec = self.record(scene_id)
        e = load_bundle(self.root / rec["path"])
        scene = scene_from_entries(scene_id, e)
        frames = e["frames"]
        n, v = scene.n_frames, len(self.rig)
        frames = frames.reshape(n, v, 3, self.rig[0].H, self.rig[0].W)
        if len(self._cache) >= self._cache_limit:
            self._cache.pop(next(iter(self._cache)))
        self._cache[scene_id] = (scene, frames)
        return self._cache[scene_id]

    def scene(self, scene_id: str) -> Scene:
        return self.load(scene_id)[0]
