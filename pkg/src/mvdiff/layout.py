"""BEV geometry to camera space: box projection, layout rasters, masks.

Conventions: the ego/BEV frame has x to the right and y forward, in
meters. Heading 0 points along +y and positive headings rotate toward +x.
Boxes are ground-plane rectangles; a camera sits at the ego origin at
``height`` meters above ground, yawed relative to ego forward, and
projects through a pinhole, so a ground point at depth z lands on image
row cy + fy * height / z. Everything here is a pure function of its
arguments; rasters are binary and deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .nn import max_pool2d_np

__all__ = [
    "BoxCategory",
    "LaneClass",
    "VehicleColor",
    "BEVBox",
    "Camera",
    "LanePolyline",
    "project_box",
    "rasterize_layout",
    "instance_mask",
    "fill_polygon",
    "draw_polyline",
    "oriented_rects_intersect",
    "mask_pyramid",
    "box_image_polygon",
    "LAYOUT_CHANNELS",
    "NEAR_PLANE",
]

NEAR_PLANE = 0.1  # meters; corners at or behind this depth are clipped


class BoxCategory(IntEnum):
    CAR = 0
    TRUCK = 1
    BUS = 2
    BIKE = 3


class LaneClass(IntEnum):
    BOUNDARY = 0
    DIVIDER = 1
    CROSSING = 2
    CENTERLINE = 3


class VehicleColor(IntEnum):
    RED = 0
    BLUE = 1
    GREEN = 2
    YELLOW = 3
    WHITE = 4
    BLACK = 5
    ORANGE = 6
    CYAN = 7


LAYOUT_CHANNELS = len(BoxCategory) + len(LaneClass)

# nominal vehicle heights (meters) for the 2.5-D silhouette
OBJECT_HEIGHT = {
    BoxCategory.CAR: 1.6,
    BoxCategory.TRUCK: 3.2,
    BoxCategory.BUS: 3.4,
    BoxCategory.BIKE: 1.4,
}


@dataclass
class BEVBox:
    center: tuple[float, float]   # (x, y) meters in ego frame
    size: tuple[float, float]     # (length along heading, width)
    heading: float                # radians, 0 = +y, positive toward +x
    instance_id: int
    category: BoxCategory
    color: VehicleColor

    def __post_init__(self):
        l, w = self.size
        if l <= 0 or w <= 0:
            raise ValueError(f"box {self.instance_id}: non-positive size {self.size}")
        h = math.remainder(self.heading, 2 * math.pi)
        if h >= math.pi:
            h -= 2 * math.pi
        object.__setattr__(self, "heading", h)

    def corners(self) -> np.ndarray:
        """Ground-plane corners, (4, 2) in ego frame, counterclockwise."""
        l, w = self.size
        d = np.array([math.sin(self.heading), math.cos(self.heading)])
        p = np.array([math.cos(self.heading), -math.sin(self.heading)])
        c = np.asarray(self.center, dtype=np.float64)
        return np.stack([
            c + 0.5 * l * d + 0.5 * w * p,
            c + 0.5 * l * d - 0.5 * w * p,
            c - 0.5 * l * d - 0.5 * w * p,
            c - 0.5 * l * d + 0.5 * w * p,
        ])


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    yaw: float       # radians relative to ego forward
    height: float    # mount height above ground, meters
    H: int
    W: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.W and 0 <= self.cy < self.H):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.W}x{self.H} image")

    @property
    def hfov(self) -> float:
        return 2.0 * math.atan(0.5 * self.W / self.fx)

    def to_cam(self, pts: np.ndarray) -> np.ndarray:
        """Ego (x, y) ground points -> (lateral, depth) in camera frame."""
        s, c = math.sin(self.yaw), math.cos(self.yaw)
        x, y = pts[..., 0], pts[..., 1]
        return np.stack([x * c - y * s, x * s + y * c], axis=-1)

    def project(self, cam_pts: np.ndarray, elevation: float = 0.0) -> np.ndarray:
        """(lateral, depth) points at a given height above ground -> (u, v) pixels."""
        z = np.maximum(cam_pts[..., 1], NEAR_PLANE)
        u = self.cx + self.fx * cam_pts[..., 0] / z
        v = self.cy + self.fy * (self.height - elevation) / z
        return np.stack([u, v], axis=-1)


@dataclass
class LanePolyline:
    points: np.ndarray  # (K, 2) ego-frame or world-frame BEV points
    lane_class: LaneClass

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError(f"polyline needs >= 2 BEV points, got shape {pts.shape}")
        self.points = pts


def project_box(box: BEVBox, cam: Camera) -> np.ndarray | None:
    """Project the 4 ground corners; None when the whole box is behind the near plane."""
    cam_pts = cam.to_cam(box.corners())
    if np.all(cam_pts[:, 1] <= NEAR_PLANE):
        return None
    return cam.project(cam_pts)


def _clip_near(cam_pts: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon against depth > NEAR_PLANE."""
    out = []
    n = len(cam_pts)
    for i in range(n):
        a, b = cam_pts[i], cam_pts[(i + 1) % n]
        a_in, b_in = a[1] > NEAR_PLANE, b[1] > NEAR_PLANE
        if a_in:
            out.append(a)
        if a_in != b_in:
            t = (NEAR_PLANE - a[1]) / (b[1] - a[1])
            out.append(a + t * (b - a))
    return np.asarray(out, dtype=np.float64)


def fill_polygon(h: int, w: int, pts: np.ndarray) -> np.ndarray:
    """Binary mask of pixels whose centers fall inside a convex polygon."""
    mask = np.zeros((h, w), dtype=np.float32)
    if pts is None or len(pts) < 3:
        return mask
    area = 0.0
    for i in range(len(pts)):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % len(pts)]
        area += x0 * y1 - x1 * y0
    if area == 0.0:
        return mask
    if area < 0:
        pts = pts[::-1]
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    inside = np.ones((h, w), dtype=bool)
    for i in range(len(pts)):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % len(pts)]
        inside &= (x1 - x0) * (vv - y0) - (y1 - y0) * (uu - x0) >= 0
    mask[inside] = 1.0
    return mask


def draw_line(canvas: np.ndarray, p0, p1) -> None:
    """Bresenham segment on integer-rounded endpoints, clipped to the canvas."""
    h, w = canvas.shape
    x0, y0 = int(round(p0[0])), int(round(p0[1]))
    x1, y1 = int(round(p1[0])), int(round(p1[1]))
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        if 0 <= x0 < w and 0 <= y0 < h:
            canvas[y0, x0] = 1.0
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def draw_polyline(canvas: np.ndarray, lane: LanePolyline, cam: Camera, step: float = 0.5) -> None:
    """Project a BEV polyline and draw its visible segments."""
    pts = lane.points
    dense = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        seg = b - a
        n = max(1, int(np.linalg.norm(seg) / step))
        for k in range(1, n + 1):
            dense.append(a + seg * (k / n))
    cam_pts = cam.to_cam(np.asarray(dense))
    proj = cam.project(cam_pts)
    vis = cam_pts[:, 1] > NEAR_PLANE
    for i in range(len(proj) - 1):
        if vis[i] and vis[i + 1]:
            draw_line(canvas, proj[i], proj[i + 1])


def _scaled_cam(cam: Camera, resolution: int) -> Camera:
    if resolution == cam.H == cam.W:
        return cam
    s = resolution / cam.W
    return Camera(cam.fx * s, cam.fy * resolution / cam.H, cam.cx * s, cam.cy * resolution / cam.H,
                  cam.yaw, cam.height, resolution, resolution)


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns hull vertices counterclockwise."""
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    if len(pts) <= 2:
        return pts

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                a, b = out[-1] - out[-2], p - out[-2]
                if a[0] * b[1] - a[1] * b[0] > 0:
                    break
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.asarray(lower[:-1] + upper[:-1])


def box_image_polygon(box: BEVBox, cam: Camera, height: float | None = None) -> np.ndarray | None:
    """Silhouette of the vertically extruded box, or None if invisible.

    The silhouette is the convex hull of the projected ground corners and
    the corners raised by the category's nominal height (2.5-D prism; no
    roll/pitch). height=0 collapses to the flat ground quad.
    """
    if height is None:
        height = OBJECT_HEIGHT[box.category]
    cam_pts = cam.to_cam(box.corners())
    clipped = _clip_near(cam_pts)
    if len(clipped) < 3:
        return None
    ground = cam.project(clipped)
    if height == 0.0:
        return ground
    top = cam.project(clipped, elevation=height)
    return _convex_hull(np.concatenate([ground, top]))


def rasterize_layout(boxes: list[BEVBox], lanes: list[LanePolyline], cam: Camera, resolution: int) -> np.ndarray:
    """Conditioning raster: box outlines per category, lane lines per class."""
    cam = _scaled_cam(cam, resolution)
    out = np.zeros((LAYOUT_CHANNELS, resolution, resolution), dtype=np.float32)
    for box in boxes:
        poly = box_image_polygon(box, cam)
        if poly is None:
            continue
        ch = int(box.category)
        for i in range(len(poly)):
            draw_line(out[ch], poly[i], poly[(i + 1) % len(poly)])
    for lane in lanes:
        draw_polyline(out[len(BoxCategory) + int(lane.lane_class)], lane, cam)
    return out


def _rect_corners(center, size, heading) -> np.ndarray:
    l, w = size
    d = np.array([math.sin(heading), math.cos(heading)])
    p = np.array([math.cos(heading), -math.sin(heading)])
    c = np.asarray(center, dtype=np.float64)
    return np.stack([
        c + 0.5 * l * d + 0.5 * w * p,
        c + 0.5 * l * d - 0.5 * w * p,
        c - 0.5 * l * d - 0.5 * w * p,
        c - 0.5 * l * d + 0.5 * w * p,
    ])


def oriented_rects_intersect(c1, s1, h1, c2, s2, h2) -> bool:
    """Separating-axis test between two oriented ground rectangles."""
    r1 = _rect_corners(c1, s1, h1)
    r2 = _rect_corners(c2, s2, h2)
    for rect in (r1, r2):
        for i in range(2):
            edge = rect[(i + 1) % 4] - rect[i]
            axis = np.array([-edge[1], edge[0]])
            p1 = r1 @ axis
            p2 = r2 @ axis
            if p1.max() < p2.min() or p2.max() < p1.min():
                return False
    return True


def mask_pyramid(full: np.ndarray, depth_resolutions: list[int]) -> list[np.ndarray]:
    """Max-pool a full-resolution mask down the depth ladder; covered stays covered."""
    for a, b in zip(depth_resolutions[:-1], depth_resolutions[1:]):
        if a != 2 * b:
            raise ValueError(f"depth resolutions must halve: {depth_resolutions}")
    if full.shape != (depth_resolutions[0], depth_resolutions[0]):
        raise ValueError(f"mask {full.shape} does not match finest depth {depth_resolutions[0]}")
    masks = [full[None]]
    for _ in depth_resolutions[1:]:
        masks.append(max_pool2d_np(masks[-1], 2))
    return masks


def instance_mask(boxes: list[BEVBox], cam: Camera, depth_resolutions: list[int]) -> list[np.ndarray]:
    """Filled union of box interiors at the finest depth, max-pooled downward.

    Returns one (1, r, r) binary array per entry of depth_resolutions.
    """
    r0 = depth_resolutions[0]
    cam0 = _scaled_cam(cam, r0)
    full = np.zeros((r0, r0), dtype=np.float32)
    for box in boxes:
        poly = box_image_polygon(box, cam0)
        if poly is not None:
            full = np.maximum(full, fill_polygon(r0, r0, poly))
    return mask_pyramid(full, depth_resolutions)
