"""Procedural driving scenes: geometry, rendering, layouts, masks.

Generates a handful of scenes, prints what the scripted world contains,
renders one frame as PPM images you can open in any viewer, and shows how
the same geometry turns into the conditioning rasters and the foreground
masks the generator consumes.
"""

from pathlib import Path

import numpy as np

from mvdiff.denoiser import DenoiserConfig, build_condition, build_masks
from mvdiff.layout import rasterize_layout
from mvdiff.sampler import write_ppm
from mvdiff.scenegen import GenSpec, generate_scene, make_rig, render_views

out_dir = Path("demo_out")
out_dir.mkdir(exist_ok=True)

spec = GenSpec()  # 40 frames at 2 Hz, mixed scenario families
rig = make_rig(V=3)

for seed in range(4):
    scene = generate_scene(seed, spec)
    print(f"scene {seed}: family={scene.family:<10s} weather={scene.weather.name.lower():<6s} "
          f"time={scene.time.name.lower():<5s} objects={len(scene.objects)}")

scene = generate_scene(1, spec)
frame = 10
views = render_views(scene, frame, rig)
for v in range(3):
    write_ppm(out_dir / f"scene1_f{frame}_view{v}.ppm", views[v])
print(f"\nwrote {out_dir}/scene1_f{frame}_view*.ppm  (left / front / right cameras)")

boxes = scene.boxes_at(frame)
print("ego-frame boxes at frame", frame)
for b in boxes[:5]:
    print(f"  id={b.instance_id:>3d} {b.category.name.lower():<6s} at "
          f"({b.center[0]:+6.1f}, {b.center[1]:6.1f}) m  color={b.color.name.lower()}")

raster = rasterize_layout(boxes, scene.lanes_ego(frame), rig[1], 32)
print("layout raster channels (category outlines + lane classes):", raster.shape)
print("pixels set per channel:", raster.reshape(8, -1).sum(axis=1).astype(int).tolist())

cfg = DenoiserConfig()
masks = build_masks(scene, frame, rig, cfg)
print("foreground mask fill per depth:", [round(float(m.mean()), 4) for m in masks])
cond = build_condition(scene, frame, rig, cfg)
print("layout tokens per view:", cond.layout_tokens.shape, " active attribute ids:", cond.attr_ids.tolist())
