"""Render one synthetic training scene and its sparse depth, and save colour previews.

    python demos/synthetic_scene.py [out_dir]
"""
import os
import sys

from guidedconv.data import generate_scene, random_scene_spec, sample_fixed_count
from guidedconv.data import write_depth_png, write_rgb
from guidedconv.viz import depth_to_color

out = sys.argv[1] if len(sys.argv) > 1 else "scene_preview"
os.makedirs(out, exist_ok=True)

spec = random_scene_spec(seed=4)
print(spec.to_text())
image, depth = generate_scene(spec, (64, 128))
sparse = sample_fixed_count(depth, 400, seed=4)

write_rgb(os.path.join(out, "image.png"), image)
write_depth_png(os.path.join(out, "depth.png"), depth)
lo_hi = (depth.min(), depth.max())
write_rgb(os.path.join(out, "depth_color.png"), depth_to_color(depth, lo_hi))
write_rgb(os.path.join(out, "sparse_color.png"), depth_to_color(sparse, lo_hi))
print(f"depth {depth.min():.2f}..{depth.max():.2f} m, {int((sparse > 0).sum())} sparse points -> {out}/")
