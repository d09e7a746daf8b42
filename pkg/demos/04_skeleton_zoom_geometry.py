"""Skeleton conditioning images, part zoom crops and the local geometry loss."""
import warnings

import numpy as np
import torch

from avatarlab.distill import DistillConfig, camera_from_angles, make_optimizer
from avatarlab.field import FieldConfig, RadianceField
from avatarlab.geometry import GeoLossConfig, canonical_skeleton, geo_loss, hand_mesh, rasterize_skeleton, sample_geo_points
from avatarlab.render import save_png
from avatarlab.schedule import PART_JOINTS, ZoomRegion, zoom_crop

skel = canonical_skeleton()
print(len(skel.names), "joints:", ", ".join(skel.names[:6]), "...")

# Front and back views of the A-pose. From behind, left and right swap sides.
for name, az in (("front", 0.0), ("back", np.pi)):
    cam = camera_from_angles(az, 0.1, 3.0)
    img, behind = rasterize_skeleton(skel, cam, 64, 64)
    print(f"{name}: {int((img.sum(-1) > 0).sum())} skeleton pixels")
    save_png(f"skeleton_{name}.png", img)

# Zoom crops are normalized boxes around the projected part joints.
cam = camera_from_angles(0.4, 0.0, 3.0)
for part, joints in PART_JOINTS.items():
    crop, fell_back = zoom_crop(skel, cam, ZoomRegion(joints))
    print(f"{part:>10}: crop {np.round(crop, 3)}")
    save_png(f"skeleton_{part}.png", rasterize_skeleton(skel, cam, 64, 64, crop=crop)[0])

# A camera facing away from the body has nothing to zoom on.
with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always")
    crop, fell_back = zoom_crop(skel, camera_from_angles(np.pi, 0, 3, look_at=(0, 0, 6)), ZoomRegion(("head",)))
print("behind the camera ->", crop, fell_back, "|", caught[0].message)

# The margin loss alone carves a hand out of an empty field.
mesh = hand_mesh()
lo, hi = mesh.vertices.min(0) - 0.04, mesh.vertices.max(0) + 0.04
c, r = (lo + hi) / 2, (hi - lo).max() / 2
field = RadianceField(FieldConfig(levels=12, base_resolution=16, growth=1.35, log2_table_size=16,
                                  bbox_min=tuple(c - r), bbox_max=tuple(c + r)), seed=0, dtype=torch.float32)
gc = GeoLossConfig()
opt = make_optimizer(field, DistillConfig(lr_tables=1e-2))
rng = np.random.default_rng(0)
for step in range(200):
    on, off = sample_geo_points([mesh], gc, rng)
    loss = geo_loss(field, on, off, gc)
    opt.zero_grad()
    loss.backward()
    opt.step()
    if step % 50 == 0 or step == 199:
        print(f"step {step:3d}  geometry loss {loss.item():.4f}")
