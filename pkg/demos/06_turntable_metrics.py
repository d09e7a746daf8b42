"""Turntable rendering and image metrics.

Compares each view with an exact copy to show the sentinel values for
identical images, then adds growing noise per view to show PSNR and SSIM moving.
"""
import numpy as np
import torch

from avatarlab.distill import camera_from_angles
from avatarlab.metrics import MetricReport, psnr, ssim
from avatarlab.scenes import SphereField
from avatarlab.render import render_image

scene = SphereField(radius=0.6, color=(0.8, 0.7, 0.3), back_color=(0.3, 0.5, 0.8))
views = []
for k in range(8):
    cam = camera_from_angles(2 * np.pi * k / 8, 0.15, 2.5)
    with torch.no_grad():
        views.append(render_image(scene, cam, 48, 48, 64, None, background=(1, 1, 1), record=False).color.numpy())

same = MetricReport()
for k, v in enumerate(views):
    same.add(k, psnr(v, v.copy()), ssim(v, v.copy()))
print(same.table())

rng = np.random.default_rng(0)
noisy = MetricReport()
for k, v in enumerate(views):
    sigma = 0.01 * (k + 1)
    w = np.clip(v + rng.normal(0, sigma, v.shape), 0, 1)
    noisy.add(f"s={sigma:.2f}", psnr(v, w), ssim(v, w))
print(noisy.table())
