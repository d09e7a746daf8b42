"""Coarse-to-fine render resolution and zoom-in crop schedule."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DomainError

ZOOM_MODES = ("full-body", "head", "hands", "random-part")

# joints whose projections a zoom crop must contain, per part
PART_JOINTS = {
    "head": ("head", "neck"),
    "hands": ("left_wrist", "right_wrist"),
    "left_hand": ("left_wrist", "left_elbow"),
    "right_hand": ("right_wrist", "right_elbow"),
}

PART_PHRASES = {"head": ("face", "of"), "hands": ("hand", "of"), "left_hand": ("hand", "of"),
                "right_hand": ("hand", "of")}


@dataclass(frozen=True)
class Stage:
    start_step: int
    resolution: int
    upsample: int
    zoom_mode: str = "full-body"
    zoom_prob: float = 0.0


class ResolutionSchedule:
    def __init__(self, stages):
        stages = [s if isinstance(s, Stage) else Stage(**s) for s in stages]
        if not stages:
            raise ConfigError("schedule needs at least one stage")
        if stages[0].start_step != 0:
            raise ConfigError("first stage must start at step 0")
        for a, b in zip(stages, stages[1:]):
            if b.start_step <= a.start_step:
                raise ConfigError("stage start steps must strictly increase")
            if b.resolution < a.resolution:
                raise ConfigError("render resolution must not decrease across stages")
        for s in stages:
            if s.upsample < s.resolution:
                raise ConfigError("upsample target must be at least the render resolution")
            if s.zoom_mode not in ZOOM_MODES:
                raise ConfigError(f"unknown zoom mode {s.zoom_mode!r}")
            if not 0 <= s.zoom_prob <= 1:
                raise ConfigError("zoom probability must lie in [0, 1]")
        self.stages = stages

    def stage_at(self, step):
        if step < 0:
            raise DomainError("step must be nonnegative")
        starts = [s.start_step for s in self.stages]
        return self.stages[int(np.searchsorted(starts, step, side="right")) - 1]

    def to_list(self):
        return [s.__dict__.copy() for s in self.stages]


def default_schedule(total_steps):
    """Three stages at 0 / 40 % / 75 % of the run: 64 -> 96 -> 128 px renders."""
    return ResolutionSchedule([
        Stage(0, 64, 64, "full-body", 0.0),
        Stage(int(0.4 * total_steps), 96, 128, "random-part", 0.3),
        Stage(int(0.75 * total_steps), 128, 256, "random-part", 0.5),
    ])


def stage_at(schedule: ResolutionSchedule, step):
    s = schedule.stage_at(step)
    return s.resolution, s.upsample, s.zoom_mode, s.zoom_prob


@dataclass(frozen=True)
class ZoomRegion:
    joints: tuple
    padding: float = 0.3
    min_side: float = 1.0 / 16


def zoom_crop(skeleton, camera, region: ZoomRegion, rng=None, height=64, width=64):
    """Square normalized crop around the projected target joints.

    Returns ``(crop, fell_back)``. The tight box is inflated by
    ``1 + padding``, widened to ``min_side``, shifted back into the unit
    square when possible and finally clipped to it.
    """
    names = list(region.joints)
    idx = [skeleton.names.index(n) for n in names]
    pix, depth = camera.project(skeleton.positions[idx], height, width)
    front = depth > camera.near
    if not np.any(front):
        warnings.warn("zoom target joints are behind the camera; using the full image", RuntimeWarning, stacklevel=2)
        return (0.0, 0.0, 1.0, 1.0), True
    uv = pix[front] / np.array([width, height])
    lo, hi = uv.min(0), uv.max(0)
    center = (lo + hi) / 2
    side = max((hi - lo).max() * (1 + region.padding), region.min_side)
    side = min(side, 1.0)
    lo = center - side / 2
    lo = np.clip(lo, 0.0, 1.0 - side)  # shift inside the image without shrinking
    hi = lo + side
    lo, hi = np.clip(lo, 0.0, 1.0), np.clip(hi, 0.0, 1.0)
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])), False


def choose_zoom(mode, prob, rng):
    """Pick the part to zoom on for one step, or ``None`` for a full-body view."""
    if mode == "full-body" or prob <= 0 or rng.random() >= prob:
        return None
    if mode == "random-part":
        return ("head", "left_hand", "right_hand")[int(rng.integers(3))]
    return mode


def upsample(image, height, width):
    """Bilinear upsampling of ``(..., C, H, W)`` tensors, corner-aligned.

    Corner alignment makes the map exact on affine signals. Equal sizes return
    the input unchanged.
    """
    h, w = image.shape[-2:]
    if height < h or width < w:
        raise DomainError(f"cannot upsample {h}x{w} to smaller {height}x{width}")
    if (height, width) == (h, w):
        return image
    shape = image.shape
    flat = image.reshape(-1, *shape[-3:]) if image.ndim >= 3 else image[None, None]
    out = F.interpolate(flat, size=(height, width), mode="bilinear", align_corners=True)
    return out.reshape(*shape[:-2], height, width)
