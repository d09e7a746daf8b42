"""Closed-form density fields used as ground truth and test fixtures.

They expose the same ``query(points, dirs)`` / ``bbox`` surface as
:class:`~avatarlab.field.RadianceField`, so the renderer treats them alike.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn


class AnalyticField(nn.Module):
    def __init__(self, bbox_min=(-1.0, -1.0, -1.0), bbox_max=(1.0, 1.0, 1.0), dtype=torch.float64):
        super().__init__()
        self._bbox = (np.asarray(bbox_min, float), np.asarray(bbox_max, float))
        self._dtype = dtype

    @property
    def bbox(self):
        return self._bbox

    @property
    def dtype(self):
        return self._dtype

    def density(self, points):
        return self.query(points)[0]


class SphereField(AnalyticField):
    """Constant-density ball. ``front_color``/``back_color`` split it at ``z = center_z``."""

    def __init__(self, center=(0.0, 0.0, 0.0), radius=0.5, density=50.0, color=(0.8, 0.8, 0.8),
                 back_color=None, **kw):
        super().__init__(**kw)
        self.center = torch.tensor(center, dtype=self._dtype)
        self.radius = float(radius)
        self.sigma = float(density)
        self.front = torch.tensor(color, dtype=self._dtype)
        self.back = self.front if back_color is None else torch.tensor(back_color, dtype=self._dtype)

    def occupancy(self, points):
        return torch.linalg.norm(points - self.center, dim=-1) <= self.radius

    def query(self, points, dirs=None):
        inside = self.occupancy(points).to(points.dtype)
        sigma = self.sigma * inside
        if dirs is None:
            return sigma, None
        front = (points[:, 2] >= self.center[2])[:, None]
        rgb = torch.where(front, self.front, self.back).expand(points.shape[0], 3)
        return sigma, rgb


class SlabField(AnalyticField):
    """Axis-aligned slabs ``lo <= x_axis <= hi`` with constant density and color."""

    def __init__(self, slabs, axis=2, **kw):
        super().__init__(**kw)
        self.slabs = [(float(lo), float(hi), float(s), tuple(c)) for lo, hi, s, c in slabs]
        self.axis = axis

    def query(self, points, dirs=None):
        coord = points[:, self.axis]
        sigma = torch.zeros_like(coord)
        rgb = torch.zeros(points.shape[0], 3, dtype=points.dtype)
        for lo, hi, s, c in self.slabs:
            m = (coord >= lo) & (coord <= hi)
            sigma = torch.where(m, torch.full_like(sigma, s), sigma)
            rgb = torch.where(m[:, None], torch.tensor(c, dtype=points.dtype), rgb)
        return sigma, (rgb if dirs is not None else None)


class EmptyField(AnalyticField):
    def query(self, points, dirs=None):
        sigma = torch.zeros(points.shape[0], dtype=points.dtype)
        return sigma, (torch.zeros(points.shape[0], 3, dtype=points.dtype) if dirs is not None else None)
