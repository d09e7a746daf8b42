"""PSNR and SSIM for rendered views, plus a small report container."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DomainError

PSNR_CAP = 99.0


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation, keeping only windows fully inside the image
    r = len(g) // 2
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[r: img.shape[0] - r, r: img.shape[1] - r]


def ssim(a, b, window=11, k1=0.01, k2=0.03, sigma=1.5, peak=1.0):
    """Mean structural similarity with a Gaussian window over valid positions.

    Multi-channel images ``(H, W, C)`` average the per-channel SSIM maps.
    The window shrinks to the largest odd size that fits small images.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    if window % 2 == 0:
        raise DomainError("window size must be odd")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    fit = min(a.shape[0], a.shape[1])
    window = min(window, fit if fit % 2 else fit - 1)
    g = gaussian_window(window, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(num / den)
    return float(np.mean(vals))


@dataclass
class MetricReport:
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    views: list = field(default_factory=list)

    def add(self, view, p, s):
        self.views.append(view)
        self.psnr.append(p)
        self.ssim.append(s)

    def summary(self):
        p = np.minimum(np.asarray(self.psnr, float), PSNR_CAP)
        s = np.asarray(self.ssim, float)
        return {"psnr_mean": float(p.mean()), "psnr_min": float(p.min()),
                "ssim_mean": float(s.mean()), "ssim_min": float(s.min())}

    def to_json(self):
        return json.dumps({
            "views": self.views,
            "psnr": [min(float(p), PSNR_CAP) for p in self.psnr],
            "ssim": [float(s) for s in self.ssim],
            **self.summary(),
        }, indent=1)

    def table(self):
        lines = [f"{'view':>8} {'PSNR dB':>10} {'SSIM':>8}"]
        for v, p, s in zip(self.views, self.psnr, self.ssim):
            lines.append(f"{str(v):>8} {min(p, PSNR_CAP):>10.3f} {s:>8.4f}")
        sm = self.summary()
        lines.append(f"{'mean':>8} {sm['psnr_mean']:>10.3f} {sm['ssim_mean']:>8.4f}")
        lines.append(f"{'min':>8} {sm['psnr_min']:>10.3f} {sm['ssim_min']:>8.4f}")
        return "\n".join(lines)
