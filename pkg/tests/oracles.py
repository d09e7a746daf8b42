"""Independent scalar reference implementations used as test oracles."""

import math

import numpy as np


def scalar_psnr(a, b, peak=1.0):
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    total = 0.0
    for x, y in zip(a.tolist(), b.tolist()):
        total += (x - y) * (x - y)
    mse = total / len(a)
    return math.inf if mse == 0 else 20 * math.log10(peak) - 10 * math.log10(mse)


def scalar_ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, peak=1.0):
    """Window-by-window SSIM with an explicit 2D Gaussian, averaged over channels and valid positions."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    r = window // 2
    w1 = [math.exp(-((i - r) ** 2) / (2 * sigma * sigma)) for i in range(window)]
    s = sum(w1)
    w2 = np.array([[wi * wj / (s * s) for wj in w1] for wi in w1])
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    h, w, ch = a.shape
    vals = []
    for c in range(ch):
        for i in range(r, h - r):
            for j in range(r, w - r):
                x = a[i - r:i + r + 1, j - r:j + r + 1, c]
                y = b[i - r:i + r + 1, j - r:j + r + 1, c]
                mx, my = (w2 * x).sum(), (w2 * y).sum()
                vx = (w2 * (x - mx) ** 2).sum()
                vy = (w2 * (y - my) ** 2).sum()
                cov = (w2 * (x - mx) * (y - my)).sum()
                vals.append((2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))
