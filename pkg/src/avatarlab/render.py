"""Differentiable volume rendering of density/color fields.

Rays are marched with stratified, seeded jitter and composited with the
standard emission-absorption quadrature. Gradients reach the field through
torch autograd; :func:`backward` replays a recorded render against arbitrary
pixel adjoints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .errors import ContractError, DomainError, NumericError


@dataclass(frozen=True)
class CameraPose:
    position: tuple
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    fov_y: float = np.deg2rad(40.0)
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self):
        if not self.near > 0 or not self.far > self.near:
            raise DomainError(f"need 0 < near < far, got near={self.near} far={self.far}")
        if not 0 < self.fov_y < np.pi:
            raise DomainError("vertical field of view must lie in (0, pi)")
        fwd = np.asarray(self.look_at, float) - np.asarray(self.position, float)
        if np.linalg.norm(fwd) == 0:
            raise DomainError("camera position coincides with look_at")
        up = np.asarray(self.up, float)
        if np.linalg.norm(np.cross(fwd / np.linalg.norm(fwd), up / np.linalg.norm(up))) < 1e-9:
            raise DomainError("up vector is parallel to the view direction")

    def basis(self):
        """Orthonormal ``(right, true_up, forward)`` in world coordinates."""
        fwd = np.asarray(self.look_at, float) - np.asarray(self.position, float)
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, float))
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return right, up, fwd

    def project(self, points, height, width, crop=None):
        """Continuous pixel coordinates ``(col, row)`` and camera depth of world points.

        Pixel ``(i, j)`` has its center at ``(j + 0.5, i + 0.5)``. Points with
        depth <= 0 get NaN coordinates.
        """
        right, up, fwd = self.basis()
        rel = np.atleast_2d(np.asarray(points, float)) - np.asarray(self.position, float)
        depth = rel @ fwd
        tan_y = np.tan(self.fov_y / 2)
        tan_x = tan_y * width / height
        with np.errstate(divide="ignore", invalid="ignore"):
            x = (rel @ right) / depth / tan_x
            y = (rel @ up) / depth / tan_y
        u = (x + 1) / 2
        v = (1 - y) / 2
        u0, v0, u1, v1 = _check_crop(crop)
        u = (u - u0) / (u1 - u0)
        v = (v - v0) / (v1 - v0)
        behind = depth <= 0
        col = np.where(behind, np.nan, u * width)
        row = np.where(behind, np.nan, v * height)
        return np.stack([col, row], -1), depth


def _check_crop(crop):
    if crop is None:
        return 0.0, 0.0, 1.0, 1.0
    u0, v0, u1, v1 = (float(c) for c in crop)
    if min(u0, v0) < 0 or max(u1, v1) > 1:
        raise DomainError(f"crop {crop} leaves the unit square")
    if u1 <= u0 or v1 <= v0:
        raise DomainError(f"degenerate crop {crop}")
    return u0, v0, u1, v1


def generate_rays(camera: CameraPose, height, width, crop=None):
    """Pinhole rays through pixel centers: ``(origins, directions)`` each ``(H, W, 3)``.

    ``crop = (u0, v0, u1, v1)`` in normalized image coordinates (``u`` to the
    right, ``v`` down) maps the full ``H x W`` pixel grid onto that
    sub-rectangle of the image plane, i.e. a zoomed-in view.
    """
    if height < 1 or width < 1:
        raise DomainError("resolution must be at least 1x1")
    u0, v0, u1, v1 = _check_crop(crop)
    right, up, fwd = camera.basis()
    tan_y = np.tan(camera.fov_y / 2)
    tan_x = tan_y * width / height
    u = u0 + (np.arange(width) + 0.5) / width * (u1 - u0)
    v = v0 + (np.arange(height) + 0.5) / height * (v1 - v0)
    x = (2 * u - 1) * tan_x
    y = (1 - 2 * v) * tan_y
    d = fwd + x[None, :, None] * right + y[:, None, None] * up
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(np.asarray(camera.position, float), d.shape).copy()
    return o, d


def ray_box_bounds(origins, dirs, lo, hi, near, far):
    """Clamp ``[near, far]`` to the ray's overlap with the box; misses get an empty interval."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    # zero direction components: inside the slab -> unbounded, outside -> miss
    inside = (origins >= lo) & (origins <= hi)
    zero = dirs == 0
    tmin_ax = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
    tmax_ax = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
    t_near = np.maximum(tmin_ax.max(-1), near)
    t_far = np.minimum(tmax_ax.min(-1), far)
    t_far = np.maximum(t_far, t_near)
    return t_near, t_far


@dataclass
class Composite:
    color: torch.Tensor
    alpha: torch.Tensor
    depth: torch.Tensor
    weights: torch.Tensor
    transmittance: torch.Tensor  # before each sample, (R, S)
    final_transmittance: torch.Tensor
    t: torch.Tensor


def march_and_composite(field, origins, dirs, n_samples, rng=None, background=(0.0, 0.0, 0.0),
                        near=0.0, far=np.inf):
    """Stratified march and alpha compositing for a batch of rays.

    ``origins``/``dirs`` are ``(R, 3)`` arrays. With ``rng=None`` samples sit
    at bin midpoints; otherwise each sample is jittered uniformly in its bin.
    """
    if n_samples < 2:
        raise DomainError("need at least two samples per ray")
    origins = np.asarray(origins, float).reshape(-1, 3)
    dirs = np.asarray(dirs, float).reshape(-1, 3)
    if np.any(np.abs(np.linalg.norm(dirs, axis=-1) - 1) > 1e-6):
        raise DomainError("ray directions must be unit length")
    lo, hi = field.bbox
    t_near, t_far = ray_box_bounds(origins, dirs, lo, hi, near, far)
    r = origins.shape[0]
    jitter = np.full((r, n_samples), 0.5) if rng is None else rng.random((r, n_samples))
    frac = (np.arange(n_samples)[None, :] + jitter) / n_samples
    t = t_near[:, None] + frac * (t_far - t_near)[:, None]
    delta = np.concatenate([np.diff(t, axis=1), (t_far[:, None] - t[:, -1:])], axis=1)

    dtype = field.dtype
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    dir_rep = np.broadcast_to(dirs[:, None, :], pts.shape)
    sigma, rgb = field.query(torch.from_numpy(pts.reshape(-1, 3)).to(dtype),
                             torch.from_numpy(np.ascontiguousarray(dir_rep).reshape(-1, 3)).to(dtype))
    sigma = sigma.reshape(r, n_samples)
    rgb = rgb.reshape(r, n_samples, 3)
    bad = ~(torch.isfinite(sigma) & torch.isfinite(rgb).all(-1))
    if bool(bad.any()):
        ray = int(torch.nonzero(bad.any(-1))[0, 0])
        raise NumericError("field returned a non-finite density or color", where=f"ray {ray}")

    t_t = torch.from_numpy(t).to(dtype)
    tau = sigma * torch.from_numpy(delta).to(dtype)
    cum = torch.cumsum(tau, dim=1)
    trans = torch.exp(-torch.cat([torch.zeros_like(cum[:, :1]), cum[:, :-1]], dim=1))
    weights = trans * (1 - torch.exp(-tau))
    final = torch.exp(-cum[:, -1])
    alpha = weights.sum(1)
    bg = torch.as_tensor(np.asarray(background, float), dtype=dtype)
    bg = bg.expand(r, 3) if bg.ndim == 1 else bg.reshape(r, 3)
    color = (weights[..., None] * rgb).sum(1) + final[:, None] * bg
    depth_num = (weights * t_t).sum(1)
    depth = torch.where(alpha > 1e-12, depth_num / alpha.clamp_min(1e-12), torch.zeros_like(alpha))
    return Composite(color, alpha, depth, weights, trans, final, t_t)


@dataclass
class RenderTape:
    outputs: tuple
    params: list
    versions: tuple
    shape: tuple
    used: bool = dc_field(default=False)


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W)
    tape: RenderTape | None

    def numpy(self):
        return self.color.detach().cpu().numpy(), self.alpha.detach().cpu().numpy()


def render_image(field, camera: CameraPose, height, width, n_samples=64, rng=None, background=(0.0, 0.0, 0.0),
                 crop=None, record=True):
    """Render ``field`` from ``camera``; keep a tape for :func:`backward` when ``record``."""
    origins, dirs = generate_rays(camera, height, width, crop)
    bg = np.asarray(background, float)
    if bg.ndim == 3:
        bg = bg.reshape(-1, 3)
    params = [p for p in field.parameters()]
    grad_ctx = torch.enable_grad() if record else torch.no_grad()
    with grad_ctx:
        comp = march_and_composite(field, origins.reshape(-1, 3), dirs.reshape(-1, 3), n_samples, rng, bg,
                                   near=camera.near, far=camera.far)
    color = comp.color.reshape(height, width, 3)
    alpha = comp.alpha.reshape(height, width)
    depth = comp.depth.reshape(height, width)
    tape = None
    if record:
        tape = RenderTape((color, alpha), params, tuple(p._version for p in params), (height, width))
    return RenderOutput(color, alpha, depth, tape)


def backward(tape: RenderTape, color_adjoint, alpha_adjoint=None):
    """Field parameter gradients of ``<color_adjoint, color> + <alpha_adjoint, alpha>``.

    The tape may be replayed any number of times, but only while the field
    parameters are unchanged since the forward render.
    """
    if tape is None:
        raise ContractError("render was not recorded")
    if tuple(p._version for p in tape.params) != tape.versions:
        raise ContractError("field parameters changed since this tape was recorded")
    color, alpha = tape.outputs
    ca = torch.as_tensor(np.asarray(color_adjoint) if not isinstance(color_adjoint, torch.Tensor) else color_adjoint,
                         dtype=color.dtype)
    if tuple(ca.shape) != tuple(color.shape):
        raise ContractError(f"adjoint shape {tuple(ca.shape)} does not match image {tuple(color.shape)}")
    total = (color * ca).sum()
    if alpha_adjoint is not None:
        aa = torch.as_tensor(alpha_adjoint, dtype=alpha.dtype)
        if tuple(aa.shape) != tuple(alpha.shape):
            raise ContractError("alpha adjoint shape mismatch")
        total = total + (alpha * aa).sum()
    if not tape.params or not total.requires_grad:
        return [torch.zeros_like(p) for p in tape.params]
    grads = torch.autograd.grad(total, tape.params, retain_graph=True, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(tape.params, grads)]


def to_uint8(image):
    """Scale ``[0, 1]`` values by 255 and round half up."""
    img = np.clip(np.asarray(image, float), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def save_png(path, image):
    from PIL import Image

    arr = to_uint8(image)
    Image.fromarray(arr if arr.ndim == 2 or arr.shape[-1] != 1 else arr[..., 0]).save(path)


def load_png(path):
    from PIL import Image

    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


RAW_MAGIC = b"AVRW"


def save_raw(path, image):
    """Planar float32 dump with a 16-byte header: magic, H, W, C (uint32 LE)."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(img.transpose(2, 0, 1)).tobytes())


def load_raw(path):
    raw = open(path, "rb").read()
    if raw[:4] != RAW_MAGIC:
        raise ContractError(f"{path}: bad raw image magic")
    h, w, c = struct.unpack("<III", raw[4:16])
    planes = np.frombuffer(raw[16:], dtype="<f4")
    if planes.size != h * w * c:
        raise ContractError(f"{path}: payload size does not match header")
    return planes.reshape(c, h, w).transpose(1, 2, 0).copy()
