"""Score-distillation loop for the radiance field.

Each step renders the field from a random camera, noises the render, asks
the (frozen) denoiser for its noise estimate under the text prompt and the
skeleton image seen from that camera, and pushes ``w(t) (eps_hat - eps)``
back through the renderer. The denoiser itself is never differentiated.
Pixel-space rendering means the encoder Jacobian of latent-space pipelines
is the identity here.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from .errors import DomainError, NumericAbort
from .geometry import GeoLossConfig, geo_loss, rasterize_skeleton, sample_geo_points
from .guidance import cfg_epsilon
from .render import CameraPose, render_image
from .schedule import PART_JOINTS, PART_PHRASES, ResolutionSchedule, Stage, ZoomRegion, choose_zoom, upsample, zoom_crop

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------- cameras


@dataclass
class CameraSampler:
    radius: tuple = (2.5, 3.5)
    elevation: tuple = (np.deg2rad(-10.0), np.deg2rad(30.0))
    azimuth: tuple = (0.0, 2 * np.pi)
    fov: tuple = (np.deg2rad(35.0), np.deg2rad(45.0))
    look_at_jitter: float = 0.05
    near: float = 0.1
    far: float = 20.0


def camera_from_angles(azimuth, elevation, radius, fov=np.deg2rad(40.0), look_at=(0.0, 0.0, 0.0), near=0.1,
                       far=20.0):
    """Orbit camera; azimuth 0 sits on +z looking back at the origin."""
    look_at = np.asarray(look_at, float)
    offset = radius * np.array([np.cos(elevation) * np.sin(azimuth), np.sin(elevation),
                                np.cos(elevation) * np.cos(azimuth)])
    return CameraPose(tuple(look_at + offset), tuple(look_at), (0.0, 1.0, 0.0), float(fov), near, far)


def bbox_in_frustum(camera: CameraPose, lo, hi):
    """True when all eight box corners project inside a square image."""
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    pix, depth = camera.project(corners, 1, 1)
    return bool(np.all(depth > camera.near) and np.all((pix >= 0) & (pix <= 1)))


def sample_camera(sampler: CameraSampler, rng, bbox=None):
    """Draw a camera; the radius grows until ``bbox`` (if given) fits in the frustum."""
    az = rng.uniform(*sampler.azimuth)
    el = rng.uniform(*sampler.elevation)
    r = rng.uniform(*sampler.radius)
    fov = rng.uniform(*sampler.fov)
    jitter = rng.uniform(-1.0, 1.0, 3) * sampler.look_at_jitter
    cam = camera_from_angles(az, el, r, fov, jitter, sampler.near, sampler.far)
    if bbox is not None:
        lo, hi = bbox
        while not bbox_in_frustum(cam, lo, hi):
            r *= 1.05
            cam = camera_from_angles(az, el, r, fov, jitter, sampler.near, sampler.far)
    return cam


def sds_timestep_sampler(step, total, t_range, rng, anneal_floor=None):
    """Uniform integer timestep in ``[t_lo, t_hi]``; ``t_hi`` optionally anneals linearly to ``anneal_floor``."""
    t_lo, t_hi = int(t_range[0]), int(t_range[1])
    if anneal_floor is not None:
        frac = step / max(total - 1, 1)
        t_hi = int(round(t_hi - (t_hi - anneal_floor) * min(frac, 1.0)))
        t_hi = max(t_hi, t_lo)
    return int(rng.integers(t_lo, t_hi + 1))


# ----------------------------------------------------------------------------- state


@dataclass
class DistillConfig:
    lambda_geo: float = 1.0
    t_range: tuple = (20, 980)
    anneal_floor: int | None = None
    guidance_weight: float = 1.0
    n_samples: int = 32
    lr_tables: float = 1e-2
    lr_heads: float = 1e-3
    background: object = "random"
    prompt: tuple = ("a", "photo", "of", "sks", "person")
    geo: GeoLossConfig = dc_field(default_factory=GeoLossConfig)
    max_skips: int = 3
    audit: bool = False

    def __post_init__(self):
        if self.lambda_geo < 0:
            raise DomainError("lambda_geo must be nonnegative")
        if not self.t_range[0] < self.t_range[1]:
            raise DomainError("need t_lo < t_hi")


def make_optimizer(field, config: DistillConfig):
    tables = list(field.encoding.parameters()) if hasattr(field, "encoding") else []
    ids = {id(p) for p in tables}
    heads = [p for p in field.parameters() if id(p) not in ids]
    groups = [g for g in ({"params": tables, "lr": config.lr_tables}, {"params": heads, "lr": config.lr_heads})
              if g["params"]]
    return torch.optim.Adam(groups, betas=(0.9, 0.99), eps=1e-15)


@dataclass
class DistillState:
    field: torch.nn.Module
    denoiser: object
    skeleton: object
    meshes: list
    schedule: ResolutionSchedule
    sampler: CameraSampler = dc_field(default_factory=CameraSampler)
    config: DistillConfig = dc_field(default_factory=DistillConfig)
    optimizer: object = None
    step: int = 0
    total_steps: int = 1
    skips: int = 0

    def __post_init__(self):
        if self.config.t_range[1] > self.denoiser.schedule.t_max:
            raise DomainError("t_hi exceeds the denoiser schedule")
        if self.optimizer is None:
            self.optimizer = make_optimizer(self.field, self.config)
        self._vocab = getattr(self.denoiser, "vocab", None)

    def tokens(self, words):
        return self._vocab.encode(list(words)) if self._vocab is not None else list(words)


def sds_weight(schedule, t):
    return float(schedule.sigma[t] ** 2)


def compute_step_gradients(state: DistillState, rng):
    """Gradients of one SDS + geometry step (not applied) and diagnostics."""
    cfg = state.config
    field = state.field
    params = list(field.parameters())
    stage: Stage = state.schedule.stage_at(state.step)
    res, up = stage.resolution, stage.upsample
    cam = sample_camera(state.sampler, rng, field.bbox)
    part = choose_zoom(stage.zoom_mode, stage.zoom_prob, rng)
    crop = None
    words = tuple(cfg.prompt)
    if part is not None:
        crop, fell_back = zoom_crop(state.skeleton, cam, ZoomRegion(PART_JOINTS[part]), rng, res, res)
        if fell_back:
            crop, part = None, None
        else:
            words = PART_PHRASES[part] + words
    pose_img, _ = rasterize_skeleton(state.skeleton, cam, up, up, crop)
    if isinstance(cfg.background, str) and cfg.background == "random":
        bg = np.full(3, rng.random())
    else:
        bg = np.asarray(cfg.background, float)

    out = render_image(field, cam, res, res, cfg.n_samples, rng, background=bg, crop=crop)
    x = out.color.permute(2, 0, 1)[None] * 2 - 1
    x = upsample(x, up, up)
    t = sds_timestep_sampler(state.step, state.total_steps, cfg.t_range, rng, cfg.anneal_floor)
    eps_np = rng.standard_normal(tuple(x.shape))
    den = state.denoiser
    ddtype = den.dtype if isinstance(getattr(den, "dtype", None), torch.dtype) else x.dtype
    with torch.no_grad():
        eps = torch.from_numpy(eps_np).to(ddtype)
        a, s = den.schedule.coefficients(t, ddtype)
        x_t = a * x.detach().to(ddtype) + s * eps
        pose_t = torch.from_numpy(np.ascontiguousarray(pose_img.transpose(2, 0, 1)))[None].to(ddtype)
        # the injected noise rides along so oracle denoisers can be built for tests
        cond = den.encode_conditions([state.tokens(words)], pose_t,
                                     meta={"camera": cam, "crop": crop, "background": bg, "part": part,
                                           "noise": eps})
        eps_hat = cfg_epsilon(den, x_t, t, cond, cfg.guidance_weight)
        grad_x = (sds_weight(den.schedule, t) * (eps_hat - eps)).to(x.dtype)
    grads = [torch.zeros_like(p) for p in params]
    surrogate = (grad_x * x).sum()
    if surrogate.requires_grad:
        for g, d in zip(grads, torch.autograd.grad(surrogate, params, allow_unused=True)):
            if d is not None:
                g += d
    sds_norm = float(torch.sqrt(sum((g * g).sum() for g in grads))) if grads else 0.0

    geo_val = 0.0
    if cfg.lambda_geo > 0 and state.meshes:
        geo_rng = rng.spawn(1)[0]
        on, off = sample_geo_points(state.meshes, cfg.geo, geo_rng)
        geo = geo_loss(field, on, off, cfg.geo)
        geo_val = float(geo.detach())
        if geo.requires_grad:
            for g, d in zip(grads, torch.autograd.grad(cfg.lambda_geo * geo, params, allow_unused=True)):
                if d is not None:
                    g += d
    diag = {"step": state.step, "resolution": res, "upsample": up, "t": t, "part": part,
            "sds_grad_norm": sds_norm, "geo_loss": geo_val}
    if cfg.audit:
        diag.update(camera=cam, crop=crop, pose_image=pose_img, eps_hat=eps_hat.detach().clone())
    return grads, diag


def sds_step(state: DistillState, rng):
    """One optimization step; returns the diagnostics dict.

    Steps with non-finite gradients are skipped; ``max_skips`` consecutive
    skips raise :class:`NumericAbort`.
    """
    t0 = time.perf_counter()
    grads, diag = compute_step_gradients(state, rng)
    finite = all(bool(torch.isfinite(g).all()) for g in grads) and np.isfinite(diag["geo_loss"])
    if not finite:
        state.skips += 1
        diag["skipped"] = True
        log.warning("non-finite gradient at step %d (consecutive skips: %d)", state.step, state.skips)
        if state.skips >= state.config.max_skips:
            raise NumericAbort(f"{state.skips} consecutive non-finite steps, last at step {state.step}")
    else:
        state.skips = 0
        for p, g in zip(state.field.parameters(), grads):
            p.grad = g
        state.optimizer.step()
        state.optimizer.zero_grad(set_to_none=True)
        diag["skipped"] = False
    state.step += 1
    diag["wall_ms"] = (time.perf_counter() - t0) * 1000.0
    return diag


LOG_KEYS = ("step", "resolution", "sds_grad_norm", "geo_loss", "wall_ms")


def distill(state: DistillState, total_steps, rng, log_path=None, checkpoint_dir=None, checkpoint_every=None,
            callback=None):
    """Run ``total_steps`` SDS steps; returns the list of per-step log records.

    With ``log_path`` each record is appended as one JSON line; with
    ``checkpoint_dir`` the field is saved as ``field_step{N}.ckpt`` every
    ``checkpoint_every`` steps and after the final step.
    """
    state.total_steps = max(state.total_steps, state.step + total_steps)
    records = []
    fh = open(log_path, "w") if log_path else None
    try:
        for _ in range(total_steps):
            diag = sds_step(state, rng)
            rec = {k: diag[k] for k in LOG_KEYS}
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if checkpoint_dir and checkpoint_every and state.step % checkpoint_every == 0:
                state.field.save(Path(checkpoint_dir) / f"field_step{state.step}.ckpt")
            if callback is not None:
                callback(state, diag)
    finally:
        if fh:
            fh.close()
    if checkpoint_dir and total_steps and not (checkpoint_every and state.step % checkpoint_every == 0):
        state.field.save(Path(checkpoint_dir) / f"field_step{state.step}.ckpt")
    return records


# ----------------------------------------------------------------------------- analytic priors


class RenderedScenePrior:
    """Mean-image callable for :class:`~avatarlab.guidance.AnalyticGaussianDenoiser`.

    Renders a closed-form scene from the camera/crop/background recorded in
    the conditioning bundle, giving a view-consistent Gaussian image prior.
    """

    def __init__(self, scene, n_samples=64):
        self.scene = scene
        self.n_samples = n_samples
        self.size = None

    def __call__(self, cond):
        meta = cond.meta
        h, w = self.size if self.size else cond.pose_image.shape[-2:]
        with torch.no_grad():
            out = render_image(self.scene, meta["camera"], h, w, self.n_samples, None, background=meta["background"],
                               crop=meta.get("crop"), record=False)
        return (out.color.permute(2, 0, 1)[None] * 2 - 1)


def voxel_iou(field, scene, resolution=64, threshold=10.0, chunk=65536):
    """IoU between ``field`` density > threshold and the scene's occupancy on a voxel-center grid over the field box."""
    lo, hi = field.bbox
    axes = [lo[k] + (np.arange(resolution) + 0.5) / resolution * (hi[k] - lo[k]) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    pred = np.empty(len(grid), bool)
    with torch.no_grad():
        for s in range(0, len(grid), chunk):
            pts = torch.from_numpy(grid[s:s + chunk]).to(field.dtype)
            pred[s:s + chunk] = (field.density(pts) > threshold).numpy()
        truth = scene.occupancy(torch.from_numpy(grid)).numpy()
    inter = np.logical_and(pred, truth).sum()
    union = np.logical_or(pred, truth).sum()
    return float(inter / union) if union else 1.0
