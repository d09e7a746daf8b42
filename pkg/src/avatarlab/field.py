"""Multi-resolution hash-grid radiance field.

The field maps a world-space point to a nonnegative density and a
view-dependent RGB color. Positions are normalized into the unit cube of the
field's bounding box, encoded by ``L`` hashed feature grids, and decoded by
two small MLP heads.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .checkpoint import load_container, load_state_arrays, save_container, state_dict_arrays
from .errors import ContractError, DomainError

# First prime is 1 so the x coordinate is used unscrambled, as in Instant-NGP.
HASH_PRIMES = (1, 2654435761, 805459861)

# Corner offsets ordered so that bit k of the corner index selects the
# upper vertex along axis k.
CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)


@dataclass(frozen=True)
class FieldConfig:
    levels: int = 8
    base_resolution: int = 16
    growth: float = 1.5
    log2_table_size: int = 14
    feature_dim: int = 2
    hidden: int = 64
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    density_bias: float = -1.0
    table_init_scale: float = 1e-4

    @property
    def table_size(self):
        return 1 << self.log2_table_size

    def resolutions(self):
        return [int(math.floor(self.base_resolution * self.growth**l)) for l in range(self.levels)]

    def validate(self):
        res = self.resolutions()
        if self.levels < 1 or self.feature_dim < 1:
            raise DomainError("levels and feature_dim must be positive")
        if any(b <= a for a, b in zip(res, res[1:])):
            raise DomainError(f"level resolutions must strictly increase, got {res}")
        if any(hi <= lo for lo, hi in zip(self.bbox_min, self.bbox_max)):
            raise DomainError("empty bounding box")
        return self

    def to_dict(self):
        d = asdict(self)
        d["bbox_min"] = list(self.bbox_min)
        d["bbox_max"] = list(self.bbox_max)
        return d


def spatial_hash(coords, table_size):
    """Hash integer grid coordinates ``(..., 3)`` into ``[0, table_size)``.

    ``table_size`` must be a power of two; the XOR-of-products hash is masked
    rather than reduced modulo.
    """
    if table_size & (table_size - 1):
        raise DomainError(f"table size {table_size} is not a power of two")
    h = coords[..., 0] * HASH_PRIMES[0]
    h = h ^ (coords[..., 1] * HASH_PRIMES[1])
    h = h ^ (coords[..., 2] * HASH_PRIMES[2])
    return h & (table_size - 1)


class HashGridEncoding(nn.Module):
    """``L`` levels of hashed trilinear feature grids over ``[0, 1]^3``."""

    def __init__(self, config: FieldConfig, generator=None, dtype=torch.float64):
        super().__init__()
        config.validate()
        self.config = config
        self.levels = config.levels
        self.table_size = config.table_size
        self.feature_dim = config.feature_dim
        res = config.resolutions()
        self.register_buffer("resolutions", torch.tensor(res, dtype=torch.int64), persistent=False)
        init = torch.rand(config.levels, self.table_size, config.feature_dim, generator=generator, dtype=dtype)
        self.tables = nn.Parameter((2 * init - 1) * config.table_init_scale)

    @property
    def out_dim(self):
        return self.levels * self.feature_dim

    def forward(self, points):
        if not torch.all(torch.isfinite(points)):
            raise DomainError("non-finite point passed to the hash encoding")
        if points.numel() and (points.min() < 0 or points.max() > 1):
            raise DomainError("hash encoding expects points inside the unit cube; normalize first")
        n = points.shape[0]
        mask = self.table_size - 1
        res = self.resolutions.to(points.dtype)
        scaled = points[:, None, :] * res[None, :, None]  # (N, L, 3)
        base = torch.floor(scaled)
        frac = scaled - base
        base = base.to(torch.int64)
        # The hash is separable: h(x, y, z) = hx ^ hy ^ hz, and masking
        # commutes with XOR, so hash each axis for both corner offsets first.
        per_axis = []
        for k in range(3):
            lo = (base[..., k] * HASH_PRIMES[k]) & mask
            hi = ((base[..., k] + 1) * HASH_PRIMES[k]) & mask
            per_axis.append(torch.stack([lo, hi], -1))  # (N, L, 2)
        # level offsets have no bits below log2(T), so OR-ing them into one
        # axis equals adding them to the final slot
        level_offset = torch.arange(self.levels, device=points.device)[None, :, None] * self.table_size
        hz = per_axis[2] | level_offset
        slots = per_axis[0][:, :, None, None, :] ^ per_axis[1][:, :, None, :, None] ^ hz[:, :, :, None, None]
        wts = [torch.stack([1 - frac[..., k], frac[..., k]], -1) for k in range(3)]
        w = (wts[2][:, :, :, None] * wts[1][:, :, None, :]).reshape(n, self.levels, 4, 1) * wts[0][:, :, None, :]
        # slot/weight layout is (z, y, x) so corner index c has bit k <-> axis k
        flat = self.tables.reshape(-1, self.feature_dim)
        feats = torch.index_select(flat, 0, slots.reshape(-1)).reshape(n, self.levels, 8, self.feature_dim)
        out = (feats * w.reshape(n, self.levels, 8, 1)).sum(2)
        return out.reshape(n, self.out_dim)


def sh_basis_deg2(dirs):
    """Real spherical harmonics up to degree 2 (9 terms) of unit directions."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    return torch.stack(
        [
            torch.full_like(x, 0.28209479177387814),
            -0.4886025119029199 * y,
            0.4886025119029199 * z,
            -0.4886025119029199 * x,
            1.0925484305920792 * x * y,
            -1.0925484305920792 * y * z,
            0.31539156525252005 * (3 * z * z - 1),
            -1.0925484305920792 * x * z,
            0.5462742152960396 * (x * x - y * y),
        ],
        dim=-1,
    )


def _mlp(sizes, generator, dtype):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lin = nn.Linear(a, b, dtype=dtype)
        bound = 1.0 / math.sqrt(a)
        with torch.no_grad():
            lin.weight.copy_((2 * torch.rand(b, a, generator=generator, dtype=dtype) - 1) * math.sqrt(6.0 / a))
            lin.bias.copy_((2 * torch.rand(b, generator=generator, dtype=dtype) - 1) * bound)
        layers.append(lin)
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class RadianceField(nn.Module):
    """Hash-grid encoding plus density and color heads inside a bounding box."""

    def __init__(self, config: FieldConfig | None = None, seed=0, dtype=torch.float64):
        super().__init__()
        config = (config or FieldConfig()).validate()
        self.config = config
        gen = torch.Generator().manual_seed(int(seed))
        self.encoding = HashGridEncoding(config, generator=gen, dtype=dtype)
        h = config.hidden
        self.density_head = _mlp([self.encoding.out_dim, h, h, 1], gen, dtype)
        self.color_head = _mlp([self.encoding.out_dim + 9, h, h, 3], gen, dtype)
        with torch.no_grad():
            self.density_head[-1].bias.fill_(config.density_bias)
        self.register_buffer("bbox_min", torch.tensor(config.bbox_min, dtype=dtype), persistent=False)
        self.register_buffer("bbox_max", torch.tensor(config.bbox_max, dtype=dtype), persistent=False)

    @property
    def dtype(self):
        return self.encoding.tables.dtype

    @property
    def bbox(self):
        return np.asarray(self.config.bbox_min, float), np.asarray(self.config.bbox_max, float)

    def _normalize(self, points):
        if not torch.all(torch.isfinite(points)):
            raise DomainError("non-finite query point")
        unit = (points - self.bbox_min) / (self.bbox_max - self.bbox_min)
        inside = ((unit >= 0) & (unit <= 1)).all(-1)
        return unit.clamp(0.0, 1.0), inside

    def query(self, points, dirs=None):
        """Density ``(N,)`` and, when ``dirs`` is given, RGB ``(N, 3)``."""
        unit, inside = self._normalize(points)
        enc = self.encoding(unit)
        logit = self.density_head(enc)[:, 0]
        sigma = F.softplus(logit) * inside.to(enc.dtype)
        if dirs is None:
            return sigma, None
        rgb = torch.sigmoid(self.color_head(torch.cat([enc, sh_basis_deg2(dirs)], -1)))
        return sigma, rgb

    def density(self, points):
        return self.query(points)[0]

    def color(self, points, dirs):
        norms = torch.linalg.norm(dirs, dim=-1)
        if torch.any(torch.abs(norms - 1) > 1e-6):
            raise DomainError("view directions must be unit length")
        return self.query(points, dirs)[1]

    def save(self, path):
        meta = {
            "config": self.config.to_dict(),
            "head_shapes": {k: list(v.shape) for k, v in self.state_dict().items()},
        }
        return save_container(path, "field", meta, state_dict_arrays(self))

    @classmethod
    def load(cls, path, config: FieldConfig | None = None, dtype=torch.float64):
        meta, arrays = load_container(path, kind="field")
        stored = FieldConfig(**{**meta["config"], "bbox_min": tuple(meta["config"]["bbox_min"]),
                                "bbox_max": tuple(meta["config"]["bbox_max"])})
        if config is not None and stored != config:
            raise ContractError(f"checkpoint config {stored} does not match expected {config}")
        out = cls(stored, dtype=dtype)
        return load_state_arrays(out, arrays)


def to_tensor(x, dtype=torch.float64):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def query_density(field, points):
    """Densities for world points (array-like ``(N, 3)``), no gradient tracking."""
    with torch.no_grad():
        return field.density(to_tensor(points, field.dtype))


def query_color(field, points, dirs):
    with torch.no_grad():
        return field.color(to_tensor(points, field.dtype), to_tensor(dirs, field.dtype))


def accumulate_param_gradients(field, points, dirs=None, density_adjoint=None, color_adjoint=None, chunk=None):
    """Vector-Jacobian product of per-query outputs against field parameters.

    ``density_adjoint`` has one entry per query, ``color_adjoint`` one RGB row
    per query. Queries are processed in fixed-size chunks whose gradients are
    summed in chunk order, so results do not depend on scheduling.
    """
    params = list(field.parameters())
    points = to_tensor(points, field.dtype)
    n = points.shape[0]
    if density_adjoint is not None:
        density_adjoint = to_tensor(density_adjoint, field.dtype)
        if density_adjoint.shape != (n,):
            raise ContractError(f"density adjoint shape {tuple(density_adjoint.shape)} does not match {n} queries")
    if color_adjoint is not None:
        if dirs is None:
            raise ContractError("color adjoints need view directions")
        color_adjoint = to_tensor(color_adjoint, field.dtype)
        if color_adjoint.shape != (n, 3):
            raise ContractError(f"color adjoint shape {tuple(color_adjoint.shape)} does not match {n} queries")
    if dirs is not None:
        dirs = to_tensor(dirs, field.dtype)
    grads = [torch.zeros_like(p) for p in params]
    chunk = chunk or max(n, 1)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        sigma, rgb = field.query(points[sl], None if dirs is None else dirs[sl])
        total = sigma.new_zeros(())
        if density_adjoint is not None:
            total = total + (sigma * density_adjoint[sl]).sum()
        if color_adjoint is not None:
            total = total + (rgb * color_adjoint[sl]).sum()
        if not total.requires_grad:
            continue
        part = torch.autograd.grad(total, params, allow_unused=True)
        for g, p in zip(grads, part):
            if p is not None:
                g += p
    return grads


def flatten_grads(grads):
    return torch.cat([g.reshape(-1) for g in grads])

