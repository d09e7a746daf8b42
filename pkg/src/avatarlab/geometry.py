"""Canonical skeleton, part meshes, and the local density margin loss.

World units are meters; the canonical A-pose figure is about 1.7 m tall,
centered at the origin, facing +z with +y up (its left side is at +x).
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import BONE_COLORS, BONES_2D, draw_skeleton_2d
from .errors import DomainError, NumericError, SamplingError

log = logging.getLogger(__name__)


@dataclass
class ArticulatedSkeleton:
    names: list
    positions: np.ndarray  # (J, 3)
    bones: list  # (parent_index, child_index)
    colors: list  # per bone RGB

    def __post_init__(self):
        self.positions = np.asarray(self.positions, float)
        j = len(self.names)
        if self.positions.shape != (j, 3):
            raise DomainError("positions must be (J, 3)")
        if len(self.bones) != j - 1:
            raise DomainError("a tree over J joints has J - 1 bones")
        parent = {}
        for a, b in self.bones:
            if not (0 <= a < j and 0 <= b < j) or b in parent:
                raise DomainError(f"invalid bone ({a}, {b})")
            parent[b] = a
        roots = [i for i in range(j) if i not in parent]
        if len(roots) != 1:
            raise DomainError("bone graph is not a tree")
        for i in range(j):  # every joint must reach the root without cycles
            seen, k = set(), i
            while k in parent:
                if k in seen:
                    raise DomainError("bone graph has a cycle")
                seen.add(k)
                k = parent[k]

    def joint(self, name):
        return self.positions[self.names.index(name)]

    def named(self):
        return {n: self.positions[i] for i, n in enumerate(self.names)}

    def to_json(self):
        return {"joints": {n: [float(c) for c in p] for n, p in zip(self.names, self.positions)},
                "bones": [[self.names[a], self.names[b]] for a, b in self.bones],
                "colors": [list(map(float, c)) for c in self.colors]}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def from_json(cls, doc):
        names = list(doc["joints"])
        pos = np.array([doc["joints"][n] for n in names], float)
        bones = [(names.index(a), names.index(b)) for a, b in doc["bones"]]
        return cls(names, pos, bones, [tuple(c) for c in doc["colors"]])

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def canonical_skeleton():
    """Symmetric A-pose skeleton (all joints in the z = 0 plane)."""
    s45 = np.sin(np.deg2rad(45.0))
    j = {"head": (0.0, 0.72, 0.0), "neck": (0.0, 0.5, 0.0), "pelvis": (0.0, 0.0, 0.0)}
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        sh = np.array([sgn * 0.18, 0.45, 0.0])
        el = sh + 0.28 * np.array([sgn * s45, -s45, 0.0])
        wr = el + 0.25 * np.array([sgn * s45, -s45, 0.0])
        j[f"{side}_shoulder"], j[f"{side}_elbow"], j[f"{side}_wrist"] = tuple(sh), tuple(el), tuple(wr)
        j[f"{side}_hip"] = (sgn * 0.1, -0.05, 0.0)
        j[f"{side}_knee"] = (sgn * 0.11, -0.45, 0.0)
        j[f"{side}_ankle"] = (sgn * 0.12, -0.85, 0.0)
    names = list(j)
    bones = [(names.index(a), names.index(b)) for a, b in BONES_2D]
    return ArticulatedSkeleton(names, np.array([j[n] for n in names]), bones, [BONE_COLORS[b] for b in BONES_2D])


def rasterize_skeleton(skeleton: ArticulatedSkeleton, camera, height, width, crop=None):
    """Project the skeleton through ``camera`` and draw it as a pose image.

    Returns ``(image (H, W, 3) in [0, 1], all_behind)``; when every joint is
    behind the camera the image is black and ``all_behind`` is True.
    """
    pix, depth = camera.project(skeleton.positions, height, width, crop)
    behind = depth <= camera.near
    if np.all(behind):
        warnings.warn("all skeleton joints are behind the camera", RuntimeWarning, stacklevel=2)
        return np.zeros((height, width, 3)), True
    points = {n: (None if behind[i] else pix[i]) for i, n in enumerate(skeleton.names)}
    named_bones = [(skeleton.names[a], skeleton.names[b]) for a, b in skeleton.bones]
    colors = dict(zip(named_bones, [tuple(c) for c in skeleton.colors]))
    # line width follows the zoom so crops show thicker limbs
    zoom = 1.0
    if crop is not None:
        zoom = 1.0 / max(crop[2] - crop[0], crop[3] - crop[1])
    scale = max(height, width)
    return draw_skeleton_2d(points, height, width, named_bones, colors, line_width=max(1.0, zoom * scale / 32),
                            joint_radius=max(1.0, zoom * scale / 24)), False


# ----------------------------------------------------------------------------- meshes


@dataclass
class PartMesh:
    vertices: np.ndarray
    faces: np.ndarray
    label: str = "part"
    eps_surf: float = 0.002

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, float)
        self.faces = np.asarray(self.faces, np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DomainError("triangle index out of range")
        if self.faces.size and np.any(self.areas() <= 1e-12):
            raise DomainError("degenerate triangle in mesh")

    def triangles(self):
        return self.vertices[self.faces]

    def areas(self):
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=-1)

    def normals(self):
        t = self.triangles()
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def save_obj(self, path):
        lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.faces]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load_obj(cls, path, label=None, eps_surf=0.002):
        verts, faces = [], []
        for line in Path(path).read_text().splitlines():
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(v) for v in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
        return cls(np.array(verts, float).reshape(-1, 3), np.array(faces, np.int64).reshape(-1, 3),
                   label or Path(path).stem, eps_surf)


def ellipsoid_mesh(center, radii, n_lat=12, n_lon=16, frame=None):
    """Closed UV ellipsoid: ``2 * n_lon * (n_lat - 1)`` triangles."""
    verts = [(0.0, 0.0, 1.0)]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for k in range(n_lon):
            ph = 2 * np.pi * k / n_lon
            verts.append((np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)))
    verts.append((0.0, 0.0, -1.0))
    v = np.array(verts) * np.asarray(radii, float)
    faces = []
    ring = lambda i, k: 1 + (i - 1) * n_lon + (k % n_lon)  # noqa: E731
    for k in range(n_lon):
        faces.append((0, ring(1, k), ring(1, k + 1)))
    for i in range(1, n_lat - 1):
        for k in range(n_lon):
            a, b, c, d = ring(i, k), ring(i, k + 1), ring(i + 1, k), ring(i + 1, k + 1)
            faces += [(a, c, b), (b, c, d)]
    last = len(v) - 1
    for k in range(n_lon):
        faces.append((last, ring(n_lat - 1, k + 1), ring(n_lat - 1, k)))
    if frame is not None:
        v = v @ np.asarray(frame, float).T
    return v + np.asarray(center, float), np.array(faces, np.int64)


def _merge(parts):
    verts, faces, off = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(f + off)
        off += len(v)
    return np.concatenate(verts), np.concatenate(faces)


def _limb_frame(direction):
    """Rotation whose third column is ``direction`` (local z -> limb axis)."""
    z = np.asarray(direction, float)
    z = z / np.linalg.norm(z)
    helper = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], 1)


def hand_mesh(skeleton=None, side="left", eps_surf=0.002):
    """Low-poly hand: a flat palm ellipsoid with four fingers and a thumb."""
    skeleton = skeleton or canonical_skeleton()
    wrist = skeleton.joint(f"{side}_wrist")
    elbow = skeleton.joint(f"{side}_elbow")
    axis = (wrist - elbow) / np.linalg.norm(wrist - elbow)
    frame = _limb_frame(axis)  # local x: across the palm, local y: palm normal
    palm_center = wrist + 0.05 * axis
    parts = [ellipsoid_mesh(palm_center, (0.042, 0.016, 0.05), 10, 12, frame)]
    for k, off in enumerate((-0.027, -0.009, 0.009, 0.027)):
        length = 0.06 if k in (1, 2) else 0.05
        base = palm_center + frame @ np.array([off, 0.0, 0.045])
        center = base + axis * length / 2
        parts.append(ellipsoid_mesh(center, (0.0085, 0.0085, length / 2 + 0.005), 5, 8, frame))
    thumb_dir = frame @ np.array([0.7, 0.0, 0.7])
    tframe = _limb_frame(thumb_dir)
    tbase = palm_center + frame @ np.array([0.04, 0.0, -0.01])
    parts.append(ellipsoid_mesh(tbase + thumb_dir * 0.025, (0.009, 0.009, 0.03), 5, 8, tframe))
    v, f = _merge(parts)
    return PartMesh(v, f, f"{side}_hand", eps_surf)


def face_mesh(skeleton=None, eps_surf=0.002):
    skeleton = skeleton or canonical_skeleton()
    v, f = ellipsoid_mesh(skeleton.joint("head"), (0.085, 0.11, 0.095), 16, 16)
    return PartMesh(v, f, "face", eps_surf)


# ----------------------------------------------------------------------------- sampling


def sample_on_mesh(mesh: PartMesh, n, rng, return_barycentric=False):
    """Area-weighted uniform samples on the mesh surface."""
    if n < 1:
        raise DomainError("need n >= 1")
    if len(mesh.faces) == 0:
        raise DomainError("mesh has no triangles")
    areas = mesh.areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], -1)
    tri = mesh.triangles()[face]
    pts = np.einsum("nk,nkd->nd", bary, tri)
    if return_barycentric:
        return pts, face, bary
    return pts


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles ``(a, b, c)`` to ``p``; all ``(..., 3)`` (Voronoi-region test)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        v_in = vb * denom
        w_in = vc * denom
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    out = a + ab * v_in[..., None] + ac * w_in[..., None]
    cases = [
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * t_ab[..., None]),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * t_ac[..., None]),
        ((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + (c - b) * t_bc[..., None]),
        ((d1 <= 0) & (d2 <= 0), a),
        ((d3 >= 0) & (d4 <= d3), b),
        ((d6 >= 0) & (d5 <= d6), c),
    ]
    # apply in reverse priority so vertex regions win over edges, edges over the face
    for mask, val in cases[:3]:
        out = np.where(mask[..., None], val, out)
    for mask, val in cases[3:]:
        out = np.where(mask[..., None], np.broadcast_to(val, out.shape), out)
    return out


def mesh_distance(points, mesh: PartMesh, chunk=2048):
    """Unsigned distance from each point to the nearest triangle (exhaustive)."""
    pts = np.atleast_2d(np.asarray(points, float))
    tri = mesh.triangles()
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk, None, :]
        q = closest_point_on_triangles(p, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])
        out[s:s + chunk] = np.linalg.norm(q - p, axis=-1).min(1)
    return out


def sample_near_mesh(mesh: PartMesh, n, band, rng, max_rounds=50):
    """Points whose unsigned mesh distance lies in ``band = (lo, hi)``.

    Candidates are surface samples pushed along the face normal (either side)
    by a uniform distance in the band, then filtered by the exact distance to
    the whole mesh.
    """
    lo, hi = (float(b) for b in band)
    if lo <= 0:
        raise DomainError("band lower bound must be positive")
    if hi <= lo:
        raise DomainError("band upper bound must exceed the lower bound")
    if n == 0:
        return np.zeros((0, 3))
    normals = mesh.normals()
    kept = []
    have = 0
    for _ in range(max_rounds):
        m = max(2 * (n - have), 16)
        base, face, _ = sample_on_mesh(mesh, m, rng, return_barycentric=True)
        sign = np.where(rng.random(m) < 0.5, -1.0, 1.0)
        dist = rng.uniform(lo, hi, m)
        cand = base + normals[face] * (sign * dist)[:, None]
        d = mesh_distance(cand, mesh)
        ok = cand[(d >= lo) & (d <= hi)]
        kept.append(ok[: n - have])
        have += len(kept[-1])
        if have >= n:
            return np.concatenate(kept)
    raise SamplingError(f"only {have} of {n} near-mesh samples accepted after {max_rounds} rounds")


# ----------------------------------------------------------------------------- loss


@dataclass
class GeoLossConfig:
    tau_min: float = 0.5
    tau_max: float = 20.0
    n_on: int = 1024
    n_off: int = 1024
    eps_surf: float = 0.002
    r_off: float = 0.03

    def __post_init__(self):
        if not 0 <= self.tau_min < self.tau_max:
            raise DomainError("need 0 <= tau_min < tau_max")
        if not 0 < self.eps_surf < self.r_off:
            raise DomainError("need 0 < eps_surf < r_off")


def margin_terms(density_on, density_off, config: GeoLossConfig):
    """Squared-hinge terms on given densities: ``(on_term, off_term)``."""
    zero = torch.zeros((), dtype=torch.float64)
    on = torch.relu(config.tau_max - density_on).pow(2).mean() if density_on.numel() else zero
    off = torch.relu(density_off - config.tau_min).pow(2).mean() if density_off.numel() else zero
    return on, off


def geo_loss(field, on_points, off_points, config: GeoLossConfig):
    """Mean squared hinge pushing density above ``tau_max`` on the surface and below ``tau_min`` off it."""
    dtype = field.dtype
    on_points = torch.as_tensor(np.asarray(on_points, float).reshape(-1, 3), dtype=dtype)
    off_points = torch.as_tensor(np.asarray(off_points, float).reshape(-1, 3), dtype=dtype)
    if on_points.shape[0] == 0 and off_points.shape[0] == 0:
        log.info("geometry loss called with no points; contributing 0")
        return torch.zeros((), dtype=dtype)
    pts = torch.cat([on_points, off_points])
    dens = field.density(pts)
    if not bool(torch.isfinite(dens).all()):
        raise NumericError("non-finite density in geometry loss")
    on, off = margin_terms(dens[: on_points.shape[0]], dens[on_points.shape[0]:], config)
    return on.to(dtype) + off.to(dtype)


def sample_geo_points(meshes, config: GeoLossConfig, rng):
    """Fresh on-surface and band samples split evenly across ``meshes``."""
    on, off = [], []
    k = len(meshes)
    for i, mesh in enumerate(meshes):
        n_on = config.n_on // k + (1 if i < config.n_on % k else 0)
        n_off = config.n_off // k + (1 if i < config.n_off % k else 0)
        if n_on:
            on.append(sample_on_mesh(mesh, n_on, rng))
        off.append(sample_near_mesh(mesh, n_off, (config.eps_surf, config.r_off), rng))
    on = np.concatenate(on) if on else np.zeros((0, 3))
    off = np.concatenate(off) if off else np.zeros((0, 3))
    return on, off
