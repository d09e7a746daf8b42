"""Procedural stick-figure sprites and the few-shot dataset on-disk layout.

The sprites stand in for masked outfit photos: each is a front-facing
articulated figure with a shirt, trousers and a head, drawn from 2D joint
positions that are also exported as the pose annotation.

Dataset layout::

    root/images/000.png    RGB sprite, background pixels = 0
    root/masks/000.png     8-bit foreground mask
    root/poses/000.json    2D joints (see POSE_SCHEMA)
    root/captions/000.txt  whitespace-separated tokens
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .errors import DomainError

JOINTS_2D = [
    "head", "neck", "pelvis",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_hip", "left_knee", "left_ankle",
    "right_hip", "right_knee", "right_ankle",
]

BONES_2D = [
    ("neck", "head"), ("pelvis", "neck"),
    ("neck", "left_shoulder"), ("left_shoulder", "left_elbow"), ("left_elbow", "left_wrist"),
    ("neck", "right_shoulder"), ("right_shoulder", "right_elbow"), ("right_elbow", "right_wrist"),
    ("pelvis", "left_hip"), ("left_hip", "left_knee"), ("left_knee", "left_ankle"),
    ("pelvis", "right_hip"), ("right_hip", "right_knee"), ("right_knee", "right_ankle"),
]

# Per-bone palette shared by 2D pose images and 3D skeleton rasterization.
# Left limbs are warm, right limbs cool, the trunk is white/gray.
BONE_COLORS = {
    ("neck", "head"): (1.0, 1.0, 1.0),
    ("pelvis", "neck"): (0.6, 0.6, 0.6),
    ("neck", "left_shoulder"): (1.0, 0.3, 0.0),
    ("left_shoulder", "left_elbow"): (1.0, 0.6, 0.0),
    ("left_elbow", "left_wrist"): (1.0, 0.9, 0.0),
    ("neck", "right_shoulder"): (0.0, 0.3, 1.0),
    ("right_shoulder", "right_elbow"): (0.0, 0.6, 1.0),
    ("right_elbow", "right_wrist"): (0.0, 0.9, 1.0),
    ("pelvis", "left_hip"): (0.8, 0.0, 0.2),
    ("left_hip", "left_knee"): (0.9, 0.0, 0.5),
    ("left_knee", "left_ankle"): (1.0, 0.0, 0.8),
    ("pelvis", "right_hip"): (0.2, 0.8, 0.0),
    ("right_hip", "right_knee"): (0.3, 0.9, 0.3),
    ("right_knee", "right_ankle"): (0.5, 1.0, 0.5),
}

POSE_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "width", "height", "joints"],
    "additionalProperties": False,
    "properties": {
        "format": {"const": "avatarlab-pose-2d"},
        "version": {"const": 1},
        "width": {"type": "integer", "minimum": 1},
        "height": {"type": "integer", "minimum": 1},
        "joints": {
            "type": "object",
            "required": JOINTS_2D,
            "additionalProperties": False,
            "properties": {
                name: {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
                       "minItems": 2, "maxItems": 2}
                for name in JOINTS_2D
            },
        },
    },
}

# ----------------------------------------------------------------------------- drawing


def segment_distance(px, py, a, b):
    """Distance from pixel centers ``(px, py)`` to the segment ``a``-``b``."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    ll = dx * dx + dy * dy
    if ll == 0:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / ll, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def draw_skeleton_2d(points, height, width, bones=BONES_2D, colors=BONE_COLORS, line_width=None, joint_radius=None):
    """Anti-aliased colored bones and joint discs on black.

    ``points`` maps joint name to pixel coordinates ``(col, row)``; joints
    that are ``None`` or NaN are skipped together with their bones.
    Coverage of a pixel is ``clip(r + 0.5 - d, 0, 1)`` for distance ``d`` to
    the primitive, composited in bone order.
    """
    img = np.zeros((height, width, 3))
    scale = max(height, width)
    lw = line_width if line_width is not None else max(1.0, scale / 32)
    jr = joint_radius if joint_radius is not None else max(1.0, scale / 24)
    py, px = np.mgrid[0:height, 0:width] + 0.5

    def ok(name):
        p = points.get(name)
        return p is not None and np.all(np.isfinite(p))

    for a, b in bones:
        if not (ok(a) and ok(b)):
            continue
        d = segment_distance(px, py, points[a], points[b])
        cov = np.clip(lw / 2 + 0.5 - d, 0.0, 1.0)[..., None]
        img = img * (1 - cov) + np.asarray(colors[(a, b)]) * cov
    for a, b in bones:
        if not ok(b):
            continue
        d = np.hypot(px - points[b][0], py - points[b][1])
        cov = np.clip(jr + 0.5 - d, 0.0, 1.0)[..., None]
        img = img * (1 - cov) + np.asarray(colors[(a, b)]) * cov
    return img


@dataclass(frozen=True)
class Appearance:
    shirt: tuple
    stripe: tuple | None
    pants: tuple
    skin: tuple


SUBJECT_APPEARANCE = Appearance(shirt=(0.95, 0.15, 0.1), stripe=(1.0, 0.85, 0.1), pants=(0.1, 0.2, 0.8),
                                skin=(0.95, 0.75, 0.6))

PALETTE = {
    "red": (0.9, 0.15, 0.15), "green": (0.15, 0.75, 0.2), "blue": (0.15, 0.3, 0.9), "yellow": (0.95, 0.85, 0.15),
    "white": (0.92, 0.92, 0.92), "orange": (1.0, 0.55, 0.1), "purple": (0.55, 0.2, 0.75), "black": (0.15, 0.15, 0.15),
}


def random_pose(rng, jitter=1.0):
    """Normalized 2D joints of a front-facing figure with random limb angles."""
    cx = 0.5 + jitter * rng.uniform(-0.05, 0.05)
    top = 0.12 + jitter * rng.uniform(-0.03, 0.03)
    h = 0.8 + jitter * rng.uniform(-0.06, 0.04)
    j = {}
    j["head"] = (cx, top + 0.08 * h)
    j["neck"] = (cx, top + 0.2 * h)
    j["pelvis"] = (cx, top + 0.55 * h)
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        # subject's left appears on the image right for a front view
        sh = (cx + sgn * 0.12 * h, top + 0.22 * h)
        a1 = np.deg2rad(rng.uniform(-60, 150) if jitter else 20.0)
        a2 = a1 + np.deg2rad(rng.uniform(-10, 60) * jitter)
        el = (sh[0] + sgn * 0.15 * h * np.sin(a1), sh[1] + 0.15 * h * np.cos(a1))
        wr = (el[0] + sgn * 0.14 * h * np.sin(a2), el[1] + 0.14 * h * np.cos(a2))
        hip = (cx + sgn * 0.07 * h, top + 0.56 * h)
        l1 = np.deg2rad(rng.uniform(-5, 30) * jitter)
        l2 = l1 - np.deg2rad(rng.uniform(0, 25) * jitter)
        kn = (hip[0] + sgn * 0.2 * h * np.sin(l1), hip[1] + 0.2 * h * np.cos(l1))
        an = (kn[0] + sgn * 0.2 * h * np.sin(l2), kn[1] + 0.2 * h * np.cos(l2))
        j[f"{side}_shoulder"], j[f"{side}_elbow"], j[f"{side}_wrist"] = sh, el, wr
        j[f"{side}_hip"], j[f"{side}_knee"], j[f"{side}_ankle"] = hip, kn, an
    return {k: (float(np.clip(v[0], 0.01, 0.99)), float(np.clip(v[1], 0.01, 0.99))) for k, v in j.items()}


def draw_sprite(joints, appearance: Appearance, size, supersample=4):
    """Render a sprite; returns ``(rgb (H, W, 3) in [0, 1], mask (H, W) bool)``."""
    s = size * supersample
    py, px = np.mgrid[0:s, 0:s] + 0.5
    pts = {k: (v[0] * s, v[1] * s) for k, v in joints.items()}
    img = np.zeros((s, s, 3))
    cov_total = np.zeros((s, s))
    unit = s / 24.0

    def paint(dist, radius, color):
        nonlocal img, cov_total
        cov = np.clip(radius + 0.5 - dist, 0.0, 1.0)
        col = np.broadcast_to(np.asarray(color, float), img.shape) if np.ndim(color) == 1 else color
        img = img * (1 - cov[..., None]) + col * cov[..., None]
        cov_total = np.maximum(cov_total, cov)

    shirt = np.broadcast_to(np.asarray(appearance.shirt, float), img.shape).copy()
    if appearance.stripe is not None:
        band = (np.floor(py / (1.5 * unit)) % 2 == 1)
        shirt[band] = appearance.stripe
    for side in ("left", "right"):
        paint(segment_distance(px, py, pts[f"{side}_hip"], pts[f"{side}_knee"]), 0.9 * unit, appearance.pants)
        paint(segment_distance(px, py, pts[f"{side}_knee"], pts[f"{side}_ankle"]), 0.8 * unit, appearance.pants)
    paint(segment_distance(px, py, pts["neck"], pts["pelvis"]), 1.8 * unit, shirt)
    for side in ("left", "right"):
        paint(segment_distance(px, py, pts["neck"], pts[f"{side}_shoulder"]), 0.8 * unit, shirt)
        paint(segment_distance(px, py, pts[f"{side}_shoulder"], pts[f"{side}_elbow"]), 0.7 * unit, shirt)
        paint(segment_distance(px, py, pts[f"{side}_elbow"], pts[f"{side}_wrist"]), 0.6 * unit, appearance.skin)
    paint(np.hypot(px - pts["head"][0], py - pts["head"][1]), 2.0 * unit, appearance.skin)

    def pool(a):
        return a.reshape(size, supersample, size, supersample, *a.shape[2:]).mean((1, 3))

    rgb = pool(img)
    cov = pool(cov_total)
    return np.clip(rgb, 0.0, 1.0), cov >= 0.5


def pose_image(joints, size):
    """Rasterized 2D skeleton (pose conditioning image) for normalized joints."""
    pts = {k: (v[0] * size, v[1] * size) for k, v in joints.items()}
    return draw_skeleton_2d(pts, size, size)


def random_appearance(rng):
    names = list(PALETTE)
    shirt = names[rng.integers(len(names))]
    pants = names[rng.integers(len(names))]
    stripe = names[rng.integers(len(names))] if rng.random() < 0.3 else None
    skin = tuple(float(c) for c in np.array([0.95, 0.75, 0.6]) * rng.uniform(0.6, 1.05))
    app = Appearance(PALETTE[shirt], PALETTE[stripe] if stripe else None, PALETTE[pants], skin)
    words = ["a", "photo", "of", "a", "person"]
    if rng.random() < 0.5:
        words += ["wearing", shirt, "shirt"]
    return app, words


# ----------------------------------------------------------------------------- datasets


@dataclass
class Example:
    """One training tuple: image in ``[0, 1]``, pose image, caption tokens (strings)."""

    image: np.ndarray
    mask: np.ndarray
    joints: dict
    pose: np.ndarray
    caption: list


def subject_examples(n_poses=6, size=24, seed=0, caption=("a", "photo", "of", "sks", "person")):
    if not 1 <= n_poses:
        raise DomainError("need at least one pose")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_poses):
        joints = random_pose(rng)
        rgb, mask = draw_sprite(joints, SUBJECT_APPEARANCE, size)
        out.append(Example(rgb * mask[..., None], mask, joints, pose_image(joints, size), list(caption)))
    return out


def class_examples(n, size=24, seed=0):
    """Random class members (varied outfits and poses) for base-model training."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        app, words = random_appearance(rng)
        joints = random_pose(rng)
        rgb, mask = draw_sprite(joints, app, size)
        out.append(Example(rgb * mask[..., None], mask, joints, pose_image(joints, size), words))
    return out


def pose_pool(n, size=24, seed=0):
    """Pose images (and joints) sampled from the generic pose distribution."""
    rng = np.random.default_rng(seed)
    joints = [random_pose(rng) for _ in range(n)]
    return [(j, pose_image(j, size)) for j in joints]


def validate_pose(doc):
    jsonschema.validate(doc, POSE_SCHEMA)
    return doc


def pose_to_json(joints, width, height):
    doc = {"format": "avatarlab-pose-2d", "version": 1, "width": int(width), "height": int(height),
           "joints": {k: [round(float(v[0]), 6), round(float(v[1]), 6)] for k, v in joints.items()}}
    return validate_pose(doc)


def write_dataset(root, examples):
    from .render import save_png

    root = Path(root)
    for sub in ("images", "masks", "poses", "captions"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, ex in enumerate(examples):
        stem = f"{i:03d}"
        h, w = ex.mask.shape
        save_png(root / "images" / f"{stem}.png", ex.image)
        save_png(root / "masks" / f"{stem}.png", ex.mask.astype(float))
        (root / "poses" / f"{stem}.json").write_text(json.dumps(pose_to_json(ex.joints, w, h), indent=1,
                                                                 sort_keys=True) + "\n")
        (root / "captions" / f"{stem}.txt").write_text(" ".join(ex.caption) + "\n")
    return root


def read_dataset(root, background=0.0):
    """Load a dataset directory; masks are applied and pose images re-rasterized."""
    from .render import load_png

    root = Path(root)
    images = sorted((root / "images").glob("*.png"))
    if not images:
        raise FileNotFoundError(f"no images under {root / 'images'}")
    out = []
    for img_path in images:
        stem = img_path.stem
        img = load_png(img_path)[..., :3]
        mask = load_png(root / "masks" / f"{stem}.png") > 0.5
        if mask.ndim == 3:
            mask = mask[..., 0]
        doc = validate_pose(json.loads((root / "poses" / f"{stem}.json").read_text()))
        if (doc["height"], doc["width"]) != mask.shape or img.shape[:2] != mask.shape:
            raise DomainError(f"{stem}: pose/mask/image resolutions disagree")
        caption = (root / "captions" / f"{stem}.txt").read_text().split()
        joints = {k: tuple(v) for k, v in doc["joints"].items()}
        img = np.where(mask[..., None], img, background)
        out.append(Example(img, mask, joints, pose_image(joints, mask.shape[0]), caption))
    return out
