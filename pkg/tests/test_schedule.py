import numpy as np
import pytest
import torch

from avatarlab.distill import camera_from_angles
from avatarlab.errors import ConfigError, DomainError
from avatarlab.geometry import canonical_skeleton
from avatarlab.schedule import (
    PART_JOINTS,
    ResolutionSchedule,
    Stage,
    ZoomRegion,
    choose_zoom,
    default_schedule,
    stage_at,
    upsample,
    zoom_crop,
)


def pinhole(camera, point, h, w):
    """Textbook pinhole projection, written out independently of the library camera."""
    pos, target = np.asarray(camera.position), np.asarray(camera.look_at)
    fwd = (target - pos) / np.linalg.norm(target - pos)
    right = np.cross(fwd, camera.up)
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    d = np.asarray(point) - pos
    x, y, z = d @ right, d @ up, d @ fwd
    f = (h / 2) / np.tan(camera.fov_y / 2)
    return np.array([w / 2 + f * x / z, h / 2 - f * y / z])


def test_stage_lookup():
    sch = ResolutionSchedule([Stage(0, 16, 16), Stage(10, 32, 64, "random-part", 0.3), Stage(20, 32, 128)])
    assert stage_at(sch, 0) == (16, 16, "full-body", 0.0)
    assert stage_at(sch, 9)[0] == 16 and stage_at(sch, 10)[1] == 64
    assert stage_at(sch, 10**6)[1] == 128
    res = [stage_at(sch, s)[0] for s in range(40)]
    assert res == sorted(res)
    with pytest.raises(DomainError):
        sch.stage_at(-1)


def test_schedule_construction_rules():
    with pytest.raises(ConfigError):
        ResolutionSchedule([])
    with pytest.raises(ConfigError):
        ResolutionSchedule([Stage(5, 16, 16)])
    with pytest.raises(ConfigError):
        ResolutionSchedule([Stage(0, 16, 16), Stage(0, 32, 32)])
    with pytest.raises(ConfigError):
        ResolutionSchedule([Stage(0, 32, 32), Stage(5, 16, 16)])
    with pytest.raises(ConfigError):
        ResolutionSchedule([Stage(0, 32, 16)])
    with pytest.raises(ConfigError):
        ResolutionSchedule([Stage(0, 16, 16, "elbows")])


def test_default_schedule_numbers():
    sch = default_schedule(1000)
    assert [(s.start_step, s.resolution, s.upsample, s.zoom_prob) for s in sch.stages] == [
        (0, 64, 64, 0.0), (400, 96, 128, 0.3), (750, 128, 256, 0.5)]
    assert ResolutionSchedule(sch.to_list()).stages == sch.stages


def test_head_crop_is_centered_on_projection():
    sk = canonical_skeleton()
    head = sk.joint("head")
    cam = camera_from_angles(0.0, 0.1, 2.0, look_at=head)
    region = ZoomRegion(PART_JOINTS["head"], padding=0.3)
    crop, fell_back = zoom_crop(sk, cam, region, height=64, width=64)
    assert not fell_back
    uv = np.array([pinhole(cam, sk.joint(n), 64, 64) / 64 for n in region.joints])
    mid = (uv.min(0) + uv.max(0)) / 2
    assert np.allclose([(crop[0] + crop[2]) / 2, (crop[1] + crop[3]) / 2], mid, atol=1e-9)
    side = crop[2] - crop[0]
    assert abs(side - (uv.max(0) - uv.min(0)).max() * 1.3) < 1e-9


def test_crops_contain_targets_and_stay_in_unit_square():
    sk = canonical_skeleton()
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 200:
        cam = camera_from_angles(rng.uniform(0, 2 * np.pi), rng.uniform(-0.3, 0.5), rng.uniform(2.0, 3.5))
        part = ("head", "left_hand", "right_hand", "hands")[rng.integers(4)]
        uv = [pinhole(cam, sk.joint(n), 64, 64) / 64 for n in PART_JOINTS[part]]
        if not all(np.all((0 <= p) & (p <= 1)) for p in uv):
            continue  # a target outside the frame cannot be inside any crop of it
        checked += 1
        crop, _ = zoom_crop(sk, cam, ZoomRegion(PART_JOINTS[part]))
        assert 0 <= crop[0] < crop[2] <= 1 and 0 <= crop[1] < crop[3] <= 1
        for u, v in uv:
            assert crop[0] - 1e-9 <= u <= crop[2] + 1e-9 and crop[1] - 1e-9 <= v <= crop[3] + 1e-9


def test_single_joint_without_padding_gets_minimum_side():
    sk = canonical_skeleton()
    cam = camera_from_angles(0.0, 0.0, 3.0)
    crop, _ = zoom_crop(sk, cam, ZoomRegion(("pelvis",), padding=0.0))
    assert crop[2] - crop[0] == pytest.approx(1 / 16) and crop[3] - crop[1] == pytest.approx(1 / 16)
    assert (crop[0] + crop[2]) / 2 == pytest.approx(0.5)


def test_targets_behind_camera_fall_back_to_full_frame():
    sk = canonical_skeleton()
    cam = camera_from_angles(np.pi, 0.0, 3.0, look_at=(0.0, 0.0, 6.0))
    with pytest.warns(RuntimeWarning):
        crop, fell_back = zoom_crop(sk, cam, ZoomRegion(PART_JOINTS["head"]))
    assert fell_back and crop == (0.0, 0.0, 1.0, 1.0)


def test_zoom_choice():
    rng = np.random.default_rng(1)
    assert all(choose_zoom("full-body", 1.0, rng) is None for _ in range(20))
    assert all(choose_zoom("random-part", 0.0, rng) is None for _ in range(20))
    assert choose_zoom("head", 1.0, rng) == "head"
    picks = [choose_zoom("random-part", 0.5, rng) for _ in range(2000)]
    frac = np.mean([p is not None for p in picks])
    assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / 2000)
    assert {p for p in picks if p} == {"head", "left_hand", "right_hand"}


def test_upsample_identity_and_constants():
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    assert upsample(x, 8, 8) is x
    c = torch.full((3, 5, 7), 0.25, dtype=torch.float64)
    assert torch.allclose(upsample(c, 10, 14), torch.full((3, 10, 14), 0.25, dtype=torch.float64), atol=1e-15)
    with pytest.raises(DomainError):
        upsample(x, 4, 8)


def test_upsample_is_exact_on_affine_ramps():
    h = w = 16
    i, j = np.mgrid[0:h, 0:w]
    ramp = torch.from_numpy(0.1 + 0.03 * i + 0.02 * j)[None]
    out = upsample(ramp, 2 * h, 2 * w)[0].numpy()
    # corner alignment: output pixel I maps to source coordinate I (h - 1) / (2h - 1)
    I, J = np.mgrid[0:2 * h, 0:2 * w]
    want = 0.1 + 0.03 * I * (h - 1) / (2 * h - 1) + 0.02 * J * (w - 1) / (2 * w - 1)
    assert np.abs(out - want).max() < 1e-6


def test_upsample_preserves_range():
    x = torch.rand(3, 7, 9, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    y = upsample(x, 20, 30)
    assert y.min() >= x.min() - 1e-15 and y.max() <= x.max() + 1e-15
    assert torch.equal(upsample(x, 20, 30), y)
