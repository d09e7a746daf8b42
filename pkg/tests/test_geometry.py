import numpy as np
import pytest
import torch

from avatarlab.distill import camera_from_angles
from avatarlab.errors import DomainError, NumericError
from avatarlab.field import FieldConfig, RadianceField
from avatarlab.geometry import (
    ArticulatedSkeleton,
    GeoLossConfig,
    PartMesh,
    canonical_skeleton,
    closest_point_on_triangles,
    face_mesh,
    geo_loss,
    hand_mesh,
    mesh_distance,
    rasterize_skeleton,
    sample_geo_points,
    sample_near_mesh,
    sample_on_mesh,
)
from avatarlab.scenes import AnalyticField


def point_triangle_distance(p, a, b, c):
    """Brute force: minimum over the face interior (if the projection lands inside) and the three edges."""
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    q = p - np.dot(p - a, n) * n
    # barycentric test on the projected point
    v0, v1, v2 = b - a, c - a, q - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    best = np.inf
    if v >= 0 and w >= 0 and v + w <= 1:
        best = abs(np.dot(p - a, n))
    for s, e in ((a, b), (b, c), (c, a)):
        t = np.clip(np.dot(p - s, e - s) / np.dot(e - s, e - s), 0, 1)
        best = min(best, np.linalg.norm(p - (s + t * (e - s))))
    return best


def brute_mesh_distance(points, mesh):
    tri = mesh.triangles()
    return np.array([min(point_triangle_distance(p, *t) for t in tri) for p in points])


def two_triangles():
    # areas 1.5 and 0.5
    v = [[0, 0, 0], [3, 0, 0], [0, 1, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]]
    return PartMesh(v, [[0, 1, 2], [3, 4, 5]])


class ConstantDensity(AnalyticField):
    def __init__(self, value):
        super().__init__((-1, -1, -1), (1, 1, 1))
        self.value = value

    def query(self, points, directions=None):
        sigma = torch.full(points.shape[:1], float(self.value), dtype=points.dtype)
        return sigma, torch.zeros(points.shape[0], 3, dtype=points.dtype)


# ----------------------------------------------------------------------------- skeleton


def test_canonical_skeleton_is_symmetric_tree(tmp_path):
    sk = canonical_skeleton()
    for n in sk.names:
        if n.startswith("left_"):
            mirror = sk.joint("right_" + n[5:]) * np.array([-1, 1, 1])
            assert np.allclose(sk.joint(n), mirror)
    sk.save(tmp_path / "s.json")
    back = ArticulatedSkeleton.load(tmp_path / "s.json")
    assert back.names == sk.names and np.array_equal(back.positions, sk.positions) and back.bones == sk.bones


def test_skeleton_rejects_non_tree():
    pos = np.zeros((3, 3))
    with pytest.raises(DomainError):
        ArticulatedSkeleton(["a", "b", "c"], pos, [(0, 1), (1, 0)], [(1, 1, 1)] * 2)
    with pytest.raises(DomainError):
        ArticulatedSkeleton(["a", "b", "c"], pos, [(0, 1)], [(1, 1, 1)])


def test_joint_on_optical_axis_draws_centered_disc():
    sk = ArticulatedSkeleton(["a", "b"], [[0, 0, 0], [0, 0, -0.5]], [(0, 1)], [(1.0, 1.0, 1.0)])
    cam = camera_from_angles(0.0, 0.0, 3.0)
    img, behind = rasterize_skeleton(sk, cam, 32, 32)
    assert not behind and img.max() == 1.0
    lum = img.sum(-1)
    rows, cols = np.mgrid[0:32, 0:32] + 0.5
    assert abs((lum * cols).sum() / lum.sum() - 16.0) < 1e-9
    assert abs((lum * rows).sum() / lum.sum() - 16.0) < 1e-9


def test_half_turn_mirrors_left_and_right():
    sk = canonical_skeleton()
    front, _ = rasterize_skeleton(sk, camera_from_angles(0.0, 0.0, 3.0), 64, 64)
    back, _ = rasterize_skeleton(sk, camera_from_angles(np.pi, 0.0, 3.0), 64, 64)
    # planar symmetric skeleton: the rear view is the front view reflected about the vertical center line
    assert np.abs(back - front[:, ::-1]).max() < 1e-9
    # so the left forearm color sits on opposite halves of the two images
    color = np.asarray(sk.colors[sk.bones.index((sk.names.index("left_elbow"), sk.names.index("left_wrist")))])
    cols = np.arange(64) + 0.5
    for img, sign in ((front, 1), (back, -1)):
        hit = np.all(np.abs(img - color) < 1e-9, axis=-1)
        assert hit.any() and sign * (cols[np.nonzero(hit)[1]].mean() - 32) > 0


def test_rasterization_is_pure_and_flags_all_behind():
    sk = canonical_skeleton()
    cam = camera_from_angles(0.3, 0.2, 3.0)
    a, _ = rasterize_skeleton(sk, cam, 40, 40)
    b, _ = rasterize_skeleton(sk, cam, 40, 40)
    assert np.array_equal(a, b)
    cam = camera_from_angles(np.pi, 0.0, 3.0, look_at=(0.0, 0.0, 6.0))
    with pytest.warns(RuntimeWarning):
        img, behind = rasterize_skeleton(sk, cam, 16, 16)
    assert behind and not img.any()


# ----------------------------------------------------------------------------- meshes


def test_obj_roundtrip(tmp_path):
    mesh = hand_mesh()
    mesh.save_obj(tmp_path / "h.obj")
    back = PartMesh.load_obj(tmp_path / "h.obj")
    assert np.array_equal(back.faces, mesh.faces)
    assert np.allclose(back.vertices, mesh.vertices, atol=1e-8)
    assert back.label == "h"


def test_part_meshes_are_low_poly_and_valid():
    for mesh in (hand_mesh(), hand_mesh(side="right"), face_mesh()):
        assert 200 <= len(mesh.faces) <= 800
        assert np.all(mesh.areas() > 1e-12)
    with pytest.raises(DomainError):
        PartMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    with pytest.raises(DomainError):
        PartMesh([[0, 0, 0]], [[0, 1, 2]])


def test_closest_point_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(300):
        a, b, c = rng.normal(size=(3, 3))
        p = rng.normal(size=3) * 2
        q = closest_point_on_triangles(p, a, b, c)
        assert abs(np.linalg.norm(q - p) - point_triangle_distance(p, a, b, c)) < 1e-10


# ----------------------------------------------------------------------------- sampling


def test_single_triangle_samples_are_inside():
    mesh = PartMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    pts, face, bary = sample_on_mesh(mesh, 2000, np.random.default_rng(1), return_barycentric=True)
    assert np.all(bary >= 0) and np.allclose(bary.sum(-1), 1)
    assert np.all(pts[:, 2] == 0) and np.all(pts[:, 0] + pts[:, 1] <= 1 + 1e-12)


def test_area_weighting_is_binomial():
    n = 10_000
    pts = sample_on_mesh(two_triangles(), n, np.random.default_rng(2))
    big = np.sum(pts[:, 0] < 5)
    p = 0.75
    assert abs(big - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_sampling_is_seeded_and_validates():
    mesh = hand_mesh()
    assert np.array_equal(sample_on_mesh(mesh, 50, np.random.default_rng(3)),
                          sample_on_mesh(mesh, 50, np.random.default_rng(3)))
    with pytest.raises(DomainError):
        sample_on_mesh(mesh, 0, np.random.default_rng(0))
    with pytest.raises(DomainError):
        sample_on_mesh(PartMesh(np.zeros((0, 3)), np.zeros((0, 3))), 5, np.random.default_rng(0))


def test_on_samples_lie_on_the_surface():
    mesh = hand_mesh()
    pts = sample_on_mesh(mesh, 100, np.random.default_rng(4))
    assert np.all(brute_mesh_distance(pts, mesh) <= mesh.eps_surf)


def test_band_samples_pass_exhaustive_distance_oracle():
    mesh = hand_mesh()
    pts = sample_near_mesh(mesh, 150, (0.002, 0.03), np.random.default_rng(5))
    d = brute_mesh_distance(pts, mesh)
    assert len(pts) == 150 and np.all((d >= 0.002) & (d <= 0.03))
    assert np.allclose(mesh_distance(pts, mesh), d, atol=1e-12)


def test_band_preconditions():
    mesh = hand_mesh()
    assert sample_near_mesh(mesh, 0, (0.002, 0.03), np.random.default_rng(0)).shape == (0, 3)
    with pytest.raises(DomainError):
        sample_near_mesh(mesh, 5, (0.0, 0.03), np.random.default_rng(0))
    with pytest.raises(DomainError):
        sample_near_mesh(mesh, 5, (0.03, 0.01), np.random.default_rng(0))


def test_geo_points_split_across_meshes():
    cfg = GeoLossConfig(n_on=101, n_off=51)
    on, off = sample_geo_points([hand_mesh(), face_mesh()], cfg, np.random.default_rng(6))
    assert on.shape == (101, 3) and off.shape == (51, 3)


# ----------------------------------------------------------------------------- loss


def test_margins_met_exactly_give_zero_loss():
    cfg = GeoLossConfig()
    on = np.zeros((7, 3))
    assert geo_loss(ConstantDensity(cfg.tau_max), on, np.zeros((0, 3)), cfg).item() == 0.0
    assert geo_loss(ConstantDensity(cfg.tau_min), np.zeros((0, 3)), on, cfg).item() == 0.0


def test_zero_density_closed_form():
    cfg = GeoLossConfig()
    pts = np.random.default_rng(7).uniform(-0.5, 0.5, (10, 3))
    assert geo_loss(ConstantDensity(0.0), pts, np.zeros((0, 3)), cfg).item() == cfg.tau_max**2
    assert geo_loss(ConstantDensity(0.0), np.zeros((0, 3)), pts, cfg).item() == 0.0
    assert geo_loss(ConstantDensity(0.0), np.zeros((0, 3)), np.zeros((0, 3)), cfg).item() == 0.0
    # both branches present: sum of means
    dens = 3.0
    want = (cfg.tau_max - dens) ** 2 + (dens - cfg.tau_min) ** 2
    assert abs(geo_loss(ConstantDensity(dens), pts, pts, cfg).item() - want) < 1e-12


def test_gradient_sign_raises_on_and_lowers_off():
    cfg = GeoLossConfig()
    rng = np.random.default_rng(8)
    on_d = torch.tensor(rng.uniform(0, 2 * cfg.tau_max, 100), requires_grad=True)
    off_d = torch.tensor(rng.uniform(0, 2 * cfg.tau_max, 100), requires_grad=True)
    from avatarlab.geometry import margin_terms

    on, off = margin_terms(on_d, off_d, cfg)
    (on + off).backward()
    # squared hinge: d/dtau = -2 (tau_max - tau)+ / n on the surface, +2 (tau - tau_min)+ / n off it
    assert torch.allclose(on_d.grad, -2 * torch.relu(cfg.tau_max - on_d.detach()) / 100)
    assert torch.allclose(off_d.grad, 2 * torch.relu(off_d.detach() - cfg.tau_min) / 100)
    assert torch.all(on_d.grad <= 0) and torch.all(off_d.grad >= 0)


def test_non_finite_density_raises():
    cfg = GeoLossConfig()
    with pytest.raises(NumericError):
        geo_loss(ConstantDensity(float("nan")), np.zeros((3, 3)), np.zeros((0, 3)), cfg)


def test_loss_config_invariants():
    with pytest.raises(DomainError):
        GeoLossConfig(tau_min=5, tau_max=5)
    with pytest.raises(DomainError):
        GeoLossConfig(eps_surf=0.05, r_off=0.03)


def test_loss_backpropagates_into_field():
    field = RadianceField(FieldConfig(levels=2, log2_table_size=8, base_resolution=4, growth=2.0), seed=0)
    on, off = sample_geo_points([hand_mesh()], GeoLossConfig(n_on=64, n_off=64), np.random.default_rng(9))
    loss = geo_loss(field, on, off, GeoLossConfig())
    loss.backward()
    assert all(p.grad is not None for p in field.encoding.parameters())
    assert all(p.grad is not None for p in field.density_head.parameters())
