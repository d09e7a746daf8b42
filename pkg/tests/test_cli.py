import json
import shutil

import numpy as np
import pytest
import torch

from avatarlab.checkpoint import file_sha256, load_container, save_container
from avatarlab.cli import main, regression_check, turntable_cameras
from avatarlab.config import config_from_dict, load_config, physical_cores
from avatarlab.data import POSE_SCHEMA, subject_examples, validate_pose
from avatarlab.errors import ConfigError
from avatarlab.field import RadianceField
from avatarlab.render import load_raw, render_image

TINY = """
seed = 3
precision = "f64"

[paths]
data = "data"
checkpoints = "ckpt"
output = "out"

[data]
n_subject = 3
n_class = 24
n_pose_pool = 8
size = 16

[pretrain]
steps = 6
channels = 8
batch_size = 4

[booth]
n_prior = 3
steps = 4
batch_size = 3
prior_sampling_steps = 3

[distill]
steps = 4
checkpoint_every = 2
n_samples = 8

[field]
levels = 4
log2_table_size = 10
hidden = 16
base_resolution = 4

[[schedule]]
start_step = 0
resolution = 12
upsample = 16

[render]
resolution = 16
n_samples = 16
n_views = 2

[bench]
repeats = 1
"""


def write_config(root, text=TINY):
    root.mkdir(parents=True, exist_ok=True)
    path = root / "run.toml"
    path.write_text(text)
    return path


def tree_digest(root):
    return {str(p.relative_to(root)): file_sha256(p) for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root)
    for cmd in ("synth-data", "pretrain", "booth", "distill"):
        assert main([cmd, "--config", str(cfg)]) == 0, cmd
    return root, cfg


# ----------------------------------------------------------------------------- config


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({"distill": {"lamda_geo": 1.0}})
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({"sed": 1})
    cfg = write_config(tmp_path, TINY + "\n[booth.extra]\nx = 1\n")
    assert main(["booth", "--config", str(cfg)]) == 2


def test_invalid_values_exit_with_config_code(tmp_path):
    bad_schedule = TINY.replace("resolution = 12\nupsample = 16", "resolution = 12\nupsample = 8")
    assert main(["distill", "--config", str(write_config(tmp_path / "a", bad_schedule))]) == 2
    assert main(["distill", "--config", str(write_config(tmp_path / "b", TINY.replace('"f64"', '"f16"')))]) == 2
    assert main(["eval", "--config", str(write_config(tmp_path / "c"))]) == 2  # no --ground-truth


def test_overrides_and_worker_default(tmp_path):
    path = write_config(tmp_path)
    cfg = load_config(path, seed=9, precision="f32", workers=2)
    assert (cfg.seed, cfg.precision, cfg.workers) == (9, "f32", 2)
    assert load_config(path).workers == physical_cores() >= 1
    assert cfg.resolve("data") == tmp_path / "data"
    with pytest.raises(SystemExit):
        main(["bench", "--precision", "f16"])


def test_missing_inputs_exit_with_io_code(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["booth", "--config", str(cfg)]) == 4
    assert main(["pretrain", "--config", str(cfg)]) == 4
    assert main(["turntable", "--config", str(cfg)]) == 4
    assert main(["booth", "--config", str(tmp_path / "nope.toml")]) == 4


# ----------------------------------------------------------------------------- data


def test_synth_data_is_byte_identical(run, tmp_path):
    root, _ = run
    other = write_config(tmp_path)
    assert main(["synth-data", "--config", str(other)]) == 0
    assert tree_digest(tmp_path / "data") == tree_digest(root / "data")
    layout = {p.name for p in (root / "data" / "subject").iterdir()}
    assert layout == {"images", "masks", "poses", "captions"}
    assert {p.name for p in (root / "data" / "avatar").iterdir()} == {"skeleton.json", "left_hand.obj",
                                                                       "right_hand.obj", "face.obj"}


def test_pose_files_validate(run):
    root, _ = run
    docs = [json.loads(p.read_text()) for p in sorted((root / "data" / "subject" / "poses").glob("*.json"))]
    assert len(docs) == 3
    for doc in docs:
        validate_pose(doc)
        assert all(0 <= c <= 1 for xy in doc["joints"].values() for c in xy)
    import jsonschema

    broken = dict(docs[0], joints={"head": [0.5]})
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(broken, POSE_SCHEMA)


def test_joints_land_on_drawn_limbs():
    size = 64
    for ex in subject_examples(n_poses=6, size=size, seed=1):
        fg = np.argwhere(ex.mask)  # (row, col)
        for name, (u, v) in ex.joints.items():
            px = np.array([v * size - 0.5, u * size - 0.5])
            assert np.min(np.linalg.norm(fg - px, axis=1)) <= 2.0, name


# ----------------------------------------------------------------------------- training commands


def test_booth_and_distill_reruns_are_hash_identical(run):
    root, cfg = run
    ckpt = root / "ckpt"
    dist = root / "out" / "distill"
    first = {"booth": file_sha256(ckpt / "booth.ckpt"), **tree_digest(dist)}
    assert main(["booth", "--config", str(cfg)]) == 0
    assert main(["distill", "--config", str(cfg)]) == 0
    again = {"booth": file_sha256(ckpt / "booth.ckpt"), **tree_digest(dist)}
    assert {k: v for k, v in again.items() if k != "metrics.ndjson"} == \
           {k: v for k, v in first.items() if k != "metrics.ndjson"}


def test_booth_outputs(run):
    root, _ = run
    hist = [json.loads(line) for line in (root / "ckpt" / "booth_history.ndjson").read_text().splitlines()]
    assert [h["step"] for h in hist] == [0, 1, 2, 3]
    assert all(h["total"] == h["rec"] + h["cppl"] for h in hist)


def test_distill_outputs(run):
    root, _ = run
    dist = root / "out" / "distill"
    lines = (dist / "metrics.ndjson").read_text().splitlines()
    assert len(lines) == 4
    assert {p.name for p in dist.glob("*.ckpt")} == {"field_step2.ckpt", "field_step4.ckpt"}
    rec = json.loads(lines[-1])
    assert rec["step"] == 3 and rec["resolution"] == 12 and rec["wall_ms"] > 0


def test_nan_denoiser_aborts_distill(run, tmp_path):
    root, _ = run
    shutil.copytree(root / "data", tmp_path / "data")
    (tmp_path / "ckpt").mkdir()
    meta, arrays = load_container(root / "ckpt" / "booth.ckpt")
    poisoned = [(k, np.full_like(v, np.nan) if k.startswith("conv_out") else v) for k, v in arrays.items()]
    save_container(tmp_path / "ckpt" / "booth.ckpt", "denoiser", meta, poisoned)
    cfg = write_config(tmp_path)
    assert main(["distill", "--config", str(cfg)]) == 3
    # the run stops at the third skipped step, so the final checkpoint never appears
    assert not (tmp_path / "out" / "distill" / "field_step4.ckpt").exists()


# ----------------------------------------------------------------------------- turntable / eval / bench


def test_single_view_turntable_matches_direct_render(run):
    root, cfg_path = run
    ckpt = root / "out" / "distill" / "field_step4.ckpt"
    assert main(["turntable", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--views", "1"]) == 0
    cfg = load_config(cfg_path)
    (cam,) = turntable_cameras(cfg, 1)
    assert np.allclose(cam.position, (0.0, 0.0, cfg.render.radius))
    with torch.no_grad():
        want = render_image(RadianceField.load(ckpt), cam, 16, 16, 16, None, background=cfg.render.background,
                            record=False).color.numpy()
    got = load_raw(root / "out" / "turntable" / "view_000.raw")
    assert np.array_equal(got, want.astype(got.dtype))


def test_eight_view_azimuths(run):
    _, cfg_path = run
    cams = turntable_cameras(load_config(cfg_path), 8)
    az = [np.degrees(np.arctan2(c.position[0], c.position[2])) % 360 for c in cams]
    assert np.allclose(az, np.arange(0, 360, 45), atol=1e-9)


def test_self_comparison_gives_sentinel_and_unit_ssim(run, tmp_path):
    root, cfg = run
    assert main(["turntable", "--config", str(cfg), "--views", "2"]) == 0
    gt = tmp_path / "gt"
    shutil.copytree(root / "out" / "turntable", gt)
    assert main(["turntable", "--config", str(cfg), "--views", "2", "--ground-truth", str(gt)]) == 0
    report = json.loads((root / "out" / "turntable" / "metrics.json").read_text())
    assert report["psnr"] == [99.0, 99.0] and report["ssim"] == [1.0, 1.0]
    assert main(["eval", "--config", str(cfg), "--ground-truth", str(gt)]) == 0
    assert json.loads((root / "out" / "eval.json").read_text())["psnr_min"] == 99.0


def test_eval_rejects_resolution_mismatch(run, tmp_path):
    root, cfg = run
    assert main(["turntable", "--config", str(cfg), "--views", "2"]) == 0
    gt = tmp_path / "gt"
    gt.mkdir()
    from avatarlab.render import save_raw

    save_raw(gt / "view_000.raw", np.zeros((8, 8, 3)))
    assert main(["eval", "--config", str(cfg), "--ground-truth", str(gt)]) == 2


def test_bench_keys_and_gate(run, tmp_path):
    root, cfg = run
    base = tmp_path / "baseline.json"
    assert main(["bench", "--config", str(cfg), "--write-baseline", str(base)]) == 0
    report = json.loads(base.read_text())
    assert set(report) == {"hash_queries_per_s", "rays_per_s", "denoiser_steps_per_s"}
    assert all(v > 0 for v in report.values())
    doubled = tmp_path / "doubled.json"
    doubled.write_text(json.dumps({k: 2 * v for k, v in report.items()}))
    assert main(["bench", "--config", str(cfg), "--baseline", str(doubled)]) == 1
    assert main(["bench", "--config", str(cfg), "--baseline", str(tmp_path / "missing.json")]) == 0


def test_regression_gate_logic():
    base = {"a": 100.0, "b": 100.0, "c": 100.0}
    assert regression_check({"a": 81.0, "b": 79.0, "c": 500.0}, base, 0.2) == ["b"]
    assert regression_check({"a": 50.0, "b": 50.0, "c": 50.0}, {k: 2 * v for k, v in base.items()}, 0.2) == [
        "a", "b", "c"]
