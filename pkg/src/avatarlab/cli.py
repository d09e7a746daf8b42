"""Command-line entry point: ``avatarlab <command> [--config PATH] [--seed N] ...``.

Exit codes: 0 success, 1 benchmark regression, 2 configuration error,
3 numeric abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .config import RunConfig, load_config
from .controlbooth import BoothConfig, fewshot_from_examples, finetune, generate_prior_set, pretrain
from .distill import CameraSampler, DistillConfig, DistillState, camera_from_angles, distill
from .errors import ConfigError, NumericAbort, NumericError
from .field import HashGridEncoding, RadianceField
from .geometry import ArticulatedSkeleton, GeoLossConfig, canonical_skeleton, face_mesh, hand_mesh
from .guidance import NoiseSchedule, ToyConditionalDenoiser, Vocabulary
from .metrics import MetricReport, psnr, ssim
from .render import load_raw, render_image, save_png, save_raw

log = logging.getLogger("avatarlab")

EXIT_OK, EXIT_REGRESSION, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


def _dtype(cfg: RunConfig):
    return torch.float64 if cfg.precision == "f64" else torch.float32


def _dirs(cfg: RunConfig):
    return cfg.resolve(cfg.paths.data), cfg.resolve(cfg.paths.checkpoints), cfg.resolve(cfg.paths.output)


def _require(path: Path, what):
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _write_ndjson(path, records):
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


# ----------------------------------------------------------------------------- commands


def cmd_synth_data(cfg: RunConfig, args):
    data_dir, _, _ = _dirs(cfg)
    d = cfg.data
    D.write_dataset(data_dir / "subject", D.subject_examples(d.n_subject, d.size, seed=cfg.seed))
    D.write_dataset(data_dir / "class", D.class_examples(d.n_class, d.size, seed=cfg.seed + 1))
    avatar = data_dir / "avatar"
    avatar.mkdir(parents=True, exist_ok=True)
    skel = canonical_skeleton()
    skel.save(avatar / "skeleton.json")
    for mesh in (hand_mesh(skel, "left"), hand_mesh(skel, "right"), face_mesh(skel)):
        mesh.save_obj(avatar / f"{mesh.label}.obj")
    print(f"wrote {d.n_subject} subject and {d.n_class} class examples under {data_dir}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args):
    data_dir, ckpt_dir, _ = _dirs(cfg)
    examples = D.read_dataset(_require(data_dir / "class", "class dataset"))
    torch.manual_seed(cfg.seed)
    model = ToyConditionalDenoiser(NoiseSchedule(), Vocabulary(), channels=cfg.pretrain.channels,
                                   seed=cfg.seed).to(_dtype(cfg))
    p = cfg.pretrain
    hist = pretrain(model, examples, p.steps, np.random.default_rng(cfg.seed), lr=p.lr, batch_size=p.batch_size,
                    cond_dropout=p.cond_dropout, dtype=_dtype(cfg))
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    model.save(ckpt_dir / "base.ckpt")
    _write_ndjson(ckpt_dir / "pretrain_history.ndjson", hist)
    print(f"base denoiser: {ckpt_dir / 'base.ckpt'} (final loss {hist[-1]['loss'] if hist else float('nan'):.4f})")
    return EXIT_OK


def cmd_booth(cfg: RunConfig, args):
    data_dir, ckpt_dir, _ = _dirs(cfg)
    base = ToyConditionalDenoiser.load(_require(ckpt_dir / "base.ckpt", "base denoiser checkpoint"), _dtype(cfg))
    subject = D.read_dataset(_require(data_dir / "subject", "subject dataset"))
    poses = [e.pose.transpose(2, 0, 1) for e in D.read_dataset(_require(data_dir / "class", "class dataset"))
             [: cfg.data.n_pose_pool]]
    b = cfg.booth
    bc = BoothConfig(lambda_cppl=b.lambda_cppl, n_prior=b.n_prior, steps=b.steps, lr=b.lr, lr_text=b.lr_text,
                     batch_size=b.batch_size, prior_sampling_steps=b.prior_sampling_steps, seed=cfg.seed)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    prior = generate_prior_set(base, base.vocab.encode(bc.class_prompt), poses, bc.n_prior, rng,
                               steps=bc.prior_sampling_steps)
    fewshot = fewshot_from_examples(subject, base.vocab, _dtype(cfg))
    result = finetune(base, fewshot, prior, bc)
    result.denoiser.save(ckpt_dir / "booth.ckpt")
    result.save_history(ckpt_dir / "booth_history.ndjson")
    print(f"personalized denoiser: {ckpt_dir / 'booth.ckpt'} ({len(prior)} prior examples, {bc.steps} steps)")
    return EXIT_OK


def _avatar_assets(cfg: RunConfig):
    data_dir = cfg.resolve(cfg.paths.data)
    skel_path = data_dir / "avatar" / "skeleton.json"
    skel = ArticulatedSkeleton.load(skel_path) if skel_path.exists() else canonical_skeleton()
    makers = {"left_hand": lambda: hand_mesh(skel, "left"), "right_hand": lambda: hand_mesh(skel, "right"),
              "face": lambda: face_mesh(skel)}
    meshes = []
    for name in cfg.distill.parts:
        if name not in makers:
            raise ConfigError(f"unknown part mesh {name!r}")
        meshes.append(makers[name]())
    return skel, meshes


def build_distill_state(cfg: RunConfig, denoiser):
    skel, meshes = _avatar_assets(cfg)
    d, c = cfg.distill, cfg.camera
    dc = DistillConfig(lambda_geo=d.lambda_geo, t_range=(d.t_lo, d.t_hi),
                       anneal_floor=d.anneal_floor if d.anneal_floor >= 0 else None,
                       guidance_weight=d.guidance_weight, n_samples=d.n_samples, lr_tables=d.lr_tables,
                       lr_heads=d.lr_heads, background=d.background, prompt=tuple(d.prompt.split()),
                       geo=GeoLossConfig())
    sampler = CameraSampler(tuple(c.radius), tuple(np.deg2rad(c.elevation_deg)), (0.0, 2 * np.pi),
                            tuple(np.deg2rad(c.fov_deg)), c.look_at_jitter)
    field = RadianceField(cfg.field, seed=cfg.seed, dtype=_dtype(cfg))
    return DistillState(field, denoiser, skel, meshes, cfg.resolution_schedule(), sampler, dc,
                        total_steps=d.steps)


def cmd_distill(cfg: RunConfig, args):
    _, ckpt_dir, out_dir = _dirs(cfg)
    den = ToyConditionalDenoiser.load(_require(ckpt_dir / "booth.ckpt", "personalized denoiser checkpoint"),
                                      _dtype(cfg))
    den.requires_grad_(False)
    torch.manual_seed(cfg.seed)
    state = build_distill_state(cfg, den)
    run_dir = out_dir / "distill"
    run_dir.mkdir(parents=True, exist_ok=True)
    try:
        distill(state, cfg.distill.steps, np.random.default_rng(cfg.seed), log_path=run_dir / "metrics.ndjson",
                checkpoint_dir=run_dir, checkpoint_every=cfg.distill.checkpoint_every)
    except (NumericAbort, NumericError) as exc:
        raise NumericAbort(f"distillation stopped at step {state.step}: {exc}") from exc
    print(f"field checkpoints and metrics under {run_dir}")
    return EXIT_OK


def turntable_cameras(cfg: RunConfig, n_views):
    r = cfg.render
    return [camera_from_angles(2 * np.pi * k / n_views, np.deg2rad(r.elevation_deg), r.radius, np.deg2rad(r.fov_deg))
            for k in range(n_views)]


def _latest_field(run_dir: Path):
    ckpts = sorted(run_dir.glob("field_step*.ckpt"), key=lambda p: int(p.stem.removeprefix("field_step")))
    if not ckpts:
        raise FileNotFoundError(f"no field checkpoints under {run_dir}")
    return ckpts[-1]


def cmd_turntable(cfg: RunConfig, args):
    _, _, out_dir = _dirs(cfg)
    path = Path(args.checkpoint) if args.checkpoint else _latest_field(out_dir / "distill")
    field = RadianceField.load(_require(path, "field checkpoint"), dtype=_dtype(cfg))
    n = args.views or cfg.render.n_views
    res = cfg.render.resolution
    dest = out_dir / "turntable"
    dest.mkdir(parents=True, exist_ok=True)
    images = []
    for k, cam in enumerate(turntable_cameras(cfg, n)):
        with torch.no_grad():
            img = render_image(field, cam, res, res, cfg.render.n_samples, None, background=cfg.render.background,
                               record=False).color.numpy()
        images.append(img)
        save_png(dest / f"view_{k:03d}.png", img)
        save_raw(dest / f"view_{k:03d}.raw", img)
    print(f"{n} views written to {dest}")
    if args.ground_truth:
        report = compare_dirs(dest, Path(args.ground_truth))
        (dest / "metrics.json").write_text(report.to_json() + "\n")
        print(report.table())
    return EXIT_OK


def compare_dirs(pred_dir: Path, gt_dir: Path):
    gts = sorted(_require(gt_dir, "ground-truth directory").glob("*.raw"))
    if not gts:
        raise FileNotFoundError(f"no .raw images under {gt_dir}")
    report = MetricReport()
    for g in gts:
        b = load_raw(g)
        a = load_raw(_require(pred_dir / g.name, "rendered view"))
        if a.shape != b.shape:
            raise ConfigError(f"{g.name}: resolution {a.shape} does not match ground truth {b.shape}")
        report.add(g.stem, psnr(a, b), ssim(a, b))
    return report


def cmd_eval(cfg: RunConfig, args):
    _, _, out_dir = _dirs(cfg)
    pred = Path(args.pred) if args.pred else out_dir / "turntable"
    if not args.ground_truth:
        raise ConfigError("eval needs --ground-truth DIR")
    report = compare_dirs(pred, Path(args.ground_truth))
    print(report.table())
    (out_dir / "eval.json").write_text(report.to_json() + "\n")
    return EXIT_OK


# ----------------------------------------------------------------------------- bench


def _rate(fn, count, repeats):
    fn()  # warm-up
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return count / best


def measure_throughput(cfg: RunConfig, repeats=None):
    """Best-of-``repeats`` throughput of the three hot paths."""
    repeats = repeats or cfg.bench.repeats
    dtype = _dtype(cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    enc = HashGridEncoding(cfg.field, generator=gen, dtype=dtype)
    pts = torch.rand(65536, 3, generator=gen, dtype=dtype)
    field = RadianceField(cfg.field, seed=cfg.seed, dtype=dtype)
    cam = camera_from_angles(0.0, 0.0, 3.0)
    den = ToyConditionalDenoiser(NoiseSchedule(), Vocabulary(), channels=cfg.pretrain.channels).to(dtype)
    size = cfg.data.size
    x = torch.randn(1, 3, size, size, generator=gen, dtype=dtype)
    cond = den.encode_conditions([den.vocab.encode("a photo of a person")], torch.zeros(1, 3, size, size,
                                                                                          dtype=dtype))
    with torch.no_grad():
        report = {
            "hash_queries_per_s": _rate(lambda: enc(pts), pts.shape[0], repeats),
            "rays_per_s": _rate(lambda: render_image(field, cam, 32, 32, 32, None, record=False), 32 * 32, repeats),
            "denoiser_steps_per_s": _rate(lambda: den.predict_epsilon(x, 500, cond), 1, repeats),
        }
    return report


def regression_check(report, baseline, tolerance):
    """Keys whose throughput fell more than ``tolerance`` below the baseline."""
    return sorted(k for k, v in baseline.items() if k in report and report[k] < (1 - tolerance) * v)


def cmd_bench(cfg: RunConfig, args):
    _, _, out_dir = _dirs(cfg)
    torch.manual_seed(cfg.seed)
    report = measure_throughput(cfg)
    for k, v in report.items():
        print(f"{k:>22} {v:14.1f}")
    (out_dir / "bench.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    base_path = args.baseline or cfg.bench.baseline
    if args.write_baseline:
        Path(args.write_baseline).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        return EXIT_OK
    if not base_path or not cfg.resolve(base_path).exists():
        print("no baseline file; report only")
        return EXIT_OK
    baseline = json.loads(cfg.resolve(base_path).read_text())
    slow = regression_check(report, baseline, cfg.bench.tolerance)
    if slow:
        print(f"REGRESSION (> {cfg.bench.tolerance:.0%} below baseline): {', '.join(slow)}")
        return EXIT_REGRESSION
    print("within baseline tolerance")
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "booth": cmd_booth,
    "distill": cmd_distill,
    "turntable": cmd_turntable,
    "bench": cmd_bench,
    "eval": cmd_eval,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="avatarlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--precision", choices=("f32", "f64"))
        p.add_argument("--workers", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "turntable":
            p.add_argument("--checkpoint", help="field checkpoint (default: latest distill checkpoint)")
            p.add_argument("--views", type=int)
            p.add_argument("--ground-truth", help="directory of .raw reference views")
        if name == "eval":
            p.add_argument("--pred", help="directory of rendered .raw views (default: turntable output)")
            p.add_argument("--ground-truth", help="directory of .raw reference views")
        if name == "bench":
            p.add_argument("--baseline", help="baseline JSON to gate against")
            p.add_argument("--write-baseline", help="store this run as a baseline JSON")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, precision=args.precision, workers=args.workers)
        torch.set_num_threads(cfg.workers)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericAbort, NumericError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
