"""Command line driver: ``handsplat <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PRESETS, ConfigError, RunConfig, preset
from .losses import NumericError
from .nn import ContractError

log = logging.getLogger("handsplat")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.preset:
        cfg = preset(args.preset, cfg)
    overrides = list(args.set or [])
    if getattr(args, "iterations", None) is not None:
        overrides.append(f"iterations={args.iterations}")
    if args.deterministic:
        overrides.append("deterministic=true")
    if args.threads:
        overrides.append(f"threads={args.threads}")
    return cfg.with_overrides(overrides)


def _manifest(path):
    from .data import DatasetManifest

    return DatasetManifest.load(path)


def _frame_record(manifest, frame: int, camera: str | None):
    for rec in manifest.records:
        if rec.frame == frame and (camera is None or rec.camera == camera):
            return rec
    raise ValueError(f"no record for frame {frame}" + (f" and camera {camera}" if camera else ""))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    from dataclasses import asdict

    from .config import coerce, parse_override
    from .data import DataConfig, contact_fraction, generate_scene, render_dataset

    d = json.loads(Path(args.config).read_text()) if args.config else {}
    base = asdict(DataConfig())
    for s in args.set or []:
        k, v = parse_override(s)
        if k not in base:
            raise ConfigError(f"unknown data config field: {k}")
        d[k] = coerce(v, base[k])
    cfg = DataConfig.from_dict({**base, **d})
    scene = generate_scene(args.seed, cfg)
    manifest = render_dataset(scene, args.out)
    counts = {s: len(manifest.split(s)) for s in ("train", "novel-pose", "novel-view")}
    print(f"wrote {len(manifest.records)} frames to {args.out} "
          f"({', '.join(f'{k}: {v}' for k, v in counts.items())}); "
          f"palm-contact frames: {100 * contact_fraction(scene):.0f}%")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import Trainer

    cfg = _run_config(args)
    trainer = Trainer(cfg, _manifest(args.data), args.out, resume=args.resume)
    res = trainer.run()
    print(f"trained {res.iterations} iterations in {res.seconds:.1f}s: {res.num_gaussians} Gaussians, "
          f"last train PSNR {res.final_psnr:.2f} dB, skipped steps {res.skipped_steps}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from contextlib import nullcontext

    from .train import evaluate, load_model, model_renderer, oracle_renderer, runtime_limits, write_reports

    manifest = _manifest(args.data)
    if args.oracle:
        render_fn, limits = oracle_renderer(manifest), nullcontext()
    else:
        model = load_model(args.checkpoint)[0]
        render_fn, limits = model_renderer(model), runtime_limits(model.config)
    reports = []
    with limits:
        for split in args.split:
            rep = evaluate(render_fn, manifest, split, args.limit)
            reports.append(rep)
            if args.verbose:
                print(rep.table())
            else:
                extra = f", {len(rep.missing)} missing" if rep.missing else ""
                print(f"{split:>10}: PSNR {rep.psnr:7.3f} dB  SSIM {rep.ssim:.4f}  ({len(rep.rows)} frames{extra})")
    if args.csv:
        write_reports(reports, args.csv)
        print(f"wrote {args.csv}")
    return EXIT_OK


def cmd_render(args) -> int:
    from PIL import Image

    from .data import load_pose, to_uint8
    from .train import load_model

    manifest = _manifest(args.data)
    model, _, _ = load_model(args.checkpoint)
    rec = _frame_record(manifest, args.frame, args.camera)
    pose = load_pose(manifest, rec)
    cam = manifest.camera(rec.camera)
    out = model.render_lbs(pose, cam) if args.lbs else model.render(pose, cam)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(out.color)).save(args.out)
    print(f"rendered frame {rec.frame} from {rec.camera} -> {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .train import bench, load_model

    model = load_model(args.checkpoint)[0] if args.checkpoint else None
    rep = bench(model, args.resolution, args.count, args.gaussians, args.seed)
    print(rep.table())
    return EXIT_OK


def cmd_scs_dump(args) -> int:
    from .model import AvatarModel
    from .scs import structural_coordinates
    from .skeleton import Pose, default_skeleton
    from .train import load_model

    if args.checkpoint:
        model = load_model(args.checkpoint)[0]
    else:
        model = AvatarModel(default_skeleton(), RunConfig())
    pose = Pose.identity()
    if args.pose:
        pose = Pose.from_dict(json.loads(Path(args.pose).read_text()))
    ctx = model.pose_context(pose)
    A = ctx.transforms
    x = np.einsum("nij,nj->ni", A[:, :, :3], model.cloud.position.astype(np.float64)) + A[:, :, 3]
    p, q, _ = model._basis(pose, ctx, None)
    P = structural_coordinates(x, (p, q), model.config.tau)
    print(f"structural coordinates: {P.shape[0]} Gaussians x {P.shape[1]} bones, "
          f"range [{P.min():.4f}, {P.max():.4f}], mean |P| {np.abs(P).mean():.4f}")
    if args.out:
        if str(args.out).endswith(".csv"):
            np.savetxt(args.out, P, delimiter=",", fmt="%.8g")
        else:
            np.save(args.out, P)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_skeleton_dump(args) -> int:
    from .skeleton import default_skeleton, with_template

    model = default_skeleton(args.scale)
    if args.template:
        model = with_template(model, args.template)
    text = model.to_json(indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return EXIT_OK


def cmd_skeleton_validate(args) -> int:
    from .skeleton import SkeletonModel

    try:
        model = SkeletonModel.from_dict(json.loads(Path(args.file).read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        print(f"{args.file}: malformed skeleton ({e})", file=sys.stderr)
        return EXIT_VALIDATION
    problems = model.validate()
    if problems:
        for p in problems:
            print(f"{args.file}: {p}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"{args.file}: ok ({model.joint_count} joints)")
    return EXIT_OK


def cmd_export(args) -> int:
    from .gaussians import export_ply
    from .train import load_model

    model = load_model(args.checkpoint)[0]
    export_ply(model.cloud, args.ply)
    print(f"wrote {len(model.cloud)} Gaussians to {args.ply}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="handsplat", description="Animatable Gaussian hand avatars on synthetic data.")
    ap.add_argument("-q", "--quiet", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def run_opts(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--preset", choices=sorted(PRESETS), help="ablation preset")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS, fixed-order reductions")
        p.add_argument("--threads", type=int, default=0, help="renderer threads (0 = all)")

    p = sub.add_parser("gen-data", help="render the synthetic oracle dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON data config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="optimise an avatar on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", action="store_true")
    run_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR / SSIM per split")
    p.add_argument("--data", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--oracle", action="store_true", help="evaluate the ground-truth oracle itself")
    p.add_argument("--split", action="append", choices=["train", "novel-pose", "novel-view"])
    p.add_argument("--limit", type=int)
    p.add_argument("--csv")
    p.add_argument("-v", "--verbose", action="store_true", help="print per-frame table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render one dataset frame with a trained avatar")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--camera")
    p.add_argument("--out", required=True)
    p.add_argument("--lbs", action="store_true", help="skinning only, no learned offsets")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", help="rendering throughput")
    p.add_argument("--checkpoint")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--count", type=int, default=10, help="frames per measurement")
    p.add_argument("--gaussians", type=int, default=10_000, help="random cloud size without a checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("scs", help="structural coordinate tools")
    ssub = p.add_subparsers(dest="scs_command", required=True)
    q = ssub.add_parser("dump", help="descriptor matrix for a pose")
    q.add_argument("--checkpoint")
    q.add_argument("--pose", help="pose JSON (default: rest pose)")
    q.add_argument("--out", help=".npy or .csv")
    q.set_defaults(func=cmd_scs_dump)

    p = sub.add_parser("skeleton", help="skeleton tools")
    ssub = p.add_subparsers(dest="skeleton_command", required=True)
    q = ssub.add_parser("dump")
    q.add_argument("--out")
    q.add_argument("--scale", type=float, default=1.0)
    q.add_argument("--template", type=int, default=0, help="attach this many template vertices")
    q.set_defaults(func=cmd_skeleton_dump)
    q = ssub.add_parser("validate")
    q.add_argument("file")
    q.set_defaults(func=cmd_skeleton_validate)

    p = sub.add_parser("export", help="write a checkpoint's canonical cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ply", required=True)
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "split", None) is None and args.command == "eval":
        args.split = ["train", "novel-pose", "novel-view"]
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
