"""Command line entry point: ``pancakes {synth,train,render,eval,ablate}``.

Exit codes: 0 ok, 1 runtime failure, 2 usage or input error.
"""
import argparse
import csv
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np
from plyfile import PlyParseError

from .data import DatasetError, SHAPES, load_dataset, synth_scene, write_depth, write_image
from .errors import ConfigurationError, PancakeError
from .metrics import measure_render_ms
from .rasterizer import render
from .scene import Camera, load_cloud_ply
from .trainer import (TrainConfig, depth_ssim_mean, evaluate, evaluate_normals, load_config,
                      save_config, train, with_overrides, write_metrics_csv)

log = logging.getLogger("pancakes")

VARIANTS = (("GS", False, False), ("GS+Depth", True, False),
            ("GS+Pancaking", False, True), ("GS+Pancaking+Depth", True, True))


class UsageError(Exception):
    pass


def _bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got '{text}'")


def _override(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got '{text}'")
    key, value = text.split("=", 1)
    try:
        value = json.loads(value)
    except json.JSONDecodeError:
        pass
    return key, value


def resolve_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = dict(getattr(args, "set", None) or [])
    for flag, key in (("seed", "seed"), ("geo_on", "geo_on"), ("depth_on", "depth_on"),
                      ("iterations", "total_iterations")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    its = overrides.get("total_iterations")
    if its is not None:
        # a short run keeps the schedule boundaries inside the run
        overrides.setdefault("densify_until", min(cfg.densify_until, its))
        overrides.setdefault("geo_loss_start", min(cfg.geo_loss_start, max(its - 1, 0)))
    return with_overrides(cfg, overrides)


def _open_dataset(path):
    if path is None:
        raise UsageError("--data is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"dataset path {p} does not exist")
    return load_dataset(p)


def _views(ds, which):
    train_idx, test_idx = ds.split()
    return {"train": train_idx, "test": test_idx, "all": np.arange(len(ds))}[which]


def print_table(rows, out=sys.stdout):
    out.write(f"{'view':<20}{'PSNR':>10}{'SSIM':>10}{'DepthMSE':>12}{'FPS':>10}\n")
    for r in rows:
        fps = 1000.0 / r.render_ms if r.render_ms and r.render_ms == r.render_ms else float("nan")
        out.write(f"{r.view:<20}{r.psnr:>10.3f}{r.ssim:>10.4f}{r.depth_mse:>12.6f}{fps:>10.1f}\n")


def cmd_synth(args):
    out = Path(args.out)
    ds, gt, _ = synth_scene(out, args.shape, args.views, args.resolution, args.depth_noise,
                            args.rot_noise, args.trans_noise, args.seed)
    from .scene import save_cloud_ply
    save_cloud_ply(gt, out / "ground_truth.ply")
    print(f"wrote {len(ds)} frames to {out}")
    return 0


def cmd_train(args):
    ds = _open_dataset(args.data)
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    res = train(ds, cfg, out)
    views = res.test_idx if len(res.test_idx) else res.train_idx
    rows = evaluate(res.cloud, ds, views, cfg.background, fps_repeats=args.fps_repeats)
    write_metrics_csv(rows, out / "metrics.csv")
    print_table(rows[-1:])
    return 0


def cmd_eval(args):
    ds = _open_dataset(args.data)
    cloud = _load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = evaluate(cloud, ds, _views(ds, args.split), fps_repeats=args.fps_repeats)
    write_metrics_csv(rows, out / "metrics.csv")
    print_table(rows)
    return 0


def _load_checkpoint(path):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"checkpoint {p} does not exist")
    try:
        return load_cloud_ply(p)
    except (ValueError, KeyError, OSError, PlyParseError) as exc:
        raise UsageError(f"checkpoint {p} is unreadable: {exc}") from exc


def load_camera_path(path):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"camera path {p} does not exist")
    try:
        entries = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"camera path {p}: invalid JSON ({exc})") from exc
    cams = []
    for i, e in enumerate(entries):
        try:
            cams.append(Camera.from_w2c(np.asarray(e["w2c"], dtype=np.float64), e["fx"], e["fy"],
                                        e["cx"], e["cy"], e["width"], e["height"]))
        except KeyError as exc:
            raise UsageError(f"camera path {p}[{i}]: missing field {exc}") from exc
    return cams


def cmd_render(args):
    cloud = _load_checkpoint(args.checkpoint)
    cams = load_camera_path(args.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not cams:
        warnings.warn("camera path is empty; nothing rendered", stacklevel=2)
        print("0 frames rendered")
        return 0
    outs = [render(cloud, c) for c in cams]
    top = max(float(o.depth.max()) for o in outs)
    scale = max(top, 1e-6) * 1.05 / 65535
    for i, o in enumerate(outs):
        write_image(out / f"frame_{i:05d}.png", o.rgb)
        write_depth(out / f"depth_{i:05d}.png", o.depth, scale)
    ms = measure_render_ms(lambda: render(cloud, cams[0]), args.fps_repeats, min(10, args.fps_repeats))
    (out / "renders.json").write_text(json.dumps(
        {"frames": len(outs), "depth_scale": scale, "median_render_ms": ms}, indent=1))
    print(f"{len(outs)} frames rendered; median {ms:.2f} ms/frame ({1000 / ms:.1f} FPS)")
    return 0


ABLATION_COLUMNS = ("variant", "depth_on", "geo_on", "psnr", "ssim", "depth_ssim", "depth_mse",
                    "normal_deviation_deg", "n_gaussians")


def run_ablation(ds, cfg, out, shape=None, log_runs=True):
    """Train all four variants; returns ``(rows, timing)``."""
    out = Path(out)
    rows, timing = [], []
    for name, depth_on, geo_on in VARIANTS:
        vcfg = with_overrides(cfg, {"depth_on": depth_on, "geo_on": geo_on})
        run_dir = out / name.replace("+", "_") if log_runs else None
        if run_dir:
            run_dir.mkdir(parents=True, exist_ok=True)
            save_config(vcfg, run_dir / "config.json")
        t0 = time.perf_counter()
        res = train(ds, vcfg, run_dir)
        minutes = (time.perf_counter() - t0) / 60
        views = res.test_idx if len(res.test_idx) else res.train_idx
        metrics = evaluate(res.cloud, ds, views, vcfg.background, fps_repeats=0)[-1]
        dev = evaluate_normals(res.cloud, shape) if shape is not None else float("nan")
        rows.append((name, int(depth_on), int(geo_on), metrics.psnr, metrics.ssim,
                     depth_ssim_mean(res.cloud, ds, views, vcfg.background), metrics.depth_mse,
                     dev, len(res.cloud)))
        timing.append((name, minutes))
    return rows, timing


def write_ablation(rows, timing, out):
    out = Path(out)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    with open(out / "ablation_timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("variant", "wall_minutes"))
        for name, minutes in timing:
            w.writerow((name, f"{minutes:.3f}"))


def cmd_ablate(args):
    ds = _open_dataset(args.data)
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    shape = SHAPES[args.shape]() if args.shape else None
    rows, timing = run_ablation(ds, cfg, out, shape)
    write_ablation(rows, timing, out)
    for r in rows:
        print(f"{r[0]:<22} PSNR {r[3]:7.3f}  depth-SSIM {r[5]:.4f}  depth-MSE {r[6]:.6f}")
    return 0


def _common(p, data=True):
    if data:
        p.add_argument("--data", help="dataset root (cameras.json, images/, depths/, pointcloud.ply)")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--seed", type=int)
    p.add_argument("--geo-on", type=_bool, dest="geo_on")
    p.add_argument("--depth-on", type=_bool, dest="depth_on")
    p.add_argument("--iterations", type=int)
    p.add_argument("--set", type=_override, action="append", metavar="KEY=VALUE",
                   help="override a config field by dotted path, e.g. weights.lambda_geo=0.1")
    p.add_argument("--out", required=True)


def build_parser():
    parser = argparse.ArgumentParser(prog="pancakes")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--shape", choices=sorted(SHAPES), default="tube")
    p.add_argument("--views", type=int, default=60)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--depth-noise", type=float, default=0.0, help="relative sigma")
    p.add_argument("--rot-noise", type=float, default=0.0, help="degrees")
    p.add_argument("--trans-noise", type=float, default=0.0, help="fraction of scene extent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset")
    _common(p)
    p.add_argument("--fps-repeats", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics for a checkpoint")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--fps-repeats", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a camera path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cameras", required=True, help="JSON array of cameras (cameras.json layout)")
    p.add_argument("--fps-repeats", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("ablate", help="train the four loss variants")
    _common(p)
    p.add_argument("--shape", choices=sorted(SHAPES),
                   help="analytic shape for the normal-deviation column")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DatasetError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PancakeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
