"""Command-line entry points: synth | train | render | eval | plane.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Config precedence is preset < ``--config`` file < ``--set`` flags; the
effective config is written as ``config.json`` next to training outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import losses as L
from .checkpoint import Checkpoint, CheckpointError
from .data import (DatasetError, ImageIOError, SyntheticSceneSpec, _resize, generate_synthetic,
                   load_dataset, load_spec, parse_camera, write_depth, write_image)
from .mirror import DegenerateNormals, InsufficientMirrorPixels, fuse_images, virtual_camera
from .rasterizer import render
from .scene import Plane
from .trainer import NumericalError, TrainConfig, Trainer, run_training

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHANNELS = ("color", "depth", "normal", "alpha", "virtual")
EVAL_COLUMNS = ["view", "psnr", "ssim", "psnr_mirror", "ssim_mirror"]

log = logging.getLogger("mirrorsplat")


class UsageError(Exception):
    pass


# --- config -----------------------------------------------------------------

def config_help() -> str:
    """One line per config key: name, full-scale default, desk default, origin."""
    full, desk = TrainConfig(), TrainConfig.desk()
    lines = ["config keys (--set key=value); default / desk preset / origin:"]
    for f in dataclasses.fields(TrainConfig):
        d, k = getattr(full, f.name), getattr(desk, f.name)
        desk_txt = "" if d == k else f" / desk {k!r}"
        lines.append(f"  {f.name} = {d!r}{desk_txt}  [{f.metadata.get('origin', '')}] {f.metadata.get('help', '')}")
    return "\n".join(lines)


def parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(args, stored: dict | None = None) -> TrainConfig:
    cfg = TrainConfig.desk() if args.preset == "desk" else TrainConfig()
    try:
        if stored:
            cfg = cfg.with_overrides(stored)
        if getattr(args, "config", None):
            try:
                doc = json.loads(Path(args.config).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
            cfg = cfg.with_overrides(doc)
        sets = parse_sets(getattr(args, "set", None))
        if args.seed is not None:
            sets["seed"] = args.seed
        if args.threads is not None:
            sets["threads"] = args.threads
        cfg = cfg.with_overrides(sets)
        cfg.validate()
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _saved_config(checkpoint: Path, args) -> TrainConfig:
    """Render settings saved next to a checkpoint (if any), then command-line overrides."""
    sidecar = checkpoint.parent / "config.json"
    stored = {}
    if sidecar.exists():
        try:
            doc = json.loads(sidecar.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"cannot parse {sidecar}: {exc}") from exc
        stored = {k: v for k, v in doc.items() if k in ("tile_size", "clip_margin")}
    return build_config(args, stored)


def _trainer_from_checkpoint(path, dataset, cfg: TrainConfig) -> Trainer:
    ck = Checkpoint.load(path)
    tr = Trainer(dataset, cfg, ck.scene)
    if ck.plane is not None:
        tr.set_plane(ck.plane)
    return tr


# --- subcommands ------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = load_spec(args.spec) if args.spec else SyntheticSceneSpec()
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from exc
    res = generate_synthetic(spec, args.out, seed=args.seed or 0, variant=args.variant)
    masks = res.mask_pixels
    n_mirror = sum(1 for m in masks.values() if m > 0)
    print(f"wrote {len(masks)} views to {args.out} ({spec.n_train} train / {spec.n_test} test)")
    print(f"views with mirror pixels: {n_mirror}; qualifying for plane estimation "
          f"(>= {res.min_pixels} px): {len(res.qualifying_views)}")
    print(f"mean mask fraction: {np.mean(list(masks.values())) / (spec.width * spec.height):.4f}")
    sha = hashlib.sha256(Path(res.manifest_path).read_bytes()).hexdigest()
    print(f"manifest {res.manifest_path} sha256 {sha}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    ds = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    res = run_training(ds, cfg, out)
    print(f"final held-out PSNR {res.final_psnr:.4f} dB; {len(res.checkpoint.scene)} Gaussians")
    print(f"wrote {out / 'final.ckpt'} and {out / 'metrics.csv'}")
    return EXIT_OK


def _render_camera(args, ds):
    if args.camera:
        try:
            rec = json.loads(Path(args.camera).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read camera file {args.camera}: {exc}") from exc
        return parse_camera(rec, args.camera), None
    if ds is None:
        raise UsageError("render needs --camera or --dataset with --view")
    for v in ds.views:
        if v.name == args.view:
            return v.camera, v
    raise DatasetError(f"view {args.view!r} not in dataset")


def cmd_render(args) -> int:
    ck_path = Path(args.checkpoint)
    cfg = _saved_config(ck_path, args)
    ck = Checkpoint.load(ck_path)
    ds = load_dataset(args.dataset) if args.dataset else None
    cam, view = _render_camera(args, ds)
    channels = [c.strip() for c in args.channels.split(",") if c.strip()]
    bad = sorted(set(channels) - set(CHANNELS))
    if bad:
        raise UsageError(f"unknown channel(s) {bad}; choose from {list(CHANNELS)}")
    plane = ck.plane
    if (args.fused or "virtual" in channels) and plane is None:
        raise UsageError("checkpoint has no mirror plane; --fused and the virtual channel need one")
    if args.fused and view is None:
        raise UsageError("--fused needs a dataset view (the mirror mask comes from the view)")
    kw = dict(threads=cfg.threads or None, tile_size=cfg.tile_size)
    out = render(ck.scene, cam, **kw)
    virt = None
    if plane is not None and (args.fused or "virtual" in channels):
        virt = render(ck.scene, virtual_camera(cam, plane), clip_plane=plane, clip_margin=cfg.clip_margin, **kw)
    color = fuse_images(out.color, virt.color, view.mask) if args.fused else out.color
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for ch in channels:
        path = prefix.with_name(f"{prefix.name}_{ch}.png")
        if ch == "color":
            write_image(color, path, srgb=True)
        elif ch == "depth":
            write_depth(out.depth, path)
        elif ch == "normal":
            write_image(np.clip(0.5 - 0.5 * out.normal, 0, 1), path)
        elif ch == "alpha":
            write_image(out.alpha, path)
        else:
            write_image(virt.color, path, srgb=True)
        written.append(str(path))
    print("wrote " + ", ".join(written))
    if view is not None:
        print(f"PSNR vs ground truth {L.psnr(color, view.image):.4f} dB")
    return EXIT_OK


def evaluate_views(trainer: Trainer, views, resize=None) -> list[dict]:
    rows = []
    for v in views:
        pred, gt, mask = trainer.render_pipeline(v), v.image, v.mask
        if resize:
            w, h = resize
            pred, gt = _resize(pred, w, h), _resize(gt, w, h)
            mask = _resize(mask.astype(np.float64), w, h) >= 0.5
        has = bool(mask.any())
        rows.append({"view": v.name, "psnr": L.psnr(pred, gt), "ssim": L.ssim(pred, gt),
                     "psnr_mirror": L.psnr(pred, gt, mask) if has else float("nan"),
                     "ssim_mirror": L.ssim(pred, gt, mask) if has else float("nan")})
    return rows


def cmd_eval(args) -> int:
    ck_path = Path(args.checkpoint)
    cfg = _saved_config(ck_path, args)
    ds = load_dataset(args.dataset)
    views = ds.split(args.split)
    if not views:
        raise DatasetError(f"split {args.split!r} is empty")
    tr = _trainer_from_checkpoint(ck_path, ds, cfg)
    rows = evaluate_views(tr, views, args.resize)
    out = Path(args.out) if args.out else ck_path.parent / f"eval_{args.split}.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow([r["view"]] + [repr(float(r[k])) for k in EVAL_COLUMNS[1:]])
    print(f"{'view':<12}{'psnr':>10}{'ssim':>9}{'psnr_m':>10}{'ssim_m':>9}")
    for r in rows:
        print(f"{r['view']:<12}{r['psnr']:>10.3f}{r['ssim']:>9.4f}{r['psnr_mirror']:>10.3f}{r['ssim_mirror']:>9.4f}")
    means = {k: float(np.nanmean([r[k] for r in rows])) if any(np.isfinite(r[k]) for r in rows) else float("nan")
             for k in EVAL_COLUMNS[1:]}
    print(f"{'mean':<12}{means['psnr']:>10.3f}{means['ssim']:>9.4f}{means['psnr_mirror']:>10.3f}"
          f"{means['ssim_mirror']:>9.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_plane(args) -> int:
    ck_path = Path(args.checkpoint)
    cfg = _saved_config(ck_path, args)
    ds = load_dataset(args.dataset)
    tr = _trainer_from_checkpoint(ck_path, ds, cfg)
    if not any(v.has_mirror for v in ds.train):
        raise InsufficientMirrorPixels("dataset has no mirror masks; cannot estimate a plane")
    tr.plane = None
    est = tr.run_plane_initialization()
    p = est.plane
    print(f"source view {est.source_view}: normal {np.array2string(p.normal, precision=5)} offset {p.offset:.5f}")
    print(f"inliers {est.inlier_count} / {est.points_used}")
    gt = ds.ground_truth
    if gt:
        ref = Plane(np.asarray(gt["normal"], dtype=np.float64), float(gt["offset"]))
        if p.normal @ ref.normal < 0:
            ref = ref.flipped()
        print(f"angle error {p.angle_to(ref):.4f} deg; offset error {abs(p.offset - ref.offset):.5f}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    p.add_argument("--seed", type=int, default=None, help="master random seed")
    p.add_argument("--threads", type=int, default=None,
                   help="rasterizer threads (default: MIRRORSPLAT_THREADS or 1)")
    if config:
        p.add_argument("--preset", choices=("desk", "full"), default="desk",
                       help="desk-scale schedule (default) or full-scale defaults")
        p.add_argument("--config", help="JSON file of config overrides")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="mirrorsplat", description=__doc__.splitlines()[0],
                                     epilog=config_help(), formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic mirror room")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spec", help="JSON synthetic scene spec (defaults otherwise)")
    p.add_argument("--variant", choices=("fused", "mirror_world"), default="fused")
    _common(p, config=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run every training stage", epilog=config_help(), formatter_class=fmt)
    p.add_argument("dataset", help="manifest.json")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", help="manifest.json (for --view)")
    p.add_argument("--view", help="dataset view name")
    p.add_argument("--camera", help="JSON camera record (fx, fy, cx, cy, width, height, world_to_camera)")
    p.add_argument("--channels", default="color", help=f"comma list from {','.join(CHANNELS)}")
    p.add_argument("--fused", action="store_true", help="fuse the virtual view inside the mirror mask")
    p.add_argument("--out", required=True, help="output path prefix; files are <prefix>_<channel>.png")
    _common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR / SSIM per view, full frame and mirror region")
    p.add_argument("checkpoint")
    p.add_argument("dataset", help="manifest.json")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--resize", type=int, nargs=2, metavar=("W", "H"), help="resize before scoring")
    p.add_argument("--out", help="CSV path (default: eval_<split>.csv next to the checkpoint)")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plane", help="estimate the mirror plane from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset", help="manifest.json")
    _common(p)
    p.set_defaults(func=cmd_plane)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads is not None:
        os.environ["MIRRORSPLAT_THREADS"] = str(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, ImageIOError, InsufficientMirrorPixels, DegenerateNormals,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
