"""Command line entry point: ``equisplat train|render|eval|convert-colmap``.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .camera import EquirectCamera, PerspectiveCamera, Pose, yaw_pitch_rotation
from .crops import cube_map_views, perspective_crop
from .dataio import (
    MetricsLog,
    convert_colmap,
    load_checkpoint,
    load_dataset,
    load_manifest,
    load_optimizer_state,
    load_ply,
    optimizer_state_path,
    read_structured,
    save_checkpoint,
    save_image,
    save_optimizer_state,
    write_structured,
)
from .errors import EquisplatError
from .evaluation import OMNI, PERSPECTIVE_CROP, evaluate
from .rasterizer import THREADS_ENV, render, set_num_threads
from .trainer import TrainConfig, Trainer

log = logging.getLogger("equisplat")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class InputError(Exception):
    """Bad user input detected by the CLI itself."""


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One override flag per TrainConfig field."""
    group = parser.add_argument_group("training options (override the config file)")
    defaults = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        default = getattr(defaults, f.name)
        if isinstance(default, tuple):
            group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", type=float, nargs=len(default),
                               metavar=("R", "G", "B"), help=f"default: {' '.join(map(str, default))}")
        else:
            group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", type=type(default), metavar="N",
                               help=f"default: {default}")


def resolve_config(args) -> TrainConfig:
    values = {}
    if args.config is not None:
        values.update(read_structured(args.config))
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None:
            values[f.name] = v
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid training configuration: {exc}") from exc


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    manifest = load_manifest(args.manifest)
    dataset = load_dataset(manifest)
    if not dataset.train:
        raise InputError(f"{manifest.path}: training split is empty")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_structured(cfg.to_dict(), out / "config.yaml")

    cloud = None
    init_points = None
    if args.resume is not None:
        cloud = load_checkpoint(args.resume)
        if cloud.sh_degree != cfg.sh_degree:
            raise InputError(f"{args.resume}: sh_degree {cloud.sh_degree} differs from config {cfg.sh_degree}")
    else:
        if manifest.points is None:
            raise InputError(f"{manifest.path}: no 'points' file to initialize from")
        points = load_ply(manifest.points)
        init_points = (points.positions, points.colors_unit())
    trainer = Trainer(dataset, init_points, cfg, cloud=cloud)
    if args.resume is not None:
        trainer.load_state_dict(load_optimizer_state(optimizer_state_path(args.resume)))

    def checkpoint(path: Path) -> None:
        save_checkpoint(trainer.cloud, path)
        save_optimizer_state(trainer.state_dict(), optimizer_state_path(path))

    ckpt_dir = out / "checkpoints"
    t0 = time.perf_counter()
    with MetricsLog(out / "metrics.jsonl") as metrics:
        while trainer.iteration < cfg.iterations:
            rec = trainer.step()
            j = rec.iteration
            if rec.edit is not None:
                metrics.write({"event": "densify", "iteration": j, **rec.edit.as_dict()})
            if j == 1 or j % cfg.log_interval == 0 or j == cfg.iterations:
                elapsed = time.perf_counter() - t0
                metrics.write({"event": "train", "iteration": j, "loss": rec.loss, "count": rec.count,
                               "elapsed": elapsed})
                log.info("iter %d  loss %.5f  gaussians %d  %.1fs", j, rec.loss, rec.count, elapsed)
            if cfg.checkpoint_interval and j % cfg.checkpoint_interval == 0:
                ckpt_dir.mkdir(exist_ok=True)
                checkpoint(ckpt_dir / f"iteration_{j:06d}.ply")
        final = out / "final.ply"
        checkpoint(final)
        if dataset.test and not args.no_eval:
            report = evaluate(trainer.cloud, dataset.test, dataset.camera, background=cfg.background)
            metrics.write({"event": "eval", "iteration": trainer.iteration, **report.to_dict()})
            log.info("held-out PSNR %.3f dB  SSIM %.4f", report.mean_psnr, report.mean_ssim)
    print(final)
    return EXIT_OK


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------


def _render_targets(args):
    """(name, pose, camera) for every panorama to render."""
    if args.pose is not None:
        if args.width is None or args.height is None:
            raise InputError("--pose needs --width and --height")
        pose = Pose.from_matrix(np.array(args.pose, dtype=np.float64))
        return [("pose", pose, EquirectCamera(args.width, args.height))]
    if args.manifest is None:
        raise InputError("give either --manifest or --pose")
    manifest = load_manifest(args.manifest, check_files=False)
    idx = {"train": manifest.train, "test": manifest.test, "all": range(len(manifest.frames))}[args.split]
    cam = manifest.camera
    return [(manifest.frames[i].name, manifest.frames[i].pose, cam) for i in idx]


def cmd_render(args) -> int:
    cloud = load_checkpoint(args.checkpoint)
    targets = _render_targets(args)
    crops = []
    for k, values in enumerate(args.perspective or []):
        fx, fy, cx, cy, w, h, yaw, pitch = values
        if w != int(w) or h != int(h):
            raise InputError("--perspective width and height must be integers")
        try:
            pcam = PerspectiveCamera(fx, fy, cx, cy, int(w), int(h))
        except ValueError as exc:
            raise InputError(f"--perspective: {exc}") from exc
        crops.append((f"persp{k}", pcam, yaw_pitch_rotation(np.radians(yaw), np.radians(pitch))))
    if args.cube_map is not None:
        crops.extend(cube_map_views(args.cube_map))

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for name, pose, cam in targets:
        image = np.clip(render(cloud, pose, cam, background=args.background).image, 0.0, 1.0)
        save_image(image, out / f"{name}.png")
        for tag, pcam, R in crops:
            save_image(perspective_crop(image, pcam, R), out / f"{name}_{tag}.png")
        print(out / f"{name}.png")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    cloud = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if args.split == "train":
        manifest.test = manifest.train
    manifest.train = []
    dataset = load_dataset(manifest)
    mode = PERSPECTIVE_CROP if args.perspective_crop else OMNI
    report = evaluate(cloud, dataset.test, dataset.camera, mode=mode, crop_size=args.crop_size,
                      background=args.background)
    for n, p, s in zip(report.names, report.psnr, report.ssim):
        print(f"{n}\tPSNR {p:.3f}\tSSIM {s:.4f}")
    print(f"mean\tPSNR {report.mean_psnr:.3f}\tSSIM {report.mean_ssim:.4f}\tFPS {report.fps:.2f} ({mode})")
    if args.output is not None:
        Path(args.output).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# convert-colmap
# ---------------------------------------------------------------------------


def cmd_convert_colmap(args) -> int:
    manifest = convert_colmap(args.colmap_dir, args.images_dir, args.output)
    print(f"{manifest.path}: {len(manifest.frames)} frames")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="equisplat", description="Gaussian splatting on equirectangular panoramas.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, help=f"kernel threads (default: ${THREADS_ENV} or all cores)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a Gaussian cloud from a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True, help="output directory")
    p.add_argument("-c", "--config", type=Path, help="YAML/JSON file with TrainConfig fields")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from (its .optim.npz must sit beside it)")
    p.add_argument("--no-eval", action="store_true", help="skip the held-out evaluation at the end")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render panoramas and optional perspective crops")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True, help="output directory")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--split", choices=("all", "train", "test"), default="all")
    p.add_argument("--pose", type=float, nargs=16, metavar="T", help="world-to-camera 4x4, row-major")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--perspective", type=float, nargs=8, action="append",
                   metavar=("FX", "FY", "CX", "CY", "W", "H", "YAW", "PITCH"),
                   help="pinhole crop; yaw/pitch in degrees (repeatable)")
    p.add_argument("--cube-map", type=int, metavar="SIZE", help="also write the six 90-degree cube faces")
    p.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("R", "G", "B"))
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM/FPS on a split")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--perspective-crop", action="store_true", help="score the six cube faces of every view")
    p.add_argument("--crop-size", type=int, help="cube face size (default: width / 4)")
    p.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("R", "G", "B"))
    p.add_argument("-o", "--output", type=Path, help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convert-colmap", help="COLMAP text export to manifest + PLY")
    p.add_argument("colmap_dir", type=Path, help="directory with cameras.txt, images.txt, points3D.txt")
    p.add_argument("images_dir", type=Path)
    p.add_argument("output", type=Path, help="manifest path to write")
    p.set_defaults(func=cmd_convert_colmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads is not None:
        set_num_threads(args.threads)
    try:
        return args.func(args)
    except (InputError, EquisplatError, FileNotFoundError) as exc:
        print(f"equisplat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"equisplat {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
