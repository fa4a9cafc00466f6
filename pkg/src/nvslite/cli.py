"""Operator command line: data generation, training, inference, eval, bench.

Every flag can also come from a YAML config file (flat key: value mapping
using the flag names with underscores); explicit command-line values win.
Exit codes: 0 success, 1 validation failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import bench as bench_mod
from . import data as data_mod
from .compositor import synthesize
from .geometry import Extrinsics, Intrinsics, PoseSamplerConfig, sample_pose
from .metrics import evaluate, format_report
from .model import ModelConfig, NVSModel, load_checkpoint
from .teachers import neighborhood_fill
from .training import LossSchedule, TrainConfig, fit
from .warp import forward_warp, make_labels


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="nvslite", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="YAML file providing defaults for any flag")
        p.add_argument("--seed", type=int, default=None)

    g = sub.add_parser("gen-data", help="emit warp labels for a sample directory")
    add_common(g)
    g.add_argument("--root", default=None, help="dataset root (rgb/, depth/, pose/)")
    g.add_argument("--out", default=None, help="output directory")
    g.add_argument("--backend", choices=["reference", "native"], default=None)
    g.add_argument("--max-translation", type=float, default=None)
    g.add_argument("--max-rotation-deg", type=float, default=None)

    t = sub.add_parser("train", help="fit a model on a dataset")
    add_common(t)
    t.add_argument("--root", default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--crop", type=int, default=None)
    t.add_argument("--hflip", type=int, choices=[0, 1], default=None)
    t.add_argument("--backend", choices=["reference", "native"], default=None)
    t.add_argument("--activation-epoch", type=int, default=None)
    t.add_argument("--base-channels", type=int, default=None)
    t.add_argument("--encoder-stages", type=int, default=None)
    t.add_argument("--extrinsics-hidden", type=int, default=None)
    t.add_argument("--extrinsics-out", type=int, default=None)
    t.add_argument("--skip-targets", default=None,
                   help="comma list from {flow,mask,inpaint}; empty string for none")
    t.add_argument("--flow-scale", type=float, default=None)
    t.add_argument("--max-translation", type=float, default=None)
    t.add_argument("--max-rotation-deg", type=float, default=None)

    i = sub.add_parser("infer", help="synthesize one novel view")
    add_common(i)
    i.add_argument("--ckpt", default=None)
    i.add_argument("--image", default=None)
    i.add_argument("--depth", default=None)
    i.add_argument("--pose", default=None,
                   help="pose file with 12 floats, or 'identity'")
    i.add_argument("--out", default=None, help="output directory")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    add_common(e)
    e.add_argument("--ckpt", default=None)
    e.add_argument("--root", default=None)
    e.add_argument("--out", default=None, help="optional report CSV path")
    e.add_argument("--oracle", action="store_true",
                   help="score the label generator against itself")
    e.add_argument("--max-translation", type=float, default=None)
    e.add_argument("--max-rotation-deg", type=float, default=None)

    b = sub.add_parser("bench", help="latency/structure report")
    add_common(b)
    b.add_argument("--ckpt", default=None)
    b.add_argument("--mode", choices=["both", "sequential", "parallel"], default=None)
    b.add_argument("--res", default=None, help="e.g. 224,512,762x1008")
    b.add_argument("--runs", type=int, default=None)
    b.add_argument("--out", default=None, help="optional CSV path")
    return parser


def _merge_config(args: argparse.Namespace) -> dict:
    """Layer CLI values over config-file values over nothing."""
    merged = {}
    if getattr(args, "config", None):
        loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config}: config must be a mapping")
        merged.update({str(k): v for k, v in loaded.items()})
    for key, value in vars(args).items():
        if key in ("command", "config"):
            continue
        if value is not None and value is not False:
            merged[key] = value
    return merged


def _opt(cfg: dict, key: str, default=None, cast=None):
    value = cfg.get(key, default)
    if value is None:
        return None
    return cast(value) if cast else value


def _require(cfg: dict, key: str):
    value = cfg.get(key)
    if value is None:
        raise UsageError(f"missing required option --{key.replace('_', '-')}")
    return value


def _pose_cfg(cfg: dict, seed: int) -> PoseSamplerConfig:
    return PoseSamplerConfig(
        max_translation=_opt(cfg, "max_translation", 0.05, float),
        max_rotation_deg=_opt(cfg, "max_rotation_deg", 2.0, float),
        seed=seed,
    )


def _model_config(cfg: dict) -> ModelConfig:
    kwargs = {}
    for key, cast in (("base_channels", int), ("encoder_stages", int),
                      ("extrinsics_hidden", int), ("extrinsics_out", int),
                      ("flow_scale", float)):
        value = _opt(cfg, key, cast=cast)
        if value is not None:
            kwargs[key] = value
    targets = cfg.get("skip_targets")
    if targets is not None:
        names = [t for t in str(targets).split(",") if t]
        kwargs["skip_targets"] = frozenset(names)
    return ModelConfig(**kwargs)


def _load_dataset(root):
    records = data_mod.discover(root)
    if not records:
        raise UsageError(f"no samples under {root}")
    frames = [data_mod.load_sample(rec) for rec in records]
    poses = [data_mod.load_pose(rec.pose_path) if rec.pose_path else None
             for rec in records]
    stems = [rec.image_path.stem for rec in records]
    return frames, poses, stems


def _shift_viz(shift: np.ndarray) -> np.ndarray:
    """Offsets as colors: dx -> red, dy -> green around mid-gray."""
    peak = max(1.0, float(np.abs(shift).max()))
    viz = np.full(shift.shape[:2] + (3,), 0.5, dtype=np.float32)
    viz[..., 0] = 0.5 + shift[..., 0] / (2 * peak)
    viz[..., 1] = 0.5 + shift[..., 1] / (2 * peak)
    return np.clip(viz, 0.0, 1.0)


def _resolve_warp(backend: str):
    if backend == "native":
        from .native import forward_warp_native
        return forward_warp_native
    return forward_warp


def cmd_gen_data(cfg: dict) -> int:
    root = _require(cfg, "root")
    out = Path(_require(cfg, "out"))
    seed = _opt(cfg, "seed", 0, int)
    warp_fn = _resolve_warp(_opt(cfg, "backend", "reference"))
    frames, poses, stems = _load_dataset(root)
    pose_cfg = _pose_cfg(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    for i, (frame, frozen, stem) in enumerate(zip(frames, poses, stems)):
        T = frozen if frozen is not None else sample_pose(
            pose_cfg, frame.median_depth(),
            rng=np.random.default_rng(np.random.SeedSequence([seed, i])))
        K = Intrinsics.default(frame.width, frame.height)
        sample = make_labels(frame, T, K, neighborhood_fill, warp_fn=warp_fn)
        data_mod.save_shift_raw(out / f"{stem}_shift.nvss", sample.shift)
        data_mod.save_image_png(out / f"{stem}_mask.png", sample.mask)
        data_mod.save_image_png(out / f"{stem}_warped.png",
                                sample.target * sample.mask[..., None])
        data_mod.save_image_png(out / f"{stem}_target.png", sample.target)
        data_mod.save_pose(out / f"{stem}_pose.txt", T)
    print(f"wrote labels for {len(frames)} samples to {out}")
    return 0


def cmd_train(cfg: dict) -> int:
    root = _require(cfg, "root")
    out = Path(_require(cfg, "out"))
    seed = _opt(cfg, "seed", 0, int)
    train_cfg = TrainConfig(
        epochs=_opt(cfg, "epochs", 20, int),
        lr=_opt(cfg, "lr", 1e-4, float),
        batch_size=_opt(cfg, "batch_size", 32, int),
        crop=_opt(cfg, "crop", 224, int),
        hflip=bool(_opt(cfg, "hflip", 1, int)),
        seed=seed,
        warp_backend=_opt(cfg, "backend", "reference"),
    )
    schedule = LossSchedule(activation_epoch=_opt(cfg, "activation_epoch", 5, int))
    frames, _, _ = _load_dataset(root)
    torch.manual_seed(seed)
    model = NVSModel(_model_config(cfg))
    rows, ckpt = fit(frames, model, train_cfg, pose_cfg=_pose_cfg(cfg, seed),
                     schedule=schedule, out_dir=out)
    if rows:
        last = rows[-1]
        print(f"epoch {last['epoch']}: L_flow={last['L_flow']:.4f} "
              f"L_mask={last['L_mask']:.4f} L_inpaint={last['L_inpaint']:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_infer(cfg: dict) -> int:
    ckpt = _require(cfg, "ckpt")
    out = Path(_require(cfg, "out"))
    record = data_mod.SampleRecord(image_path=Path(_require(cfg, "image")),
                                   depth_path=Path(_require(cfg, "depth")))
    frame = data_mod.load_sample(record)
    pose_arg = _require(cfg, "pose")
    T = Extrinsics.identity() if pose_arg == "identity" else data_mod.load_pose(pose_arg)
    model, _ = load_checkpoint(ckpt)
    pred = model.predict(frame, T)
    view = synthesize(frame.rgb, pred["shift"], pred["mask"], pred["inpaint"])
    out.mkdir(parents=True, exist_ok=True)
    data_mod.save_image_png(out / "view.png", view)
    data_mod.save_image_png(out / "mask.png", pred["mask"])
    data_mod.save_image_png(out / "inpaint.png", pred["inpaint"])
    data_mod.save_image_png(out / "shift_viz.png", _shift_viz(pred["shift"]))
    data_mod.save_shift_raw(out / "shift.nvss", pred["shift"])
    print(f"wrote view + intermediates to {out}")
    return 0


def cmd_eval(cfg: dict) -> int:
    root = _require(cfg, "root")
    seed = _opt(cfg, "seed", 0, int)
    frames, frozen, _ = _load_dataset(root)
    poses = frozen if all(p is not None for p in frozen) else None
    model = None
    if not cfg.get("oracle"):
        model, _ = load_checkpoint(_require(cfg, "ckpt"))
    report = evaluate(model, frames, poses=poses, seed=seed,
                      pose_cfg=_pose_cfg(cfg, seed))
    print(format_report(report))
    out = _opt(cfg, "out")
    if out:
        with open(out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["column", "lpips", "psnr", "ssim"])
            for column in ("warping", "inpainting"):
                r = report[column]
                writer.writerow([column, r["lpips"] if r["lpips"] is not None else "absent",
                                 f"{r['psnr']:.4f}", f"{r['ssim']:.4f}"])
            writer.writerow(["mask_iou", "", f"{report['mask_iou']:.4f}", ""])
        print(f"report: {out}")
    return 0


def _parse_resolutions(text: str):
    resolutions = []
    for chunk in str(text).split(","):
        chunk = chunk.strip().lower()
        if not chunk:
            continue
        if "x" in chunk:
            h, w = chunk.split("x")
            resolutions.append((int(h), int(w)))
        else:
            resolutions.append((int(chunk), int(chunk)))
    if not resolutions:
        raise UsageError(f"no resolutions in {text!r}")
    return resolutions


def cmd_bench(cfg: dict) -> int:
    model, _ = load_checkpoint(_require(cfg, "ckpt"))
    mode = _opt(cfg, "mode", "both")
    modes = ("sequential", "parallel") if mode == "both" else (mode,)
    resolutions = _parse_resolutions(_opt(cfg, "res", "224,512,762x1008"))
    rows = bench_mod.run_bench(model, resolutions=resolutions,
                               runs=_opt(cfg, "runs", 10, int),
                               modes=modes, seed=_opt(cfg, "seed", 0, int))
    print(bench_mod.format_bench(rows))
    out = _opt(cfg, "out")
    if out:
        with open(out, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        print(f"report: {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        cfg = _merge_config(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
