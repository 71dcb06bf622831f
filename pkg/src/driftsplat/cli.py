"""Command-line interface.

Subcommands: reconstruct (incremental scene + trajectory recovery),
render (one view of a saved scene), metrics (per-view PSNR/SSIM),
blend-demo (consistency blender on a frame directory with the synthetic
denoiser), sample-points (k-medoids query points from a mask).

Exit codes: 0 success, 2 validation error (bad arguments or malformed
inputs), 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import blend as blend_mod
from . import dataset_io, rasterizer
from .core import PoseSE3
from .expansion import ReconstructionError, expand_scene
from .pose import PoseDivergenceError


class ValidationError(ValueError):
    pass


_ABLATABLE = {"kea", "ipc", "pc"}


def _load_run_config(path):
    if path is None:
        return dataset_io.RunConfig()
    return dataset_io.load_config(path)


def _cmd_reconstruct(args) -> int:
    cfg = _load_run_config(args.config)
    if args.seed is not None:
        cfg.expansion.seed = args.seed
    if args.pose_mask_kea:
        cfg.pose.mask_kea = True
    if args.ablate:
        names = {s.strip() for s in args.ablate.split(",") if s.strip()}
        unknown = names - _ABLATABLE
        if unknown:
            raise ValidationError(f"unknown ablation targets: {sorted(unknown)}")
        if "kea" in names:
            cfg.loss_weights.lambda_kea = 0.0
        if "ipc" in names:
            cfg.loss_weights.lambda_ipc = 0.0
        if "pc" in names:
            cfg.loss_weights.lambda_pc = 0.0
    dataset = dataset_io.load_dataset(args.data)
    result = expand_scene(
        dataset.frames, dataset.intrinsics,
        config=cfg.expansion, weights=cfg.loss_weights, pose_config=cfg.pose,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset_io.save_scene(result.scene, result.trajectory, out, intrinsics=dataset.intrinsics)
    dataset_io.write_loss_history(out.parent / "loss_history.csv", result.loss_history)
    print(f"reconstructed {len(result.scene)} splats over {len(dataset.frames)} frames -> {out}")
    return 0


def _render_intrinsics(args, scene_path):
    sidecar = dataset_io.trajectory_sidecar_path(scene_path)
    if sidecar.exists():
        _, intr = dataset_io.load_trajectory(sidecar)
        if intr is not None:
            return intr
    if args.data:
        return dataset_io.load_dataset(args.data).intrinsics
    raise ValidationError(
        "no intrinsics: scene sidecar lacks them and --data was not given"
    )


def _cmd_render(args) -> int:
    scene_path = Path(args.scene)
    scene, trajectory = dataset_io.load_scene(scene_path)
    intr = _render_intrinsics(args, scene_path)
    if (args.pose_index is None) == (args.pose is None):
        raise ValidationError("exactly one of --pose-index and --pose is required")
    if args.pose_index is not None:
        if not 0 <= args.pose_index < len(trajectory):
            raise ValidationError(
                f"--pose-index {args.pose_index} out of range ({len(trajectory)} poses)"
            )
        c2w = trajectory[args.pose_index]
    else:
        with open(args.pose) as f:
            mat = np.array(json.load(f), dtype=np.float64).reshape(4, 4)
        c2w = PoseSE3.from_matrix(mat)
    out = rasterizer.render(scene, c2w.inverse(), intr)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    if args.channel == "color":
        dataset_io.save_image(path, out.color)
    elif args.channel == "identity":
        dataset_io.save_image(path, np.repeat(out.identity[..., 1:2], 3, axis=2))
    elif args.channel == "alpha":
        dataset_io.save_image(path, np.repeat(out.alpha[..., None], 3, axis=2))
    else:
        if path.suffix.lower() == ".pfm":
            dataset_io.write_pfm(path, out.depth.astype(np.float32))
        else:
            top = float(out.depth.max())
            scaled = out.depth / top if top > 0 else out.depth
            dataset_io.save_image(path, np.repeat(scaled[..., None], 3, axis=2))
    print(f"rendered {args.channel} -> {path}")
    return 0


def _cmd_metrics(args) -> int:
    scene, trajectory = dataset_io.load_scene(args.scene)
    dataset = dataset_io.load_dataset(args.data)
    reference = None
    if args.reference:
        reference, _ = dataset_io.load_scene(args.reference)
    metrics = dataset_io.compute_metrics(scene, trajectory, dataset, reference=reference)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(metrics, f, indent=2)
    print(f"mean PSNR {metrics['mean_psnr']:.2f} dB, mean SSIM {metrics['mean_ssim']:.4f} -> {path}")
    return 0


def _cmd_blend_demo(args) -> int:
    if not args.synthetic_denoiser:
        raise ValidationError("no denoiser backend selected; pass --synthetic-denoiser")
    cfg = _load_run_config(args.config).blend
    dataset = dataset_io.load_dataset(args.frames)
    masks = [f.mask for f in dataset.frames]
    rows = []
    edited = blend_mod.autoregressive_edit(
        dataset.frames, masks, blend_mod.SyntheticDenoiser(), cfg, trace=rows.append
    )
    out = Path(args.out)
    (out / "edited").mkdir(parents=True, exist_ok=True)
    for frame, image in zip(dataset.frames, edited):
        dataset_io.save_image(out / "edited" / f"{frame.index:05d}.png", np.clip(image, 0.0, 1.0))
    with open(out / "trace.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "step", "eps_tilde_mean", "eps_bar_mean",
                         "score_mean", "latent_mean"])
        for row in rows:
            writer.writerow([row["frame"], row["step"], repr(row["eps_tilde_mean"]),
                             repr(row["eps_bar_mean"]), repr(row["score_mean"]),
                             repr(row["latent_mean"])])
    print(f"edited {len(edited)} frames -> {out}")
    return 0


def _cmd_sample_points(args) -> int:
    mask = dataset_io.load_mask(args.mask)
    points = blend_mod.sample_query_points(mask, args.k, seed=args.seed)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump({"points": [[int(r), int(c)] for r, c in points]}, f, indent=2)
    print(f"sampled {len(points)} query points -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftsplat")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="incremental reconstruction from a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--pose-mask-kea", action="store_true")
    p.add_argument("--ablate", help="comma-separated loss names to zero: kea,ipc,pc")
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("render", help="render one view of a saved scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--pose-index", type=int)
    p.add_argument("--pose", help="JSON file with a row-major 4x4 camera-to-world matrix")
    p.add_argument("--out", required=True)
    p.add_argument("--channel", choices=["color", "identity", "alpha", "depth"], default="color")
    p.add_argument("--data", help="dataset directory supplying intrinsics when the sidecar lacks them")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("metrics", help="per-view PSNR/SSIM of a scene against a dataset")
    p.add_argument("--scene", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference", help="reference scene PLY for mean pairwise view PSNR")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("blend-demo", help="consistency blender over a frame directory")
    p.add_argument("--frames", required=True)
    p.add_argument("--synthetic-denoiser", action="store_true")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_blend_demo)

    p = sub.add_parser("sample-points", help="k-medoids query points from a mask PNG")
    p.add_argument("--mask", required=True)
    p.add_argument("-k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample_points)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ReconstructionError, PoseDivergenceError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
