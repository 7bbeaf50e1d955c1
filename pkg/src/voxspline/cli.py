"""Command line entry point: synth, train, render, eval and flow."""

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import data, field, metrics, optim, render
from .render import Camera

log = logging.getLogger("voxspline")


def sidecar(ckpt, kind: str) -> str:
    """Path of a file written next to a checkpoint (``loss.csv``, ``config.json``)."""
    return os.path.splitext(ckpt)[0] + "." + kind


def load_config(path) -> optim.TrainConfig:
    if path is None:
        return optim.TrainConfig()
    with open(path) as f:
        return optim.TrainConfig.from_dict(json.load(f))


def config_for(ckpt) -> optim.TrainConfig:
    """The training config saved beside ``ckpt``, or defaults when missing."""
    path = sidecar(ckpt, "config.json")
    return load_config(path) if os.path.exists(path) else optim.TrainConfig()


def load_camera(path) -> Camera:
    with open(path) as f:
        return Camera.from_json(json.load(f))


def render_frame(grid, camera, time, cfg: optim.TrainConfig) -> dict:
    rcfg = render.RenderConfig(cfg.n_samples, tuple(cfg.background), True, cfg.canonical_mode)
    return render.render_image(grid, camera, time, rcfg, cfg.near, cfg.far)


def project_flow(flow: np.ndarray, camera: Camera) -> np.ndarray:
    """Scene motion per pixel in camera right/up coordinates, ``(..., 2)``.

    ``flow`` is the composited ray-bending offset, which points from the
    observed position back to the canonical one, so the motion is its negative.
    """
    rot = camera.c2w[:3, :3]
    motion = -np.asarray(flow)
    return np.stack([motion @ rot[:, 0], motion @ rot[:, 1]], axis=-1)


def hue_wheel(angle: np.ndarray) -> np.ndarray:
    """Fully saturated color for a direction angle in radians."""
    h = np.mod(angle / (2.0 * np.pi), 1.0)[..., None]
    k = np.array([3.0, 2.0, 4.0])
    sign = np.array([1.0, -1.0, -1.0])
    base = np.array([-1.0, 2.0, 2.0])
    return np.clip(base + sign * np.abs(6.0 * h - k), 0.0, 1.0)


def flow_to_rgb(flow2d: np.ndarray, max_flow: float) -> np.ndarray:
    """Direction as hue, magnitude as distance from mid-gray (zero motion)."""
    if not max_flow > 0:
        raise ValueError("max_flow must be positive")
    mag = np.minimum(np.linalg.norm(flow2d, axis=-1) / max_flow, 1.0)[..., None]
    wheel = hue_wheel(np.arctan2(flow2d[..., 1], flow2d[..., 0]))
    return 0.5 + mag * (wheel - 0.5)


def cmd_synth(args) -> int:
    with open(args.spec) as f:
        spec = data.SynthSpec.from_dict(json.load(f))
    data.generate_synthetic(spec, args.out)
    log.info("wrote synthetic dataset to %s", args.out)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg.total_steps = args.steps
        cfg.warmup_steps = None
        cfg.__post_init__()
    if args.seed is not None:
        cfg.seed = args.seed
    ds = data.load_dataset(args.data, tuple(cfg.background), splits=("train",))
    grid = field.grid_init(cfg.grid_resolution, cfg.aabb, cfg.order, seed=cfg.seed,
                           mode=cfg.canonical_mode)

    def progress(row):
        if row["step"] % 100 == 0 or row["step"] == cfg.total_steps - 1:
            log.info("step %d lr %.3g mse %.5f total %.5f", row["step"], row["lr"],
                     row["mse"], row["total"])

    grid, trace = optim.train_loop(grid, ds.train, cfg, args.out, progress)
    field.save_grid(grid, args.out)
    optim.write_trace(trace, sidecar(args.out, "loss.csv"))
    with open(sidecar(args.out, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
    log.info("saved %s", args.out)
    return 0


def parse_times(text: str) -> list:
    times = [float(t) for t in text.split(",") if t.strip()]
    if not times:
        raise ValueError("no times given")
    bad = [t for t in times if not 0.0 <= t <= 1.0]
    if bad:
        raise ValueError(f"times outside [0, 1]: {bad}")
    return times


def cmd_render(args) -> int:
    grid = field.load_grid(args.ckpt)
    cfg = config_for(args.ckpt)
    camera = load_camera(args.camera)
    times = parse_times(args.times)
    os.makedirs(args.out, exist_ok=True)
    rng = None if args.deterministic else np.random.default_rng(args.seed)
    rcfg = render.RenderConfig(cfg.n_samples, tuple(cfg.background), args.deterministic,
                               cfg.canonical_mode)
    for n, t in enumerate(times):
        img = render.render_image(grid, camera, t, rcfg, cfg.near, cfg.far, rng=rng)
        data.write_png(os.path.join(args.out, f"frame_{n:04d}.png"), img["rgb"])
    log.info("wrote %d frames to %s", len(times), args.out)
    return 0


def _frame_metrics(job):
    grid, frame, cfg = job
    pred = render_frame(grid, frame.camera, frame.time, cfg)["rgb"]
    gt = frame.image
    try:
        ms = metrics.ms_ssim(pred, gt)
    except ValueError:
        ms = None  # too small for five scales
    return {"file_path": frame.file_path, "time": frame.time,
            "psnr": metrics.psnr(pred, gt), "ssim": metrics.ssim(pred, gt), "ms_ssim": ms}


def summarize(rows: list) -> dict:
    out = {}
    for key in ("psnr", "ssim", "ms_ssim"):
        vals = [r[key] for r in rows if r[key] is not None]
        out[key] = ({"mean": float(np.mean(vals)), "median": float(np.median(vals))}
                    if vals else None)
    return out


def evaluate_split(grid, frames, cfg, workers: int = 1) -> dict:
    jobs = [(grid, fr, cfg) for fr in frames]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_frame_metrics, jobs))
    else:
        rows = [_frame_metrics(j) for j in jobs]
    return {"frames": rows, "summary": summarize(rows)}


def format_table(report: dict) -> str:
    def cell(v):
        return "   n/a" if v is None else f"{v:7.4f}"
    lines = [f"{'frame':<24} {'time':>6} {'PSNR':>8} {'SSIM':>7} {'MS-SSIM':>7}"]
    for r in report["frames"]:
        lines.append(f"{r['file_path']:<24} {r['time']:6.3f} {r['psnr']:8.3f} "
                     f"{cell(r['ssim'])} {cell(r['ms_ssim'])}")
    for stat in ("mean", "median"):
        vals = [report["summary"][k][stat] if report["summary"][k] else None
                for k in ("psnr", "ssim", "ms_ssim")]
        lines.append(f"{stat:<24} {'':>6} {vals[0]:8.3f} {cell(vals[1])} {cell(vals[2])}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    grid = field.load_grid(args.ckpt)
    cfg = config_for(args.ckpt)
    frames = data.load_dnerf(args.data, args.split, tuple(cfg.background))
    if not frames:
        raise ValueError(f"split {args.split!r} has no frames")
    report = evaluate_split(grid, frames, cfg, args.workers)
    print(format_table(report))
    if args.json:
        with open(args.json, "w") as f:
            json.dump(report, f, indent=2)
    return 0


def cmd_flow(args) -> int:
    grid = field.load_grid(args.ckpt)
    cfg = config_for(args.ckpt)
    camera = load_camera(args.camera)
    t = parse_times(str(args.time))[0]
    flow = render_frame(grid, camera, t, cfg)["flow"]
    data.write_png(args.out, flow_to_rgb(project_flow(flow, camera), args.max_flow))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxspline", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the moving-sphere dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="fit a grid to a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render a PNG per time")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--times", required=True, help="comma separated, e.g. 0,0.5,1")
    s.add_argument("--out", required=True)
    s.add_argument("--deterministic", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="PSNR / SSIM / MS-SSIM on a split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--json")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("flow", help="color-coded motion image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--time", type=float, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-flow", type=float, default=0.5)
    s.set_defaults(func=cmd_flow)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (OSError, ValueError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
