"""Adam, the cosine learning-rate schedule and the crop-sampling training loop."""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field as dc_field, fields
from typing import Callable, Optional

import numpy as np

from . import field, loss, render
from .field import VoxelGrid

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "lr", "mse", "l_off", "l_div", "l_tv", "total")


@dataclass
class TrainConfig:
    lr_start: float = 2e-4
    lr_end: float = 5e-5
    total_steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_res: int = 32
    full_res: int = 256
    warmup_steps: Optional[int] = None  # None -> 10% of total_steps
    crop_size: int = 32
    batch_rays: int = 1024
    seed: int = 0
    # scene / model
    grid_resolution: int = 32
    order: int = 5
    aabb: list = dc_field(default_factory=lambda: [[-1.5, -1.5, -1.5], [1.5, 1.5, 1.5]])
    canonical_mode: str = "subtract_first"
    near: float = 2.0
    far: float = 6.0
    n_samples: int = 64
    background: list = dc_field(default_factory=lambda: [1.0, 1.0, 1.0])
    motion_lr_scale: float = 1.0
    # Time curriculum: frames with time <= window(step) are eligible, the
    # window growing linearly from curriculum_start to 1 over the first
    # curriculum_fraction of training. 0 disables it.
    curriculum_fraction: float = 0.0
    curriculum_start: float = 0.1
    checkpoint_every: int = 0
    # loss weights, mirrored from LossWeights
    lambda_div: float = 0.3
    lambda_off: float = 30.0
    lambda_r: float = 0.3
    lambda_tv: float = 1e-3
    tv_sample_fraction: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")
        if self.warmup_res > self.full_res:
            raise ValueError("warmup_res must not exceed full_res")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.warmup_steps is None:
            self.warmup_steps = self.total_steps // 10
        if not 0.0 <= self.curriculum_fraction <= 1.0:
            raise ValueError("curriculum_fraction must lie in [0, 1]")

    @property
    def loss_weights(self) -> loss.LossWeights:
        return loss.LossWeights(self.lambda_div, self.lambda_off, self.lambda_r,
                                self.lambda_tv, self.tv_sample_fraction)

    @property
    def render_config(self) -> render.RenderConfig:
        return render.RenderConfig(self.n_samples, tuple(self.background), False,
                                   self.canonical_mode)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Cosine anneal from lr_start at step 0 to lr_end at total_steps."""
    if cfg.total_steps == 0:
        return cfg.lr_start
    frac = min(max(step / cfg.total_steps, 0.0), 1.0)
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr, beta1=0.9, beta2=0.999,
              eps=1e-8, labels: Optional[dict] = None) -> None:
    """In-place bias-corrected Adam update of every array in ``params``.

    ``lr`` may be a float or a dict of per-block rates. Non-finite gradients
    raise ``FloatingPointError`` naming the column (via ``labels``).
    """
    for name, g in grads.items():
        bad = ~np.isfinite(g)
        if bad.any():
            col = int(np.argwhere(bad)[0][-1]) if g.ndim > 1 else 0
            label = labels[name][col] if labels else f"column {col}"
            raise FloatingPointError(f"non-finite gradient in {name}:{label}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        rate = lr[name] if isinstance(lr, dict) else lr
        p -= rate * (m / c1) / (np.sqrt(v / c2) + eps)


def time_window(step: int, cfg: TrainConfig) -> float:
    """Latest frame time eligible for sampling at ``step``."""
    ramp = cfg.curriculum_fraction * cfg.total_steps
    if ramp <= 0 or step >= ramp:
        return 1.0
    return cfg.curriculum_start + (1.0 - cfg.curriculum_start) * step / ramp


def downscale(image: np.ndarray, res: int) -> np.ndarray:
    """Area-average an ``(H, W, C)`` image to ``(res, res, C)``."""
    H, W = image.shape[:2]
    if (H, W) == (res, res):
        return image
    if H % res == 0 and W % res == 0:
        fy, fx = H // res, W // res
        return image.reshape(res, fy, res, fx, -1).mean(axis=(1, 3))
    from PIL import Image
    chans = [np.asarray(Image.fromarray(image[..., c].astype(np.float32), mode="F")
                        .resize((res, res), Image.Resampling.BOX), dtype=np.float64)
             for c in range(image.shape[2])]
    return np.stack(chans, axis=-1)


class _Tier:
    """Per-resolution cache of downscaled images and their ray bundles."""

    def __init__(self, frames, res, cfg):
        self.images = [downscale(f.image, res).reshape(-1, 3) for f in frames]
        self.rays = [render.generate_rays(f.camera.resized(res, res), cfg.near, cfg.far)
                     for f in frames]
        self.res = res


def train_loop(grid: VoxelGrid, frames, cfg: TrainConfig,
               checkpoint_path=None, callback: Optional[Callable] = None):
    """Fit ``grid`` in place to ``frames``; returns ``(grid, trace)``.

    Each step draws one frame and one square crop at the current resolution
    tier, renders it at the frame's time and takes one Adam step. ``trace``
    holds one dict per step with the columns of :data:`TRACE_COLUMNS`.
    """
    if not frames:
        raise ValueError("training needs at least one frame")
    rng = np.random.default_rng(cfg.seed)
    size = min(frames[0].image.shape[0], frames[0].image.shape[1])
    full = min(cfg.full_res, size)
    warm = min(cfg.warmup_res, full)
    tiers = {}
    lw = cfg.loss_weights
    rcfg = cfg.render_config
    state = AdamState.zeros_like(grid.blocks())
    labels = {b: grid.column_labels(b) for b in field.BLOCKS}
    trace = []
    by_time = sorted(range(len(frames)), key=lambda k: frames[k].time)

    for step in range(cfg.total_steps):
        res = warm if step < cfg.warmup_steps else full
        if res not in tiers:
            tiers[res] = _Tier(frames, res, cfg)
        tier = tiers[res]
        limit = time_window(step, cfg)
        eligible = [k for k in by_time if frames[k].time <= limit] or by_time[:1]
        k = eligible[int(rng.integers(len(eligible)))]
        crop = min(cfg.crop_size, res)
        y0, x0 = (int(v) for v in rng.integers(0, res - crop + 1, size=2))
        rows = np.arange(y0, y0 + crop)[:, None] * res + np.arange(x0, x0 + crop)
        pix = rows.ravel()
        if pix.size > cfg.batch_rays:
            pix = np.sort(rng.choice(pix, cfg.batch_rays, replace=False))

        lr = lr_at(step, cfg)
        out = render.march(grid, tier.rays[k].subset(pix), frames[k].time, rcfg, rng)
        report = loss.evaluate(grid, out, tier.images[k][pix], lw, rng)
        adam_step(grid.blocks(), report.grad, state,
                  {"radiance": lr, "motion": lr * cfg.motion_lr_scale},
                  cfg.beta1, cfg.beta2, cfg.eps, labels)
        if not grid.all_finite():
            raise FloatingPointError(f"non-finite parameters after step {step}")

        row = {"step": step, "lr": lr, **report.row()}
        trace.append(row)
        if callback is not None:
            callback(row)
        if checkpoint_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            field.save_grid(grid, checkpoint_path)
    return grid, trace


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow([row["step"]] + [repr(float(row[c])) for c in TRACE_COLUMNS[1:]])


def read_trace(path) -> list:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]
