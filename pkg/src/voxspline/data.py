"""D-NeRF style datasets and a synthetic moving-sphere generator.

The on-disk layout is ``transforms_{split}.json`` with ``camera_angle_x`` and a
``frames`` list (``file_path``, ``transform_matrix``, ``time``) next to RGBA
PNGs. The generator renders with its own analytic sphere tracer, not the
volume renderer, so its images can serve as ground truth for the renderer.
"""

import json
import os
import warnings
from dataclasses import asdict, dataclass, field as dc_field
from typing import Optional

import numpy as np
from PIL import Image

from . import spline
from .render import Camera, generate_rays, look_at

SPLITS = ("train", "val", "test")
SYNTH_SPEC_NAME = "synth_spec.json"


class DatasetError(ValueError):
    pass


@dataclass
class Frame:
    image: np.ndarray  # (H, W, 3) in [0, 1], composited onto the background
    camera: Camera
    time: float
    alpha: Optional[np.ndarray] = None
    file_path: str = ""


@dataclass
class Dataset:
    train: list
    val: list = dc_field(default_factory=list)
    test: list = dc_field(default_factory=list)
    background: tuple = (1.0, 1.0, 1.0)
    aabb: Optional[list] = None

    def __post_init__(self):
        if not self.train:
            raise DatasetError("dataset has no training frames")

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}")
        return getattr(self, name)


def read_png(path) -> np.ndarray:
    """PNG as float RGBA in [0, 1]; opaque alpha is added for RGB files."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    return arr


def write_png(path, image) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    mode = {3: "RGB", 4: "RGBA"}[arr.shape[-1]]
    Image.fromarray(arr, mode=mode).save(path)


def composite(rgba: np.ndarray, background) -> np.ndarray:
    a = rgba[..., 3:4]
    return rgba[..., :3] * a + np.asarray(background, dtype=np.float64) * (1.0 - a)


def _image_path(root, file_path) -> str:
    path = os.path.join(root, file_path)
    if not os.path.splitext(path)[1]:
        path += ".png"
    return os.path.normpath(path)


def load_dnerf(root, split: str = "train", background=(1.0, 1.0, 1.0)) -> list:
    """Read one split into a list of :class:`Frame`."""
    meta_path = os.path.join(root, f"transforms_{split}.json")
    if not os.path.exists(meta_path):
        raise FileNotFoundError(meta_path)
    try:
        with open(meta_path) as f:
            meta = json.load(f)
        angle = float(meta["camera_angle_x"])
        entries = meta["frames"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
        raise DatasetError(f"{meta_path}: malformed transforms file ({err})") from err

    frames = []
    for n, entry in enumerate(entries):
        try:
            c2w = np.asarray(entry["transform_matrix"], dtype=np.float64)
            rel = entry["file_path"]
            t = float(entry.get("time", 0.0))
        except (KeyError, TypeError, ValueError) as err:
            raise DatasetError(f"{meta_path}: frame {n} is malformed ({err})") from err
        if c2w.shape != (4, 4):
            raise DatasetError(f"{meta_path}: frame {n} transform is {c2w.shape}, expected 4x4")
        if not 0.0 <= t <= 1.0:
            warnings.warn(f"{meta_path}: frame {n} time {t} outside [0, 1], clamping")
            t = min(max(t, 0.0), 1.0)
        path = _image_path(root, rel)
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        rgba = read_png(path)
        H, W = rgba.shape[:2]
        frames.append(Frame(composite(rgba, background), Camera(angle, c2w, W, H), t,
                            rgba[..., 3], rel))
    if frames and len({fr.image.shape for fr in frames}) > 1:
        raise DatasetError(f"{meta_path}: image sizes differ within the split")
    return frames


def load_dataset(root, background=(1.0, 1.0, 1.0), splits=SPLITS) -> Dataset:
    parts = {s: (load_dnerf(root, s, background)
                 if os.path.exists(os.path.join(root, f"transforms_{s}.json")) else [])
             for s in splits}
    aabb = None
    spec_path = os.path.join(root, SYNTH_SPEC_NAME)
    if os.path.exists(spec_path):
        with open(spec_path) as f:
            aabb = json.load(f).get("aabb")
    return Dataset(parts.get("train", []), parts.get("val", []), parts.get("test", []),
                   tuple(background), aabb)


@dataclass
class SynthSpec:
    trajectory: list = dc_field(default_factory=lambda: [
        [-0.25, 0.0, 0.0], [-0.25, 0.0, 0.0], [0.25, 0.0, 0.0], [0.25, 0.0, 0.0]])
    radius: float = 0.5
    albedo: list = dc_field(default_factory=lambda: [0.9, 0.45, 0.2])
    light_dir: list = dc_field(default_factory=lambda: [0.4, -0.3, 1.0])
    n_train: int = 20
    n_test: int = 5
    n_val: int = 0
    resolution: int = 64
    seed: int = 0
    camera_angle_x: float = 0.6911112070083618
    orbit_radius: float = 4.0
    elevation_deg: list = dc_field(default_factory=lambda: [15.0, 50.0])
    aabb: list = dc_field(default_factory=lambda: [[-1.5, -1.5, -1.5], [1.5, 1.5, 1.5]])
    supersample: int = 1

    def __post_init__(self):
        traj = spline.as_polygon(self.trajectory)
        if traj.shape[-1] != 3:
            raise ValueError("trajectory points must be 3-vectors")
        lo, hi = np.asarray(self.aabb, dtype=np.float64)
        if self.radius <= 0 or np.any(traj - self.radius < lo) or np.any(traj + self.radius > hi):
            raise ValueError("sphere trajectory (plus radius) must stay inside the aabb")
        if self.n_train < 1 or self.resolution < 1 or self.supersample < 1:
            raise ValueError("n_train, resolution and supersample must be positive")
        if not np.linalg.norm(self.light_dir) > 0:
            raise ValueError("light_dir must be nonzero")

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthSpec":
        return cls(**obj)

    def center(self, t: float) -> np.ndarray:
        return spline.de_casteljau(self.trajectory, t)

    def displacement(self, t: float) -> np.ndarray:
        """True scene motion since the canonical frame: B(t) - B(0)."""
        return self.center(t) - self.center(0.0)


def intersect_sphere(origins, dirs, center, radius):
    """Nearest positive hit distance per ray, ``inf`` on a miss."""
    oc = origins - center
    b = np.sum(dirs * oc, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    root = np.sqrt(np.where(hit, disc, 0.0))
    s = -b - root
    s = np.where(s > 0.0, s, -b + root)
    return np.where(hit & (s > 0.0), s, np.inf)


def trace_sphere(spec: SynthSpec, camera: Camera, t: float) -> np.ndarray:
    """Analytic RGBA render of the Lambertian sphere at time ``t``."""
    ss = spec.supersample
    cam = camera.resized(camera.width * ss, camera.height * ss)
    rays = generate_rays(cam)
    center = spec.center(t)
    s = intersect_sphere(rays.origins, rays.dirs, center, spec.radius)
    hit = np.isfinite(s)
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    p = rays.origins + np.where(hit, s, 0.0)[:, None] * rays.dirs
    normal = (p - center) / spec.radius
    shade = np.maximum(0.0, normal @ light)[:, None] * np.asarray(spec.albedo)
    rgba = np.zeros((rays.origins.shape[0], 4))
    rgba[hit, :3] = shade[hit]
    rgba[hit, 3] = 1.0
    rgba = rgba.reshape(cam.height, cam.width, 4)
    if ss > 1:
        rgba = rgba.reshape(camera.height, ss, camera.width, ss, 4).mean(axis=(1, 3))
        # store straight (unpremultiplied) color as PNGs expect
        a = rgba[..., 3:4]
        rgba[..., :3] = np.where(a > 0, rgba[..., :3] / np.maximum(a, 1e-12), 0.0)
    return rgba


def orbit_camera(spec: SynthSpec, azimuth: float, elevation: float) -> Camera:
    r = spec.orbit_radius
    eye = r * np.array([np.cos(elevation) * np.cos(azimuth),
                        np.cos(elevation) * np.sin(azimuth),
                        np.sin(elevation)])
    return Camera(spec.camera_angle_x, look_at(eye), spec.resolution, spec.resolution)


def synth_frames(spec: SynthSpec) -> dict:
    """Cameras and times per split (no images), deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = np.radians(spec.elevation_deg)
    out = {}
    counts = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    for split in SPLITS:
        n = counts[split]
        if split == "train":
            times = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(n)
        else:
            # held out: strictly between training times
            times = (np.arange(n) + rng.uniform(0.2, 0.8, n)) / max(n, 1)
        az = rng.uniform(0.0, 2.0 * np.pi, n)
        el = rng.uniform(lo, hi, n)
        out[split] = [(orbit_camera(spec, a, e), float(t)) for a, e, t in zip(az, el, times)]
    return out


def generate_synthetic(spec: SynthSpec, out_dir) -> None:
    """Write a D-NeRF layout dataset of the moving sphere to ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    for split, items in synth_frames(spec).items():
        if not items:
            continue
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        entries = []
        for n, (cam, t) in enumerate(items):
            rel = f"./{split}/r_{n:03d}"
            write_png(_image_path(out_dir, rel), trace_sphere(spec, cam, t))
            entries.append({"file_path": rel, "rotation": 0.0, "time": t,
                            "transform_matrix": cam.c2w.tolist()})
        with open(os.path.join(out_dir, f"transforms_{split}.json"), "w") as f:
            json.dump({"camera_angle_x": spec.camera_angle_x, "frames": entries}, f, indent=2)
    with open(os.path.join(out_dir, SYNTH_SPEC_NAME), "w") as f:
        json.dump(asdict(spec), f, indent=2)


def load_synth_spec(path) -> SynthSpec:
    if os.path.isdir(path):
        path = os.path.join(path, SYNTH_SPEC_NAME)
    with open(path) as f:
        return SynthSpec.from_dict(json.load(f))
