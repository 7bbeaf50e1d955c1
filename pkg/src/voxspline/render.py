"""Pinhole rays and differentiable volume rendering through a deforming grid.

Sample points are bent by the motion field before the canonical radiance is
read (``sigma(x + delta(x, t))``). The backward pass is written out by hand:
compositing, then the radiance nonlinearities and trilinear scatter at the
bent point, then the chain back through the bend into the motion block.
"""

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import field
from .field import VoxelGrid


class SampleMismatchError(RuntimeError):
    """Backward pass was handed samples that differ from the forward pass."""


@dataclass
class Camera:
    camera_angle_x: float
    c2w: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape == (3, 4):
            self.c2w = np.vstack([self.c2w, [0.0, 0.0, 0.0, 1.0]])
        if self.c2w.shape != (4, 4):
            raise ValueError(f"camera-to-world must be 4x4, got {self.c2w.shape}")
        if not 0.0 < self.camera_angle_x < np.pi:
            raise ValueError(f"camera_angle_x must lie in (0, pi), got {self.camera_angle_x}")
        rot = self.c2w[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation block is not orthonormal")
        self.width, self.height = int(self.width), int(self.height)

    @property
    def focal(self) -> float:
        return 0.5 * self.width / np.tan(0.5 * self.camera_angle_x)

    @property
    def position(self) -> np.ndarray:
        return self.c2w[:3, 3].copy()

    def resized(self, width: int, height: int) -> "Camera":
        """Same pose and field of view at another pixel count."""
        return Camera(self.camera_angle_x, self.c2w.copy(), width, height)

    def to_json(self) -> dict:
        return {"camera_angle_x": float(self.camera_angle_x),
                "transform_matrix": self.c2w.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, obj: dict) -> "Camera":
        return cls(float(obj["camera_angle_x"]), np.asarray(obj["transform_matrix"]),
                   int(obj["width"]), int(obj["height"]))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` looking down -z at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, true_up, back, eye
    return c2w


@dataclass
class Rays:
    """A batch of rays; a single ray is a batch of one."""
    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray     # (R, 3), unit length
    near: np.ndarray     # (R,)
    far: np.ndarray      # (R,)

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        self.dirs = np.asarray(self.dirs, dtype=np.float64).reshape(-1, 3)
        n = self.origins.shape[0]
        self.near = np.broadcast_to(np.asarray(self.near, dtype=np.float64), (n,)).copy()
        self.far = np.broadcast_to(np.asarray(self.far, dtype=np.float64), (n,)).copy()
        if not np.allclose(np.linalg.norm(self.dirs, axis=1), 1.0, atol=1e-6):
            raise ValueError("ray directions must be unit length")
        if np.any(self.near < 0) or np.any(self.near >= self.far):
            raise ValueError("need 0 <= near < far on every ray")

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, index) -> "Rays":
        return Rays(self.origins[index], self.dirs[index], self.near[index], self.far[index])


def generate_rays(camera: Camera, near: float = 2.0, far: float = 6.0) -> Rays:
    """One ray per pixel centre, row-major (row ``j`` then column ``i``)."""
    W, H = camera.width, camera.height
    f = camera.focal
    i, j = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    d_cam = np.stack([(i + 0.5 - 0.5 * W) / f, -(j + 0.5 - 0.5 * H) / f, -np.ones_like(i)], -1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    dirs = d_cam.reshape(-1, 3) @ camera.c2w[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.c2w[:3, 3], dirs.shape)
    return Rays(origins, dirs, near, far)


def stratified_samples(near, far, n: int, rng: Optional[np.random.Generator] = None,
                       deterministic: bool = False) -> np.ndarray:
    """``n`` increasing distances per ray, one per equal-width bin of [near, far].

    Deterministic mode (or no ``rng``) returns the bin midpoints.
    """
    if n < 1:
        raise ValueError("need at least one sample per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    width = (far - near)[:, None] / n
    lower = near[:, None] + width * np.arange(n)
    if deterministic or rng is None:
        u = np.full(lower.shape, 0.5)
    else:
        u = rng.random(lower.shape)
    return lower + u * width


@dataclass
class RenderConfig:
    n_samples: int = 64
    background: tuple = (1.0, 1.0, 1.0)
    deterministic: bool = False
    mode: Optional[str] = None  # canonical mode; None defers to the grid


@dataclass
class RenderOutput:
    rgb: np.ndarray          # (R, 3)
    alpha: np.ndarray        # (R,)
    depth: np.ndarray        # (R,)
    flow: np.ndarray         # (R, 3) expected ray-bending offset
    weights: np.ndarray      # (R, n)
    transmittance: np.ndarray  # (R, n + 1); last column is what reaches the background
    samples: np.ndarray      # (R, n) distances along each ray
    points: np.ndarray       # (R * n, 3) undeformed sample positions
    deform: field.DeformSample = dc_field(repr=False)
    radiance: field.RadianceSample = dc_field(repr=False)
    intervals: np.ndarray = dc_field(repr=False, default=None)
    background: np.ndarray = dc_field(repr=False, default=None)


def march(grid: VoxelGrid, rays: Rays, time: float, cfg: RenderConfig = None,
          rng: Optional[np.random.Generator] = None, samples=None) -> RenderOutput:
    """Composite ``n_samples`` bent samples per ray at render time ``time``."""
    cfg = cfg or RenderConfig()
    if not 0.0 <= time <= 1.0:
        raise ValueError(f"render time {time} outside [0, 1]")
    R, n = len(rays), cfg.n_samples
    if samples is None:
        samples = stratified_samples(rays.near, rays.far, n, rng, cfg.deterministic)
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[1]

    pts = (rays.origins[:, None, :] + samples[..., None] * rays.dirs[:, None, :]).reshape(-1, 3)
    ds = field.sample_deformation(grid, pts, time, cfg.mode, with_beta=False)
    view = np.repeat(rays.dirs, n, axis=0)
    rs = field.sample_radiance(grid, pts + ds.delta, view)

    intervals = np.empty_like(samples)
    intervals[:, :-1] = np.diff(samples, axis=1)
    intervals[:, -1] = rays.far - samples[:, -1]

    sigma = rs.sigma.reshape(R, n)
    tau = sigma * intervals
    alpha_i = -np.expm1(-tau)
    trans = np.ones((R, n + 1))
    trans[:, 1:] = np.exp(-np.cumsum(tau, axis=1))
    w = trans[:, :-1] * alpha_i

    bg = np.asarray(cfg.background, dtype=np.float64)
    color = rs.rgb.reshape(R, n, 3)
    acc = w.sum(axis=1)
    rgb = np.einsum("rn,rnc->rc", w, color) + (1.0 - acc)[:, None] * bg
    depth = np.sum(w * samples, axis=1)
    flow = np.einsum("rn,rnc->rc", w, ds.delta.reshape(R, n, 3))
    return RenderOutput(rgb, acc, depth, flow, w, trans, samples, pts, ds, rs,
                        intervals, bg)


def march_backward(grid: VoxelGrid, out: RenderOutput, d_rgb=None, d_alpha=None,
                   d_depth=None, d_flow=None, d_weights=None, d_delta0=None,
                   d_rigidity=None, samples=None) -> dict:
    """Reverse-mode pass for :func:`march`.

    The ``d_*`` arguments are gradients of a scalar objective with respect to
    the render outputs (per ray) or, for ``d_weights``, ``d_delta0`` and
    ``d_rigidity``, with respect to per-sample quantities. Any may be omitted.
    Returns gradients keyed by grid block.
    """
    if samples is not None and not np.array_equal(np.asarray(samples), out.samples):
        raise SampleMismatchError("backward samples differ from the forward pass")
    R, n = out.weights.shape
    w = out.weights
    color = out.radiance.rgb.reshape(R, n, 3)
    delta = out.deform.delta.reshape(R, n, 3)

    g_w = np.zeros((R, n))
    g_color = np.zeros((R, n, 3))
    g_delta = np.zeros((R, n, 3))
    if d_rgb is not None:
        d_rgb = _check(d_rgb, (R, 3), "d_rgb")
        g_w += np.einsum("rc,rnc->rn", d_rgb, color - out.background)
        g_color += w[..., None] * d_rgb[:, None, :]
    if d_alpha is not None:
        g_w += _check(d_alpha, (R,), "d_alpha")[:, None]
    if d_depth is not None:
        g_w += _check(d_depth, (R,), "d_depth")[:, None] * out.samples
    if d_flow is not None:
        d_flow = _check(d_flow, (R, 3), "d_flow")
        g_w += np.einsum("rc,rnc->rn", d_flow, delta)
        g_delta += w[..., None] * d_flow[:, None, :]
    if d_weights is not None:
        g_w += _check(d_weights, (R, n), "d_weights")

    # w_i = T_i a_i with T_i = exp(-sum_{j<i} tau_j):
    # dL/dtau_k = T_{k+1} g_k - sum_{i>k} g_i w_i
    gw = g_w * w
    later = np.zeros_like(gw)
    later[:, :-1] = np.cumsum(gw[:, :0:-1], axis=1)[:, ::-1]
    g_tau = out.transmittance[:, 1:] * g_w - later
    g_sigma = (g_tau * out.intervals).reshape(-1)

    g_rad, g_xd = field.radiance_backward(grid, out.radiance, g_sigma, g_color.reshape(-1, 3))
    g_delta = g_delta.reshape(-1, 3) + g_xd
    if d_delta0 is not None:
        d_delta0 = _check(d_delta0, (R * n, 3), "d_delta0")
    if d_rigidity is not None:
        d_rigidity = _check(d_rigidity, (R * n,), "d_rigidity")
    g_mot = field.deformation_backward(grid, out.deform, g_delta, d_delta0, d_rigidity)
    return {"radiance": g_rad, "motion": g_mot}


def _check(arr, shape, name):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.size != int(np.prod(shape)):
        raise SampleMismatchError(f"{name} has shape {arr.shape}, forward pass implies {shape}")
    return arr.reshape(shape)


def render_image(grid: VoxelGrid, camera: Camera, time: float, cfg: RenderConfig = None,
                 near: float = 2.0, far: float = 6.0, chunk: int = 4096,
                 rng: Optional[np.random.Generator] = None) -> dict:
    """Render a full frame in chunks; returns ``rgb``, ``alpha``, ``depth``, ``flow`` images."""
    cfg = cfg or RenderConfig(deterministic=True)
    rays = generate_rays(camera, near, far)
    parts = {"rgb": [], "alpha": [], "depth": [], "flow": []}
    for start in range(0, len(rays), chunk):
        out = march(grid, rays.subset(slice(start, start + chunk)), time, cfg, rng)
        for key in parts:
            parts[key].append(getattr(out, key))
    H, W = camera.height, camera.width
    return {key: np.concatenate(val).reshape((H, W) + val[0].shape[1:])
            for key, val in parts.items()}
