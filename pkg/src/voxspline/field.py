"""Dense voxel field holding density, color, view rescale and Bezier motion.

Parameters live on the vertices of an ``(Nx+1, Ny+1, Nz+1)`` lattice spanning
the bounding box, flattened x-fastest: ``v = i + Lx * (j + Ly * k)``. They are
split into two blocks so that each trilinear lookup gathers one contiguous
array:

* ``radiance`` ``(V, 8)``: density logit, 3 color logits, 4 SH coefficients
* ``motion`` ``(V, 1 + 3*O)``: rigidity logit, then O control-point offsets

Every query interpolates raw parameters first and applies the nonlinearity
afterwards.
"""

import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels, spline

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

RADIANCE_WIDTH = 8
BLOCKS = ("radiance", "motion")

# Initial parameter values.
INIT_DENSITY = -1.0
INIT_RIGIDITY = -2.0
INIT_RESCALE_LOGIT = -4.0

MAGIC = b"SPLF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII3I6d")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Real spherical harmonics up to degree 1 for unit directions ``(N, 3)``."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    return np.stack(
        [np.full_like(x, SH_C0), -SH_C1 * y, SH_C1 * z, -SH_C1 * x], axis=-1
    )


class VoxelGrid:
    def __init__(self, resolution, aabb, order: int, radiance=None, motion=None,
                 mode: str = "subtract_first"):
        resolution = tuple(int(r) for r in resolution)
        if len(resolution) != 3 or min(resolution) < 1:
            raise ValueError(f"resolution must be three positive integers, got {resolution}")
        aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        if not np.all(aabb[0] < aabb[1]):
            raise ValueError(f"aabb min must be below max on every axis, got {aabb.tolist()}")
        if not 2 <= order <= spline.MAX_ORDER:
            raise ValueError(f"order must be in [2, {spline.MAX_ORDER}], got {order}")
        if mode not in spline.CANONICAL_MODES:
            raise ValueError(f"unknown canonical mode {mode!r}")
        self.resolution = resolution
        self.aabb = aabb
        self.order = int(order)
        self.mode = mode
        V = self.n_vertices
        self.radiance = (np.zeros((V, RADIANCE_WIDTH)) if radiance is None
                         else np.ascontiguousarray(radiance, dtype=np.float64))
        self.motion = (np.zeros((V, 1 + 3 * order)) if motion is None
                       else np.ascontiguousarray(motion, dtype=np.float64))
        if self.radiance.shape != (V, RADIANCE_WIDTH) or self.motion.shape != (V, 1 + 3 * order):
            raise ValueError("parameter arrays do not match the lattice size")

    @property
    def lattice_shape(self) -> tuple:
        """Vertex counts per axis, x first."""
        return tuple(r + 1 for r in self.resolution)

    @property
    def n_vertices(self) -> int:
        Lx, Ly, Lz = self.lattice_shape
        return Lx * Ly * Lz

    @property
    def params_per_vertex(self) -> int:
        return RADIANCE_WIDTH + 1 + 3 * self.order

    @property
    def cell_size(self) -> np.ndarray:
        return (self.aabb[1] - self.aabb[0]) / np.asarray(self.resolution)

    # Named views into the two blocks.
    @property
    def density_raw(self):
        return self.radiance[:, 0]

    @property
    def rgb_logits(self):
        return self.radiance[:, 1:4]

    @property
    def sh_coeffs(self):
        return self.radiance[:, 4:8]

    @property
    def rigidity_logit(self):
        return self.motion[:, 0]

    @property
    def ctrl_offsets(self):
        return self.motion[:, 1:].reshape(-1, self.order, 3)

    def blocks(self) -> dict:
        return {"radiance": self.radiance, "motion": self.motion}

    def zero_grads(self) -> dict:
        return {name: np.zeros_like(arr) for name, arr in self.blocks().items()}

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.resolution, self.aabb.copy(), self.order,
                         self.radiance.copy(), self.motion.copy(), self.mode)

    def column_labels(self, block: str) -> list:
        if block == "radiance":
            return ["density_raw", "rgb_logits[0]", "rgb_logits[1]", "rgb_logits[2]",
                    "sh_coeffs[0]", "sh_coeffs[1]", "sh_coeffs[2]", "sh_coeffs[3]"]
        labels = ["rigidity_logit"]
        for i in range(self.order):
            labels += [f"ctrl_offsets[{i}].{a}" for a in "xyz"]
        return labels

    def vertex_index(self, i, j, k):
        Lx, Ly, _ = self.lattice_shape
        return np.asarray(i) + Lx * (np.asarray(j) + Ly * np.asarray(k))

    def vertex_position(self, v) -> np.ndarray:
        Lx, Ly, _ = self.lattice_shape
        v = np.asarray(v)
        ijk = np.stack([v % Lx, (v // Lx) % Ly, v // (Lx * Ly)], axis=-1)
        return self.aabb[0] + ijk * self.cell_size

    def lattice(self, block: str) -> np.ndarray:
        """View of a block as ``(Lz, Ly, Lx, width)``."""
        Lx, Ly, Lz = self.lattice_shape
        arr = self.blocks()[block]
        return arr.reshape(Lz, Ly, Lx, arr.shape[1])

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.radiance)) and np.all(np.isfinite(self.motion)))


def grid_init(resolution, aabb, order: int = spline.DEFAULT_ORDER, seed: int = 0,
              noise: float = 0.0, mode: str = "subtract_first") -> VoxelGrid:
    """Fresh grid: faint gray fog, mostly rigid, no motion, near-identity rescale.

    ``noise`` adds N(0, noise) to every parameter using ``seed``; off by default.
    """
    if np.isscalar(resolution):
        resolution = (int(resolution),) * 3
    if min(int(r) for r in resolution) < 1:
        raise ValueError(f"resolution must be positive, got {resolution}")
    grid = VoxelGrid(resolution, aabb, order, mode=mode)
    grid.radiance[:, 0] = INIT_DENSITY
    # Stored through float32 so a checkpoint round trip is exact.
    grid.radiance[:, 4] = float(np.float32(INIT_RESCALE_LOGIT / SH_C0))
    grid.motion[:, 0] = INIT_RIGIDITY
    if noise > 0.0:
        rng = np.random.default_rng(seed)
        grid.radiance += rng.normal(0.0, noise, grid.radiance.shape)
        grid.motion += rng.normal(0.0, noise, grid.motion.shape)
    return grid


class Corners(NamedTuple):
    """The 8 lattice vertices around each query point and their weights."""
    idx: np.ndarray       # (N, 8) flat vertex indices
    weights: np.ndarray   # (N, 8); zero for points outside the box
    dweights: np.ndarray  # (N, 8, 3) d weights / d world position, or None
    inside: np.ndarray    # (N,) bool


def locate(grid: VoxelGrid, x, with_gradient: bool = False) -> Corners:
    x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 3)
    res = np.asarray(grid.resolution, dtype=np.float64)
    lo, hi = grid.aabb
    Lx, Ly, _ = grid.lattice_shape
    idx, w, dw, inside = _kernels.locate(x, lo, res / (hi - lo), res, Lx, Ly, with_gradient)
    return Corners(idx, w, dw if with_gradient else None, inside)


def interpolate(values: np.ndarray, corners: Corners) -> np.ndarray:
    """Blend rows of ``values`` (V, C) at the located points -> (N, C)."""
    return _kernels.interpolate(np.ascontiguousarray(values), corners.idx, corners.weights)


def scatter(n_vertices: int, corners: Corners, grad: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`interpolate`: push per-point grads (N, C) onto vertices."""
    return _kernels.scatter(n_vertices, corners.idx, corners.weights,
                            np.ascontiguousarray(grad, dtype=np.float64))


CHANNEL_SLICES = {
    "density_raw": ("radiance", slice(0, 1)),
    "rgb_logits": ("radiance", slice(1, 4)),
    "sh_coeffs": ("radiance", slice(4, 8)),
    "rigidity_logit": ("motion", slice(0, 1)),
}


def trilinear(grid: VoxelGrid, x, channel: str):
    """Interpolate one named raw channel at world points ``x``.

    Returns ``(values, corners)``. Points outside the box read 0, except the
    density logit which reads ``-inf`` so that its softplus is exactly 0.
    """
    corners = locate(grid, x)
    if channel == "ctrl_offsets":
        vals = interpolate(grid.motion[:, 1:], corners)
    else:
        block, sl = CHANNEL_SLICES[channel]
        vals = interpolate(grid.blocks()[block][:, sl], corners)
    if channel == "density_raw":
        vals[~corners.inside] = -np.inf
    return vals, corners


@dataclass
class DeformSample:
    delta: np.ndarray      # (N, 3) r * delta0
    delta0: np.ndarray     # (N, 3) raw curve displacement
    rigidity: np.ndarray   # (N,)
    beta: Optional[np.ndarray]  # (N, O, 3) canonicalized control points; None on the fast path
    time: float
    mode: str
    corners: Corners
    table: Optional[np.ndarray] = None  # motion_table used on the fast path


def sample_deformation(grid: VoxelGrid, x, time: float, mode: str = None,
                       with_beta: bool = True) -> DeformSample:
    """Deformation at world points ``x`` for render time ``time``.

    With ``with_beta`` the control points are interpolated to each point and
    the curve is evaluated there. Without it the curves are evaluated once per
    lattice vertex and only (rigidity logit, displacement) is interpolated;
    curve evaluation is linear in the control points, so both orders agree.
    """
    mode = grid.mode if mode is None else mode
    corners = locate(grid, x)
    if with_beta:
        raw = interpolate(grid.motion, corners)
        beta = spline.canonicalize(raw[:, 1:].reshape(-1, grid.order, 3), mode, check=False)
        delta0 = spline.de_casteljau(beta, time, check=False)
        logit = raw[:, 0]
    else:
        table = motion_table(grid, time, mode)
        raw = interpolate(table, corners)
        beta, delta0, logit = None, raw[:, 1:], raw[:, 0]
    rigidity = sigmoid(logit)
    delta = rigidity[:, None] * delta0
    return DeformSample(delta, delta0, rigidity, beta, float(time), mode, corners,
                        None if with_beta else table)


def motion_table(grid: VoxelGrid, time: float, mode: str = None) -> np.ndarray:
    """Per-vertex ``(rigidity logit, curve displacement at time)`` as ``(V, 4)``."""
    mode = grid.mode if mode is None else mode
    table = np.empty((grid.n_vertices, 4))
    table[:, 0] = grid.motion[:, 0]
    beta = spline.canonicalize(grid.ctrl_offsets, mode, check=False)
    table[:, 1:] = spline.de_casteljau(beta, time, check=False)
    return table


def deformation_backward(grid: VoxelGrid, ds: DeformSample, g_delta=None,
                         g_delta0=None, g_rigidity=None) -> np.ndarray:
    """Gradient on the motion block given upstream grads of a DeformSample."""
    n = ds.delta.shape[0]
    g_d0 = np.zeros((n, 3)) if g_delta0 is None else np.array(g_delta0, dtype=np.float64)
    g_r = np.zeros(n) if g_rigidity is None else np.array(g_rigidity, dtype=np.float64)
    if g_delta is not None:
        g_d0 += ds.rigidity[:, None] * g_delta
        g_r += np.sum(g_delta * ds.delta0, axis=1)
    coeff = spline.canonical_weights(grid.order, ds.time, ds.mode)
    g_logit = g_r * ds.rigidity * (1.0 - ds.rigidity)
    if ds.beta is not None:
        g_raw = np.empty((n, grid.motion.shape[1]))
        g_raw[:, 0] = g_logit
        g_raw[:, 1:] = (coeff[None, :, None] * g_d0[:, None, :]).reshape(n, -1)
        return scatter(grid.n_vertices, ds.corners, g_raw)
    g_point = np.empty((n, 4))
    g_point[:, 0] = g_logit
    g_point[:, 1:] = g_d0
    return motion_table_backward(grid, scatter(grid.n_vertices, ds.corners, g_point),
                                 ds.time, ds.mode)


def motion_table_backward(grid: VoxelGrid, g_table, time: float, mode: str = None) -> np.ndarray:
    """Pull a ``(V, 4)`` gradient on :func:`motion_table` back to the motion block."""
    mode = grid.mode if mode is None else mode
    coeff = spline.canonical_weights(grid.order, time, mode)
    out = np.empty_like(grid.motion)
    out[:, 0] = g_table[:, 0]
    out[:, 1:].reshape(-1, grid.order, 3)[:] = coeff[None, :, None] * g_table[:, None, 1:]
    return out


@dataclass
class RadianceSample:
    sigma: np.ndarray    # (N,)
    rgb: np.ndarray      # (N, 3)
    raw: np.ndarray      # (N, 8) interpolated radiance block
    rgb_pos: np.ndarray  # (N, 3)
    rescale: np.ndarray  # (N,) in [0.5, 1]
    basis: np.ndarray    # (N, 4)
    corners: Corners


def sample_radiance(grid: VoxelGrid, x, view_dir) -> RadianceSample:
    corners = locate(grid, x, with_gradient=True)
    raw = interpolate(grid.radiance, corners)
    view_dir = np.broadcast_to(np.asarray(view_dir, dtype=np.float64), raw[:, :3].shape)
    sigma = np.where(corners.inside, softplus(raw[:, 0]), 0.0)
    rgb_pos = sigmoid(raw[:, 1:4])
    basis = sh_basis(view_dir)
    rescale = 1.0 - 0.5 * sigmoid(np.sum(raw[:, 4:8] * basis, axis=1))
    rgb = rescale[:, None] * rgb_pos
    return RadianceSample(sigma, rgb, raw, rgb_pos, rescale, basis, corners)


def radiance_backward(grid: VoxelGrid, rs: RadianceSample, g_sigma, g_rgb):
    """Returns (gradient on the radiance block, gradient on the query points)."""
    n = rs.sigma.shape[0]
    g_raw = np.empty((n, RADIANCE_WIDTH))
    g_raw[:, 0] = np.where(rs.corners.inside, g_sigma * sigmoid(rs.raw[:, 0]), 0.0)
    g_raw[:, 1:4] = g_rgb * rs.rescale[:, None] * rs.rgb_pos * (1.0 - rs.rgb_pos)
    # rescale = 1 - s/2 with s = sigmoid(z)
    s = sigmoid(np.sum(rs.raw[:, 4:8] * rs.basis, axis=1))
    g_z = -0.5 * s * (1.0 - s) * np.sum(g_rgb * rs.rgb_pos, axis=1)
    g_raw[:, 4:8] = g_z[:, None] * rs.basis
    g_block = scatter(grid.n_vertices, rs.corners, g_raw)
    g_x = _kernels.position_grad(grid.radiance, rs.corners.idx, rs.corners.dweights, g_raw)
    return g_block, g_x


@dataclass
class FieldSample:
    sigma: np.ndarray
    rgb: np.ndarray
    rigidity: np.ndarray
    delta: np.ndarray
    beta: np.ndarray


def query(grid: VoxelGrid, x, time: float, view_dir, mode: str = None) -> FieldSample:
    """Full point query: deform, then read density and color at the bent point."""
    ds = sample_deformation(grid, x, time, mode)
    rs = sample_radiance(grid, np.asarray(x).reshape(-1, 3) + ds.delta, view_dir)
    return FieldSample(rs.sigma, rs.rgb, ds.rigidity, ds.delta, ds.beta)


def save_grid(grid: VoxelGrid, path) -> None:
    """Write the versioned binary checkpoint (see README for the layout)."""
    mode_id = spline.CANONICAL_MODES.index(grid.mode)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, grid.order, mode_id,
                          *grid.resolution, *grid.aabb[0], *grid.aabb[1])
    with open(path, "wb") as f:
        f.write(header)
        for block in (grid.radiance, grid.motion):
            for c in range(block.shape[1]):
                f.write(np.ascontiguousarray(block[:, c], dtype="<f4").tobytes())


def load_grid(path) -> VoxelGrid:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, order, mode_id, nx, ny, nz, *box = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a voxel spline checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    grid = VoxelGrid((nx, ny, nz), np.array(box).reshape(2, 3), order,
                     mode=spline.CANONICAL_MODES[mode_id])
    V = grid.n_vertices
    n_cols = grid.params_per_vertex
    body = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size)
    if body.size != V * n_cols:
        raise ValueError(f"{path}: expected {V * n_cols} values, found {body.size}")
    cols = body.reshape(n_cols, V).astype(np.float64)
    grid.radiance[:] = cols[:RADIANCE_WIDTH].T
    grid.motion[:] = cols[RADIANCE_WIDTH:].T
    return grid
