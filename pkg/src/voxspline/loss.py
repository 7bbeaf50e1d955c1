"""Training objectives and their gradients.

Each term can return its value alone or ``(value, grads)``; :func:`evaluate`
chains them through a single backward pass of the renderer.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels, field, render
from .field import VoxelGrid


@dataclass
class LossWeights:
    lambda_div: float = 0.3
    lambda_off: float = 30.0
    lambda_r: float = 0.3
    lambda_tv: float = 1e-3
    tv_sample_fraction: float = 0.01

    def __post_init__(self):
        for name in ("lambda_div", "lambda_off", "lambda_r", "lambda_tv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.tv_sample_fraction <= 1.0:
            raise ValueError("tv_sample_fraction must lie in (0, 1]")


@dataclass
class LossReport:
    mse: float
    l_off: float
    l_div: float
    l_tv: float
    total: float
    grad: dict = dc_field(default=None, repr=False)
    term_grads: dict = dc_field(default=None, repr=False)

    def row(self) -> dict:
        return {"mse": self.mse, "l_off": self.l_off, "l_div": self.l_div,
                "l_tv": self.l_tv, "total": self.total}


def photometric_mse(rendered, gt, return_grad=False):
    """Mean over pixels of the squared RGB distance."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {gt.shape}")
    diff = (rendered - gt).reshape(-1, rendered.shape[-1])
    value = float(np.mean(np.sum(diff**2, axis=1)))
    if not return_grad:
        return value
    return value, (2.0 / diff.shape[0]) * diff.reshape(rendered.shape)


def offset_loss(weights, delta0, rigidity, lambda_r=0.3, return_grad=False):
    """Mean over samples of ``w * (|delta0|^(2 - r) + lambda_r * r)``.

    Returns ``(value, (d_weights, d_delta0, d_rigidity))`` with ``return_grad``.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    d0 = np.asarray(delta0, dtype=np.float64).reshape(-1, 3)
    r = np.asarray(rigidity, dtype=np.float64).reshape(-1)
    count = w.size
    norm = np.sqrt(np.sum(d0**2, axis=1))
    p = 2.0 - r
    moving = norm > 0.0
    powed = np.zeros_like(norm)
    powed[moving] = norm[moving] ** p[moving]
    per_sample = powed + lambda_r * r
    value = float(np.sum(w * per_sample) / count)
    if not return_grad:
        return value
    # guard the fractional-power derivative at the origin
    safe = np.maximum(norm, 1e-12)
    g_w = per_sample / count
    g_d0 = np.where(moving[:, None],
                    (w * p * safe ** (p - 2.0))[:, None] * d0, 0.0) / count
    g_r = w * (lambda_r - powed * np.log(safe)) / count
    return value, (g_w, g_d0, g_r)


def divergence_loss(grid: VoxelGrid, points, weights, time: float, step=None,
                    mode: str = None, return_grad=False, table=None):
    """Weighted mean squared divergence of the deformation field.

    Divergence is taken by central differences with ``step`` per axis (default
    half a voxel edge). With ``return_grad`` returns
    ``(value, (motion_block_grad, d_weights))``. ``table`` may pass in an
    already computed :func:`field.motion_table` for the same time and mode.
    """
    x = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    n = x.shape[0]
    h = 0.5 * grid.cell_size if step is None else np.broadcast_to(np.asarray(step, float), (3,))
    h = np.ascontiguousarray(h, dtype=np.float64)
    if table is None:
        table = field.motion_table(grid, time, mode)
    res = np.asarray(grid.resolution, dtype=np.float64)
    lo, hi = grid.aabb
    Lx, Ly, _ = grid.lattice_shape
    geom = (lo, res / (hi - lo), res, Lx, Ly)
    div, probes = _kernels.divergence(table, *geom, x, h)
    value = float(np.sum(w * div**2) / n)
    if not return_grad:
        return value
    coef = 2.0 * w * div / n
    g_table = _kernels.divergence_backward(probes, table.shape[0], *geom, x, h, coef)
    g_motion = field.motion_table_backward(grid, g_table, time, mode)
    return value, (g_motion, div**2 / n)


def lattice_tv(values, lattice_shape, rng=None, fraction=1.0, eps=1e-9, return_grad=False):
    """Total variation over a vertex lattice stored x-fastest as ``(V, C)``.

    A site is a (vertex, channel) pair whose vertex has at least one forward
    neighbour; missing neighbours contribute a zero difference. With
    ``fraction < 1`` a uniform random subset of sites is used. ``eps`` only
    stabilizes the gradient denominator.
    """
    values = np.asarray(values, dtype=np.float64)
    V, C = values.shape
    Lx, Ly, Lz = (int(s) for s in lattice_shape)
    if Lx * Ly * Lz != V:
        raise ValueError("lattice shape does not match the number of vertices")
    n_sites = (V - 1) * C  # the far corner vertex has no forward neighbour
    if n_sites == 0:
        return (0.0, np.zeros_like(values)) if return_grad else 0.0
    if fraction >= 1.0:
        sites = np.arange(n_sites)
    else:
        if rng is None:
            raise ValueError("stochastic TV needs an rng")
        k = max(1, int(round(fraction * n_sites)))
        sites = np.sort(rng.choice(n_sites, size=k, replace=False))
    v, c = np.divmod(sites, C)
    i, j, kk = v % Lx, (v // Lx) % Ly, v // (Lx * Ly)
    base = values[v, c]
    sq = np.zeros(sites.size)
    diffs = []
    for has_next, stride in ((i < Lx - 1, 1), (j < Ly - 1, Lx), (kk < Lz - 1, Lx * Ly)):
        nb = np.where(has_next, v + stride, v)
        dd = values[nb, c] - base
        diffs.append((nb, dd))
        sq += dd**2
    norm = np.sqrt(sq)
    value = float(np.mean(norm))
    if not return_grad:
        return value
    scale = 1.0 / (sites.size * np.sqrt(sq + eps))
    own = np.zeros(sites.size)
    idx, wts = [], []
    for nb, dd in diffs:
        idx.append(nb * C + c)
        wts.append(dd * scale)
        own -= dd * scale
    idx.append(v * C + c)
    wts.append(own)
    flat = np.bincount(np.concatenate(idx), weights=np.concatenate(wts), minlength=V * C)
    return value, flat.reshape(V, C)


def tv_loss(grid: VoxelGrid, rng=None, fraction=1.0, blocks=field.BLOCKS, eps=1e-9,
            return_grad=False):
    """:func:`lattice_tv` over every stored channel of the chosen blocks."""
    arrays = [grid.blocks()[b] for b in blocks]
    values = np.concatenate(arrays, axis=1) if len(arrays) > 1 else arrays[0]
    out = lattice_tv(values, grid.lattice_shape, rng, fraction, eps, return_grad)
    if not return_grad:
        return out
    value, g = out
    grads, col = {}, 0
    for b, arr in zip(blocks, arrays):
        grads[b] = g[:, col:col + arr.shape[1]]
        col += arr.shape[1]
    return value, grads


def total_loss(mse, l_off, l_div, l_tv, weights: LossWeights = None, term_grads=None) -> LossReport:
    """Weighted sum of the terms; per-term gradient dicts are combined likewise."""
    lw = weights or LossWeights()
    scale = {"mse": 1.0, "l_off": lw.lambda_off, "l_div": lw.lambda_div, "l_tv": lw.lambda_tv}
    total = mse + lw.lambda_div * l_div + lw.lambda_off * l_off + lw.lambda_tv * l_tv
    grad = None
    if term_grads:
        grad = {}
        for term, g in term_grads.items():
            for block, arr in g.items():
                if block in grad:
                    grad[block] = grad[block] + scale[term] * arr
                else:
                    grad[block] = scale[term] * arr
    return LossReport(float(mse), float(l_off), float(l_div), float(l_tv), float(total),
                      grad, term_grads)


def evaluate(grid: VoxelGrid, out: render.RenderOutput, gt, lw: LossWeights = None,
             rng=None, per_term=False, with_grad=True) -> LossReport:
    """All terms for one rendered batch, with gradients on every grid block.

    ``per_term`` keeps a separate gradient per term (three backward passes
    instead of one); the total gradient is the same either way.
    """
    lw = lw or LossWeights()
    R, n = out.weights.shape
    w = out.weights.reshape(-1)
    if not with_grad:
        return total_loss(
            photometric_mse(out.rgb, gt),
            offset_loss(w, out.deform.delta0, out.deform.rigidity, lw.lambda_r),
            divergence_loss(grid, out.points, w, out.deform.time, mode=out.deform.mode,
                            table=out.deform.table),
            tv_loss(grid, rng, lw.tv_sample_fraction), lw)

    mse, d_rgb = photometric_mse(out.rgb, gt, return_grad=True)
    l_off, (ow, od0, orig) = offset_loss(w, out.deform.delta0, out.deform.rigidity,
                                         lw.lambda_r, return_grad=True)
    l_div, (div_motion, dw) = divergence_loss(grid, out.points, w, out.deform.time,
                                              mode=out.deform.mode, return_grad=True,
                                              table=out.deform.table)
    l_tv, tv_grads = tv_loss(grid, rng, lw.tv_sample_fraction, return_grad=True)

    if per_term:
        terms = {
            "mse": render.march_backward(grid, out, d_rgb=d_rgb),
            "l_off": render.march_backward(grid, out, d_weights=ow.reshape(R, n),
                                           d_delta0=od0, d_rigidity=orig),
        }
        g_div = render.march_backward(grid, out, d_weights=dw.reshape(R, n))
        g_div["motion"] = g_div["motion"] + div_motion
        terms["l_div"] = g_div
        terms["l_tv"] = tv_grads
        return total_loss(mse, l_off, l_div, l_tv, lw, terms)

    grad = render.march_backward(
        grid, out, d_rgb=d_rgb,
        d_weights=(lw.lambda_off * ow + lw.lambda_div * dw).reshape(R, n),
        d_delta0=lw.lambda_off * od0, d_rigidity=lw.lambda_off * orig)
    grad["motion"] += lw.lambda_div * div_motion
    for block, g in tv_grads.items():
        grad[block] += lw.lambda_tv * g
    report = total_loss(mse, l_off, l_div, l_tv, lw)
    report.grad = grad
    return report
