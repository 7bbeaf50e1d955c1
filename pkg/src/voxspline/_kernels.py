"""Compiled inner loops for trilinear gather/scatter.

Corner order is ``c = dx + 2*dy + 4*dz``. All loops run sequentially so
accumulation order, and therefore every result, is reproducible.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def locate(x, lo, scale, res, Lx, Ly, with_gradient):
    n = x.shape[0]
    idx = np.zeros((n, 8), dtype=np.int64)
    w = np.zeros((n, 8))
    dw = np.zeros((n if with_gradient else 0, 8, 3))
    inside = np.zeros(n, dtype=np.bool_)
    f = np.empty(3)
    cell = np.empty(3, dtype=np.int64)
    for p in range(n):
        ok = True
        for a in range(3):
            u = (x[p, a] - lo[a]) * scale[a]
            if not (u >= 0.0 and u <= res[a]):
                ok = False
            c = np.floor(u) if u == u else 0.0
            if c > res[a] - 1:
                c = res[a] - 1
            if c < 0:
                c = 0
            cell[a] = np.int64(c)
            f[a] = u - c
        base = cell[0] + Lx * (cell[1] + Ly * cell[2])
        for k in range(8):
            bx = k & 1
            by = (k >> 1) & 1
            bz = (k >> 2) & 1
            idx[p, k] = base + bx + Lx * (by + Ly * bz)
        if not ok:
            continue
        inside[p] = True
        for k in range(8):
            bx = k & 1
            by = (k >> 1) & 1
            bz = (k >> 2) & 1
            wx = f[0] if bx else 1.0 - f[0]
            wy = f[1] if by else 1.0 - f[1]
            wz = f[2] if bz else 1.0 - f[2]
            w[p, k] = wz * wy * wx
            if with_gradient:
                sx = scale[0] if bx else -scale[0]
                sy = scale[1] if by else -scale[1]
                sz = scale[2] if bz else -scale[2]
                dw[p, k, 0] = sx * wy * wz
                dw[p, k, 1] = wx * sy * wz
                dw[p, k, 2] = wx * wy * sz
    return idx, w, dw, inside


@numba.njit(cache=True)
def interpolate(values, idx, w):
    n = idx.shape[0]
    C = values.shape[1]
    out = np.zeros((n, C))
    for p in range(n):
        for k in range(8):
            wk = w[p, k]
            if wk == 0.0:
                continue
            v = idx[p, k]
            for c in range(C):
                out[p, c] += wk * values[v, c]
    return out


@numba.njit(cache=True)
def scatter(n_vertices, idx, w, grad):
    n = idx.shape[0]
    C = grad.shape[1]
    out = np.zeros((n_vertices, C))
    for p in range(n):
        for k in range(8):
            wk = w[p, k]
            if wk == 0.0:
                continue
            v = idx[p, k]
            for c in range(C):
                out[v, c] += wk * grad[p, c]
    return out


@numba.njit(cache=True)
def position_grad(values, idx, dw, grad):
    """sum_k dw[p, k, :] * <values[idx[p, k]], grad[p]>"""
    n = idx.shape[0]
    C = values.shape[1]
    out = np.zeros((n, 3))
    for p in range(n):
        for k in range(8):
            v = idx[p, k]
            s = 0.0
            for c in range(C):
                s += values[v, c] * grad[p, c]
            for a in range(3):
                out[p, a] += dw[p, k, a] * s
    return out


@numba.njit(cache=True, inline="always")
def _axis(u, n):
    """Cell index and fraction of lattice coordinate ``u`` on an axis of ``n``
    cells; cell is -1 when ``u`` lies outside ``[0, n]``."""
    if not (u >= 0.0 and u <= n):
        return -1, 0.0
    c = np.floor(u)
    if c > n - 1:
        c = n - 1.0
    return np.int64(c), u - c


@numba.njit(cache=True, inline="always")
def _probe(table, ch, cx, fx, cy, fy, cz, fz, Lx, Ly):
    """Trilinear (logit, channel ``ch``) at a located point."""
    base = cx + Lx * (cy + Ly * cz)
    logit = 0.0
    d = 0.0
    for k in range(8):
        bx = k & 1
        by = (k >> 1) & 1
        bz = (k >> 2) & 1
        wk = ((fx if bx else 1.0 - fx) * (fy if by else 1.0 - fy)
              * (fz if bz else 1.0 - fz))
        v = base + bx + Lx * (by + Ly * bz)
        logit += wk * table[v, 0]
        d += wk * table[v, ch]
    return logit, d


@numba.njit(cache=True, inline="always")
def _probe_scatter(out, ch, g_logit, g_d, cx, fx, cy, fy, cz, fz, Lx, Ly):
    base = cx + Lx * (cy + Ly * cz)
    for k in range(8):
        bx = k & 1
        by = (k >> 1) & 1
        bz = (k >> 2) & 1
        wk = ((fx if bx else 1.0 - fx) * (fy if by else 1.0 - fy)
              * (fz if bz else 1.0 - fz))
        v = base + bx + Lx * (by + Ly * bz)
        out[v, 0] += wk * g_logit
        out[v, ch] += wk * g_d


@numba.njit(cache=True, inline="always")
def _probe_cells(x, i, a, sgn, lo, scale, res, h, cells, fracs):
    """Locate probe ``x[i] + sgn * h[a] e_a``; False when it leaves the box."""
    for b in range(3):
        xb = x[i, b] + sgn * h[a] if b == a else x[i, b]
        c, f = _axis((xb - lo[b]) * scale[b], res[b])
        if c < 0:
            return False
        cells[b] = c
        fracs[b] = f
    return True


@numba.njit(cache=True)
def divergence(table, lo, scale, res, Lx, Ly, x, h):
    """Central-difference divergence of ``sigmoid(logit) * d`` from a ``(V, 4)``
    table of (rigidity logit, displacement), probed at ``x +- h[a] e_a``.

    Probes outside the box read zero displacement. Also returns the per-probe
    ``(r, d)`` pairs, shape ``(N, 6, 2)``, for the backward pass.
    """
    n = x.shape[0]
    out = np.zeros(n)
    probes = np.zeros((n, 6, 2))
    cells = np.empty(3, dtype=np.int64)
    fracs = np.empty(3)
    for i in range(n):
        acc = 0.0
        for a in range(3):
            for side in range(2):
                sgn = 1.0 - 2.0 * side
                if not _probe_cells(x, i, a, sgn, lo, scale, res, h, cells, fracs):
                    probes[i, 2 * a + side, 0] = 0.5
                    continue
                logit, d = _probe(table, 1 + a, cells[0], fracs[0], cells[1], fracs[1],
                                  cells[2], fracs[2], Lx, Ly)
                r = 0.5 * (1.0 + np.tanh(0.5 * logit))
                probes[i, 2 * a + side, 0] = r
                probes[i, 2 * a + side, 1] = d
                acc += sgn * r * d / (2.0 * h[a])
        out[i] = acc
    return out, probes


@numba.njit(cache=True)
def divergence_backward(probes, n_vertices, lo, scale, res, Lx, Ly, x, h, coef):
    """Scatter ``coef[i] * d div_i / d table`` into a ``(V, 4)`` gradient."""
    n = x.shape[0]
    out = np.zeros((n_vertices, 4))
    cells = np.empty(3, dtype=np.int64)
    fracs = np.empty(3)
    for i in range(n):
        if coef[i] == 0.0:
            continue
        for a in range(3):
            for side in range(2):
                sgn = 1.0 - 2.0 * side
                if not _probe_cells(x, i, a, sgn, lo, scale, res, h, cells, fracs):
                    continue
                r = probes[i, 2 * a + side, 0]
                d = probes[i, 2 * a + side, 1]
                g = coef[i] * sgn / (2.0 * h[a])
                _probe_scatter(out, 1 + a, g * d * r * (1.0 - r), g * r, cells[0], fracs[0],
                               cells[1], fracs[1], cells[2], fracs[2], Lx, Ly)
    return out
