import numpy as np
import pytest
from hypothesis import given, strategies as st

from voxspline import _kernels, field, loss, spline
from conftest import BOX, random_grid


def naive_trilinear(grid, values, p):
    """Loop-based reference: locate the cell, blend the 8 corner rows."""
    lo, hi = grid.aabb
    u = (np.asarray(p) - lo) / (hi - lo) * np.asarray(grid.resolution)
    if np.any(u < 0) or np.any(u > np.asarray(grid.resolution)):
        return np.zeros(values.shape[1])
    c = np.minimum(np.floor(u).astype(int), np.asarray(grid.resolution) - 1)
    f = u - c
    out = np.zeros(values.shape[1])
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                wt = ((f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1])
                      * (f[2] if dz else 1 - f[2]))
                out += wt * values[grid.vertex_index(c[0] + dx, c[1] + dy, c[2] + dz)]
    return out


def test_interpolate_matches_naive(rng):
    g = random_grid(res=(3, 4, 5))
    g.aabb = np.array([[-1.0, -2.0, 0.0], [2.0, 1.0, 1.5]])
    x = rng.uniform(g.aabb[0] - 0.3, g.aabb[1] + 0.3, (200, 3))
    got = field.interpolate(g.radiance, field.locate(g, x))
    ref = np.array([naive_trilinear(g, g.radiance, p) for p in x])
    assert np.allclose(got, ref, atol=1e-13)


def test_scatter_is_adjoint(rng):
    g = random_grid(res=3)
    x = rng.uniform(-1, 1, (50, 3))
    c = field.locate(g, x)
    u = rng.normal(size=(g.n_vertices, 4))
    v = rng.normal(size=(50, 4))
    lhs = np.sum(field.interpolate(u, c) * v)
    rhs = np.sum(u * field.scatter(g.n_vertices, c, v))
    assert abs(lhs - rhs) < 1e-12


def test_weight_gradient_finite_difference(rng):
    g = random_grid(res=3)
    x = rng.uniform(-0.9, 0.9, (20, 3))
    c = field.locate(g, x, with_gradient=True)
    h = 1e-6
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        wp = field.locate(g, x + e).weights
        wm = field.locate(g, x - e).weights
        assert np.allclose((wp - wm) / (2 * h), c.dweights[..., a], atol=1e-6)


def test_vertex_and_cell_center():
    g = random_grid(res=2)
    v = g.vertex_index(1, 2, 0)
    val, _ = field.trilinear(g, g.vertex_position(v)[None], "rgb_logits")
    assert np.allclose(val[0], g.rgb_logits[v], atol=1e-14)
    center = g.aabb[0] + 0.5 * g.cell_size
    val, _ = field.trilinear(g, center[None], "sh_coeffs")
    corners = [g.vertex_index(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    assert np.allclose(val[0], g.sh_coeffs[corners].mean(axis=0), atol=1e-14)


def test_outside_density_is_zero():
    g = random_grid(res=2)
    raw, _ = field.trilinear(g, np.array([[5.0, 0, 0]]), "density_raw")
    assert raw[0] == -np.inf
    rs = field.sample_radiance(g, np.array([[5.0, 0, 0], [0, 0, 0]]), [0, 0, 1])
    assert rs.sigma[0] == 0.0 and rs.sigma[1] > 0.0


def test_zero_offsets_no_motion(rng):
    g = field.grid_init(3, BOX, order=4)
    ds = field.sample_deformation(g, rng.uniform(-1, 1, (30, 3)), 0.7)
    assert np.all(ds.delta == 0.0)


@pytest.mark.parametrize("with_beta", [True, False])
def test_canonical_time_undeformed(rng, with_beta):
    g = random_grid(res=3, motion_scale=1.0)
    ds = field.sample_deformation(g, rng.uniform(-1, 1, (30, 3)), 0.0, with_beta=with_beta)
    assert np.all(ds.delta == 0.0)


@pytest.mark.parametrize("mode", spline.CANONICAL_MODES)
def test_uniform_polygon_half_rigidity(rng, mode):
    beta = rng.normal(size=(4, 3))
    g = field.grid_init(3, BOX, order=4, mode=mode)
    g.motion[:, 0] = 0.0
    g.motion[:, 1:] = beta.reshape(-1)
    x = rng.uniform(-0.9, 0.9, (25, 3))
    expected = 0.5 * spline.de_casteljau(spline.canonicalize(beta, mode), 0.37)
    for with_beta in (True, False):
        ds = field.sample_deformation(g, x, 0.37, with_beta=with_beta)
        assert np.allclose(ds.delta, expected, atol=1e-12)


@given(st.floats(0.0, 1.0), st.sampled_from(spline.CANONICAL_MODES))
def test_fast_and_direct_deformation_agree(t, mode):
    g = random_grid(res=3, order=4, seed=3, mode=mode, motion_scale=0.5)
    x = np.random.default_rng(7).uniform(-1.2, 1.2, (40, 3))
    a = field.sample_deformation(g, x, t, with_beta=True)
    b = field.sample_deformation(g, x, t, with_beta=False)
    assert np.allclose(a.delta, b.delta, atol=1e-12)
    assert np.allclose(a.rigidity, b.rigidity, atol=1e-15)
    gd = np.random.default_rng(8).normal(size=(40, 3))
    assert np.allclose(field.deformation_backward(g, a, gd),
                       field.deformation_backward(g, b, gd), atol=1e-12)


def test_radiance_limits():
    g = field.grid_init(2, BOX, order=2)
    x = np.zeros((1, 3))
    g.radiance[:, 0] = -20.0
    assert field.sample_radiance(g, x, [0, 0, 1]).sigma[0] <= 2.1e-9
    g.radiance[:, 4:8] = 0.0
    assert field.sample_radiance(g, x, [0, 0, 1]).rescale[0] == 0.75
    # strongly negative rescale logit along the view, neutral color
    g.radiance[:, 1:4] = 0.0
    g.radiance[:, 4] = -200.0
    rs = field.sample_radiance(g, x, [0, 0, 1])
    assert np.allclose(rs.rgb, 0.5, atol=1e-12)


def test_init_values(rng):
    g = field.grid_init(4, BOX, order=5)
    x = rng.uniform(-1, 1, (20, 3))
    d = rng.normal(size=(20, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rs = field.sample_radiance(g, x, d)
    expected = 1.0 - 0.5 / (1.0 + np.exp(4.0))
    assert np.allclose(rs.rescale, expected, atol=1e-6)
    assert abs(expected - 0.99102) < 2e-5  # 0.991007 to six places
    assert np.all(field.sample_deformation(g, x, 0.5).delta == 0.0)


def test_checkpoint_round_trip(tmp_path):
    g = field.grid_init(4, BOX, order=3, mode="pin_first_zero")
    path = tmp_path / "g.splf"
    field.save_grid(g, path)
    h = field.load_grid(path)
    assert h.resolution == g.resolution and h.order == 3 and h.mode == "pin_first_zero"
    assert np.array_equal(h.aabb, g.aabb)
    assert np.array_equal(h.radiance, g.radiance) and np.array_equal(h.motion, g.motion)
    field.save_grid(h, tmp_path / "h.splf")
    assert path.read_bytes() == (tmp_path / "h.splf").read_bytes()


def test_checkpoint_layout(tmp_path):
    g = field.grid_init((2, 3, 4), BOX, order=2)
    g.radiance[:, 2] = np.arange(g.n_vertices)
    path = tmp_path / "g.splf"
    field.save_grid(g, path)
    buf = path.read_bytes()
    assert buf[:4] == b"SPLF"
    V = g.n_vertices
    assert len(buf) == field._HEADER.size + 4 * V * g.params_per_vertex
    col2 = np.frombuffer(buf, "<f4", count=V, offset=field._HEADER.size + 2 * 4 * V)
    assert np.array_equal(col2, np.arange(V))


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.splf"
    bad.write_bytes(b"XXXX" + bytes(100))
    with pytest.raises(ValueError, match="magic"):
        field.load_grid(bad)
    g = field.grid_init(2, BOX, order=2)
    field.save_grid(g, bad)
    bad.write_bytes(bad.read_bytes()[:-4])
    with pytest.raises(ValueError, match="expected"):
        field.load_grid(bad)


@pytest.mark.parametrize("kwargs", [
    dict(resolution=(0, 2, 2)), dict(order=1), dict(order=17), dict(mode="x"),
    dict(aabb=[[1, 1, 1], [0, 0, 0]]),
])
def test_grid_validation(kwargs):
    args = dict(resolution=(2, 2, 2), aabb=BOX, order=3, mode="none")
    args.update(kwargs)
    with pytest.raises(ValueError):
        field.VoxelGrid(**args)


def naive_divergence(grid, x, t, h):
    table = field.motion_table(grid, t)
    out = np.zeros(len(x))
    for i, p in enumerate(x):
        for a in range(3):
            e = np.zeros(3)
            e[a] = h[a]
            vals = []
            for q in (p + e, p - e):
                row = naive_trilinear(grid, table, q)
                vals.append(field.sigmoid(row[0]) * row[1 + a])
            out[i] += (vals[0] - vals[1]) / (2 * h[a])
    return out


def test_divergence_kernel_matches_naive(rng):
    g = random_grid(res=(3, 4, 2), order=3, motion_scale=0.7)
    x = rng.uniform(-1.1, 1.1, (60, 3))
    h = 0.5 * g.cell_size
    table = field.motion_table(g, 0.6)
    res = np.asarray(g.resolution, float)
    Lx, Ly, _ = g.lattice_shape
    div, _ = _kernels.divergence(table, g.aabb[0], res / (g.aabb[1] - g.aabb[0]), res,
                                 Lx, Ly, x, h)
    assert np.allclose(div, naive_divergence(g, x, 0.6, h), atol=1e-10)
    w = rng.random(60)
    assert np.isclose(loss.divergence_loss(g, x, w, 0.6),
                      np.sum(w * div**2) / 60, rtol=1e-13)
