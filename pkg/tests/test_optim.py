import numpy as np
import pytest

from voxspline import data, field, optim


def test_schedule_endpoints():
    cfg = optim.TrainConfig()
    assert optim.lr_at(0, cfg) == 2e-4
    assert abs(optim.lr_at(cfg.total_steps, cfg) - 5e-5) < 1e-18
    assert abs(optim.lr_at(cfg.total_steps // 2, cfg) - 1.25e-4) < 1e-18
    lrs = [optim.lr_at(s, cfg) for s in range(0, cfg.total_steps + 1, 50)]
    assert np.all(np.diff(lrs) <= 0)


def test_config_round_trip_and_validation():
    cfg = optim.TrainConfig(total_steps=100, lambda_off=3.0)
    assert cfg.warmup_steps == 10
    back = optim.TrainConfig.from_dict(cfg.to_dict())
    assert back == cfg
    assert back.loss_weights.lambda_off == 3.0
    with pytest.raises(ValueError, match="unknown"):
        optim.TrainConfig.from_dict({"learning_rate": 1.0})
    with pytest.raises(ValueError):
        optim.TrainConfig(lr_start=1e-3, lr_end=1e-2)


def test_adam_zero_grad():
    p = {"a": np.array([1.0, -2.0])}
    st = optim.AdamState.zeros_like(p)
    optim.adam_step(p, {"a": np.zeros(2)}, st, 0.1)
    assert np.array_equal(p["a"], [1.0, -2.0]) and st.step == 1


def test_adam_first_step_is_sign():
    p = {"a": np.zeros(3)}
    st = optim.AdamState.zeros_like(p)
    optim.adam_step(p, {"a": np.array([0.3, -5.0, 2e-3])}, st, 0.01)
    assert np.allclose(p["a"], [-0.01, 0.01, -0.01], rtol=1e-5)


def reference_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        out.append(p)
    return out


def test_adam_matches_reference(rng):
    grads = rng.normal(size=20)
    ref = reference_adam(0.5, grads, 0.03)
    p = {"x": np.array([0.5])}
    st = optim.AdamState.zeros_like(p)
    for g, r in zip(grads, ref):
        optim.adam_step(p, {"x": np.array([g])}, st, 0.03)
        assert abs(p["x"][0] - r) < 1e-15


def test_adam_converges_on_quadratic():
    p = {"x": np.array([1.0])}
    st = optim.AdamState.zeros_like(p)
    for _ in range(2000):
        optim.adam_step(p, {"x": 2 * p["x"]}, st, 1e-2)
    assert abs(p["x"][0]) < 1e-3


def test_adam_per_block_rates():
    p = {"a": np.zeros(1), "b": np.zeros(1)}
    st = optim.AdamState.zeros_like(p)
    optim.adam_step(p, {"a": np.ones(1), "b": np.ones(1)}, st, {"a": 0.1, "b": 0.01})
    assert np.allclose([p["a"][0], p["b"][0]], [-0.1, -0.01], rtol=1e-6)


def test_adam_rejects_nan_and_names_channel():
    g = field.grid_init(2, [[-1] * 3, [1] * 3], order=2)
    labels = {b: g.column_labels(b) for b in field.BLOCKS}
    grads = g.zero_grads()
    grads["motion"][3, 4] = np.nan
    st = optim.AdamState.zeros_like(g.blocks())
    with pytest.raises(FloatingPointError, match=r"motion:ctrl_offsets\[1\]\.x"):
        optim.adam_step(g.blocks(), grads, st, 0.1, labels=labels)
    assert st.step == 0


def test_downscale():
    img = np.arange(4 * 4 * 3, dtype=float).reshape(4, 4, 3)
    small = optim.downscale(img, 2)
    assert np.allclose(small[0, 0], img[:2, :2].mean(axis=(0, 1)))
    assert optim.downscale(img, 3).shape == (3, 3, 3)


@pytest.fixture(scope="module")
def tiny_frames(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    spec = data.SynthSpec(resolution=16, n_train=4, n_test=1)
    data.generate_synthetic(spec, root)
    return data.load_dnerf(root, "train")


def _tiny_cfg(**kw):
    base = dict(lr_start=0.05, lr_end=0.005, total_steps=6, grid_resolution=4, order=3,
                warmup_res=8, full_res=16, crop_size=8, batch_rays=40, n_samples=12,
                near=2.5, far=5.5, seed=3)
    base.update(kw)
    return optim.TrainConfig(**base)


def test_zero_steps_leaves_grid(tiny_frames):
    cfg = _tiny_cfg(total_steps=0)
    g = field.grid_init(4, cfg.aabb, 3)
    before = g.copy()
    g, trace = optim.train_loop(g, tiny_frames, cfg)
    assert trace == []
    assert np.array_equal(g.radiance, before.radiance)


def test_training_deterministic(tiny_frames, tmp_path):
    results = []
    for n in range(2):
        cfg = _tiny_cfg()
        g = field.grid_init(4, cfg.aabb, 3)
        g, trace = optim.train_loop(g, tiny_frames, cfg)
        optim.write_trace(trace, tmp_path / f"t{n}.csv")
        field.save_grid(g, tmp_path / f"g{n}.splf")
        results.append(((tmp_path / f"t{n}.csv").read_bytes(),
                        (tmp_path / f"g{n}.splf").read_bytes()))
    assert results[0] == results[1]
    rows = optim.read_trace(tmp_path / "t0.csv")
    assert len(rows) == 6 and tuple(rows[0]) == optim.TRACE_COLUMNS
    assert rows[-1]["step"] == 5


def test_training_reduces_loss(tiny_frames):
    cfg = _tiny_cfg(total_steps=200, grid_resolution=8)
    g = field.grid_init(8, cfg.aabb, 3)
    _, trace = optim.train_loop(g, tiny_frames, cfg)
    first = np.mean([r["mse"] for r in trace[:3]])
    last = np.mean([r["mse"] for r in trace[-10:]])
    assert last < 0.5 * first


def test_training_checkpoints(tiny_frames, tmp_path):
    cfg = _tiny_cfg(checkpoint_every=2)
    path = tmp_path / "ck.splf"
    seen = []
    optim.train_loop(field.grid_init(4, cfg.aabb, 3), tiny_frames, cfg, path, seen.append)
    assert path.exists() and len(seen) == 6


def test_training_needs_frames():
    with pytest.raises(ValueError):
        optim.train_loop(field.grid_init(2, [[-1] * 3, [1] * 3], 2), [], _tiny_cfg())
