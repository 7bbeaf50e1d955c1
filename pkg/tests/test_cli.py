import colorsys
import json

import numpy as np
import pytest

from voxspline import cli, data, field, render
from voxspline.render import Camera

TINY = dict(lr_start=0.05, lr_end=0.005, total_steps=4, grid_resolution=4, order=3,
            warmup_res=8, full_res=16, crop_size=8, batch_rays=32, n_samples=8,
            near=2.5, far=5.5)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps({"resolution": 16, "n_train": 3, "n_test": 2}))
    assert cli.main(["synth", "--spec", str(spec_path), "--out", str(root / "ds")]) == 0
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(TINY))
    cam = data.orbit_camera(data.SynthSpec(resolution=16), 0.5, 0.4)
    cam_path = root / "cam.json"
    cam_path.write_text(json.dumps(cam.to_json()))
    return root


def _train(ws, name, *extra):
    out = ws / name
    args = ["train", "--data", str(ws / "ds"), "--config", str(ws / "cfg.json"),
            "--out", str(out), *extra]
    assert cli.main(args) == 0
    return out


def test_zero_steps_is_init(workspace, tmp_path):
    ckpt = _train(workspace, "zero.splf", "--steps", "0")
    ref = tmp_path / "ref.splf"
    field.save_grid(field.grid_init(4, TINY.get("aabb", [[-1.5] * 3, [1.5] * 3]), 3), ref)
    assert ckpt.read_bytes() == ref.read_bytes()
    assert cli.sidecar(str(ckpt), "loss.csv").endswith("zero.loss.csv")


def test_seeded_train_is_byte_identical(workspace):
    a = _train(workspace, "a.splf", "--seed", "7")
    b = _train(workspace, "b.splf", "--seed", "7")
    assert a.read_bytes() == b.read_bytes()
    assert (workspace / "a.loss.csv").read_bytes() == (workspace / "b.loss.csv").read_bytes()
    saved = json.loads((workspace / "a.config.json").read_text())
    assert saved["seed"] == 7 and saved["total_steps"] == 4


def test_train_failure_exit_code(workspace, capsys):
    code = cli.main(["train", "--data", str(workspace / "missing"), "--out",
                     str(workspace / "x.splf")])
    assert code != 0
    assert "error" in capsys.readouterr().err


def test_render_zero_offset_and_duplicates(workspace):
    ckpt = _train(workspace, "r.splf", "--steps", "0")
    out = workspace / "frames"
    assert cli.main(["render", "--ckpt", str(ckpt), "--camera", str(workspace / "cam.json"),
                     "--times", "0,1,0.5,0.5", "--out", str(out), "--deterministic"]) == 0
    files = [(out / f"frame_{n:04d}.png").read_bytes() for n in range(4)]
    assert files[0] == files[1]
    assert files[2] == files[3]


def test_render_rejects_bad_times(workspace):
    ckpt = _train(workspace, "r2.splf", "--steps", "0")
    assert cli.main(["render", "--ckpt", str(ckpt), "--camera", str(workspace / "cam.json"),
                     "--times", "0,1.5", "--out", str(workspace / "bad")]) != 0


def test_eval_reports(workspace, capsys):
    ckpt = _train(workspace, "e.splf")
    js = workspace / "eval.json"
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(workspace / "ds"),
                     "--split", "test", "--json", str(js)]) == 0
    report = json.loads(js.read_text())
    psnrs = [r["psnr"] for r in report["frames"]]
    assert len(psnrs) == 2
    assert report["summary"]["psnr"]["mean"] == float(np.mean(psnrs))
    assert report["summary"]["psnr"]["median"] == float(np.median(psnrs))
    assert report["summary"]["ms_ssim"] is None  # 16 px frames are below the MS-SSIM minimum
    table = capsys.readouterr().out
    assert "mean" in table and "median" in table


def test_flow_zero_offsets_is_gray(workspace):
    ckpt = _train(workspace, "f.splf", "--steps", "0")
    png = workspace / "flow.png"
    assert cli.main(["flow", "--ckpt", str(ckpt), "--camera", str(workspace / "cam.json"),
                     "--time", "0.5", "--out", str(png)]) == 0
    img = data.read_png(png)[..., :3]
    assert np.all(np.abs(img - 0.5) <= 0.5 / 255 + 1e-12)


def test_uniform_motion_single_hue():
    g = field.grid_init(6, [[-1.5] * 3, [1.5] * 3], order=2, mode="subtract_first")
    pos = g.vertex_position(np.arange(g.n_vertices))
    g.radiance[:, 0] = np.where(np.linalg.norm(pos, axis=1) < 0.8, 6.0, -30.0)
    g.motion[:, 0] = 40.0
    g.motion[:, 4] = -0.4  # last control point: bend rays back along -x, scene moves +x
    cam = Camera(0.69, render.look_at([0.5, -4.0, 1.0]), 24, 24)
    cfg = cli.optim.TrainConfig(near=2.0, far=6.0, n_samples=48)
    img = cli.render_frame(g, cam, 0.5, cfg)
    mask = img["alpha"] > 0.5
    flow2d = cli.project_flow(img["flow"], cam)[mask]
    angles = np.arctan2(flow2d[:, 1], flow2d[:, 0])
    assert mask.sum() > 20
    assert np.ptp(angles) < 1e-9
    # +x in world is to the right for this camera
    assert np.all(flow2d[:, 0] > 0)
    rgb = cli.flow_to_rgb(cli.project_flow(img["flow"], cam), 0.5)[mask]
    hues = [colorsys.rgb_to_hsv(*c)[0] for c in rgb]
    assert np.ptp(hues) < 1e-9


def test_hue_wheel_primaries():
    assert np.allclose(cli.hue_wheel(np.array(0.0)), [1, 0, 0])
    assert np.allclose(cli.hue_wheel(np.array(2 * np.pi / 3)), [0, 1, 0])
    assert np.allclose(cli.hue_wheel(np.array(4 * np.pi / 3)), [0, 0, 1])
    assert np.allclose(cli.flow_to_rgb(np.zeros((2, 2)), 1.0), 0.5)
