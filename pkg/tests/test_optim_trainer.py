import math

import numpy as np
import pytest

from pancakes.errors import ConfigurationError, NumericalError
from pancakes.optim import Adam
from pancakes.scene import init_from_pointcloud
from pancakes.trainer import (LOG_COLUMNS, TrainConfig, ViewSampler, evaluate, load_config,
                              position_lr, read_log, save_config, train, with_overrides)

from conftest import tiny_config


def test_adam_zero_gradient():
    p = {"x": np.arange(5.0)}
    opt = Adam(p)
    opt.step(p, {"x": np.zeros(5)}, {"x": 0.1})
    np.testing.assert_array_equal(p["x"], np.arange(5.0))


def test_adam_first_step():
    p = {"x": np.zeros(1)}
    Adam(p).step(p, {"x": np.ones(1)}, {"x": 0.1})
    assert p["x"][0] == pytest.approx(-0.1, abs=1e-12)


def _scalar_adam(theta, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-15):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
    return theta


def test_adam_quadratic_bowl_matches_scalar_reference():
    a = np.array([0.5, 2.0, 7.0])
    c = np.array([1.0, -2.0, 0.3])
    p = {"x": np.zeros(3)}
    opt = Adam(p)
    for _ in range(100):
        opt.step(p, {"x": a * (p["x"] - c)}, {"x": 0.05})
    for i in range(3):
        ref = _scalar_adam(0.0, lambda th: a[i] * (th - c[i]), 0.05, 100)
        assert abs(p["x"][i] - ref) < 1e-10


def test_adam_nan_aborts_with_location():
    p = {"x": np.zeros((4, 3))}
    g = np.zeros((4, 3))
    g[2, 1] = np.nan
    with pytest.raises(NumericalError, match=r"iteration 7.*'x'.*Gaussian 2"):
        Adam(p).step(p, {"x": g}, {"x": 0.1}, iteration=7)


def test_adam_remap():
    p = {"x": np.ones((3, 2))}
    opt = Adam(p)
    opt.step(p, {"x": np.arange(6.0).reshape(3, 2)}, {"x": 0.1})
    m = opt.m["x"].copy()
    opt.remap(np.array([2, 0, -1]))
    np.testing.assert_array_equal(opt.m["x"], [m[2], m[0], [0, 0]])
    assert opt.v["x"].shape == (3, 2) and not opt.v["x"][2].any()


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(total_iterations=500)  # geo start not below total
    with pytest.raises(ConfigurationError):
        TrainConfig(densify_until=8000)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigurationError):
        with_overrides(TrainConfig(), {"weights.nope": 1})


def test_config_roundtrip(tmp_path):
    cfg = with_overrides(TrainConfig(), {"weights.lambda_geo": 0.5, "seed": 9, "lr.opacity": 0.01})
    assert cfg.weights.lambda_geo == 0.5 and cfg.lr.opacity == 0.01
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.json")


def test_position_lr_schedule():
    cfg = TrainConfig()
    assert position_lr(cfg, 0, 1.0) == pytest.approx(1.6e-4)
    assert position_lr(cfg, 7000, 1.0) == pytest.approx(1.6e-6)
    assert position_lr(cfg, 3500, 2.0) == pytest.approx(2 * 1.6e-5)


def test_view_sampler_epochs():
    s = ViewSampler(np.arange(7), np.random.default_rng(0))
    seen = [s.next() for _ in range(21)]
    for e in range(3):
        assert sorted(seen[7 * e:7 * e + 7]) == list(range(7))


def test_densify_schedule():
    cfg = TrainConfig()
    steps = [it for it in range(1, 7001) if cfg.is_densify_step(it)]
    assert steps[0] == 500 and steps[-1] == 4000
    assert all(s % 100 == 0 for s in steps)


def test_plain_gs_logs_no_depth_or_geo(tiny_dataset):
    res = train(tiny_dataset, tiny_config(depth_on=False, geo_on=False))
    assert all(r[3] == 0 and r[4] == 0 for r in res.log)
    assert res.normal_field is None


def test_gating_and_densify_in_log(tiny_dataset, tmp_path):
    cfg = tiny_config()
    res = train(tiny_dataset, cfg, tmp_path)
    rows = read_log(tmp_path / "log.csv")
    assert tuple(rows[0]) == LOG_COLUMNS
    assert len(rows) == 30
    for r in rows:
        if r["iteration"] <= cfg.geo_loss_start:
            assert r["l_geo"] == 0
        else:
            assert r["l_geo"] > 0
        if r["densify"]:
            assert r["iteration"] % 5 == 0 and 10 <= r["iteration"] <= 20
    assert sum(r["densify"] for r in rows) == 3
    assert (tmp_path / "final.ply").exists()
    for v in res.cloud.params().values():
        assert np.all(np.isfinite(v))


def test_training_is_deterministic(tiny_dataset):
    a = train(tiny_dataset, tiny_config(seed=4))
    b = train(tiny_dataset, tiny_config(seed=4))
    strip = lambda log: [r[:7] + r[8:] for r in log]  # drop wall_ms
    assert strip(a.log) == strip(b.log)
    for k, v in a.cloud.params().items():
        np.testing.assert_array_equal(v, b.cloud.params()[k])
    c = train(tiny_dataset, tiny_config(seed=5))
    assert strip(c.log) != strip(a.log)


def test_missing_depth_rejected(tiny_dataset):
    from dataclasses import replace
    frames = [replace(f, depth_path=None) for f in tiny_dataset.frames]
    no_depth = replace(tiny_dataset, frames=frames, _cache={})
    with pytest.raises(ConfigurationError):
        train(no_depth, tiny_config())
    train(no_depth, tiny_config(depth_on=False))


def test_training_improves_psnr(tiny_dataset):
    train_idx, _ = tiny_dataset.split()
    pts, col = tiny_dataset.pointcloud()
    before = evaluate(init_from_pointcloud(pts, col), tiny_dataset, train_idx[:3], fps_repeats=0)
    res = train(tiny_dataset, tiny_config(total_iterations=150, densify_until=100, densify_interval=50))
    after = evaluate(res.cloud, tiny_dataset, train_idx[:3], fps_repeats=0)
    assert after[-1].psnr > before[-1].psnr


def test_evaluate_self_comparison(tiny_dataset):
    from dataclasses import replace
    from pancakes.rasterizer import render
    pts, col = tiny_dataset.pointcloud()
    cloud = init_from_pointcloud(pts, col)
    ds = replace(tiny_dataset, _cache={})
    for i, f in enumerate(ds.frames):
        out = render(cloud, f.camera)
        ds._cache[("rgb", i)] = out.rgb
        ds._cache[("depth", i)] = np.where(out.depth > 0, out.depth, 0.0)
    rows = evaluate(cloud, ds, [0, 1], fps_repeats=3, fps_warmup=1)
    assert rows[-1].view == "mean"
    for r in rows:
        assert r.psnr == math.inf and r.ssim == pytest.approx(1) and r.depth_mse == 0
        assert r.render_ms > 0


def test_metrics_match_recomputation_from_files(tiny_dataset, tmp_path):
    from pancakes.data import read_image, write_image
    from pancakes.metrics import psnr, ssim
    from pancakes.rasterizer import render
    res = train(tiny_dataset, tiny_config())
    _, test_idx = tiny_dataset.split()
    rows = evaluate(res.cloud, tiny_dataset, test_idx, fps_repeats=0)
    f = tiny_dataset.frames[test_idx[0]]
    out = render(res.cloud, f.camera)
    np.save(tmp_path / "r.npy", out.rgb)
    saved = np.load(tmp_path / "r.npy")
    truth = read_image(f.image_path)
    assert rows[0].psnr == psnr(saved, truth)
    assert rows[0].ssim == ssim(saved, truth)
    # an 8-bit export loses at most half a level per channel
    write_image(tmp_path / "r.png", out.rgb)
    assert abs(psnr(read_image(tmp_path / "r.png"), truth) - rows[0].psnr) < 1.0
