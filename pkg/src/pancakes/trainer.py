"""Optimization loop, schedules, evaluation."""
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import losses as L
from .errors import ConfigurationError
from .metrics import MetricRow, depth_mse, depth_ssim, measure_render_ms, psnr, ssim
from .normals import estimate_normals
from .optim import Adam
from .rasterizer import backward, normals_backward, render, render_normals_pass
from .scene import (MAX_SH_DEGREE, densify_and_prune, init_from_pointcloud, save_cloud_ply,
                    scene_extent)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "l_image", "l_dssim", "l_depth", "l_geo", "l_total",
               "N_gaussians", "wall_ms", "densify")


@dataclass
class LearningRates:
    position: float = 1.6e-4
    position_final: float = 1.6e-6
    sh_dc: float = 2.5e-3
    sh_rest: float = 2.5e-3 / 20
    opacity: float = 5e-2
    scale: float = 5e-3
    rotation: float = 1e-3


@dataclass
class TrainConfig:
    total_iterations: int = 7000
    densify_from: int = 500
    densify_until: int = 4000
    densify_interval: int = 100
    geo_loss_start: int = 1000
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    lr: LearningRates = field(default_factory=LearningRates)
    seed: int = 0
    depth_on: bool = True
    geo_on: bool = True
    checkpoint_every: int = 0
    grad_threshold: float = 2e-4
    # fraction of the scene extent above which a selected Gaussian splits
    split_scale: float = 0.01
    opacity_floor: float = 0.005
    sh_degree_interval: int = 1000
    max_sh_degree: int = MAX_SH_DEGREE
    normal_k: int = 10
    # divide rendered depth by alpha before comparing with the reference
    depth_normalized: bool = False
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        if isinstance(self.lr, dict):
            self.lr = LearningRates(**self.lr)
        self.background = tuple(float(x) for x in self.background)
        self.validate()

    def validate(self):
        if self.total_iterations < 1:
            raise ConfigurationError("total_iterations must be positive")
        if not self.geo_loss_start < self.total_iterations:
            raise ConfigurationError("geo_loss_start must be below total_iterations")
        if self.densify_until > self.total_iterations:
            raise ConfigurationError("densify_until must not exceed total_iterations")
        if self.densify_interval < 1:
            raise ConfigurationError("densify_interval must be positive")
        if not 0 <= self.max_sh_degree <= MAX_SH_DEGREE:
            raise ConfigurationError(f"max_sh_degree must lie in [0, {MAX_SH_DEGREE}]")

    def to_dict(self):
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def is_densify_step(self, it):
        return (self.densify_from <= it <= self.densify_until
                and it % self.densify_interval == 0)


@dataclass
class TrainResult:
    cloud: object
    log: list
    normal_field: object = None
    train_idx: np.ndarray = None
    test_idx: np.ndarray = None


class ViewSampler:
    """Shuffled epochs over the training views."""

    def __init__(self, views, rng):
        self.views = np.asarray(views)
        self.rng = rng
        self.queue = []

    def next(self):
        if not self.queue:
            self.queue = list(self.rng.permutation(self.views))
        return int(self.queue.pop())


def position_lr(cfg, it, extent):
    """Log-linear decay from ``position`` to ``position_final`` over the run."""
    frac = min(max(it / cfg.total_iterations, 0.0), 1.0)
    lr = np.exp((1 - frac) * np.log(cfg.lr.position) + frac * np.log(cfg.lr.position_final))
    return lr * extent


def _learning_rates(cfg, it, extent):
    sh_lr = np.full((1, 16, 1), cfg.lr.sh_rest)
    sh_lr[0, 0, 0] = cfg.lr.sh_dc
    return {"means": position_lr(cfg, it, extent), "raw_scales": cfg.lr.scale,
            "raw_rots": cfg.lr.rotation, "sh": sh_lr, "raw_opacity": cfg.lr.opacity}


def training_step(cloud, camera, truth, ref_depth, cfg, it, field_=None, geo_ref=None):
    """One forward/backward pass. Returns ``(breakdown, grads)``."""
    w = cfg.weights
    out = render(cloud, camera, cfg.background)
    l_img, g_img = L.l1_image(out.rgb, truth)
    l_ds, g_ds = L.d_ssim(out.rgb, truth)
    grad_rgb = (1 - w.lambda_dssim) * g_img + w.lambda_dssim * g_ds

    l_dep = 0.0
    grad_depth = grad_alpha = None
    if cfg.depth_on:
        if cfg.depth_normalized:
            a = np.maximum(out.alpha, 1e-6)
            rendered = out.depth / a
        else:
            rendered = out.depth
        l_dep, g_dep = L.depth_huber(ref_depth, rendered, delta=w.huber_delta)
        g_dep = w.lambda_depth * g_dep
        if cfg.depth_normalized:
            grad_depth = g_dep / a
            grad_alpha = np.where(out.alpha > 1e-6, -g_dep * out.depth / (a * a), 0.0)
        else:
            grad_depth = g_dep

    grads = backward(cloud, camera, out, grad_rgb, grad_depth, grad_alpha)

    l_geo = 0.0
    gate = L.geo_gate(it, cfg.geo_loss_start) if it is not None else 1.0
    if cfg.geo_on and gate:
        normals, axis = render_normals_pass(cloud)
        ref = field_.nearest_normal(cloud.means) if geo_ref is None else geo_ref
        l_geo, g_geo, _ = L.geometric_cosine(normals, ref)
        grads.raw_rots += normals_backward(cloud, axis, w.lambda_geo * g_geo)

    bd = L.total_loss(l_img, l_ds, l_dep, l_geo, w, iteration=it, geo_start=cfg.geo_loss_start)
    return bd, grads, out


def train(dataset, cfg=None, out_dir=None, callback=None):
    """Fit a Gaussian cloud to the training split of ``dataset``.

    Writes ``log.csv`` (and checkpoints if ``checkpoint_every`` > 0) into
    ``out_dir`` when given.
    """
    cfg = cfg or TrainConfig()
    if len(dataset) == 0:
        raise ConfigurationError("dataset has no frames")
    train_idx, test_idx = dataset.split()
    if len(train_idx) < 2:
        raise ConfigurationError(f"need at least 2 training views, got {len(train_idx)}")
    if cfg.depth_on and not dataset.has_depth:
        raise ConfigurationError("depth_on requires a depth map for every frame")

    rng = np.random.default_rng(cfg.seed)
    points, colors = dataset.pointcloud()
    if colors is None:
        colors = np.full_like(points, 0.5)
    cloud = init_from_pointcloud(points, colors)
    extent = scene_extent(points)
    field_ = estimate_normals(points, cfg.normal_k) if cfg.geo_on else None

    adam = Adam(cloud.params())
    sampler = ViewSampler(train_idx, rng)
    out_dir = Path(out_dir) if out_dir else None
    rows = []
    writer = fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "log.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    try:
        for it in range(1, cfg.total_iterations + 1):
            t0 = time.perf_counter()
            if it % cfg.sh_degree_interval == 0 and cloud.sh_degree < cfg.max_sh_degree:
                cloud.sh_degree += 1
            v = sampler.next()
            frame = dataset.frames[v]
            bd, grads, _ = training_step(cloud, frame.camera, dataset.image(v),
                                         dataset.depth(v) if cfg.depth_on else None,
                                         cfg, it, field_)
            adam.step(cloud.params(), grads.params(), _learning_rates(cfg, it, extent), it)
            cloud.add_densify_stats(grads.screen, grads.visible)

            densified = cfg.is_densify_step(it)
            if densified:
                cloud, origin = densify_and_prune(
                    cloud, cfg.grad_threshold, cfg.split_scale * extent, cfg.opacity_floor, rng)
                adam.remap(origin)
            wall_ms = (time.perf_counter() - t0) * 1e3
            row = (it, bd.l_image, bd.l_dssim, bd.l_depth, bd.l_geo, bd.l_total, len(cloud),
                   wall_ms, int(densified))
            rows.append(row)
            if writer:
                writer.writerow([repr(x) if isinstance(x, float) else x for x in row])
            if cfg.checkpoint_every and out_dir and it % cfg.checkpoint_every == 0:
                save_cloud_ply(cloud, out_dir / f"checkpoint_{it:06d}.ply")
            if callback:
                callback(it, cloud, bd)
            if it % 500 == 0:
                log.info("it %d  loss %.5f  N %d", it, bd.l_total, len(cloud))
    finally:
        if fh:
            fh.close()
    if out_dir:
        save_cloud_ply(cloud, out_dir / "final.ply")
    return TrainResult(cloud, rows, field_, train_idx, test_idx)


def read_log(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: float(v) for k, v in r.items()} for r in reader]


def evaluate(cloud, dataset, views, background=(0.0, 0.0, 0.0), fps_repeats=100, fps_warmup=10):
    """Per-view metric rows plus a mean row (view ``"mean"``)."""
    rows = []
    for v in views:
        frame = dataset.frames[v]
        out = render(cloud, frame.camera, background)
        truth = dataset.image(v)
        ref_depth = dataset.depth(v)
        dm = depth_mse(ref_depth, out.depth) if ref_depth is not None else float("nan")
        rows.append(MetricRow(frame.name, psnr(out.rgb, truth), ssim(out.rgb, truth), dm, float("nan")))
    if rows and fps_repeats:
        cam = dataset.frames[views[0]].camera
        ms = measure_render_ms(lambda: render(cloud, cam, background), fps_repeats, fps_warmup)
        for r in rows:
            r.render_ms = ms
    if rows:
        rows.append(MetricRow("mean", float(np.mean([r.psnr for r in rows])),
                              float(np.mean([r.ssim for r in rows])),
                              float(np.mean([r.depth_mse for r in rows])), rows[0].render_ms))
    return rows


def depth_ssim_mean(cloud, dataset, views, background=(0.0, 0.0, 0.0), truth_cloud=None):
    """Mean depth SSIM over ``views``. The reference is the stored depth map, or the
    depth of ``truth_cloud`` rendered at the stored camera when one is given."""
    vals = []
    for v in views:
        cam = dataset.frames[v].camera
        ref = dataset.depth(v) if truth_cloud is None else render(truth_cloud, cam, background).depth
        if ref is None:
            continue
        vals.append(depth_ssim(ref, render(cloud, cam, background).depth))
    return float(np.mean(vals)) if vals else float("nan")


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "psnr", "ssim", "depth_mse", "render_ms"])
        for r in rows:
            w.writerow([r.view, repr(r.psnr), repr(r.ssim), repr(r.depth_mse), repr(r.render_ms)])


def save_config(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def load_config(path):
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path}: invalid JSON ({exc})") from exc
    return TrainConfig.from_dict(data)


def with_overrides(cfg, overrides):
    """Apply ``{"a.b": value}`` overrides by dotted path; returns a new config."""
    d = cfg.to_dict()
    for key, value in overrides.items():
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigurationError(f"unknown config field '{key}'")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown config field '{key}'")
        node[parts[-1]] = value
    return TrainConfig.from_dict(d)


def evaluate_normals(cloud, shape, min_opacity=0.0):
    """Opacity-weighted mean angle (degrees) between each Gaussian's thin axis and the
    analytic normal at its mean. Gaussians at or below ``min_opacity`` are skipped."""
    normals, _ = render_normals_pass(cloud)
    op = cloud.opacity
    keep = op > min_opacity
    if not keep.any():
        return float("nan")
    ref = shape.normal_at(cloud.means[keep])
    cos = np.abs(np.sum(normals[keep] * ref, axis=1))
    ang = np.degrees(np.arccos(np.clip(cos, 0.0, 1.0)))
    return float(np.average(ang, weights=op[keep]))


__all__ = ["TrainConfig", "LearningRates", "TrainResult", "train", "evaluate", "training_step",
           "position_lr", "ViewSampler", "read_log", "write_metrics_csv", "save_config",
           "load_config", "with_overrides", "depth_ssim_mean", "evaluate_normals"]
