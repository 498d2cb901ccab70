"""Optimizable Gaussian cloud, pinhole camera, initialization and density control."""
from dataclasses import dataclass, field

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.spatial import cKDTree

from . import geometry as geo
from .errors import ContractViolation, InsufficientPointsError

MAX_SH_DEGREE = 3
N_SH = geo.sh_count(MAX_SH_DEGREE)
PARAM_NAMES = ("means", "raw_scales", "raw_rots", "sh", "raw_opacity")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation(f"focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ContractViolation(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-6:
            raise ContractViolation("camera rotation is not orthonormal")

    @classmethod
    def from_w2c(cls, w2c, fx, fy, cx, cy, width, height):
        w2c = np.asarray(w2c, dtype=np.float64).reshape(4, 4)
        return cls(fx, fy, cx, cy, int(width), int(height), w2c[:3, :3], w2c[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None):
        """Camera at ``eye`` looking at ``target``; +z forward, +y down in image."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        cx = width / 2 if cx is None else cx
        cy = height / 2 if cy is None else cy
        return cls(fx, fy, cx, cy, width, height, R, -R @ eye)

    @property
    def w2c(self):
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    @property
    def center(self):
        return -self.R.T @ self.t

    def world_to_camera(self, pts):
        return pts @ self.R.T + self.t

    def project(self, pts_cam):
        return np.stack([self.fx * pts_cam[..., 0] / pts_cam[..., 2] + self.cx,
                         self.fy * pts_cam[..., 1] / pts_cam[..., 2] + self.cy], axis=-1)


@dataclass
class GaussianCloud:
    """Raw (pre-activation) Gaussian parameters.

    ``sh`` always stores the degree-3 layout (N, 16, 3); only the first
    (sh_degree+1)^2 rows participate in rendering.
    """
    means: np.ndarray
    raw_scales: np.ndarray
    raw_rots: np.ndarray
    sh: np.ndarray
    raw_opacity: np.ndarray
    sh_degree: int = 0
    grad_accum: np.ndarray = None
    grad_denom: np.ndarray = None

    def __post_init__(self):
        n = len(self.means)
        if n < 1:
            raise ContractViolation("a GaussianCloud needs at least one Gaussian")
        shapes = {"means": (n, 3), "raw_scales": (n, 3), "raw_rots": (n, 4),
                  "sh": (n, N_SH, 3), "raw_opacity": (n,)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ContractViolation(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_denom is None:
            self.grad_denom = np.zeros(n)

    def __len__(self):
        return len(self.means)

    @property
    def scales(self):
        return np.exp(self.raw_scales)

    @property
    def opacity(self):
        return sigmoid(self.raw_opacity)

    @property
    def rotations(self):
        return geo.quat_to_rotation(self.raw_rots)

    def covariances(self):
        return geo.build_covariance(self.scales, self.raw_rots)

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()},
                             sh_degree=self.sh_degree,
                             grad_accum=self.grad_accum.copy(),
                             grad_denom=self.grad_denom.copy())

    def take(self, index):
        return GaussianCloud(**{k: v[index] for k, v in self.params().items()},
                             sh_degree=self.sh_degree,
                             grad_accum=self.grad_accum[index],
                             grad_denom=self.grad_denom[index])

    def add_densify_stats(self, screen_grad, visible):
        self.grad_accum[visible] += screen_grad[visible]
        self.grad_denom[visible] += 1

    def reset_densify_stats(self):
        self.grad_accum = np.zeros(len(self))
        self.grad_denom = np.zeros(len(self))


def _concat(clouds):
    first = clouds[0]
    return GaussianCloud(**{k: np.concatenate([getattr(c, k) for c in clouds]) for k in PARAM_NAMES},
                         sh_degree=first.sh_degree,
                         grad_accum=np.concatenate([c.grad_accum for c in clouds]),
                         grad_denom=np.concatenate([c.grad_denom for c in clouds]))


def scene_extent(points):
    """Radius of the point set around its centroid."""
    points = np.asarray(points, dtype=np.float64)
    return float(np.max(np.linalg.norm(points - points.mean(axis=0), axis=1)))


def init_from_pointcloud(points, colors, initial_opacity=0.1):
    """One isotropic Gaussian per point.

    Scale is the distance to the third-nearest other point, color is the
    degree-0 SH term that reproduces ``colors`` (floats in [0, 1]).
    """
    points = np.asarray(points, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < 4:
        raise InsufficientPointsError(f"need at least 4 points, got {len(points)}")
    if not np.all(np.isfinite(points)):
        raise InsufficientPointsError("point cloud contains non-finite coordinates")
    n = len(points)
    dist, _ = cKDTree(points).query(points, k=4)
    extent = max(scene_extent(points), 1e-7)
    scale = np.clip(dist[:, 3], 1e-7, extent)
    sh = np.zeros((n, N_SH, 3))
    sh[:, 0, :] = geo.rgb_to_sh_dc(colors)
    rots = np.zeros((n, 4))
    rots[:, 0] = 1.0
    return GaussianCloud(means=points.copy(),
                         raw_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
                         raw_rots=rots,
                         sh=sh,
                         raw_opacity=np.full(n, logit(initial_opacity)),
                         sh_degree=0)


def densify_and_prune(cloud, grad_threshold=2e-4, scale_threshold=0.01, opacity_floor=0.005,
                      rng=None, split_factor=1.6):
    """Clone/split high-gradient Gaussians and drop transparent ones.

    Returns ``(new_cloud, origin)`` where ``origin[i]`` is the index in the
    input cloud that output Gaussian ``i`` continues, or -1 for Gaussians
    created here (clones and split children), whose optimizer moments
    start from zero.
    """
    rng = np.random.default_rng() if rng is None else rng
    n = len(cloud)
    denom = cloud.grad_denom
    mean_grad = np.divide(cloud.grad_accum, denom, out=np.zeros(n), where=denom > 0)
    selected = mean_grad > grad_threshold
    big = cloud.scales.max(axis=1) >= scale_threshold
    clone = selected & ~big
    split = selected & big

    parts, origin = [], []
    if not split.all():
        parts.append(cloud.take(~split))
        origin.append(np.flatnonzero(~split))
    if clone.any():
        parts.append(cloud.take(clone))
        origin.append(np.full(clone.sum(), -1))
    if split.any():
        parent = cloud.take(split)
        R = parent.rotations
        s = parent.scales
        children = []
        for _ in range(2):
            child = parent.copy()
            offset = rng.normal(size=s.shape) * s
            child.means = parent.means + np.einsum("nij,nj->ni", R, offset)
            child.raw_scales = np.log(s / split_factor)
            children.append(child)
        parts.extend(children)
        origin.append(np.full(2 * split.sum(), -1))
    out = _concat(parts)
    origin = np.concatenate(origin)

    keep = out.opacity >= opacity_floor
    if not keep.any():
        keep[np.argmax(out.raw_opacity)] = True
    out = out.take(keep)
    out.reset_densify_stats()
    return out, origin[keep]


# ---------------------------------------------------------------------------
# PLY checkpoints

def _cloud_dtype():
    names = (["x", "y", "z"] + [f"raw_scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
             + ["opacity"] + [f"f_dc_{i}" for i in range(3)] + [f"f_rest_{i}" for i in range(3 * (N_SH - 1))])
    return [(name, "<f8") for name in names]


def save_cloud_ply(cloud, path):
    """Binary little-endian PLY, one vertex per Gaussian.

    ``f_rest_*`` is channel-major (all red coefficients first), the layout
    common splatting viewers expect. Values are stored as float64.
    """
    n = len(cloud)
    data = np.empty(n, dtype=_cloud_dtype())
    data["x"], data["y"], data["z"] = cloud.means.T
    for i in range(3):
        data[f"raw_scale_{i}"] = cloud.raw_scales[:, i]
        data[f"f_dc_{i}"] = cloud.sh[:, 0, i]
    for i in range(4):
        data[f"rot_{i}"] = cloud.raw_rots[:, i]
    data["opacity"] = cloud.raw_opacity
    rest = cloud.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    for i in range(rest.shape[1]):
        data[f"f_rest_{i}"] = rest[:, i]
    el = PlyElement.describe(data, "vertex")
    PlyData([el], byte_order="<", comments=[f"sh_degree {cloud.sh_degree}"]).write(str(path))


def load_cloud_ply(path):
    ply = PlyData.read(str(path))
    v = ply["vertex"].data
    n = len(v)
    sh = np.zeros((n, N_SH, 3))
    for i in range(3):
        sh[:, 0, i] = v[f"f_dc_{i}"]
    rest = np.stack([v[f"f_rest_{i}"] for i in range(3 * (N_SH - 1))], axis=1)
    sh[:, 1:, :] = rest.reshape(n, 3, N_SH - 1).transpose(0, 2, 1)
    degree = 0
    for c in ply.comments:
        if c.startswith("sh_degree"):
            degree = int(c.split()[1])
    return GaussianCloud(
        means=np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64),
        raw_scales=np.stack([v[f"raw_scale_{i}"] for i in range(3)], axis=1).astype(np.float64),
        raw_rots=np.stack([v[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64),
        sh=sh,
        raw_opacity=np.asarray(v["opacity"], dtype=np.float64),
        sh_degree=degree)


def save_pointcloud_ply(path, points, colors=None, normals=None, reliable=None):
    """Point cloud with optional uint8 colors and float normals."""
    points = np.asarray(points, dtype=np.float64)
    dtype = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if colors is not None:
        dtype += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if normals is not None:
        dtype += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
    if reliable is not None:
        dtype += [("reliable", "u1")]
    data = np.empty(len(points), dtype=dtype)
    data["x"], data["y"], data["z"] = points.T
    if colors is not None:
        c = np.asarray(colors)
        if c.dtype != np.uint8:
            c = np.clip(np.round(c * 255), 0, 255).astype(np.uint8)
        data["red"], data["green"], data["blue"] = c.T
    if normals is not None:
        data["nx"], data["ny"], data["nz"] = np.asarray(normals, dtype=np.float64).T
    if reliable is not None:
        data["reliable"] = np.asarray(reliable, dtype=np.uint8)
    PlyData([PlyElement.describe(data, "vertex")], byte_order="<").write(str(path))


def load_pointcloud_ply(path):
    """Returns ``(points, colors)``; colors are floats in [0, 1] or None."""
    v = PlyData.read(str(path))["vertex"].data
    points = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    names = v.dtype.names
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64) / 255.0
    return points, colors
