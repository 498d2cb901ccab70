"""Dataset layout on disk, train/test split, and a synthetic scene generator.

Layout::

    root/cameras.json      [{file, fx, fy, cx, cy, width, height, w2c (4x4 row-major),
                             depth_file?, depth_scale?}, ...]
    root/images/*.png      8-bit RGB
    root/depths/*.png      16-bit grayscale, depth = pixel * depth_scale (0 = no depth)
    root/pointcloud.ply    x, y, z, red, green, blue
"""
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry as geo
from .errors import ContractViolation, PancakeError
from .scene import Camera, GaussianCloud, N_SH, load_pointcloud_ply, logit, save_pointcloud_ply


class DatasetError(PancakeError):
    pass


@dataclass
class Frame:
    name: str
    camera: Camera
    image_path: Path
    depth_path: Path = None
    depth_scale: float = None


@dataclass
class SceneDataset:
    root: Path
    frames: list
    pointcloud_path: Path
    test_every: int = 9
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.frames)

    @property
    def has_depth(self):
        return all(f.depth_path is not None for f in self.frames)

    def image(self, i):
        key = ("rgb", i)
        if key not in self._cache:
            self._cache[key] = read_image(self.frames[i].image_path)
        return self._cache[key]

    def depth(self, i):
        f = self.frames[i]
        if f.depth_path is None:
            return None
        key = ("depth", i)
        if key not in self._cache:
            self._cache[key] = read_depth(f.depth_path, f.depth_scale)
        return self._cache[key]

    def pointcloud(self):
        return load_pointcloud_ply(self.pointcloud_path)

    def split(self):
        return split_8_1(len(self.frames), self.test_every)


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, rgb):
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, optimize=False)


def encode_depth(depth, scale):
    return np.clip(np.round(np.nan_to_num(depth) / scale), 0, 65535).astype(np.uint16)


def write_depth(path, depth, scale):
    Image.fromarray(encode_depth(depth, scale)).save(path)


def read_depth(path, scale):
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I", "L"):
            raise DatasetError(f"{path}: depth PNG must be 16-bit grayscale, got mode {im.mode}")
        raw = np.asarray(im, dtype=np.float64)
    return raw * scale


def split_8_1(n_frames, every=9):
    """Indices ``(train, test)``; every ``every``-th frame (8, 17, 26, ...) is held out."""
    idx = np.arange(n_frames)
    if n_frames < every:
        warnings.warn(f"only {n_frames} frames; using all for training", stacklevel=2)
        return idx, idx[:0]
    test = idx % every == every - 1
    return idx[~test], idx[test]


_REQUIRED = ("file", "fx", "fy", "cx", "cy", "width", "height", "w2c")


def _parse_frame(root, i, entry):
    where = f"{root / 'cameras.json'}[{i}]"
    for key in _REQUIRED:
        if key not in entry:
            raise DatasetError(f"{where}: missing field '{key}'")
    w2c = np.asarray(entry["w2c"], dtype=np.float64)
    if w2c.shape != (4, 4):
        raise DatasetError(f"{where}: field 'w2c' must be 4x4, got shape {w2c.shape}")
    try:
        cam = Camera.from_w2c(w2c, entry["fx"], entry["fy"], entry["cx"], entry["cy"],
                              entry["width"], entry["height"])
    except ContractViolation as exc:
        field_name = "fx/fy" if "focal" in str(exc) else ("cx/cy" if "principal" in str(exc) else "w2c")
        raise DatasetError(f"{where}: invalid field '{field_name}': {exc}") from exc
    image_path = root / "images" / entry["file"]
    if not image_path.exists():
        raise DatasetError(f"{where}: image file {image_path} does not exist")
    with Image.open(image_path) as im:
        if im.size != (cam.width, cam.height):
            raise DatasetError(f"{image_path}: size {im.size} does not match camera "
                               f"width/height ({cam.width}, {cam.height})")
    depth_path = depth_scale = None
    if entry.get("depth_file"):
        depth_path = root / "depths" / entry["depth_file"]
        if not depth_path.exists():
            raise DatasetError(f"{where}: depth file {depth_path} does not exist")
        if "depth_scale" not in entry or not entry["depth_scale"] > 0:
            raise DatasetError(f"{where}: field 'depth_scale' must be positive when depth_file is set")
        depth_scale = float(entry["depth_scale"])
    return Frame(Path(entry["file"]).stem, cam, image_path, depth_path, depth_scale)


def load_dataset(root, test_every=9):
    root = Path(root)
    cam_file = root / "cameras.json"
    if not cam_file.exists():
        raise DatasetError(f"{cam_file} not found")
    try:
        entries = json.loads(cam_file.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{cam_file}: invalid JSON ({exc})") from exc
    if not isinstance(entries, list) or not entries:
        raise DatasetError(f"{cam_file}: expected a non-empty array of cameras")
    frames = [_parse_frame(root, i, e) for i, e in enumerate(entries)]
    frames.sort(key=lambda f: f.image_path.name)
    pc = root / "pointcloud.ply"
    if not pc.exists():
        raise DatasetError(f"{pc} not found")
    return SceneDataset(root, frames, pc, test_every)


def save_dataset(root, cameras, images, points, colors, depths=None, depth_scale=None, names=None):
    """Write the on-disk layout; returns the loaded dataset."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if depths is not None:
        (root / "depths").mkdir(exist_ok=True)
        if depth_scale is None:
            depth_scale = float(max(np.nanmax(d) for d in depths)) * 1.05 / 65535
    entries = []
    for i, (cam, img) in enumerate(zip(cameras, images)):
        name = names[i] if names else f"frame_{i:05d}"
        write_image(root / "images" / f"{name}.png", img)
        entry = {"file": f"{name}.png", "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                 "width": cam.width, "height": cam.height, "w2c": cam.w2c.tolist()}
        if depths is not None:
            write_depth(root / "depths" / f"{name}.png", depths[i], depth_scale)
            entry["depth_file"] = f"{name}.png"
            entry["depth_scale"] = depth_scale
        entries.append(entry)
    (root / "cameras.json").write_text(json.dumps(entries, indent=1))
    save_pointcloud_ply(root / "pointcloud.ply", points, colors)
    return load_dataset(root)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class TubeShape:
    """Bent cylinder: a section of a torus with centerline radius ``bend``."""
    bend: float = 4.0
    radius: float = 1.0
    phi_min: float = np.deg2rad(-20.0)
    phi_max: float = np.deg2rad(140.0)

    def point(self, phi, theta):
        radial = np.stack([np.cos(phi), np.sin(phi), np.zeros_like(phi)], axis=-1)
        ez = np.array([0.0, 0.0, 1.0])
        n = np.cos(theta)[..., None] * radial + np.sin(theta)[..., None] * ez
        return self.bend * radial + self.radius * n, n

    def centerline(self, phi):
        return self.bend * np.array([np.cos(phi), np.sin(phi), 0.0])

    def normal_at(self, p):
        """Outward normal of the closest surface point."""
        p = np.asarray(p, dtype=np.float64)
        phi = np.arctan2(p[..., 1], p[..., 0])
        c = self.bend * np.stack([np.cos(phi), np.sin(phi), np.zeros_like(phi)], axis=-1)
        d = p - c
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def implicit(self, p):
        rho = np.hypot(p[..., 0], p[..., 1])
        return np.hypot(rho - self.bend, p[..., 2]) - self.radius

    def area(self):
        return (self.phi_max - self.phi_min) * self.bend * 2 * np.pi * self.radius


@dataclass(frozen=True)
class SphereShape:
    radius: float = 1.0

    def normal_at(self, p):
        p = np.asarray(p, dtype=np.float64)
        return p / np.linalg.norm(p, axis=-1, keepdims=True)

    def implicit(self, p):
        return np.linalg.norm(p, axis=-1) - self.radius

    def area(self):
        return 4 * np.pi * self.radius ** 2


@dataclass(frozen=True)
class PlaneShape:
    half: float = 1.0

    def normal_at(self, p):
        p = np.asarray(p, dtype=np.float64)
        return np.broadcast_to(np.array([0.0, 0.0, 1.0]), p.shape).copy()

    def implicit(self, p):
        return p[..., 2]

    def area(self):
        return (2 * self.half) ** 2


SHAPES = {"tube": TubeShape, "sphere": SphereShape, "plane": PlaneShape}


def _texture(points, seed):
    """Smooth seeded RGB pattern defined on 3D positions, values in [0.05, 0.95]."""
    rng = np.random.default_rng(seed)
    base = np.array([0.75, 0.42, 0.38])
    col = np.broadcast_to(base, points.shape).copy()
    for freq, amp in ((1.3, 0.12), (2.7, 0.08), (5.0, 0.05)):
        w = rng.normal(size=(3, 3))
        w *= freq / np.linalg.norm(w, axis=1, keepdims=True)
        phase = rng.uniform(0, 2 * np.pi, 3)
        mix = rng.uniform(0.5, 1.0, 3)
        col += amp * mix * np.sin(points @ w.T + phase)
    return np.clip(col, 0.05, 0.95)


def _frames_from_normals(n):
    """Rotations whose third column is ``n``."""
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=2)


def _rotation_to_quat(R):
    """Quaternion (w, x, y, z) of proper rotation matrices (Shepperd's method)."""
    q = np.empty(R.shape[:-2] + (4,))
    tr = np.trace(R, axis1=-2, axis2=-1)
    cands = np.stack([tr, R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]], axis=-1)
    k = np.argmax(cands, axis=-1)
    for case in range(4):
        sel = k == case
        Rs = R[sel]
        if case == 0:
            s = 2 * np.sqrt(1 + tr[sel])
            q[sel] = np.stack([s / 4, (Rs[:, 2, 1] - Rs[:, 1, 2]) / s,
                               (Rs[:, 0, 2] - Rs[:, 2, 0]) / s, (Rs[:, 1, 0] - Rs[:, 0, 1]) / s], -1)
        else:
            i = case - 1
            j, l = (i + 1) % 3, (i + 2) % 3
            s = 2 * np.sqrt(1 + Rs[:, i, i] - Rs[:, j, j] - Rs[:, l, l])
            out = np.empty((sel.sum(), 4))
            out[:, 0] = (Rs[:, l, j] - Rs[:, j, l]) / s
            out[:, 1 + i] = s / 4
            out[:, 1 + j] = (Rs[:, j, i] + Rs[:, i, j]) / s
            out[:, 1 + l] = (Rs[:, l, i] + Rs[:, i, l]) / s
            q[sel] = out
    return q


def _sample_surface(shape, n, rng, stratified=True):
    """Roughly uniform surface samples: ``(points, normals)``."""
    if isinstance(shape, TubeShape):
        length = (shape.phi_max - shape.phi_min) * shape.bend
        circ = 2 * np.pi * shape.radius
        nu = max(2, int(round(np.sqrt(n * length / circ))))
        nv = max(3, int(np.ceil(n / nu)))
        iu, iv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
        ju = rng.uniform(0, 1, iu.shape) if stratified else 0.5
        jv = rng.uniform(0, 1, iv.shape) if stratified else 0.5
        phi = shape.phi_min + (iu + ju) / nu * (shape.phi_max - shape.phi_min)
        theta = (iv + jv) / nv * 2 * np.pi
        p, nrm = shape.point(phi.ravel(), theta.ravel())
        return p, nrm
    if isinstance(shape, SphereShape):
        i = np.arange(n) + (rng.uniform(-0.3, 0.3, n) if stratified else 0.0)
        z = 1 - 2 * (i + 0.5) / n
        ang = np.pi * (3 - np.sqrt(5)) * np.arange(n)
        r = np.sqrt(np.clip(1 - z * z, 0, 1))
        nrm = np.stack([r * np.cos(ang), r * np.sin(ang), z], axis=1)
        return shape.radius * nrm, nrm
    side = max(2, int(round(np.sqrt(n))))
    g = (np.arange(side) + 0.5) / side
    xx, yy = np.meshgrid(g, g, indexing="ij")
    if stratified:
        xx = xx + rng.uniform(-0.5, 0.5, xx.shape) / side
        yy = yy + rng.uniform(-0.5, 0.5, yy.shape) / side
    p = np.stack([(2 * xx.ravel() - 1) * shape.half, (2 * yy.ravel() - 1) * shape.half,
                  np.zeros(xx.size)], axis=1)
    return p, np.broadcast_to([0.0, 0.0, 1.0], p.shape).copy()


def _camera_path(shape, n_views, width, height, rng):
    fx = fy = 0.5 * width / np.tan(np.deg2rad(40.0))
    cams = []
    for i in range(n_views):
        if isinstance(shape, TubeShape):
            s = i / max(n_views - 1, 1)
            phi = np.deg2rad(0.0 + 60.0 * s)
            wobble = 0.25 * shape.radius
            eye = shape.centerline(phi) + wobble * np.array(
                [np.cos(phi) * np.sin(5 * np.pi * s), np.sin(phi) * np.sin(5 * np.pi * s),
                 np.cos(3 * np.pi * s)])
            target = shape.centerline(phi + np.deg2rad(28.0))
            target = target + 0.3 * shape.radius * np.array([0.0, 0.0, np.sin(4 * np.pi * s)])
            up = np.array([0.0, 0.0, 1.0])
        elif isinstance(shape, SphereShape):
            s = i / n_views  # closed orbit: the last view must not repeat the first
            az = 2 * np.pi * s
            el = np.deg2rad(25.0) * np.sin(3 * np.pi * s)
            dist = 3.0 * shape.radius
            eye = dist * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
            target = np.zeros(3)
            up = np.array([0.0, 0.0, 1.0])
        else:
            s = i / n_views
            az = 2 * np.pi * s
            eye = np.array([0.5 * shape.half * np.cos(az), 0.5 * shape.half * np.sin(az),
                            2.2 * shape.half])
            target = np.array([0.1 * np.cos(2 * az), 0.1 * np.sin(2 * az), 0.0])
            up = np.array([0.0, 1.0, 0.0])
        cams.append(Camera.look_at(eye, target, up, fx, fy, width, height))
    centers = np.array([c.center for c in cams])
    dirs = np.array([c.R[2] for c in cams])
    if np.ptp(centers, axis=0).max() < 1e-9 and np.ptp(dirs, axis=0).max() < 1e-9:
        raise DatasetError("degenerate camera path: all views identical")
    return cams


def _axis_angle(axis, angle):
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def _perturb(cam, rot_sigma_deg, trans_sigma, rng):
    angle = np.deg2rad(rng.normal(0, rot_sigma_deg)) if rot_sigma_deg > 0 else 0.0
    dR = _axis_angle(rng.normal(size=3), angle)
    center = cam.center + (rng.normal(0, trans_sigma, 3) if trans_sigma > 0 else 0.0)
    R = dR @ cam.R
    return Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, R, -R @ center)


def make_gt_cloud(shape, spacing, seed, opacity=0.95, flatness=0.08):
    """Flat, opaque Gaussians tiling the surface with their thin axis on the normal."""
    rng = np.random.default_rng(seed)
    n = max(16, int(shape.area() / spacing ** 2))
    pts, nrm = _sample_surface(shape, n, rng)
    n = len(pts)
    R = _frames_from_normals(nrm)
    tangential = spacing
    scales = np.tile([tangential, tangential, flatness * tangential], (n, 1))
    sh = np.zeros((n, N_SH, 3))
    sh[:, 0, :] = geo.rgb_to_sh_dc(_texture(pts, seed))
    return GaussianCloud(means=pts, raw_scales=np.log(scales), raw_rots=_rotation_to_quat(R),
                         sh=sh, raw_opacity=np.full(n, logit(opacity)), sh_degree=0)


def synth_scene(out_dir, shape="tube", n_views=60, resolution=128, depth_noise=0.0,
                rot_noise_deg=0.0, trans_noise=0.0, seed=0, n_points=3000, spacing=None,
                renderer="reference"):
    """Render a synthetic dataset from a known Gaussian cloud and write it to ``out_dir``.

    ``trans_noise`` is a fraction of the scene extent. Images are rendered
    from the exact poses; the stored poses and depths carry the noise.
    Returns ``(dataset, gt_cloud, shape_obj)``.
    """
    from .rasterizer import render
    from .reference import render_reference

    if n_views < 2:
        raise DatasetError("synth_scene needs at least 2 views")
    if shape not in SHAPES:
        raise DatasetError(f"unknown shape '{shape}', expected one of {sorted(SHAPES)}")
    shape_obj = SHAPES[shape]()
    spacing = spacing or {"tube": 0.12, "sphere": 0.06, "plane": 0.05}[shape]
    rng = np.random.default_rng(seed)
    gt = make_gt_cloud(shape_obj, spacing, seed)
    width = height = int(resolution)
    cams = _camera_path(shape_obj, n_views, width, height, rng)

    images, depths = [], []
    for cam in cams:
        if renderer == "reference":
            rgb, depth, _ = render_reference(gt, cam)
        else:
            out = render(gt, cam)
            rgb, depth = out.rgb, out.depth
        images.append(rgb)
        if depth_noise > 0:
            depth = depth * np.maximum(1 + rng.normal(0, depth_noise, depth.shape), 1e-3)
        depths.append(depth)

    pts, _ = _sample_surface(shape_obj, n_points, rng)
    colors = _texture(pts, seed)
    extent = float(np.max(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    if rot_noise_deg > 0 or trans_noise > 0:
        cams = [_perturb(c, rot_noise_deg, trans_noise * extent, rng) for c in cams]
    ds = save_dataset(out_dir, cams, images, pts, colors, depths=depths)
    return ds, gt, shape_obj
