"""Tile-based differentiable splatting (forward + analytic backward).

Pixel ``(row, col)`` samples the image plane at ``(u, v) = (col, row)``.
A Gaussian contributes to a pixel with
``alpha = min(0.99, opacity * exp(-m/2))``, ``m`` being the squared
screen-space Mahalanobis distance, and pixels composite front to back
until transmittance would fall below ``T_MIN``.
"""
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from . import geometry as geo
from .errors import ContractViolation

TILE = 16
ALPHA_MAX = 0.99
T_MIN = 1e-4
# contributions with alpha below this are dropped; bounds the tiling error
ALPHA_EPS = 1e-9

# per (tile, Gaussian) pair gradient slots
_DU, _DV, _GA, _GB, _GC, _DOP, _DR, _DG, _DB, _DZ = range(10)
_NPAIR = 10


@dataclass
class Projected:
    """Per-view, per-Gaussian screen-space quantities kept for the backward pass."""
    visible: np.ndarray
    means_cam: np.ndarray
    uv: np.ndarray
    cov_cam: np.ndarray
    J: np.ndarray
    cov2: np.ndarray
    conic: np.ndarray
    colors: np.ndarray
    color_clamped: np.ndarray
    opacity: np.ndarray
    mcut: np.ndarray
    dirs: np.ndarray
    dir_norm: np.ndarray
    basis: np.ndarray


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    final_T: np.ndarray
    last: np.ndarray
    proj: Projected = field(repr=False, default=None)
    pair_gauss: np.ndarray = field(repr=False, default=None)
    tile_start: np.ndarray = field(repr=False, default=None)
    tile_end: np.ndarray = field(repr=False, default=None)
    background: np.ndarray = field(repr=False, default=None)
    packed: np.ndarray = field(repr=False, default=None)


@dataclass
class ParamGradients:
    means: np.ndarray
    raw_scales: np.ndarray
    raw_rots: np.ndarray
    sh: np.ndarray
    raw_opacity: np.ndarray
    screen: np.ndarray
    visible: np.ndarray

    @classmethod
    def zeros(cls, cloud):
        n = len(cloud)
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                   np.zeros_like(cloud.sh), np.zeros(n), np.zeros(n), np.zeros(n, bool))

    def params(self):
        return {"means": self.means, "raw_scales": self.raw_scales, "raw_rots": self.raw_rots,
                "sh": self.sh, "raw_opacity": self.raw_opacity}


def set_num_threads(n):
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# preprocessing


def project_gaussians(cloud, camera):
    n = len(cloud)
    means_cam = camera.world_to_camera(cloud.means)
    cov_world = cloud.covariances()
    cov_cam = camera.R @ cov_world @ camera.R.T
    cov2, visible = geo.project_covariance(cov_cam, means_cam, camera.fx, camera.fy)
    safe = np.where(visible[:, None], means_cam, np.array([0.0, 0.0, 1.0]))
    J = geo.projection_jacobian(safe, camera.fx, camera.fy)
    uv = camera.project(safe)

    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    det = np.where(visible, det, 1.0)
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    diff = cloud.means - camera.center
    dir_norm = np.linalg.norm(diff, axis=1)
    dirs = diff / np.where(dir_norm > 0, dir_norm, 1.0)[:, None]
    basis = geo.sh_basis(dirs, cloud.sh_degree)
    raw_color = np.einsum("nk,nkc->nc", basis, cloud.sh[:, :basis.shape[1], :]) + geo.SH_OFFSET
    color_clamped = raw_color < 0
    colors = np.maximum(raw_color, 0.0)

    opacity = cloud.opacity
    with np.errstate(divide="ignore"):
        mcut = 2.0 * np.log(opacity / ALPHA_EPS)
    visible = visible & geo.in_frustum(means_cam, camera.fx, camera.fy, camera.cx, camera.cy,
                                       camera.width, camera.height)
    visible = visible & (opacity > ALPHA_EPS) & np.all(np.isfinite(uv), axis=1)
    return Projected(visible, means_cam, uv, cov_cam, J, cov2, conic, colors, color_clamped,
                     opacity, mcut, dirs, dir_norm, basis)


def bin_tiles(proj, width, height):
    """Sorted (tile, depth) pair list as ``(pair_gauss, tile_start, tile_end)``."""
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    vis = np.flatnonzero(proj.visible)
    cov2 = proj.cov2[vis]
    half_diff = 0.5 * (cov2[:, 0, 0] - cov2[:, 1, 1])
    lam_max = 0.5 * (cov2[:, 0, 0] + cov2[:, 1, 1]) + np.sqrt(half_diff ** 2 + cov2[:, 0, 1] ** 2)
    radius = np.sqrt(np.maximum(proj.mcut[vis], 0.0) * lam_max)
    u, v = proj.uv[vis, 0], proj.uv[vis, 1]
    x0 = np.clip(np.floor((u - radius) / TILE), 0, tiles_x - 1)
    x1 = np.clip(np.floor((u + radius) / TILE), 0, tiles_x - 1)
    y0 = np.clip(np.floor((v - radius) / TILE), 0, tiles_y - 1)
    y1 = np.clip(np.floor((v + radius) / TILE), 0, tiles_y - 1)
    on_screen = ((u + radius >= 0) & (u - radius <= width - 1)
                 & (v + radius >= 0) & (v - radius <= height - 1))
    nx = np.where(on_screen, x1 - x0 + 1, 0).astype(np.int64)
    ny = np.where(on_screen, y1 - y0 + 1, 0).astype(np.int64)

    # depth order with index tie-break, then a stable sort by tile keeps it per tile
    order = np.lexsort((vis, proj.means_cam[vis, 2]))
    counts = (nx * ny)[order]
    total = int(counts.sum())
    owner = np.repeat(order, counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    off = np.arange(total) - first
    tx = x0[owner].astype(np.int64) + off % nx[owner]
    ty = y0[owner].astype(np.int64) + off // nx[owner]
    tile_id = ty * tiles_x + tx
    by_tile = np.argsort(tile_id, kind="stable")
    pair_gauss = vis[owner[by_tile]].astype(np.int64)
    tile_count = np.bincount(tile_id, minlength=n_tiles)
    tile_end = np.cumsum(tile_count)
    tile_start = tile_end - tile_count
    return pair_gauss, tile_start.astype(np.int64), tile_end.astype(np.int64)


# ---------------------------------------------------------------------------
# kernels


def _pack(proj, pair_gauss):
    """Per-pair copy of everything the kernels read, in traversal order."""
    g = pair_gauss
    return np.ascontiguousarray(np.column_stack([
        proj.uv[g], proj.conic[g], proj.opacity[g], proj.mcut[g], proj.colors[g],
        proj.means_cam[g, 2]]))


# packed columns
_U, _V, _CA, _CB, _CC, _OP, _MCUT, _C0, _C1, _C2, _Z = range(11)


@njit(parallel=True, cache=True)
def _forward_kernel(tile_start, tile_end, pk, width, height, tiles_x, bg, rgb, dep, final_T, last):
    for t in prange(len(tile_start)):
        x_lo = (t % tiles_x) * TILE
        y_lo = (t // tiles_x) * TILE
        start = tile_start[t]
        end = tile_end[t]
        for py in range(y_lo, min(y_lo + TILE, height)):
            for px in range(x_lo, min(x_lo + TILE, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                d = 0.0
                stop = start
                for p in range(start, end):
                    dx = pk[p, _U] - px
                    dy = pk[p, _V] - py
                    m = pk[p, _CA] * dx * dx + 2.0 * pk[p, _CB] * dx * dy + pk[p, _CC] * dy * dy
                    if m > pk[p, _MCUT]:
                        continue
                    alpha = pk[p, _OP] * np.exp(-0.5 * m)
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    next_T = T * (1.0 - alpha)
                    if next_T < T_MIN:
                        break
                    w = alpha * T
                    c0 += pk[p, _C0] * w
                    c1 += pk[p, _C1] * w
                    c2 += pk[p, _C2] * w
                    d += pk[p, _Z] * w
                    T = next_T
                    stop = p + 1
                rgb[py, px, 0] = c0 + T * bg[0]
                rgb[py, px, 1] = c1 + T * bg[1]
                rgb[py, px, 2] = c2 + T * bg[2]
                dep[py, px] = d
                final_T[py, px] = T
                last[py, px] = stop


@njit(parallel=True, cache=True)
def _backward_kernel(tile_start, pk, width, height, tiles_x, bg, final_T, last, grad_rgb,
                     grad_depth, grad_alpha, out):
    for t in prange(len(tile_start)):
        x_lo = (t % tiles_x) * TILE
        y_lo = (t // tiles_x) * TILE
        start = tile_start[t]
        for py in range(y_lo, min(y_lo + TILE, height)):
            for px in range(x_lo, min(x_lo + TILE, width)):
                gr = grad_rgb[py, px, 0]
                gg = grad_rgb[py, px, 1]
                gb = grad_rgb[py, px, 2]
                gd = grad_depth[py, px]
                ga = grad_alpha[py, px]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0 and ga == 0.0:
                    continue
                T = final_T[py, px]
                acc0 = bg[0]
                acc1 = bg[1]
                acc2 = bg[2]
                accd = 0.0
                acca = 0.0
                for p in range(last[py, px] - 1, start - 1, -1):
                    dx = pk[p, _U] - px
                    dy = pk[p, _V] - py
                    ca = pk[p, _CA]
                    cb = pk[p, _CB]
                    cc = pk[p, _CC]
                    m = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if m > pk[p, _MCUT]:
                        continue
                    gauss = np.exp(-0.5 * m)
                    raw_alpha = pk[p, _OP] * gauss
                    alpha = raw_alpha if raw_alpha < ALPHA_MAX else ALPHA_MAX
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    out[p, _DR] += w * gr
                    out[p, _DG] += w * gg
                    out[p, _DB] += w * gb
                    out[p, _DZ] += w * gd
                    col0 = pk[p, _C0]
                    col1 = pk[p, _C1]
                    col2 = pk[p, _C2]
                    z = pk[p, _Z]
                    # alpha image = sum of w: a unit "color" over a zero background
                    d_alpha = T * ((col0 - acc0) * gr + (col1 - acc1) * gg
                                   + (col2 - acc2) * gb + (z - accd) * gd + (1.0 - acca) * ga)
                    acc0 = alpha * col0 + (1.0 - alpha) * acc0
                    acc1 = alpha * col1 + (1.0 - alpha) * acc1
                    acc2 = alpha * col2 + (1.0 - alpha) * acc2
                    accd = alpha * z + (1.0 - alpha) * accd
                    acca = alpha + (1.0 - alpha) * acca
                    if raw_alpha < ALPHA_MAX:
                        out[p, _DOP] += gauss * d_alpha
                        dm = -0.5 * raw_alpha * d_alpha
                        out[p, _GA] += dm * dx * dx
                        out[p, _GB] += dm * dx * dy
                        out[p, _GC] += dm * dy * dy
                        out[p, _DU] += dm * 2.0 * (ca * dx + cb * dy)
                        out[p, _DV] += dm * 2.0 * (cb * dx + cc * dy)


# ---------------------------------------------------------------------------
# public API


def render(cloud, camera, background=(0.0, 0.0, 0.0)):
    """Render RGB, alpha-weighted depth and alpha for one camera."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    W, H = camera.width, camera.height
    proj = project_gaussians(cloud, camera)
    pair_gauss, tile_start, tile_end = bin_tiles(proj, W, H)
    tiles_x = (W + TILE - 1) // TILE
    rgb = np.empty((H, W, 3))
    dep = np.empty((H, W))
    final_T = np.empty((H, W))
    last = np.empty((H, W), dtype=np.int64)
    pk = _pack(proj, pair_gauss)
    _forward_kernel(tile_start, tile_end, pk, W, H, tiles_x, bg, rgb, dep, final_T, last)
    return RenderOutput(rgb, dep, 1.0 - final_T, final_T, last, proj, pair_gauss,
                        tile_start, tile_end, bg, pk)


def backward(cloud, camera, output, grad_rgb, grad_depth=None, grad_alpha=None):
    """Gradients of a scalar loss given its gradients w.r.t. the rendered images.

    ``screen`` holds the norm of the NDC-space mean gradient used for
    densification; ``visible`` marks Gaussians that touched at least one
    tile.
    """
    W, H = camera.width, camera.height
    proj = output.proj
    if proj is None or len(proj.visible) != len(cloud):
        raise ContractViolation("render output does not belong to this cloud")
    grad_rgb = np.ascontiguousarray(grad_rgb, dtype=np.float64)
    if grad_depth is None:
        grad_depth = np.zeros((H, W))
    grad_depth = np.ascontiguousarray(grad_depth, dtype=np.float64)
    if grad_alpha is None:
        grad_alpha = np.zeros((H, W))
    grad_alpha = np.ascontiguousarray(grad_alpha, dtype=np.float64)
    if (grad_rgb.shape != (H, W, 3) or grad_depth.shape != (H, W) or grad_alpha.shape != (H, W)
            or output.rgb.shape != (H, W, 3)):
        raise ContractViolation(
            f"gradient images {grad_rgb.shape}/{grad_depth.shape}/{grad_alpha.shape} "
            f"do not match {H}x{W} render")
    if not all(np.all(np.isfinite(a)) for a in (grad_rgb, grad_depth, grad_alpha)):
        raise ContractViolation("gradient images must be finite")

    n = len(cloud)
    tiles_x = (W + TILE - 1) // TILE
    pair_grad = np.zeros((len(output.pair_gauss), _NPAIR))
    pk = output.packed if output.packed is not None else _pack(proj, output.pair_gauss)
    _backward_kernel(output.tile_start, pk, W, H, tiles_x, output.background, output.final_T,
                     output.last, grad_rgb, grad_depth, grad_alpha, pair_grad)
    # ordered segmented reduction: bincount sums pairs in index order
    g = np.stack([np.bincount(output.pair_gauss, weights=pair_grad[:, k], minlength=n)
                  for k in range(_NPAIR)], axis=1)
    return _chain_to_params(cloud, camera, proj, g, output.pair_gauss)


def _chain_to_params(cloud, camera, proj, g, pair_gauss):
    n = len(cloud)
    grads = ParamGradients.zeros(cloud)
    grads.visible = np.bincount(pair_gauss, minlength=n) > 0
    vis = np.flatnonzero(proj.visible)
    if len(vis) == 0:
        return grads
    gv = g[vis]
    fx, fy = camera.fx, camera.fy
    W, H = camera.width, camera.height
    du, dv = gv[:, _DU], gv[:, _DV]
    grads.screen[vis] = np.hypot(du * 0.5 * W, dv * 0.5 * H)

    # conic -> screen covariance
    Gc = np.empty((len(vis), 2, 2))
    Gc[:, 0, 0] = gv[:, _GA]
    Gc[:, 0, 1] = Gc[:, 1, 0] = gv[:, _GB]
    Gc[:, 1, 1] = gv[:, _GC]
    con = proj.conic[vis]
    A = np.empty_like(Gc)
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = con[:, 0], con[:, 1], con[:, 1], con[:, 2]
    d_cov2 = -A @ Gc @ A

    J = proj.J[vis]
    cov_cam = proj.cov_cam[vis]
    d_cov_cam = np.swapaxes(J, 1, 2) @ d_cov2 @ J
    dJ = 2.0 * d_cov2 @ J @ cov_cam

    x, y, z = proj.means_cam[vis].T
    z2 = z * z
    z3 = z2 * z
    dp = np.empty((len(vis), 3))
    dp[:, 0] = fx / z * du - fx / z2 * dJ[:, 0, 2]
    dp[:, 1] = fy / z * dv - fy / z2 * dJ[:, 1, 2]
    dp[:, 2] = (-fx * x / z2 * du - fy * y / z2 * dv
                - fx / z2 * dJ[:, 0, 0] + 2 * fx * x / z3 * dJ[:, 0, 2]
                - fy / z2 * dJ[:, 1, 1] + 2 * fy * y / z3 * dJ[:, 1, 2]
                + gv[:, _DZ])
    d_means = dp @ camera.R

    # world covariance -> scale and rotation
    d_cov = camera.R.T @ d_cov_cam @ camera.R
    R = geo.quat_to_rotation(cloud.raw_rots[vis])
    s = cloud.scales[vis]
    M = R * s[:, None, :]
    dM = 2.0 * d_cov @ M
    ds = np.sum(R * dM, axis=1)
    grads.raw_scales[vis] = ds * s
    dR = dM * s[:, None, :]
    grads.raw_rots[vis] = geo.quat_to_rotation_backward(cloud.raw_rots[vis], dR)

    # color -> SH coefficients and view direction
    dcol = gv[:, _DR:_DB + 1] * ~proj.color_clamped[vis]
    basis = proj.basis[vis]
    k = basis.shape[1]
    grads.sh[vis, :k, :] = basis[:, :, None] * dcol[:, None, :]
    if cloud.sh_degree > 0:
        jac = geo.sh_basis_jacobian(proj.dirs[vis], cloud.sh_degree)
        coeff = cloud.sh[vis, :k, :]
        d_dir = np.einsum("nc,nkc,nkj->nj", dcol, coeff, jac)
        dirs = proj.dirs[vis]
        radial = np.sum(dirs * d_dir, axis=1, keepdims=True)
        d_means += (d_dir - dirs * radial) / proj.dir_norm[vis, None]
    grads.means[vis] = d_means

    op = proj.opacity[vis]
    grads.raw_opacity[vis] = gv[:, _DOP] * op * (1 - op)
    return grads


def render_normals_pass(cloud, axis=None):
    """Per-Gaussian normals R e_min; returns ``(normals, axis)``.

    Passing the ``axis`` from a previous call freezes the min-scale axis
    selection so the result is smooth in the rotation.
    """
    if axis is None:
        axis = np.argmin(cloud.raw_scales, axis=1)
    R = cloud.rotations
    normals = np.take_along_axis(R, axis[:, None, None], axis=2)[:, :, 0]
    return normals, axis


def normals_backward(cloud, axis, grad_normals):
    """Gradient w.r.t. raw rotations of a loss on ``render_normals_pass`` output."""
    dR = np.zeros((len(cloud), 3, 3))
    np.put_along_axis(dR, axis[:, None, None], np.asarray(grad_normals)[:, :, None], axis=2)
    return geo.quat_to_rotation_backward(cloud.raw_rots, dR)
