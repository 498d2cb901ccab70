"""Naive per-pixel renderer: no tiles, no cutoffs, every Gaussian at every pixel.

Used as the oracle for the tiled rasterizer and to render synthetic
ground truth. Slow by design.
"""
import numpy as np

from . import geometry as geo
from .rasterizer import ALPHA_MAX, T_MIN


def render_reference(cloud, camera, background=(0.0, 0.0, 0.0), chunk=32):
    """Returns ``(rgb, depth, alpha)`` images.

    Gaussians are processed ``chunk`` at a time; the transmittance product
    is still formed one splat after another in depth order.
    """
    bg = np.asarray(background, dtype=np.float64)
    H, W = camera.height, camera.width
    py, px = np.mgrid[0:H, 0:W]
    pix = np.stack([px.ravel(), py.ravel()], axis=1).astype(np.float64)
    npix = len(pix)

    R = camera.R
    means_cam = cloud.means @ R.T + camera.t
    cov_cam = R @ geo.build_covariance(cloud.scales, cloud.raw_rots) @ R.T
    cov2, visible = geo.project_covariance(cov_cam, means_cam, camera.fx, camera.fy)
    visible &= geo.in_frustum(means_cam, camera.fx, camera.fy, camera.cx, camera.cy, W, H)
    view = cloud.means - camera.center
    colors = geo.eval_sh(cloud.sh, view / np.linalg.norm(view, axis=1, keepdims=True),
                         cloud.sh_degree)
    colors = np.maximum(colors, 0.0)
    opacity = cloud.opacity

    centers = np.stack([camera.fx * means_cam[:, 0] / np.where(visible, means_cam[:, 2], 1.0) + camera.cx,
                        camera.fy * means_cam[:, 1] / np.where(visible, means_cam[:, 2], 1.0) + camera.cy],
                       axis=1)
    T = np.ones(npix)
    rgb = np.zeros((npix, 3))
    depth = np.zeros(npix)
    # pixels still accumulating; a pixel retires once the next splat would
    # push its transmittance below T_MIN
    live = np.arange(npix)
    # global front-to-back order, ties by index
    order = np.lexsort((np.arange(len(cloud)), means_cam[:, 2]))
    order = order[visible[order]]
    for lo in range(0, len(order), chunk):
        if live.size == 0:
            break
        ids = order[lo:lo + chunk]
        inv = np.linalg.inv(cov2[ids])
        d = centers[ids, None, :] - pix[None, live, :]
        m = (inv[:, 0, 0, None] * d[..., 0] ** 2 + 2 * inv[:, 0, 1, None] * d[..., 0] * d[..., 1]
             + inv[:, 1, 1, None] * d[..., 1] ** 2)
        alpha = np.minimum(ALPHA_MAX, opacity[ids, None] * np.exp(-0.5 * m))
        # transmittance before/after each splat, multiplied in compositing order
        trans = np.cumprod(np.vstack([T[live][None], 1 - alpha]), axis=0)
        ok = np.logical_and.accumulate(trans[1:] >= T_MIN, axis=0)
        w = np.where(ok, alpha * trans[:-1], 0.0)
        rgb[live] += w.T @ colors[ids]
        depth[live] += w.T @ means_cam[ids, 2]
        n_ok = ok.sum(axis=0)
        T[live] = trans[n_ok, np.arange(live.size)]
        live = live[ok[-1]]
    rgb += T[:, None] * bg
    return rgb.reshape(H, W, 3), depth.reshape(H, W), (1 - T).reshape(H, W)
