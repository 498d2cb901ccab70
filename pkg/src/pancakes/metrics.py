"""Image/depth quality metrics and render-rate measurement."""
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class EmptyMaskWarning(UserWarning):
    pass


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


_WIN = gaussian_window()


def _filter_valid(img):
    """Separable 'valid' Gaussian filtering over the first two axes."""
    out = sliding_window_view(img, SSIM_WINDOW, axis=0) @ _WIN
    return sliding_window_view(out, SSIM_WINDOW, axis=1) @ _WIN


def _filter_adjoint(img):
    pad = SSIM_WINDOW - 1
    widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (img.ndim - 2)
    return _filter_valid(np.pad(img, widths))


def _as_hwc(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")


def ssim_with_grad(x, y, need_grad=True):
    """Mean SSIM over valid window positions and all channels, and d/dx."""
    x, y = _as_hwc(x), _as_hwc(y)
    _check_pair(x, y)
    mx, my = _filter_valid(x), _filter_valid(y)
    pxx, pyy, pxy = _filter_valid(x * x), _filter_valid(y * y), _filter_valid(x * y)
    sxx, syy, sxy = pxx - mx * mx, pyy - my * my, pxy - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    value = float(smap.mean())
    if not need_grad:
        return value, None
    scale = 1.0 / smap.size
    d_mx = (2 * my * (a2 - a1) / (b1 * b2) - 2 * mx * smap * (1 / b1 - 1 / b2)) * scale
    d_pxx = -smap / b2 * scale
    d_pxy = 2 * a1 / (b1 * b2) * scale
    grad = _filter_adjoint(d_mx) + 2 * x * _filter_adjoint(d_pxx) + y * _filter_adjoint(d_pxy)
    return value, grad


def ssim(a, b):
    return ssim_with_grad(a, b, need_grad=False)[0]


def psnr(a, b, peak=1.0):
    """PSNR in dB; identical inputs give ``math.inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(peak ** 2 / mse)


def depth_valid_mask(depth, mask=None):
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    return valid


def depth_mse(ref, rendered, mask=None):
    """Mean squared depth error over valid pixels; NaN (with a warning) if none."""
    ref = np.asarray(ref, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    if ref.shape != rendered.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {rendered.shape}")
    valid = depth_valid_mask(ref, mask)
    if not valid.any():
        warnings.warn("depth_mse: empty validity mask", EmptyMaskWarning, stacklevel=2)
        return math.nan
    return float(np.mean((ref[valid] - rendered[valid]) ** 2))


def depth_ssim(ref, rendered, mask=None):
    """SSIM between depth maps min-max normalized over the reference's valid range."""
    ref = np.asarray(ref, dtype=np.float64)
    valid = depth_valid_mask(ref, mask)
    if not valid.any():
        warnings.warn("depth_ssim: empty validity mask", EmptyMaskWarning, stacklevel=2)
        return math.nan
    lo, hi = ref[valid].min(), ref[valid].max()
    span = hi - lo if hi > lo else 1.0
    a = np.where(valid, (ref - lo) / span, 0.0)
    b = np.where(valid, (np.asarray(rendered, dtype=np.float64) - lo) / span, 0.0)
    return ssim(a, b)


@dataclass
class MetricRow:
    view: str
    psnr: float
    ssim: float
    depth_mse: float
    render_ms: float


def measure_render_ms(render_fn, repeats=100, warmup=10):
    """Median wall-clock milliseconds per call of ``render_fn()``."""
    for _ in range(warmup):
        render_fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        render_fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))
