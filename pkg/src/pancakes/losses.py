"""Training objectives. Each loss returns ``(value, gradient)``."""
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .metrics import EmptyMaskWarning, depth_valid_mask, ssim_with_grad


@dataclass(frozen=True)
class LossWeights:
    lambda_dssim: float = 0.2
    lambda_depth: float = 0.6
    lambda_geo: float = 0.2
    huber_delta: float = 0.2

    def __post_init__(self):
        for name in ("lambda_dssim", "lambda_depth", "lambda_geo"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.lambda_dssim > 1:
            raise ConfigurationError("lambda_dssim must lie in [0, 1]")
        if self.huber_delta <= 0:
            raise ConfigurationError("huber_delta must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    l_image: float
    l_dssim: float
    l_depth: float
    l_geo: float
    l_total: float


def l1_image(rendered, truth):
    rendered = np.asarray(rendered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if rendered.shape != truth.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {truth.shape}")
    diff = rendered - truth
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def d_ssim(rendered, truth):
    """(1 - SSIM) / 2 with its gradient w.r.t. ``rendered``."""
    value, grad = ssim_with_grad(rendered, truth)
    return (1.0 - value) / 2.0, -0.5 * grad.reshape(np.shape(rendered))


def depth_huber(ref, rendered, mask=None, delta=0.2):
    """Huber penalty on |ref - rendered|, averaged over valid reference pixels.

    Pixels whose reference depth is zero or non-finite never count.
    """
    ref = np.asarray(ref, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    if ref.shape != rendered.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {rendered.shape}")
    valid = depth_valid_mask(ref, mask)
    grad = np.zeros_like(rendered)
    count = int(valid.sum())
    if count == 0:
        warnings.warn("depth_huber: empty validity mask, loss is zero", EmptyMaskWarning, stacklevel=2)
        return 0.0, grad
    diff = rendered[valid] - ref[valid]
    err = np.abs(diff)
    quad = err < delta
    per_pixel = np.where(quad, 0.5 * err * err, delta * (err - 0.5 * delta))
    slope = np.where(quad, err, delta)
    grad[valid] = slope * np.sign(diff) / count
    return float(per_pixel.sum() / count), grad


def geometric_cosine(gaussian_normals, reference_normals, valid=None):
    """Mean of 1 - |cos(a, b)|; the gradient flows to ``gaussian_normals`` only.

    Rows with a zero-norm normal, or ``valid == False``, are left out of the
    mean. Returns ``(value, grad, n_excluded)``.
    """
    b = np.asarray(gaussian_normals, dtype=np.float64)
    a = np.asarray(reference_normals, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    degenerate = (na == 0) | (nb == 0)
    n_excluded = int(degenerate.sum())
    if n_excluded:
        warnings.warn(f"geometric_cosine: {n_excluded} zero-norm normals excluded", stacklevel=2)
    use = ~degenerate
    if valid is not None:
        use &= np.asarray(valid, dtype=bool)
    grad = np.zeros_like(b)
    count = int(use.sum())
    if count == 0:
        return 0.0, grad, n_excluded
    au, bu = a[use], b[use]
    nau, nbu = na[use, None], nb[use, None]
    cos = np.sum(au * bu, axis=1, keepdims=True) / (nau * nbu)
    value = float(np.mean(1.0 - np.abs(cos)))
    dcos_db = au / (nau * nbu) - cos * bu / (nbu * nbu)
    grad[use] = -np.sign(cos) * dcos_db / count
    return value, grad, n_excluded


def geo_gate(iteration, geo_start=1000):
    return 1.0 if iteration > geo_start else 0.0


def total_loss(l_image, l_dssim, l_depth, l_geo, weights=LossWeights(), iteration=None, geo_start=1000):
    """Weighted total; the geometric term is zero up to and including ``geo_start``.

    ``iteration=None`` skips gating.
    """
    if not isinstance(weights, LossWeights):
        raise ConfigurationError("weights must be a LossWeights")
    gate = 1.0 if iteration is None else geo_gate(iteration, geo_start)
    l_geo = l_geo * gate
    total = ((1 - weights.lambda_dssim) * l_image + weights.lambda_dssim * l_dssim
             + weights.lambda_depth * l_depth + weights.lambda_geo * l_geo)
    return LossBreakdown(float(l_image), float(l_dssim), float(l_depth), float(l_geo), float(total))
