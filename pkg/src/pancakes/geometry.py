"""Fixed-size math kernels shared by the renderer, losses and normal estimation.

Every function accepts a single item or a leading batch dimension, e.g.
``quat_to_rotation`` maps ``(..., 4) -> (..., 3, 3)``.
"""
import numpy as np

from .errors import DegenerateCovarianceError, DegenerateInputError, ConfigurationError

NEAR_PLANE = 0.01
LOWPASS = 0.3
FRUSTUM_GUARD = 1.3

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)
SH_OFFSET = 0.5


def sh_count(degree):
    return (degree + 1) ** 2


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise DegenerateInputError("quaternion with zero or non-finite norm")
    return q / norm


def quat_to_rotation(q):
    """Rotation matrix of a (w, x, y, z) quaternion; normalizes first."""
    w, x, y, z = np.moveaxis(normalize_quat(q), -1, 0)
    R = np.empty(w.shape + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotation_backward(q, dR):
    """Pull a gradient on R back to the raw (unnormalized) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # d(q/|q|) is the projection onto the tangent space, scaled by 1/|q|
    return (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm


def build_covariance(scale, q):
    """World covariance R diag(s)^2 R^T."""
    scale = np.asarray(scale, dtype=np.float64)
    M = quat_to_rotation(q) * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def eval_gaussian(x, mean, cov):
    """Unnormalized density exp(-1/2 (x - mean)^T cov^-1 (x - mean))."""
    cov = np.asarray(cov, dtype=np.float64)
    eig = np.linalg.eigvalsh(cov)
    if np.any(eig <= 1e-12):
        raise DegenerateCovarianceError("covariance is singular or not positive definite")
    d = np.asarray(x, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    sol = np.linalg.solve(cov, d[..., None])[..., 0]
    return np.exp(-0.5 * np.sum(d * sol, axis=-1))


def projection_jacobian(mean_cam, fx, fy):
    """2x3 Jacobian of the pinhole projection at the camera-space mean."""
    mean_cam = np.asarray(mean_cam, dtype=np.float64)
    x, y, z = np.moveaxis(mean_cam, -1, 0)
    J = np.zeros(z.shape + (2, 3))
    J[..., 0, 0] = fx / z
    J[..., 0, 2] = -fx * x / (z * z)
    J[..., 1, 1] = fy / z
    J[..., 1, 2] = -fy * y / (z * z)
    return J


def project_covariance(cov_cam, mean_cam, fx, fy, near=NEAR_PLANE, lowpass=LOWPASS):
    """Screen-space covariance J cov J^T + lowpass*I.

    ``cov_cam`` must already be rotated into the camera frame. Returns
    ``(cov2d, visible)``; entries with ``z <= near`` are culled, flagged
    False and left as zeros.
    """
    cov_cam = np.asarray(cov_cam, dtype=np.float64)
    mean_cam = np.asarray(mean_cam, dtype=np.float64)
    visible = mean_cam[..., 2] > near
    safe = np.where(visible[..., None], mean_cam, np.array([0.0, 0.0, 1.0]))
    J = projection_jacobian(safe, fx, fy)
    cov2 = J @ cov_cam @ np.swapaxes(J, -1, -2)
    cov2[..., 0, 0] += lowpass
    cov2[..., 1, 1] += lowpass
    cov2 = np.where(visible[..., None, None], cov2, 0.0)
    return cov2, visible


def in_frustum(mean_cam, fx, fy, cx, cy, width, height, guard=FRUSTUM_GUARD):
    """Centers in front of the near plane whose projection lies within
    ``guard`` half-widths of the image center.

    Points just past the near plane but far off-axis would otherwise blow
    up the projection Jacobian into screen-filling splats.
    """
    mean_cam = np.asarray(mean_cam, dtype=np.float64)
    z = mean_cam[..., 2]
    ok = z > NEAR_PLANE
    zs = np.where(ok, z, 1.0)
    u = fx * mean_cam[..., 0] / zs + cx - 0.5 * width
    v = fy * mean_cam[..., 1] / zs + cy - 0.5 * height
    return ok & (np.abs(u) <= guard * 0.5 * width) & (np.abs(v) <= guard * 0.5 * height)


# ---------------------------------------------------------------------------
# symmetric 3x3 eigensolver


def _cross_null_vector(M):
    """Unit vector in the (approximate) null space of a batch of rank-2 3x3 matrices."""
    r0, r1, r2 = M[:, 0], M[:, 1], M[:, 2]
    c = np.stack([np.cross(r0, r1), np.cross(r0, r2), np.cross(r1, r2)], axis=1)
    n2 = np.sum(c * c, axis=-1)
    best = np.argmax(n2, axis=1)
    idx = np.arange(len(M))
    v = c[idx, best]
    nn = np.sqrt(n2[idx, best])
    out = np.zeros_like(v)
    ok = nn > 0
    out[ok] = v[ok] / nn[ok, None]
    out[~ok] = (1.0, 0.0, 0.0)
    return out


def _complement_basis(w):
    """Two unit vectors u, v with (u, v, w) orthonormal."""
    u = np.zeros_like(w)
    use_x = np.abs(w[:, 0]) > np.abs(w[:, 1])
    inv = np.where(use_x, 1 / np.sqrt(w[:, 0] ** 2 + w[:, 2] ** 2 + 1e-300),
                   1 / np.sqrt(w[:, 1] ** 2 + w[:, 2] ** 2 + 1e-300))
    u[use_x] = np.stack([-w[use_x, 2], np.zeros(use_x.sum()), w[use_x, 0]], axis=1)
    u[~use_x] = np.stack([np.zeros((~use_x).sum()), w[~use_x, 2], -w[~use_x, 1]], axis=1)
    u *= inv[:, None]
    v = np.cross(w, u)
    return u, v


def _jacobi_sym3(C, sweeps=12):
    """Cyclic Jacobi rotations on a batch; returns (eigenvalues, eigenvectors) unsorted."""
    A = C.copy()
    V = np.broadcast_to(np.eye(3), A.shape).copy()
    n = len(A)
    idx = np.arange(n)
    for _ in range(sweeps):
        off = A[:, 0, 1] ** 2 + A[:, 0, 2] ** 2 + A[:, 1, 2] ** 2
        if np.all(off <= 1e-300 + 1e-32 * np.sum(A * A, axis=(1, 2))):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = A[:, p, q]
            act = apq != 0
            theta = np.zeros(n)
            theta[act] = (A[act, q, q] - A[act, p, p]) / (2 * apq[act])
            t = np.where(act, np.sign(theta) / (np.abs(theta) + np.sqrt(theta ** 2 + 1)), 0.0)
            t = np.where(act & (theta == 0), 1.0, t)
            c = 1 / np.sqrt(t * t + 1)
            s = t * c
            G = np.broadcast_to(np.eye(3), A.shape).copy()
            G[idx, p, p] = c
            G[idx, q, q] = c
            G[idx, p, q] = s
            G[idx, q, p] = -s
            A = np.swapaxes(G, 1, 2) @ A @ G
            V = V @ G
    return np.diagonal(A, axis1=1, axis2=2).copy(), V


def eigendecompose_sym3(C):
    """Eigen-decomposition of symmetric 3x3 matrices.

    Returns ``(eigvals, eigvecs)`` with eigenvalues ascending and
    eigenvectors in the columns of ``eigvecs``. Uses the closed-form
    trigonometric solution with a Jacobi fallback for badly conditioned
    inputs.
    """
    C = np.asarray(C, dtype=np.float64)
    single = C.ndim == 2
    A = C.reshape(-1, 3, 3)
    A = 0.5 * (A + np.swapaxes(A, 1, 2))
    n = len(A)
    scale = np.max(np.abs(A), axis=(1, 2))
    scale = np.where(scale > 0, scale, 1.0)
    B = A / scale[:, None, None]

    p1 = B[:, 0, 1] ** 2 + B[:, 0, 2] ** 2 + B[:, 1, 2] ** 2
    q = np.trace(B, axis1=1, axis2=2) / 3
    p2 = ((B[:, 0, 0] - q) ** 2 + (B[:, 1, 1] - q) ** 2 + (B[:, 2, 2] - q) ** 2 + 2 * p1)
    p = np.sqrt(p2 / 6)
    ill = p < 1e-12
    ps = np.where(ill, 1.0, p)
    Bn = (B - q[:, None, None] * np.eye(3)) / ps[:, None, None]
    half_det = np.clip(np.linalg.det(Bn) / 2, -1, 1)
    phi = np.arccos(half_det) / 3
    hi = q + 2 * p * np.cos(phi)
    lo = q + 2 * p * np.cos(phi + 2 * np.pi / 3)
    mid = 3 * q - hi - lo
    evals = np.stack([lo, mid, hi], axis=1)

    # the most separated eigenvalue first via cross products, the rest in its complement
    first_hi = half_det >= 0
    lam_a = np.where(first_hi, hi, lo)
    w = _cross_null_vector(B - lam_a[:, None, None] * np.eye(3))
    u, v = _complement_basis(w)
    Mm = B - mid[:, None, None] * np.eye(3)
    Mu = np.einsum("nij,nj->ni", Mm, u)
    Mv = np.einsum("nij,nj->ni", Mm, v)
    m00 = np.sum(u * Mu, axis=1)
    m01 = np.sum(u * Mv, axis=1)
    m11 = np.sum(v * Mv, axis=1)
    # null vector of [[m00, m01], [m01, m11]]
    use_row0 = np.abs(m00) >= np.abs(m11)
    a = np.where(use_row0, m01, m11)
    b = np.where(use_row0, -m00, -m01)
    nrm = np.hypot(a, b)
    degenerate = nrm <= 1e-300
    a = np.where(degenerate, 1.0, a / np.where(degenerate, 1.0, nrm))
    b = np.where(degenerate, 0.0, b / np.where(degenerate, 1.0, nrm))
    vmid = a[:, None] * u + b[:, None] * v
    vother = np.cross(w, vmid)

    vecs = np.empty((n, 3, 3))
    vecs[:, :, 1] = vmid
    vecs[first_hi, :, 2] = w[first_hi]
    vecs[first_hi, :, 0] = vother[first_hi]
    vecs[~first_hi, :, 0] = w[~first_hi]
    vecs[~first_hi, :, 2] = vother[~first_hi]

    resid = np.linalg.norm(
        np.einsum("nij,njk->nik", B, vecs) - vecs * evals[:, None, :], axis=1).max(axis=1)
    fallback = ill | (resid > 1e-9)
    if np.any(fallback):
        jv, jV = _jacobi_sym3(B[fallback])
        order = np.argsort(jv, axis=1)
        evals[fallback] = np.take_along_axis(jv, order, axis=1)
        vecs[fallback] = np.take_along_axis(jV, order[:, None, :], axis=2)
    # mid = 3q - hi - lo can land an ulp outside [lo, hi]
    order = np.argsort(evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1)
    vecs = np.take_along_axis(vecs, order[:, None, :], axis=2)

    evals = evals * scale[:, None]
    if single:
        return evals[0], vecs[0]
    return evals.reshape(C.shape[:-2] + (3,)), vecs.reshape(C.shape)


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs, degree):
    """Real SH basis values, shape (..., (degree+1)^2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (sh_count(degree),))
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_jacobian(dirs, degree):
    """d(basis)/d(dir), shape (..., (degree+1)^2, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    J = np.zeros(dirs.shape[:-1] + (sh_count(degree), 3))
    if degree >= 1:
        J[..., 1, 1] = -SH_C1
        J[..., 2, 2] = SH_C1
        J[..., 3, 0] = -SH_C1
    if degree >= 2:
        J[..., 4, 0] = SH_C2[0] * y
        J[..., 4, 1] = SH_C2[0] * x
        J[..., 5, 1] = SH_C2[1] * z
        J[..., 5, 2] = SH_C2[1] * y
        J[..., 6, 0] = -2 * SH_C2[2] * x
        J[..., 6, 1] = -2 * SH_C2[2] * y
        J[..., 6, 2] = 4 * SH_C2[2] * z
        J[..., 7, 0] = SH_C2[3] * z
        J[..., 7, 2] = SH_C2[3] * x
        J[..., 8, 0] = 2 * SH_C2[4] * x
        J[..., 8, 1] = -2 * SH_C2[4] * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        J[..., 9, 0] = SH_C3[0] * 6 * x * y
        J[..., 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
        J[..., 10, 0] = SH_C3[1] * y * z
        J[..., 10, 1] = SH_C3[1] * x * z
        J[..., 10, 2] = SH_C3[1] * x * y
        J[..., 11, 0] = -2 * SH_C3[2] * x * y
        J[..., 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        J[..., 11, 2] = 8 * SH_C3[2] * y * z
        J[..., 12, 0] = -6 * SH_C3[3] * x * z
        J[..., 12, 1] = -6 * SH_C3[3] * y * z
        J[..., 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        J[..., 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        J[..., 13, 1] = -2 * SH_C3[4] * x * y
        J[..., 13, 2] = 8 * SH_C3[4] * x * z
        J[..., 14, 0] = 2 * SH_C3[5] * x * z
        J[..., 14, 1] = -2 * SH_C3[5] * y * z
        J[..., 14, 2] = SH_C3[5] * (xx - yy)
        J[..., 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
        J[..., 15, 1] = -6 * SH_C3[6] * x * y
    return J


def eval_sh(coeffs, view_dir, degree):
    """RGB = sum_lm c_lm Y_lm(dir) + 0.5 per channel; no clamping here.

    ``coeffs`` has shape (..., K, 3) with K >= (degree+1)^2; only the first
    (degree+1)^2 rows are used.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if degree < 0 or degree > 3 or coeffs.shape[-2] < sh_count(degree):
        raise ConfigurationError(
            f"SH degree {degree} needs {sh_count(degree)} coefficients, got {coeffs.shape[-2]}")
    basis = sh_basis(view_dir, degree)
    return np.einsum("...k,...kc->...c", basis, coeffs[..., :sh_count(degree), :]) + SH_OFFSET


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - SH_OFFSET) / SH_C0


def gaussian_normal(R, scale):
    """Column of R along the smallest scale axis; ties go to the lowest index."""
    R = np.asarray(R, dtype=np.float64)
    axis = np.argmin(np.asarray(scale), axis=-1)
    return np.take_along_axis(R, np.asarray(axis)[..., None, None], axis=-1)[..., 0]
