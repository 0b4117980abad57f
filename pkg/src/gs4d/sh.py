"""Real spherical-harmonic color evaluation.

Uses the hard-coded real SH basis (3DGS sign convention) up to degree 3,
with the conventional +0.5 offset and clamp at zero from below.
"""
from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError

MAX_DEGREE = 3

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def n_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the real SH basis at unit directions.

    dirs: (..., 3) unit vectors. Returns (..., (degree+1)^2).
    """
    if not 0 <= degree <= MAX_DEGREE:
        raise ParameterError(f"degree must be in [0, {MAX_DEGREE}], got {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (n_coeffs(degree),), dtype=np.float64)
    out[..., 0] = C0
    if degree >= 1:
        out[..., 1] = -C1 * y
        out[..., 2] = C1 * z
        out[..., 3] = -C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[..., 4] = C2[0] * xy
        out[..., 5] = C2[1] * yz
        out[..., 6] = C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = C2[3] * xz
        out[..., 8] = C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = C3[1] * xy * z
        out[..., 11] = C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = C3[5] * z * (xx - yy)
        out[..., 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Gradient of each basis function w.r.t. the direction.

    dirs: (..., 3). Returns (..., (degree+1)^2, 3).
    """
    if not 0 <= degree <= MAX_DEGREE:
        raise ParameterError(f"degree must be in [0, {MAX_DEGREE}], got {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    g = np.zeros(dirs.shape[:-1] + (n_coeffs(degree), 3), dtype=np.float64)
    if degree >= 1:
        g[..., 1, 1] = -C1
        g[..., 2, 2] = C1
        g[..., 3, 0] = -C1
    if degree >= 2:
        g[..., 4, :] = C2[0] * np.stack([y, x, zero], axis=-1)
        g[..., 5, :] = C2[1] * np.stack([zero, z, y], axis=-1)
        g[..., 6, :] = C2[2] * np.stack([-2.0 * x, -2.0 * y, 4.0 * z], axis=-1)
        g[..., 7, :] = C2[3] * np.stack([z, zero, x], axis=-1)
        g[..., 8, :] = C2[4] * np.stack([2.0 * x, -2.0 * y, zero], axis=-1)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, :] = C3[0] * np.stack([6.0 * x * y, 3.0 * xx - 3.0 * yy, zero], axis=-1)
        g[..., 10, :] = C3[1] * np.stack([y * z, x * z, x * y], axis=-1)
        g[..., 11, :] = C3[2] * np.stack(
            [-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z], axis=-1
        )
        g[..., 12, :] = C3[3] * np.stack(
            [-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy], axis=-1
        )
        g[..., 13, :] = C3[4] * np.stack(
            [4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z], axis=-1
        )
        g[..., 14, :] = C3[5] * np.stack([2.0 * x * z, -2.0 * y * z, xx - yy], axis=-1)
        g[..., 15, :] = C3[6] * np.stack([3.0 * xx - 3.0 * yy, -6.0 * x * y, zero], axis=-1)
    return g


def eval_sh(sh_coeffs: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Decode an RGB color from SH coefficients at a unit view direction.

    sh_coeffs: ((degree+1)^2, 3). Result is basis-contracted coefficients
    plus 0.5, clamped at zero from below.
    """
    coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    view_dir = np.asarray(view_dir, dtype=np.float64)
    if coeffs.ndim != 2 or coeffs.shape != (n_coeffs(degree), 3):
        raise ShapeError(
            f"expected {(n_coeffs(degree), 3)} coefficients for degree {degree}, "
            f"got {coeffs.shape}"
        )
    if abs(np.linalg.norm(view_dir) - 1.0) > 1e-6:
        raise ParameterError("view_dir must be unit-norm within 1e-6")
    basis = sh_basis(view_dir, degree)
    return np.maximum(basis @ coeffs + 0.5, 0.0)


def eval_sh_batch(sh_coeffs: np.ndarray, view_dirs: np.ndarray, degree: int) -> np.ndarray:
    """Batched color decode: (N, K, 3) coeffs, (N, 3) unit dirs -> (N, 3), clamped."""
    k = n_coeffs(degree)
    if sh_coeffs.shape[1] < k:
        raise ShapeError(f"need at least {k} coefficients for degree {degree}")
    basis = sh_basis(view_dirs, degree)
    raw = np.einsum("nk,nkc->nc", basis, sh_coeffs[:, :k, :]) + 0.5
    return np.maximum(raw, 0.0)
