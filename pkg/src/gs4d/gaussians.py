"""Gaussian primitive containers and the covariance construction/projection math.

All covariance helpers are pure and batched: a leading dimension of any size
(or none) is accepted.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, DegenerateRotationError, ShapeError
from .sh import n_coeffs

QUAT_NORM_EPS = 1e-12


@dataclass
class Gaussians:
    """A set of N splats, stored struct-of-arrays.

    centers        (N, 3)  world-space means
    rotations      (N, 4)  quaternions (w, x, y, z), unnormalized; normalized on use
    log_scales     (N, 3)  per-axis log standard deviations
    opacity_logits (N,)    opacity through a logistic map, so opacity is in (0, 1)
    sh_coeffs      (N, K, 3)  K = (degree+1)^2 RGB coefficient triples
    embeddings     (N, d_e)  latent vectors consumed by the deformation decoder
    """

    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self):
        n = self.centers.shape[0]
        if self.centers.shape != (n, 3):
            raise ShapeError(f"centers must be (N, 3), got {self.centers.shape}")
        if self.rotations.shape != (n, 4):
            raise ShapeError(f"rotations must be (N, 4), got {self.rotations.shape}")
        if self.log_scales.shape != (n, 3):
            raise ShapeError(f"log_scales must be (N, 3), got {self.log_scales.shape}")
        if self.opacity_logits.shape != (n,):
            raise ShapeError(f"opacity_logits must be (N,), got {self.opacity_logits.shape}")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[2] != 3:
            raise ShapeError(f"sh_coeffs must be (N, K, 3), got {self.sh_coeffs.shape}")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise ShapeError(f"embeddings must be (N, d_e), got {self.embeddings.shape}")

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def sh_degree(self) -> int:
        k = self.sh_coeffs.shape[1]
        deg = int(round(np.sqrt(k))) - 1
        if n_coeffs(deg) != k:
            raise ShapeError(f"sh_coeffs count {k} is not a (degree+1)^2")
        return deg

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def copy(self) -> "Gaussians":
        return Gaussians(
            centers=self.centers.copy(),
            rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            embeddings=self.embeddings.copy(),
        )

    def astype(self, dtype) -> "Gaussians":
        return Gaussians(
            centers=self.centers.astype(dtype),
            rotations=self.rotations.astype(dtype),
            log_scales=self.log_scales.astype(dtype),
            opacity_logits=self.opacity_logits.astype(dtype),
            sh_coeffs=self.sh_coeffs.astype(dtype),
            embeddings=self.embeddings.astype(dtype),
        )


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-camera transform.

    Pixel (ix, iy) samples image-plane coordinate (ix, iy) exactly, i.e.
    u = fx * x/z + cx lands on pixel column round(u).
    """

    world_to_camera: np.ndarray  # (4, 4)
    focal: np.ndarray  # (fx, fy) in pixels
    principal_point: np.ndarray  # (cx, cy) in pixels
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        self.focal = np.asarray(self.focal, dtype=np.float64)
        self.principal_point = np.asarray(self.principal_point, dtype=np.float64)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if self.world_to_camera.shape != (4, 4):
            raise ShapeError("world_to_camera must be 4x4")
        r = self.rotation
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise ShapeError("world_to_camera rotation block is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ShapeError("world_to_camera rotation block must have determinant +1")
        if np.any(self.focal <= 0):
            raise ShapeError("focal components must be positive")
        if self.image_size[0] < 1 or self.image_size[1] < 1:
            raise ShapeError("image_size components must be >= 1")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Unit-norm quaternions; raises on (near-)zero input norm."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm <= QUAT_NORM_EPS):
        raise DegenerateRotationError("quaternion norm is (near) zero")
    return q / norm


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (w, x, y, z) quaternions, normalized internally.

    q: (..., 4) -> (..., 3, 3).
    """
    q = normalize_quaternion(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    r[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[..., 0, 1] = 2.0 * (x * y - w * z)
    r[..., 0, 2] = 2.0 * (x * z + w * y)
    r[..., 1, 0] = 2.0 * (x * y + w * z)
    r[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[..., 1, 2] = 2.0 * (y * z - w * x)
    r[..., 2, 0] = 2.0 * (x * z - w * y)
    r[..., 2, 1] = 2.0 * (y * z + w * x)
    r[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r


def build_covariance(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """World covariance R S S^T R^T with S = diag(exp(log_scale)).

    rotation: (..., 4) quaternion, log_scale: (..., 3) -> (..., 3, 3),
    symmetric positive definite by construction.
    """
    r = quaternion_to_rotation(rotation)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    m = r * s[..., None, :]  # R @ diag(s): scales columns
    return m @ np.swapaxes(m, -1, -2)


def compute_jacobian(center_camera_space: np.ndarray, focal: np.ndarray) -> np.ndarray:
    """Local affine approximation of the pinhole projection.

    center_camera_space: (..., 3) with depth z along the last axis; focal (fx, fy).
    Returns (..., 2, 3). Depth must be in front of the near plane (z > 0 here;
    the caller culls against its own near plane first).
    """
    p = np.asarray(center_camera_space, dtype=np.float64)
    fx, fy = float(focal[0]), float(focal[1])
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("camera-space depth must be positive")
    j = np.zeros(p.shape[:-1] + (2, 3), dtype=np.float64)
    inv_z = 1.0 / z
    j[..., 0, 0] = fx * inv_z
    j[..., 0, 2] = -fx * x * inv_z * inv_z
    j[..., 1, 1] = fy * inv_z
    j[..., 1, 2] = -fy * y * inv_z * inv_z
    return j


def project_covariance(cov3d: np.ndarray, cam_rotation: np.ndarray, jacobian: np.ndarray) -> np.ndarray:
    """Image-plane covariance J W Sigma W^T J^T.

    cov3d: (..., 3, 3) symmetric; cam_rotation: (3, 3) or (..., 3, 3);
    jacobian: (..., 2, 3). Returns (..., 2, 2).
    """
    t = jacobian @ cam_rotation
    return t @ cov3d @ np.swapaxes(t, -1, -2)
