"""Rank-limited adaptation of plane feature channels: truncated SVD,
(U, V) factor pairs composed additively onto a base matrix, and the
storage-saving arithmetic behind streaming factors instead of full planes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

PLANE_NAMES = ("XY", "XZ", "YZ")


@dataclass
class LowRankFactor:
    """One (U, V) adaptation pair targeting a single plane feature channel.

    The adaptation it carries is U @ V.T (rank = number of columns).
    """

    u: np.ndarray  # (m, rank)
    v: np.ndarray  # (n, rank)
    plane: int  # 0=XY, 1=XZ, 2=YZ
    channel: int
    chunk_index: int

    def __post_init__(self):
        if self.u.ndim != 2 or self.v.ndim != 2:
            raise ShapeError("U and V must be matrices")
        if self.u.shape[1] != self.v.shape[1]:
            raise ShapeError("U and V must share the rank dimension")
        rank = self.u.shape[1]
        if rank < 1:
            raise ParameterError("rank must be >= 1")
        if rank > min(self.u.shape[0], self.v.shape[0]):
            raise ParameterError("rank must be <= min(m, n)")
        if not 0 <= self.plane <= 2:
            raise ParameterError("plane must be 0 (XY), 1 (XZ) or 2 (YZ)")
        if self.channel < 0:
            raise ParameterError("channel must be >= 0")
        if self.chunk_index < 1:
            raise ParameterError("delta factors start at chunk 1")

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    def delta(self) -> np.ndarray:
        return self.u @ self.v.T


@dataclass
class SvdTruncation:
    u: np.ndarray  # (m, rank), orthonormal columns
    singular_values: np.ndarray  # (rank,), nonincreasing, >= 0
    v: np.ndarray  # (n, rank), orthonormal columns

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.v.T


def jacobi_svd(a: np.ndarray, tol: float = 1e-13, max_sweeps: int = 64):
    """Full SVD by one-sided Jacobi rotations.

    Returns (U, s, V) with a = U diag(s) V.T, U: (m, r), V: (n, r),
    r = min(m, n), singular values sorted nonincreasing.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError("expected a matrix")
    m, n = a.shape
    if m < n:
        v, s, u = jacobi_svd(a.T, tol=tol, max_sweeps=max_sweeps)
        return u, s, v

    b = a.copy()
    vmat = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                bp = b[:, p]
                bq = b[:, q]
                app = bp @ bp
                aqq = bq @ bq
                apq = bp @ bq
                if abs(apq) <= tol * np.sqrt(app * aqq) or apq == 0.0:
                    continue
                rotated = True
                tau = (aqq - app) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                if tau == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * bp - s * bq
                new_q = s * bp + c * bq
                b[:, p] = new_p
                b[:, q] = new_q
                vp = vmat[:, p].copy()
                vmat[:, p] = c * vp - s * vmat[:, q]
                vmat[:, q] = s * vp + c * vmat[:, q]
        if not rotated:
            break

    sigma = np.linalg.norm(b, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    b = b[:, order]
    vmat = vmat[:, order]

    u = np.zeros((m, n))
    cutoff = np.max(sigma) * 1e-300 if sigma.size else 0.0
    for k in range(n):
        if sigma[k] > cutoff and sigma[k] > 0.0:
            u[:, k] = b[:, k] / sigma[k]
        else:
            u[:, k] = _orthonormal_completion(u[:, :k], m)
    return u, sigma, vmat


def _orthonormal_completion(existing: np.ndarray, m: int) -> np.ndarray:
    """A deterministic unit vector orthogonal to the given columns."""
    for j in range(m):
        cand = np.zeros(m)
        cand[j] = 1.0
        if existing.shape[1]:
            cand -= existing @ (existing.T @ cand)
        norm = np.linalg.norm(cand)
        if norm > 1e-6:
            return cand / norm
    raise ShapeError("cannot complete an orthonormal basis")


def truncated_svd(a: np.ndarray, rank: int) -> SvdTruncation:
    """Top-`rank` singular triplets of `a` (best rank-`rank` approximation)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError("expected a matrix")
    if not 1 <= rank <= min(a.shape):
        raise ParameterError(
            f"rank must be in [1, {min(a.shape)}] for shape {a.shape}, got {rank}"
        )
    u, s, v = jacobi_svd(a)
    return SvdTruncation(u=u[:, :rank].copy(), singular_values=s[:rank].copy(), v=v[:, :rank].copy())


def compose_adaptation(a: np.ndarray, factor: LowRankFactor) -> np.ndarray:
    """A + U V^T."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (factor.u.shape[0], factor.v.shape[0]):
        raise ShapeError(
            f"factor targets shape {(factor.u.shape[0], factor.v.shape[0])}, matrix is {a.shape}"
        )
    return a + factor.u @ factor.v.T


def factor_init(
    m: int,
    n: int,
    rank: int,
    rng,
    plane: int = 0,
    channel: int = 0,
    chunk_index: int = 1,
) -> LowRankFactor:
    """Fresh training factor: U ~ N(0, 0.01^2), V = 0, so U V^T is exactly zero."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    return LowRankFactor(
        u=rng.normal(0.0, 0.01, (m, rank)),
        v=np.zeros((n, rank)),
        plane=plane,
        channel=channel,
        chunk_index=chunk_index,
    )


def storage_saving(m: int, n: int, rank: int) -> tuple[int, float]:
    """Scalars saved by streaming (U, V) instead of the full m x n matrix.

    Returns (saved_count, saved_fraction); negative when the factor pair is
    larger than the matrix itself.
    """
    if rank < 1:
        raise ParameterError("rank must be >= 1")
    saved = m * n - rank * (m + n)
    return saved, saved / (m * n)
