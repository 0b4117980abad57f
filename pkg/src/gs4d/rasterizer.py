"""Differentiable forward rasterization of a Gaussian set, with analytic
gradients for every Gaussian parameter.

Forward semantics per pixel: splats composite front to back in camera-space
depth order (ties broken by index); alpha is opacity * exp(-0.5 d^T conic d)
capped at `max_alpha`; contributions below `alpha_cutoff` are skipped; the
pixel terminates when a contribution would push transmittance below
`transmittance_floor` (that contribution is excluded).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import InconsistentStateError, ShapeError
from .gaussians import Camera, Gaussians, normalize_quaternion, quaternion_to_rotation
from .sh import n_coeffs, sh_basis, sh_basis_grad

# Anti-aliasing guard added to both diagonal entries of the projected
# covariance; keeps sub-pixel splats from producing singular conics.
LOWPASS = 0.3


@dataclass
class RenderSettings:
    image_size: tuple[int, int] | None = None  # (W, H); None uses the camera's
    tile_size: int = 16
    near_plane: float = 0.1
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    max_alpha: float = 0.99
    # Splats are binned to tiles within cull_sigma standard deviations of the
    # projected center. None derives the radius from alpha_cutoff, which makes
    # binning exact: everything outside is below the cutoff anyway.
    cull_sigma: float | None = None

    def __post_init__(self):
        if self.tile_size < 1:
            raise ShapeError("tile_size must be >= 1")
        if not (0.0 < self.alpha_cutoff < self.max_alpha < 1.0):
            raise ShapeError("need 0 < alpha_cutoff < max_alpha < 1")
        if self.near_plane <= 0:
            raise ShapeError("near_plane must be positive")

    def effective_cull_sigma(self) -> float:
        if self.cull_sigma is not None:
            return float(self.cull_sigma)
        return float(np.sqrt(2.0 * np.log(1.0 / self.alpha_cutoff)))


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    final_transmittance: np.ndarray  # (H, W)
    contributor_count: np.ndarray  # (H, W) int32


@dataclass
class GaussianGrads:
    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray


class _Projected:
    """Depth-sorted, culled per-splat render quantities plus tile bins."""

    __slots__ = (
        "n_visible", "orig_idx", "pcam", "mean2d", "cov3", "t2", "cov2",
        "conic", "color", "raw_color", "viewdir", "view_delta_norm",
        "bbox", "ranges", "ids", "width", "height",
    )


def _project(gaussians: Gaussians, camera: Camera, settings: RenderSettings) -> _Projected:
    p = _Projected()
    w, h = settings.image_size if settings.image_size is not None else camera.image_size
    p.width, p.height = int(w), int(h)

    centers = np.asarray(gaussians.centers, dtype=np.float64)
    pcam = camera.to_camera(centers)
    keep = pcam[:, 2] > settings.near_plane
    idx = np.nonzero(keep)[0]

    if idx.size:
        pc = pcam[idx]
        z = pc[:, 2]
        fx, fy = camera.focal
        cx, cy = camera.principal_point
        u = fx * pc[:, 0] / z + cx
        v = fy * pc[:, 1] / z + cy
        mean2d = np.stack([u, v], axis=1)

        cov3 = _build_cov3(gaussians.rotations[idx], gaussians.log_scales[idx])
        jac = np.zeros((idx.size, 2, 3))
        inv_z = 1.0 / z
        jac[:, 0, 0] = fx * inv_z
        jac[:, 0, 2] = -fx * pc[:, 0] * inv_z * inv_z
        jac[:, 1, 1] = fy * inv_z
        jac[:, 1, 2] = -fy * pc[:, 1] * inv_z * inv_z
        t2 = jac @ camera.rotation
        cov2 = t2 @ cov3 @ np.swapaxes(t2, 1, 2)
        cov2[:, 0, 0] += LOWPASS
        cov2[:, 1, 1] += LOWPASS

        a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
        det = a * c - b * b
        conic = np.stack([c / det, -b / det, a / det], axis=1)

        mid = 0.5 * (a + c)
        lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
        radius = settings.effective_cull_sigma() * np.sqrt(lam_max)

        x0 = np.floor(u - radius).astype(np.int64)
        x1 = np.ceil(u + radius).astype(np.int64)
        y0 = np.floor(v - radius).astype(np.int64)
        y1 = np.ceil(v + radius).astype(np.int64)
        on_screen = (x1 >= 0) & (x0 <= p.width - 1) & (y1 >= 0) & (y0 <= p.height - 1)

        # depth order with original index as tie-break
        sub = np.nonzero(on_screen)[0]
        order = sub[np.lexsort((idx[sub], z[sub]))]
        idx = idx[order]
        p.pcam = pc[order]
        p.mean2d = mean2d[order]
        p.cov3 = cov3[order]
        p.t2 = t2[order]
        p.cov2 = cov2[order]
        p.conic = np.ascontiguousarray(conic[order])
        p.bbox = np.stack(
            [
                np.clip(x0[order], 0, p.width - 1),
                np.clip(x1[order], 0, p.width - 1),
                np.clip(y0[order], 0, p.height - 1),
                np.clip(y1[order], 0, p.height - 1),
            ],
            axis=1,
        )
    else:
        p.pcam = np.zeros((0, 3))
        p.mean2d = np.zeros((0, 2))
        p.cov3 = np.zeros((0, 3, 3))
        p.t2 = np.zeros((0, 2, 3))
        p.cov2 = np.zeros((0, 2, 2))
        p.conic = np.zeros((0, 3))
        p.bbox = np.zeros((0, 4), dtype=np.int64)

    p.orig_idx = idx
    p.n_visible = idx.size

    # view-dependent colors, one per visible splat
    degree = gaussians.sh_degree
    delta = gaussians.centers[idx] - camera.position
    norm = np.linalg.norm(delta, axis=1, keepdims=True)
    norm = np.where(norm == 0.0, 1.0, norm)
    viewdir = delta / norm
    if idx.size:
        basis = sh_basis(viewdir, degree)
        raw = np.einsum("nk,nkc->nc", basis, gaussians.sh_coeffs[idx]) + 0.5
    else:
        raw = np.zeros((0, 3))
    p.raw_color = raw
    p.color = np.maximum(raw, 0.0)
    p.viewdir = viewdir
    p.view_delta_norm = norm[:, 0]

    _bin_tiles(p, settings.tile_size)
    return p


def _build_cov3(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    r = quaternion_to_rotation(rotations)
    s = np.exp(np.asarray(log_scales, dtype=np.float64))
    m = r * s[:, None, :]
    return m @ np.swapaxes(m, 1, 2)


def _bin_tiles(p: _Projected, tile_size: int) -> None:
    n_tx = (p.width + tile_size - 1) // tile_size
    n_ty = (p.height + tile_size - 1) // tile_size
    n_tiles = n_tx * n_ty
    if p.n_visible == 0:
        p.ranges = np.zeros(n_tiles + 1, dtype=np.int64)
        p.ids = np.zeros(0, dtype=np.int64)
        return
    tx0 = p.bbox[:, 0] // tile_size
    tx1 = p.bbox[:, 1] // tile_size
    ty0 = p.bbox[:, 2] // tile_size
    ty1 = p.bbox[:, 3] // tile_size
    w_t = tx1 - tx0 + 1
    reps = w_t * (ty1 - ty0 + 1)
    total = int(reps.sum())
    gid = np.repeat(np.arange(p.n_visible, dtype=np.int64), reps)
    starts = np.concatenate([[0], np.cumsum(reps)[:-1]])
    k = np.arange(total, dtype=np.int64) - starts[gid]
    dty, dtx = np.divmod(k, w_t[gid])
    tid = (ty0[gid] + dty) * n_tx + (tx0[gid] + dtx)
    order = np.lexsort((gid, tid))  # per tile, splats stay in depth order
    p.ids = np.ascontiguousarray(gid[order])
    counts = np.bincount(tid, minlength=n_tiles)
    p.ranges = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)


def rasterize(gaussians: Gaussians, camera: Camera, settings: RenderSettings | None = None) -> RenderOutput:
    settings = settings or RenderSettings()
    p = _project(gaussians, camera, settings)
    h, w = p.height, p.width
    color = np.zeros((h, w, 3), dtype=np.float64)
    t_buf = np.ones((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int32)
    active = np.ones((h, w), dtype=np.bool_)
    if p.n_visible:
        _kernels.blend_forward(
            w, h, settings.tile_size, p.ranges, p.ids,
            p.mean2d, p.conic, _opacities(gaussians, p), np.ascontiguousarray(p.color),
            p.bbox, settings.alpha_cutoff, settings.transmittance_floor,
            settings.max_alpha, color, t_buf, count, active,
        )
    color += t_buf[:, :, None] * np.asarray(settings.background, dtype=np.float64)
    return RenderOutput(color=color, final_transmittance=t_buf, contributor_count=count)


def _opacities(gaussians: Gaussians, p: _Projected) -> np.ndarray:
    logits = np.asarray(gaussians.opacity_logits, dtype=np.float64)[p.orig_idx]
    return 1.0 / (1.0 + np.exp(-logits))


def rasterize_backward(
    gaussians: Gaussians,
    camera: Camera,
    settings: RenderSettings | None,
    upstream_grad: np.ndarray,
    forward_output: RenderOutput | None = None,
) -> GaussianGrads:
    """Gradients of sum(upstream_grad * color) w.r.t. every Gaussian parameter.

    If `forward_output` is given, the internally replayed forward pass must
    reproduce it bitwise, otherwise the scene was mutated between passes.
    """
    settings = settings or RenderSettings()
    p = _project(gaussians, camera, settings)
    h, w = p.height, p.width
    upstream = np.ascontiguousarray(upstream_grad, dtype=np.float64)
    if upstream.shape != (h, w, 3):
        raise ShapeError(f"upstream_grad must be ({h}, {w}, 3), got {upstream.shape}")

    n = len(gaussians)
    grads = GaussianGrads(
        centers=np.zeros((n, 3)),
        rotations=np.zeros((n, 4)),
        log_scales=np.zeros((n, 3)),
        opacity_logits=np.zeros(n),
        sh_coeffs=np.zeros_like(np.asarray(gaussians.sh_coeffs, dtype=np.float64)),
    )

    if forward_output is not None:
        replay = rasterize(gaussians, camera, settings)
        same = (
            np.array_equal(replay.color, forward_output.color)
            and np.array_equal(replay.final_transmittance, forward_output.final_transmittance)
            and np.array_equal(replay.contributor_count, forward_output.contributor_count)
        )
        if not same:
            raise InconsistentStateError("scene state changed between forward and backward")

    if p.n_visible == 0:
        return grads

    opac = _opacities(gaussians, p)
    colors = np.ascontiguousarray(p.color)

    t_final = np.ones((h, w), dtype=np.float64)
    term_at = np.full((h, w), _kernels.TERM_NONE, dtype=np.int32)
    _kernels.blend_replay_termination(
        w, h, settings.tile_size, p.ranges, p.ids, p.mean2d, p.conic, opac,
        p.bbox, settings.alpha_cutoff, settings.transmittance_floor,
        settings.max_alpha, t_final, term_at,
    )

    background = np.asarray(settings.background, dtype=np.float64)
    t_run = t_final.copy()
    suffix = t_final[:, :, None] * background
    d_color = np.zeros((p.n_visible, 3))
    d_opac_raw = np.zeros(p.n_visible)
    d_mean2d = np.zeros((p.n_visible, 2))
    d_conic = np.zeros((p.n_visible, 3))
    _kernels.blend_backward(
        w, h, settings.tile_size, p.ranges, p.ids, p.mean2d, p.conic, opac,
        colors, p.bbox, settings.alpha_cutoff, settings.transmittance_floor,
        settings.max_alpha, background, upstream, t_final, term_at,
        t_run, suffix, d_color, d_opac_raw, d_mean2d, d_conic,
    )

    # background gradient also flows through T_final via alpha; already
    # captured because `suffix` starts at T_final * background.

    _chain_to_parameters(gaussians, camera, p, opac, d_color, d_opac_raw, d_mean2d, d_conic, grads)
    return grads


def _chain_to_parameters(gaussians, camera, p, opac, d_color, d_opac_raw, d_mean2d, d_conic, grads):
    idx = p.orig_idx
    m = p.n_visible
    fx, fy = camera.focal
    wr = camera.rotation

    # conic (a, b, c) gradient -> full-matrix gradient of the inverse
    gc = np.empty((m, 2, 2))
    gc[:, 0, 0] = d_conic[:, 0]
    gc[:, 0, 1] = 0.5 * d_conic[:, 1]
    gc[:, 1, 0] = 0.5 * d_conic[:, 1]
    gc[:, 1, 1] = d_conic[:, 2]
    cm = np.empty((m, 2, 2))
    cm[:, 0, 0] = p.conic[:, 0]
    cm[:, 0, 1] = p.conic[:, 1]
    cm[:, 1, 0] = p.conic[:, 1]
    cm[:, 1, 1] = p.conic[:, 2]
    d_cov2 = -cm @ gc @ cm

    d_cov3 = np.swapaxes(p.t2, 1, 2) @ d_cov2 @ p.t2
    d_t2 = 2.0 * d_cov2 @ p.t2 @ p.cov3
    d_jac = d_t2 @ wr.T

    x, y, z = p.pcam[:, 0], p.pcam[:, 1], p.pcam[:, 2]
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    d_pcam = np.zeros((m, 3))
    d_pcam[:, 0] = d_jac[:, 0, 2] * (-fx * inv_z2)
    d_pcam[:, 1] = d_jac[:, 1, 2] * (-fy * inv_z2)
    d_pcam[:, 2] = (
        d_jac[:, 0, 0] * (-fx * inv_z2)
        + d_jac[:, 1, 1] * (-fy * inv_z2)
        + d_jac[:, 0, 2] * (2.0 * fx * x * inv_z2 * inv_z)
        + d_jac[:, 1, 2] * (2.0 * fy * y * inv_z2 * inv_z)
    )
    d_pcam[:, 0] += d_mean2d[:, 0] * fx * inv_z
    d_pcam[:, 2] += d_mean2d[:, 0] * (-fx * x * inv_z2)
    d_pcam[:, 1] += d_mean2d[:, 1] * fy * inv_z
    d_pcam[:, 2] += d_mean2d[:, 1] * (-fy * y * inv_z2)
    d_center = d_pcam @ wr

    # covariance -> (rotation, log_scale)
    q_hat = normalize_quaternion(gaussians.rotations[idx])
    rmat = quaternion_to_rotation(gaussians.rotations[idx])
    s = np.exp(np.asarray(gaussians.log_scales, dtype=np.float64)[idx])
    m3 = rmat * s[:, None, :]
    d_m3 = 2.0 * d_cov3 @ m3
    d_rmat = d_m3 * s[:, None, :]
    d_log_scale = s * np.einsum("nik,nik->nk", rmat, d_m3)
    d_qhat = _rotation_grad_to_quaternion(q_hat, d_rmat)
    qn = np.linalg.norm(np.asarray(gaussians.rotations, dtype=np.float64)[idx], axis=1)
    d_rot = (d_qhat - q_hat * np.sum(q_hat * d_qhat, axis=1, keepdims=True)) / qn[:, None]

    # SH color chain (clamped channels stop the gradient)
    degree = gaussians.sh_degree
    mask = (p.raw_color > 0.0).astype(np.float64)
    d_col_eff = d_color * mask
    basis = sh_basis(p.viewdir, degree)
    d_sh = basis[:, :, None] * d_col_eff[:, None, :]
    bgrad = sh_basis_grad(p.viewdir, degree)
    coeffs = np.asarray(gaussians.sh_coeffs, dtype=np.float64)[idx]
    d_dir = np.einsum("nc,nkc,nkd->nd", d_col_eff, coeffs, bgrad)
    proj = d_dir - p.viewdir * np.sum(p.viewdir * d_dir, axis=1, keepdims=True)
    d_center = d_center + proj / p.view_delta_norm[:, None]

    d_logit = d_opac_raw * opac * (1.0 - opac)

    np.add.at(grads.centers, idx, d_center)
    np.add.at(grads.rotations, idx, d_rot)
    np.add.at(grads.log_scales, idx, d_log_scale)
    np.add.at(grads.opacity_logits, idx, d_logit)
    np.add.at(grads.sh_coeffs, idx, d_sh)


def _rotation_grad_to_quaternion(q_hat: np.ndarray, d_r: np.ndarray) -> np.ndarray:
    """Chain dL/dR (N,3,3) to dL/dq for unit quaternions q = (w, x, y, z)."""
    w, x, y, z = q_hat[:, 0], q_hat[:, 1], q_hat[:, 2], q_hat[:, 3]
    r00, r01, r02 = d_r[:, 0, 0], d_r[:, 0, 1], d_r[:, 0, 2]
    r10, r11, r12 = d_r[:, 1, 0], d_r[:, 1, 1], d_r[:, 1, 2]
    r20, r21, r22 = d_r[:, 2, 0], d_r[:, 2, 1], d_r[:, 2, 2]
    dw = 2.0 * (-z * r01 + y * r02 + z * r10 - x * r12 - y * r20 + x * r21)
    dx = 2.0 * (
        y * r01 + z * r02 + y * r10 - 2.0 * x * r11 - w * r12 + z * r20 + w * r21 - 2.0 * x * r22
    )
    dy = 2.0 * (
        -2.0 * y * r00 + x * r01 + w * r02 + x * r10 + z * r12 - w * r20 + z * r21 - 2.0 * y * r22
    )
    dz = 2.0 * (
        -2.0 * z * r00 - w * r01 + x * r02 + w * r10 - 2.0 * z * r11 + y * r12 + x * r20 + y * r21
    )
    return np.stack([dw, dx, dy, dz], axis=1)


def save_color_png(path, output: RenderOutput) -> None:
    """8-bit PNG debug dump of the color buffer (clipped to [0, 1])."""
    from PIL import Image

    img = np.clip(output.color, 0.0, 1.0)
    Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(path)


def save_transmittance_raw(path, output: RenderOutput) -> None:
    """Flat little-endian f32 dump of final transmittance, row-major."""
    output.final_transmittance.astype("<f4").tofile(path)
