"""Tri-plane deformation field: local plane features plus per-Gaussian
embeddings and a frequency-encoded time input, decoded by a small MLP into
per-Gaussian parameter deltas applied in the unconstrained parameterization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .gaussians import Gaussians, normalize_quaternion

PLANE_NAMES = ("XY", "XZ", "YZ")
PLANE_AXES = ((0, 1), (0, 2), (1, 2))
HEAD_WIDTHS = (3, 4, 3, 1, 3)  # d_center, d_rotation, d_log_scale, d_opacity_logit, d_sh0
HEAD_NAMES = ("center", "rotation", "log_scale", "opacity", "sh0")


@dataclass
class TriPlane:
    """Three axis-aligned feature grids over a world-space box.

    Each plane has shape (F, R, R); plane p stores features indexed by the
    normalized coordinates of axes PLANE_AXES[p], first axis then second.
    Every (R, R) channel is one adaptation target for the low-rank stream.
    """

    planes: list  # 3 arrays of shape (F, R, R)
    bounds: np.ndarray  # (2, 3): [lo, hi]

    def __post_init__(self):
        if len(self.planes) != 3:
            raise ShapeError("need exactly three planes (XY, XZ, YZ)")
        f, r, r2 = self.planes[0].shape
        if r != r2 or r < 2:
            raise ShapeError("planes must be (F, R, R) with R >= 2")
        for pl in self.planes:
            if pl.shape != (f, r, r):
                raise ShapeError("all planes must share F and R")
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        if self.bounds.shape != (2, 3):
            raise ShapeError("bounds must be (2, 3)")
        if np.any(self.bounds[1] <= self.bounds[0]):
            raise ShapeError("bounds must have positive extent on every axis")

    @property
    def resolution(self) -> int:
        return self.planes[0].shape[1]

    @property
    def n_features(self) -> int:
        return self.planes[0].shape[0]

    def copy(self) -> "TriPlane":
        return TriPlane([p.copy() for p in self.planes], self.bounds.copy())


@dataclass
class DeformDecoder:
    """Two ReLU hidden layers and five linear output heads.

    Weight layout is (in, out); heads follow HEAD_NAMES order. Output heads
    initialized to zero make the whole deformation start as the identity.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    head_w: list  # 5 arrays (hidden, width)
    head_b: list  # 5 arrays (width,)

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def copy(self) -> "DeformDecoder":
        return DeformDecoder(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            [w.copy() for w in self.head_w], [b.copy() for b in self.head_b],
        )

    def param_arrays(self):
        """(name, array) pairs in serialization order."""
        yield "w1", self.w1
        yield "b1", self.b1
        yield "w2", self.w2
        yield "b2", self.b2
        for name, w, b in zip(HEAD_NAMES, self.head_w, self.head_b):
            yield f"head_{name}_w", w
            yield f"head_{name}_b", b


@dataclass
class DeformOutput:
    d_center: np.ndarray  # (N, 3)
    d_rotation: np.ndarray  # (N, 4)
    d_log_scale: np.ndarray  # (N, 3)
    d_opacity_logit: np.ndarray  # (N,)
    d_sh0: np.ndarray  # (N, 3)


def decoder_input_dim(n_features: int, embed_dim: int, time_freqs: int, use_time_encoding: bool = True) -> int:
    return 3 * n_features + embed_dim + (2 * time_freqs if use_time_encoding else 0)


def init_decoder(in_dim: int, hidden: int, rng: np.random.Generator) -> DeformDecoder:
    def he_uniform(fan_in, shape):
        lim = np.sqrt(6.0 / fan_in)
        return rng.uniform(-lim, lim, shape)

    return DeformDecoder(
        w1=he_uniform(in_dim, (in_dim, hidden)),
        b1=np.zeros(hidden),
        w2=he_uniform(hidden, (hidden, hidden)),
        b2=np.zeros(hidden),
        head_w=[np.zeros((hidden, w)) for w in HEAD_WIDTHS],
        head_b=[np.zeros(w) for w in HEAD_WIDTHS],
    )


def init_triplane(resolution: int, n_features: int, bounds, rng: np.random.Generator, sigma: float = 0.01) -> TriPlane:
    planes = [rng.normal(0.0, sigma, (n_features, resolution, resolution)) for _ in range(3)]
    return TriPlane(planes, np.asarray(bounds, dtype=np.float64))


# --- tri-plane sampling ---

def _interp_coords(triplane: TriPlane, x: np.ndarray):
    """Shared bilinear bookkeeping: corner indices and weights per plane."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    lo, hi = triplane.bounds[0], triplane.bounds[1]
    extent = hi - lo
    u_raw = (x - lo) / extent
    inside = (u_raw >= 0.0) & (u_raw <= 1.0)
    u = np.clip(u_raw, 0.0, 1.0)
    r = triplane.resolution
    g = u * (r - 1)
    i0 = np.minimum(np.floor(g).astype(np.int64), r - 2)
    frac = g - i0
    return x, u, inside, i0, frac, extent


def sample_triplane(triplane: TriPlane, x: np.ndarray) -> np.ndarray:
    """Bilinear plane features at world points, concatenated (XY, XZ, YZ).

    x: (3,) or (N, 3); out-of-bounds points clamp to the boundary.
    Returns (N, 3F) (or (3F,) for a single point).
    """
    single = np.asarray(x).ndim == 1
    _, _, _, i0, frac, _ = _interp_coords(triplane, x)
    feats = []
    for p, (ax_a, ax_b) in enumerate(PLANE_AXES):
        plane = triplane.planes[p]
        ia, ib = i0[:, ax_a], i0[:, ax_b]
        fa, fb = frac[:, ax_a], frac[:, ax_b]
        w00 = (1 - fa) * (1 - fb)
        w10 = fa * (1 - fb)
        w01 = (1 - fa) * fb
        w11 = fa * fb
        v = (
            plane[:, ia, ib] * w00
            + plane[:, ia + 1, ib] * w10
            + plane[:, ia, ib + 1] * w01
            + plane[:, ia + 1, ib + 1] * w11
        )
        feats.append(v.T)  # (N, F)
    out = np.concatenate(feats, axis=1)
    return out[0] if single else out


def sample_triplane_backward(triplane: TriPlane, x: np.ndarray, upstream: np.ndarray):
    """Gradients of sum(upstream * sample_triplane(x)) w.r.t. plane features
    and w.r.t. x. upstream: (N, 3F). Returns (plane_grads list, dx (N, 3))."""
    x2, _, inside, i0, frac, extent = _interp_coords(triplane, x)
    n = x2.shape[0]
    f = triplane.n_features
    r = triplane.resolution
    upstream = np.asarray(upstream, dtype=np.float64).reshape(n, 3 * f)
    plane_grads = [np.zeros_like(p) for p in triplane.planes]
    dx = np.zeros((n, 3))
    for p, (ax_a, ax_b) in enumerate(PLANE_AXES):
        plane = triplane.planes[p]
        up = upstream[:, p * f : (p + 1) * f]  # (N, F)
        ia, ib = i0[:, ax_a], i0[:, ax_b]
        fa, fb = frac[:, ax_a], frac[:, ax_b]
        weights = ((1 - fa) * (1 - fb), fa * (1 - fb), (1 - fa) * fb, fa * fb)
        corners = ((ia, ib), (ia + 1, ib), (ia, ib + 1), (ia + 1, ib + 1))
        flat = plane_grads[p].reshape(f, r * r)
        for w, (ca, cb) in zip(weights, corners):
            lin = ca * r + cb
            contrib = up * w[:, None]  # (N, F)
            for ch in range(f):
                flat[ch] += np.bincount(lin, weights=contrib[:, ch], minlength=r * r)
        # weight derivatives w.r.t. the fractional coordinates
        c00 = plane[:, ia, ib].T
        c10 = plane[:, ia + 1, ib].T
        c01 = plane[:, ia, ib + 1].T
        c11 = plane[:, ia + 1, ib + 1].T
        dv_dfa = (c10 - c00) * (1 - fb)[:, None] + (c11 - c01) * fb[:, None]
        dv_dfb = (c01 - c00) * (1 - fa)[:, None] + (c11 - c10) * fa[:, None]
        ga = np.sum(up * dv_dfa, axis=1)
        gb = np.sum(up * dv_dfb, axis=1)
        scale_a = (r - 1) / extent[ax_a]
        scale_b = (r - 1) / extent[ax_b]
        dx[:, ax_a] += ga * scale_a * inside[:, ax_a]
        dx[:, ax_b] += gb * scale_b * inside[:, ax_b]
    return plane_grads, dx


# --- time encoding ---

def freq_encode(t: float, time_freqs: int) -> np.ndarray:
    """(sin(2^0 pi t), cos(2^0 pi t), ..., sin(2^{L-1} pi t), cos(2^{L-1} pi t))."""
    if time_freqs < 0:
        raise ParameterError("time_freqs must be >= 0")
    out = np.empty(2 * time_freqs)
    for k in range(time_freqs):
        arg = (2.0**k) * np.pi * t
        out[2 * k] = np.sin(arg)
        out[2 * k + 1] = np.cos(arg)
    return out


def freq_encode_grad(t: float, time_freqs: int) -> np.ndarray:
    """d freq_encode / dt."""
    out = np.empty(2 * time_freqs)
    for k in range(time_freqs):
        w = (2.0**k) * np.pi
        out[2 * k] = w * np.cos(w * t)
        out[2 * k + 1] = -w * np.sin(w * t)
    return out


# --- decoder ---

def _decoder_forward(decoder: DeformDecoder, inputs: np.ndarray):
    h1p = inputs @ decoder.w1 + decoder.b1
    h1 = np.maximum(h1p, 0.0)
    h2p = h1 @ decoder.w2 + decoder.b2
    h2 = np.maximum(h2p, 0.0)
    heads = [h2 @ w + b for w, b in zip(decoder.head_w, decoder.head_b)]
    return heads, (inputs, h1p, h1, h2p, h2)


def decode_deformation(
    features: np.ndarray,
    embeddings: np.ndarray,
    t_enc: np.ndarray,
    decoder: DeformDecoder,
) -> DeformOutput:
    """Run the decoder on concatenated (plane features, embedding, time encoding)."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n = features.shape[0]
    t_enc = np.asarray(t_enc, dtype=np.float64).reshape(-1)
    inputs = np.concatenate([features, embeddings, np.tile(t_enc, (n, 1))], axis=1)
    if inputs.shape[1] != decoder.in_dim:
        raise ShapeError(
            f"decoder expects input width {decoder.in_dim}, got {inputs.shape[1]}"
        )
    heads, _ = _decoder_forward(decoder, inputs)
    return DeformOutput(
        d_center=heads[0],
        d_rotation=heads[1],
        d_log_scale=heads[2],
        d_opacity_logit=heads[3][:, 0],
        d_sh0=heads[4],
    )


def apply_deformation(g: Gaussians, d: DeformOutput) -> Gaussians:
    """Additive update in the unconstrained parameterization; the rotation is
    renormalized after the update. Embeddings are untouched."""
    sh = np.asarray(g.sh_coeffs, dtype=np.float64).copy()
    sh[:, 0, :] += d.d_sh0
    return Gaussians(
        centers=np.asarray(g.centers, dtype=np.float64) + d.d_center,
        rotations=normalize_quaternion(np.asarray(g.rotations, dtype=np.float64) + d.d_rotation),
        log_scales=np.asarray(g.log_scales, dtype=np.float64) + d.d_log_scale,
        opacity_logits=np.asarray(g.opacity_logits, dtype=np.float64) + d.d_opacity_logit,
        sh_coeffs=sh,
        embeddings=np.asarray(g.embeddings, dtype=np.float64),
    )


# --- fused pipeline used by the trainer ---

@dataclass
class DeformCache:
    inputs: np.ndarray
    h1p: np.ndarray
    h1: np.ndarray
    h2p: np.ndarray
    h2: np.ndarray
    t: float
    t_enc: np.ndarray
    rot_sum: np.ndarray  # rotation + d_rotation before normalization
    n_features: int
    embed_dim: int
    use_time_encoding: bool


@dataclass
class DeformGrads:
    planes: list  # 3 arrays (F, R, R)
    embeddings: np.ndarray  # (N, d_e)
    decoder: DeformDecoder  # gradient arrays in the same layout
    t: float
    base: "object"  # GaussianGrads for the undeformed parameters


def deform_forward(
    triplane: TriPlane,
    decoder: DeformDecoder,
    gaussians: Gaussians,
    t: float,
    time_freqs: int,
    use_time_encoding: bool = True,
):
    """Sample -> decode -> apply; returns (deformed gaussians, cache)."""
    feats = sample_triplane(triplane, gaussians.centers)
    t_enc = freq_encode(t, time_freqs) if use_time_encoding else np.zeros(0)
    n = len(gaussians)
    inputs = np.concatenate(
        [np.atleast_2d(feats), gaussians.embeddings, np.tile(t_enc, (n, 1))], axis=1
    )
    if inputs.shape[1] != decoder.in_dim:
        raise ShapeError(
            f"decoder expects input width {decoder.in_dim}, got {inputs.shape[1]}"
        )
    heads, (inputs, h1p, h1, h2p, h2) = _decoder_forward(decoder, inputs)
    d = DeformOutput(
        d_center=heads[0],
        d_rotation=heads[1],
        d_log_scale=heads[2],
        d_opacity_logit=heads[3][:, 0],
        d_sh0=heads[4],
    )
    rot_sum = np.asarray(gaussians.rotations, dtype=np.float64) + d.d_rotation
    deformed = apply_deformation(gaussians, d)
    cache = DeformCache(
        inputs=inputs, h1p=h1p, h1=h1, h2p=h2p, h2=h2, t=t, t_enc=t_enc,
        rot_sum=rot_sum, n_features=triplane.n_features,
        embed_dim=gaussians.embed_dim, use_time_encoding=use_time_encoding,
    )
    return deformed, cache


def deform_backward(
    triplane: TriPlane,
    decoder: DeformDecoder,
    gaussians: Gaussians,
    cache: DeformCache,
    upstream,
    time_freqs: int,
) -> DeformGrads:
    """Chain upstream gradients on the deformed parameters back to the base
    parameters, plane features, embeddings, decoder weights and time.

    `upstream` is a GaussianGrads-shaped object (centers, rotations,
    log_scales, opacity_logits, sh_coeffs) w.r.t. the deformed Gaussians.
    """
    from .rasterizer import GaussianGrads

    n = len(gaussians)
    f = cache.n_features

    # rotation: deformed = normalize(rot_sum)
    norm = np.linalg.norm(cache.rot_sum, axis=1, keepdims=True)
    r_hat = cache.rot_sum / norm
    up_rhat = np.asarray(upstream.rotations, dtype=np.float64)
    d_rot_sum = (up_rhat - r_hat * np.sum(r_hat * up_rhat, axis=1, keepdims=True)) / norm

    d_heads = [
        np.asarray(upstream.centers, dtype=np.float64),
        d_rot_sum,
        np.asarray(upstream.log_scales, dtype=np.float64),
        np.asarray(upstream.opacity_logits, dtype=np.float64)[:, None],
        np.asarray(upstream.sh_coeffs, dtype=np.float64)[:, 0, :],
    ]

    # decoder backward
    dec_grads = DeformDecoder(
        w1=np.zeros_like(decoder.w1),
        b1=np.zeros_like(decoder.b1),
        w2=np.zeros_like(decoder.w2),
        b2=np.zeros_like(decoder.b2),
        head_w=[np.zeros_like(w) for w in decoder.head_w],
        head_b=[np.zeros_like(b) for b in decoder.head_b],
    )
    d_h2 = np.zeros_like(cache.h2)
    for i, dh in enumerate(d_heads):
        dec_grads.head_w[i][:] = cache.h2.T @ dh
        dec_grads.head_b[i][:] = dh.sum(axis=0)
        d_h2 += dh @ decoder.head_w[i].T
    d_h2p = d_h2 * (cache.h2p > 0)
    dec_grads.w2[:] = cache.h1.T @ d_h2p
    dec_grads.b2[:] = d_h2p.sum(axis=0)
    d_h1 = d_h2p @ decoder.w2.T
    d_h1p = d_h1 * (cache.h1p > 0)
    dec_grads.w1[:] = cache.inputs.T @ d_h1p
    dec_grads.b1[:] = d_h1p.sum(axis=0)
    d_inputs = d_h1p @ decoder.w1.T

    d_feats = d_inputs[:, : 3 * f]
    d_embed = d_inputs[:, 3 * f : 3 * f + cache.embed_dim]
    d_tenc = d_inputs[:, 3 * f + cache.embed_dim :]

    plane_grads, dx = sample_triplane_backward(triplane, gaussians.centers, d_feats)

    if cache.use_time_encoding and d_tenc.shape[1]:
        dt = float(np.sum(d_tenc.sum(axis=0) * freq_encode_grad(cache.t, time_freqs)))
    else:
        dt = 0.0

    base_sh = np.asarray(upstream.sh_coeffs, dtype=np.float64).copy()
    base = GaussianGrads(
        centers=np.asarray(upstream.centers, dtype=np.float64) + dx,
        rotations=d_rot_sum.copy(),
        log_scales=np.asarray(upstream.log_scales, dtype=np.float64).copy(),
        opacity_logits=np.asarray(upstream.opacity_logits, dtype=np.float64).copy(),
        sh_coeffs=base_sh,
    )
    return DeformGrads(planes=plane_grads, embeddings=d_embed, decoder=dec_grads, t=dt, base=base)
