"""Photometric training loss and image quality metrics.

SSIM uses an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 and unit
dynamic range, evaluated on valid window positions only and averaged over
positions and channels.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
C1 = (K1 * 1.0) ** 2
C2 = (K2 * 1.0) ** 2
PSNR_CAP = 99.0


def _window() -> np.ndarray:
    half = (WINDOW_SIZE - 1) / 2.0
    x = np.arange(WINDOW_SIZE) - half
    w = np.exp(-(x**2) / (2.0 * WINDOW_SIGMA**2))
    return w / w.sum()


_W1D = _window()


def _corr_valid(img: np.ndarray, axis: int) -> np.ndarray:
    """1D valid-mode correlation with the Gaussian window along `axis`."""
    win = np.lib.stride_tricks.sliding_window_view(img, WINDOW_SIZE, axis=axis)
    return win @ _W1D


def _filt(img: np.ndarray) -> np.ndarray:
    return _corr_valid(_corr_valid(img, 0), 1)


def _filt_adjoint(grad: np.ndarray, out_shape) -> np.ndarray:
    """Adjoint of `_filt` (the window is symmetric, so this is the same
    correlation applied to the zero-padded gradient map)."""
    pad = WINDOW_SIZE - 1
    padded = np.zeros((grad.shape[0] + 2 * pad, grad.shape[1] + 2 * pad) + grad.shape[2:])
    padded[pad : pad + grad.shape[0], pad : pad + grad.shape[1]] = grad
    out = _corr_valid(_corr_valid(padded, 0), 1)
    assert out.shape[:2] == tuple(out_shape[:2])
    return out


def _as_chw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ShapeError("images must be (H, W) or (H, W, C)")
    if img.shape[0] < WINDOW_SIZE or img.shape[1] < WINDOW_SIZE:
        raise ShapeError(f"images must be at least {WINDOW_SIZE}x{WINDOW_SIZE}")
    return img


def ssim(a: np.ndarray, b: np.ndarray, with_grad: bool = False):
    """Mean SSIM over valid positions and channels; optionally also the
    gradient with respect to `a`."""
    x = _as_chw(a)
    y = _as_chw(b)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")

    mu_x = _filt(x)
    mu_y = _filt(y)
    mu_xx = _filt(x * x)
    mu_yy = _filt(y * y)
    mu_xy = _filt(x * y)
    var_x = mu_xx - mu_x * mu_x
    var_y = mu_yy - mu_y * mu_y
    cov = mu_xy - mu_x * mu_y

    a1 = 2.0 * mu_x * mu_y + C1
    a2 = 2.0 * cov + C2
    b1 = mu_x * mu_x + mu_y * mu_y + C1
    b2 = var_x + var_y + C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())
    if not with_grad:
        return value

    # partials of the per-position SSIM w.r.t. the filtered statistics of x
    inv = 1.0 / (b1 * b2)
    ds_dmux = 2.0 * mu_y * (a2 - a1) * inv - 2.0 * mu_x * smap * (1.0 / b1 - 1.0 / b2)
    ds_dmuxx = -smap / b2
    ds_dmuxy = 2.0 * a1 * inv

    scale = 1.0 / smap.size
    g_mux = _filt_adjoint(ds_dmux * scale, x.shape)
    g_muxx = _filt_adjoint(ds_dmuxx * scale, x.shape)
    g_muxy = _filt_adjoint(ds_dmuxy * scale, x.shape)
    grad = g_mux + 2.0 * x * g_muxx + y * g_muxy
    if np.asarray(a).ndim == 2:
        grad = grad[:, :, 0]
    return value, grad


def loss(render: np.ndarray, gt: np.ndarray, w_ssim: float = 0.2):
    """(1 - w_ssim) * mean L1 + w_ssim * (1 - SSIM), plus the gradient with
    respect to the rendered image."""
    x = np.asarray(render, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - w_ssim) * np.sign(diff) / diff.size
    value = (1.0 - w_ssim) * l1
    if w_ssim != 0.0:
        s, s_grad = ssim(x, y, with_grad=True)
        value += w_ssim * (1.0 - s)
        grad = grad - w_ssim * s_grad
    return value, grad


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1], capped at 99 dB."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def dssim(a: np.ndarray, b: np.ndarray) -> float:
    """(1 - SSIM) / 2."""
    return (1.0 - ssim(a, b)) / 2.0
