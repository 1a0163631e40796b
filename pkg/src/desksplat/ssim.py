"""Structural similarity with an analytic backward pass.

Single implementation shared by the evaluation metrics and the training
loss (D-SSIM = (1 - SSIM) / 2). Windows are 11x11 Gaussian (sigma 1.5),
constants K1=0.01, K2=0.03 on dynamic range 1. Near image borders the
window is renormalized over its in-bounds taps, so constant images score
exactly by the closed-form luminance/contrast formula everywhere and
regions smaller than a window remain well defined.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ContractError

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
C1 = (K1 * 1.0) ** 2
C2 = (K2 * 1.0) ** 2


def _kernel() -> np.ndarray:
    r = WINDOW_SIZE // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / WINDOW_SIGMA) ** 2)
    return k / k.sum()


_K = _kernel()


def _conv2(img: np.ndarray) -> np.ndarray:
    """Separable window filter with zero padding (no normalization)."""
    out = correlate1d(img, _K, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _K, axis=1, mode="constant", cval=0.0)


def _window_mass(shape) -> np.ndarray:
    return _conv2(np.ones(shape[:2] + (1,), dtype=np.float64))[:, :, 0]


def _filter(img: np.ndarray, mass: np.ndarray) -> np.ndarray:
    return _conv2(img) / mass[:, :, None]


def _filter_transpose(field: np.ndarray, mass: np.ndarray) -> np.ndarray:
    return _conv2(field / mass[:, :, None])


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]
    if x.ndim != 3:
        raise ContractError("images must be HxW or HxWxC")
    return x, y


def _stats(x, y, mass):
    mu_x = _filter(x, mass)
    mu_y = _filter(y, mass)
    u_xx = _filter(x * x, mass)
    u_yy = _filter(y * y, mass)
    u_xy = _filter(x * y, mass)
    s_xx = u_xx - mu_x * mu_x
    s_yy = u_yy - mu_y * mu_y
    s_xy = u_xy - mu_x * mu_y
    return mu_x, mu_y, s_xx, s_yy, s_xy


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-pixel, per-channel SSIM map, shape (H, W, C)."""
    x, y = _check_pair(x, y)
    mass = _window_mass(x.shape)
    mu_x, mu_y, s_xx, s_yy, s_xy = _stats(x, y, mass)
    a1 = 2.0 * mu_x * mu_y + C1
    a2 = 2.0 * s_xy + C2
    b1 = mu_x * mu_x + mu_y * mu_y + C1
    b2 = s_xx + s_yy + C2
    return (a1 * a2) / (b1 * b2)


def ssim_map_backward(x: np.ndarray, y: np.ndarray,
                      d_map: np.ndarray) -> np.ndarray:
    """Gradient of sum(d_map * ssim_map(x, y)) w.r.t. x."""
    x, y = _check_pair(x, y)
    d_map = np.asarray(d_map, dtype=np.float64).reshape(x.shape)
    mass = _window_mass(x.shape)
    mu_x, mu_y, s_xx, s_yy, s_xy = _stats(x, y, mass)
    a1 = 2.0 * mu_x * mu_y + C1
    a2 = 2.0 * s_xy + C2
    b1 = mu_x * mu_x + mu_y * mu_y + C1
    b2 = s_xx + s_yy + C2
    p = 1.0 / (b1 * b2)
    s = a1 * a2 * p

    # S as a function of (mu_x, u_xx, u_xy) with mu_y, u_yy constant:
    #   sigma_xy = u_xy - mu_x mu_y, sigma_xx = u_xx - mu_x^2
    d_mu_x = d_map * (p * (2.0 * mu_y * a2 - 2.0 * mu_y * a1)
                      - s * (2.0 * mu_x / b1) + s * (2.0 * mu_x / b2))
    d_u_xx = d_map * (-s / b2)
    d_u_xy = d_map * (2.0 * a1 * p)

    d_x = _filter_transpose(d_mu_x, mass)
    d_x += 2.0 * x * _filter_transpose(d_u_xx, mass)
    d_x += y * _filter_transpose(d_u_xy, mass)
    return d_x


def dssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(1 - SSIM) / 2 per pixel and channel."""
    return (1.0 - ssim_map(x, y)) / 2.0
