"""Image similarity measures with analytic gradients."""

from functools import lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter1d

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 11-tap window at sigma 1.5
_K1, _K2 = 0.01, 0.03
PSNR_CAP = 99.0


@lru_cache(maxsize=32)
def _filter_matrix(n: int, sigma: float = SSIM_SIGMA) -> np.ndarray:
    # column j is the filtered unit impulse e_j, so filter(x) == M @ x
    M = gaussian_filter1d(np.eye(n), sigma, axis=0, mode="reflect", truncate=SSIM_TRUNCATE)
    M.setflags(write=False)
    return M


def _blur(x, Fh, Fw):
    # x: (H, W, C)
    return np.einsum("ij,jkc,lk->ilc", Fh, x, Fw, optimize=True)


def _blur_adjoint(g, Fh, Fw):
    return np.einsum("ji,jkc,kl->ilc", Fh, g, Fw, optimize=True)


def _as_hwc(a):
    a = np.asarray(a, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a


def ssim(a, b, data_range: float = 1.0, crop: bool = True, return_grad: bool = False):
    """Mean structural similarity of two images (H, W) or (H, W, C).

    Gaussian-weighted window (sigma 1.5, 11 taps, reflect padding), population
    covariance, channel-averaged. With ``crop`` the 5-pixel border is
    excluded from the mean. ``return_grad`` also returns d(ssim)/d(a).
    """
    x, y = _as_hwc(a), _as_hwc(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    H, W, _ = x.shape
    pad = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    if crop and (H <= 2 * pad or W <= 2 * pad):
        raise ValueError("image too small for a cropped 11x11 window")
    Fh, Fw = _filter_matrix(H), _filter_matrix(W)
    ux, uy = _blur(x, Fh, Fw), _blur(y, Fh, Fw)
    uxx, uyy, uxy = _blur(x * x, Fh, Fw), _blur(y * y, Fh, Fw), _blur(x * y, Fh, Fw)
    C1, C2 = (_K1 * data_range) ** 2, (_K2 * data_range) ** 2
    A1 = 2 * ux * uy + C1
    A2 = 2 * (uxy - ux * uy) + C2
    B1 = ux * ux + uy * uy + C1
    B2 = (uxx - ux * ux) + (uyy - uy * uy) + C2
    D = B1 * B2
    S = A1 * A2 / D
    mask = np.zeros_like(S)
    if crop:
        mask[pad:H - pad, pad:W - pad] = 1.0
    else:
        mask[:] = 1.0
    value = float((S * mask).sum() / mask.sum())
    if not return_grad:
        return value
    gS = mask / mask.sum()
    dA1, dA2 = A2 / D, A1 / D
    dB1, dB2 = -S / B1, -S / B2
    g_ux = gS * (dA1 * 2 * uy - dA2 * 2 * uy + dB1 * 2 * ux - dB2 * 2 * ux)
    g_uxx = gS * dB2
    g_uxy = gS * dA2 * 2
    grad = (_blur_adjoint(g_ux, Fh, Fw) + 2 * x * _blur_adjoint(g_uxx, Fh, Fw)
            + y * _blur_adjoint(g_uxy, Fh, Fw))
    return value, grad.reshape(np.shape(a))


def mse(a, b) -> float:
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical images."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    err = mse(a, b)
    if err == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(data_range**2 / err)))
