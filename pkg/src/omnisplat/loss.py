"""Training objective and image metrics.

The photometric term weights both images by a per-row cosine before the
L1 and SSIM comparisons, compensating the equirectangular map's
oversampling toward the poles. The anisotropy term penalizes Gaussians
whose axis ratio exceeds a threshold. All pieces return analytic
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom
from .errors import DataError

_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2
_WIN = 11
_WIN_SIGMA = 1.5


@dataclass
class SphericalWeights:
    """Per-row weights w(v) = cos((v - c_y + 0.5)/f_y), constant along rows."""

    w: np.ndarray  # (H,)

    def apply(self, image: np.ndarray) -> np.ndarray:
        return image * self.w[:, None, None]


@dataclass
class LossBreakdown:
    l1_term: float
    ssim_term: float
    wsp_total: float
    aniso_total: float
    grand_total: float


def spherical_weights(cam: geom.SphericalCamera) -> SphericalWeights:
    v = np.arange(cam.height, dtype=np.float64)
    w = np.cos((v - cam.cy + 0.5) / cam.fy)
    return SphericalWeights(w=w)


def uniform_weights(H: int) -> SphericalWeights:
    """All-ones override used by the weighting ablation."""
    return SphericalWeights(w=np.ones(H))


def _gauss_taps() -> np.ndarray:
    t = np.arange(_WIN, dtype=np.float64) - (_WIN - 1) / 2.0
    g = np.exp(-(t * t) / (2.0 * _WIN_SIGMA**2))
    return g / g.sum()


_FILTER_CACHE: dict = {}


def _filter_matrix(n: int, mode: str) -> np.ndarray:
    """Dense n x n matrix applying the window along one axis.

    mode "wrap" wraps indices (periodic azimuth), mode "clamp" clips
    them (poles). A dense matrix keeps the adjoint exact: it is just
    the transpose, which the gradient path uses directly.
    """
    key = (n, mode)
    hit = _FILTER_CACHE.get(key)
    if hit is not None:
        return hit
    g = _gauss_taps()
    half = (_WIN - 1) // 2
    M = np.zeros((n, n))
    rows = np.arange(n)
    for k in range(_WIN):
        src = rows + k - half
        if mode == "wrap":
            src = src % n
        else:
            src = np.clip(src, 0, n - 1)
        np.add.at(M, (rows, src), g[k])
    _FILTER_CACHE[key] = M
    return M


def _filt(x: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Separable window filter: clamp rows, wrap columns.

    transpose=True applies the exact adjoint (for gradients).
    """
    H, W = x.shape[:2]
    V = _filter_matrix(H, "clamp")
    U = _filter_matrix(W, "wrap")
    if transpose:
        V = V.T
        U = U.T
    y = np.tensordot(V, x, axes=(1, 0))
    # result[r, w, c] = sum_s U[w, s] y[r, s, c]; matmul broadcasts U over
    # rows and stays in BLAS, unlike an unoptimized einsum
    return np.matmul(U, y)


def ssim(a: np.ndarray, b: np.ndarray, with_grad_b: bool = False):
    """Windowed SSIM; returns (mean, per-pixel map, d mean/d a [, d/d b]).

    11x11 Gaussian window sigma=1.5, C1=1e-4, C2=9e-4, computed per
    channel then channel-averaged. Horizontal wrap, vertical clamp.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError("ssim: shape mismatch %s vs %s" % (a.shape, b.shape))
    H, W = a.shape[:2]
    if H < _WIN or W < _WIN:
        raise DataError("ssim: image %dx%d smaller than %d-pixel window" % (H, W, _WIN))

    mu1 = _filt(a)
    mu2 = _filt(b)
    a2 = _filt(a * a)
    b2 = _filt(b * b)
    ab = _filt(a * b)
    v1 = a2 - mu1 * mu1
    v2 = b2 - mu2 * mu2
    v12 = ab - mu1 * mu2

    P1 = 2.0 * mu1 * mu2 + _SSIM_C1
    P2 = 2.0 * v12 + _SSIM_C2
    Q1 = mu1 * mu1 + mu2 * mu2 + _SSIM_C1
    Q2 = v1 + v2 + _SSIM_C2
    S = (P1 * P2) / (Q1 * Q2)
    smap = S.mean(axis=2)
    mean = float(smap.mean())

    # gradient of mean(S) w.r.t. the filtered moments, then the adjoint
    # filter carries it back to pixels
    npix = S.size
    up = np.full(S.shape, 1.0 / npix)
    inv = 1.0 / (Q1 * Q2)
    dS_dmu1 = up * (
        2.0 * mu2 * (P2 - P1) * inv - 2.0 * mu1 * S * (1.0 / Q1 - 1.0 / Q2)
    )
    dS_da2 = up * (-S / Q2)
    dS_dab = up * (2.0 * P1 * inv)
    grad_a = (
        _filt(dS_dmu1, transpose=True)
        + 2.0 * a * _filt(dS_da2, transpose=True)
        + b * _filt(dS_dab, transpose=True)
    )
    if not with_grad_b:
        return mean, smap, grad_a
    dS_dmu2 = up * (
        2.0 * mu1 * (P2 - P1) * inv - 2.0 * mu2 * S * (1.0 / Q1 - 1.0 / Q2)
    )
    dS_db2 = dS_da2
    grad_b = (
        _filt(dS_dmu2, transpose=True)
        + 2.0 * b * _filt(dS_db2, transpose=True)
        + a * _filt(dS_dab, transpose=True)
    )
    return mean, smap, grad_a, grad_b


def wsp_loss_full(
    I_r: np.ndarray,
    I_o: np.ndarray,
    weights: SphericalWeights,
    lam: float,
):
    """Weighted photometric loss with gradients for both images.

    Returns (loss, dL/dI_r, dL/dI_o, (l1_term, ssim_term)). Both images
    are row-weighted before the L1 and before SSIM.
    """
    I_r = np.asarray(I_r, dtype=np.float64)
    I_o = np.asarray(I_o, dtype=np.float64)
    if I_r.shape != I_o.shape:
        raise DataError(
            "loss: image shapes %s vs %s differ" % (I_r.shape, I_o.shape)
        )
    wr = weights.apply(I_r)
    wo = weights.apply(I_o)
    diff = wr - wo
    l1 = float(np.mean(np.abs(diff)))
    # subgradient at zero residual is zero (np.sign(0) = 0)
    dl1_dwr = np.sign(diff) / diff.size

    s_mean, _, ds_dwr, ds_dwo = ssim(wr, wo, with_grad_b=True)
    ssim_term = 1.0 - s_mean

    loss = (1.0 - lam) * l1 + lam * ssim_term
    dwr = (1.0 - lam) * dl1_dwr - lam * ds_dwr
    dwo = -(1.0 - lam) * dl1_dwr - lam * ds_dwo
    wcol = weights.w[:, None, None]
    return loss, dwr * wcol, dwo * wcol, (l1, ssim_term)


def wsp_loss(I_r, I_o, weights: SphericalWeights, lam: float):
    """Weighted photometric loss; returns (scalar, dL/dI_r)."""
    loss, d_r, _, _ = wsp_loss_full(I_r, I_o, weights, lam)
    return loss, d_r


def aniso_loss(log_scales: np.ndarray, gamma: float):
    """Mean axis-ratio penalty: mean(max(ratio, gamma) - gamma).

    ratio = exp(max log_s - min log_s) per Gaussian. Returns the scalar
    and its gradient w.r.t. log_scales; subgradient 0 below threshold.
    """
    log_scales = np.asarray(log_scales, dtype=np.float64)
    n = log_scales.shape[0]
    grad = np.zeros_like(log_scales)
    if n == 0:
        return 0.0, grad
    imax = np.argmax(log_scales, axis=1)
    imin = np.argmin(log_scales, axis=1)
    ratio = np.exp(
        log_scales[np.arange(n), imax] - log_scales[np.arange(n), imin]
    )
    over = ratio > gamma
    loss = float(np.mean(np.maximum(ratio, gamma) - gamma))
    coef = np.where(over, ratio, 0.0) / n
    np.add.at(grad, (np.arange(n), imax), coef)
    np.add.at(grad, (np.arange(n), imin), -coef)
    return loss, grad


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) in dB; identical images give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError("psnr: shape mismatch %s vs %s" % (a.shape, b.shape))
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def total_loss(
    I_r,
    I_o,
    weights: SphericalWeights,
    log_scales,
    lam: float,
    gamma: float,
):
    """Full objective; returns (LossBreakdown, dL/dI_r, dL/dI_o, d/dlog_scales)."""
    wsp, d_r, d_o, (l1_term, ssim_term) = wsp_loss_full(I_r, I_o, weights, lam)
    aniso, d_ls = aniso_loss(log_scales, gamma)
    bd = LossBreakdown(
        l1_term=l1_term,
        ssim_term=ssim_term,
        wsp_total=wsp,
        aniso_total=aniso,
        grand_total=wsp + aniso,
    )
    return bd, d_r, d_o, d_ls
