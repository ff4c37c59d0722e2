"""Residual construction for the sum-of-squares rendering energy.

The energy splits the photometric loss into two square-rooted residuals per
pixel and channel, ``r_abs = sqrt(lambda1 |c - C|)`` and
``r_ssim = sqrt(lambda2 (1 - SSIM))``, so that the squared residual norm
equals the weighted L1 + SSIM loss exactly. An optional plain L2 mode
(``r = c - C``) reproduces the ablation objective.

The residual vector F is ordered: all L1 residuals first (row-major pixels,
RGB interleaved per pixel: slot = (y * W + x) * 3 + ch), then all SSIM
residuals in the same pixel order.

SSIM derivatives follow the center-pixel convention: each per-pixel score is
differentiated only with respect to its own center intensity, ignoring the
pixel's contribution to neighboring scores. This keeps rays independent. The
convention is exact under reflective padding if the center weight accounts for
reflected self-appearances near the border, which :func:`center_weight_map`
does.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate1d

SSIM_C1 = 0.01 ** 2  # (0.01 * dynamic range)^2 with range 1.0
SSIM_C2 = 0.03 ** 2
DEFAULT_WINDOW = 11
DEFAULT_SIGMA = 1.5
EPS_DEN = 1e-8  # denominator guard for the sqrt-residual derivative at zero error
PSNR_CAP_DB = 100.0


class ImageSizeError(ValueError):
    """Two images that must match in shape do not."""


def _check_pair(img: np.ndarray, ref: np.ndarray):
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ImageSizeError(f"image shapes differ: {img.shape} vs {ref.shape}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageSizeError(f"expected (H, W, 3) images, got {img.shape}")
    return img, ref


@lru_cache(maxsize=8)
def _gauss_kernel(window: int, sigma: float) -> np.ndarray:
    if window % 2 != 1:
        raise ValueError("SSIM window side must be odd")
    offsets = np.arange(window) - window // 2
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def _smooth(img: np.ndarray, window: int, sigma: float) -> np.ndarray:
    """Separable Gaussian filter over the spatial axes with reflective padding."""
    kernel = _gauss_kernel(window, sigma)
    out = correlate1d(img, kernel, axis=0, mode="reflect")
    return correlate1d(out, kernel, axis=1, mode="reflect")


def _reflect_indices(idx: np.ndarray, n: int) -> np.ndarray:
    """Map out-of-range indices by symmetric reflection (matches mode='reflect')."""
    idx = np.where(idx < 0, -idx - 1, idx)
    return np.where(idx >= n, 2 * n - idx - 1, idx)


@lru_cache(maxsize=8)
def _center_weight_1d(n: int, window: int, sigma: float) -> np.ndarray:
    """Total kernel weight each position contributes to its own filtered value.

    Interior positions get the center tap; positions near the border also pick
    up their reflected appearances.
    """
    kernel = _gauss_kernel(window, sigma)
    half = window // 2
    pos = np.arange(n)
    acc = np.zeros(n)
    for tap, weight in zip(range(-half, half + 1), kernel):
        acc += weight * (_reflect_indices(pos + tap, n) == pos)
    return acc


def center_weight_map(height: int, width: int,
                      window: int = DEFAULT_WINDOW, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Effective self-weight of each pixel in its own SSIM window, shape (H, W)."""
    return np.outer(_center_weight_1d(height, window, sigma),
                    _center_weight_1d(width, window, sigma))


@dataclass
class _SSIMStats:
    """Gaussian-window local statistics shared by the score, gradient, and
    center-substitution evaluations."""

    mu_x: np.ndarray
    mu_y: np.ndarray
    ex2: np.ndarray
    exy: np.ndarray
    sigma_y2: np.ndarray
    self_weight: np.ndarray  # (H, W, 1)

    @property
    def sigma_x2(self) -> np.ndarray:
        return self.ex2 - self.mu_x ** 2

    @property
    def sigma_xy(self) -> np.ndarray:
        return self.exy - self.mu_x * self.mu_y


def _ssim_stats(img: np.ndarray, ref: np.ndarray, window: int, sigma: float) -> _SSIMStats:
    mu_x = _smooth(img, window, sigma)
    mu_y = _smooth(ref, window, sigma)
    ex2 = _smooth(img * img, window, sigma)
    ey2 = _smooth(ref * ref, window, sigma)
    exy = _smooth(img * ref, window, sigma)
    w = center_weight_map(img.shape[0], img.shape[1], window, sigma)[:, :, None]
    return _SSIMStats(mu_x=mu_x, mu_y=mu_y, ex2=ex2, exy=exy,
                      sigma_y2=ey2 - mu_y ** 2, self_weight=w)


def _score_from_stats(mu_x, mu_y, sigma_x2, sigma_y2, sigma_xy) -> np.ndarray:
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * sigma_xy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sigma_x2 + sigma_y2 + SSIM_C2)
    return num / den


def ssim_map(img: np.ndarray, ref: np.ndarray,
             window: int = DEFAULT_WINDOW, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Per-pixel-per-channel SSIM scores with a Gaussian window.

    Symmetric in (img, ref); channels are scored independently.
    """
    img, ref = _check_pair(img, ref)
    s = _ssim_stats(img, ref, window, sigma)
    return _score_from_stats(s.mu_x, s.mu_y, s.sigma_x2, s.sigma_y2, s.sigma_xy)


def ssim_center_grad(img: np.ndarray, ref: np.ndarray,
                     window: int = DEFAULT_WINDOW, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Derivative of each pixel's own SSIM score w.r.t. its own intensity.

    Contributions of the pixel to neighboring windows are ignored by
    convention (see module docstring).
    """
    img, ref = _check_pair(img, ref)
    s = _ssim_stats(img, ref, window, sigma)
    a1 = 2.0 * s.mu_x * s.mu_y + SSIM_C1
    a2 = 2.0 * s.sigma_xy + SSIM_C2
    b1 = s.mu_x ** 2 + s.mu_y ** 2 + SSIM_C1
    b2 = s.sigma_x2 + s.sigma_y2 + SSIM_C2
    score = a1 * a2 / (b1 * b2)
    w = s.self_weight
    return (2.0 * w / (b1 * b2)) * (s.mu_y * a2 + a1 * (ref - s.mu_y)) \
        - score * 2.0 * w * (s.mu_x / b1 + (img - s.mu_x) / b2)


def ssim_map_center_substituted(base_img: np.ndarray, ref: np.ndarray, new_img: np.ndarray,
                                window: int = DEFAULT_WINDOW,
                                sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Per-pixel SSIM where each score sees only its own pixel's new value.

    For every pixel p the score is evaluated as if the image were ``base_img``
    with only pixel p replaced by ``new_img[p]``. At ``new_img == base_img``
    this equals :func:`ssim_map`, and its derivative in ``new_img`` is exactly
    the center-pixel convention -- which makes it the forward function that
    finite-difference oracles of the residual Jacobian must use.
    """
    base_img, ref = _check_pair(base_img, ref)
    new_img = np.asarray(new_img, dtype=np.float64)
    if new_img.shape != base_img.shape:
        raise ImageSizeError(f"image shapes differ: {new_img.shape} vs {base_img.shape}")
    s = _ssim_stats(base_img, ref, window, sigma)
    delta = new_img - base_img
    w = s.self_weight
    # The substituted pixel enters every statistic linearly through its total
    # self-weight, so the update below is exact for finite deltas.
    mu_x = s.mu_x + w * delta
    ex2 = s.ex2 + w * (2.0 * base_img * delta + delta ** 2)
    exy = s.exy + w * delta * ref
    return _score_from_stats(mu_x, s.mu_y, ex2 - mu_x ** 2, s.sigma_y2,
                             exy - mu_x * s.mu_y)


# ---------------------------------------------------------------------------
# Residual bundles
# ---------------------------------------------------------------------------

@dataclass
class ResidualBundle:
    """Residual maps plus the precomputed color-space derivative weights.

    Attributes:
        mode: 'l1ssim' for the sqrt-L1 / sqrt-SSIM pair, 'l2' for plain
            differences.
        r_abs: First residual map (H, W, 3). In 'l2' mode this holds the
            signed difference and is the only residual block.
        r_ssim: Second residual map, or None in 'l2' mode.
        grad_r_sq: (dr/dc)^2 summed over both residual terms, (H, W, 3). The
            elementwise weight applied between the forward and transposed
            Jacobian products.
        color_grad: sum_terms r * dr/dc, (H, W, 3). Right-hand sides
            -J^T F reduce to a transposed color-Jacobian product with this.
        drabs_dc, drssim_dc: per-term residual-to-color derivatives.
    """

    mode: str
    lambda1: float
    lambda2: float
    r_abs: np.ndarray
    r_ssim: np.ndarray | None
    grad_r_sq: np.ndarray
    color_grad: np.ndarray
    drabs_dc: np.ndarray
    drssim_dc: np.ndarray | None

    @property
    def height(self) -> int:
        return self.r_abs.shape[0]

    @property
    def width(self) -> int:
        return self.r_abs.shape[1]

    @property
    def n_slots(self) -> int:
        """Number of pixel-channel color slots (rows of the color Jacobian)."""
        return self.r_abs.size

    def residual_vector(self) -> np.ndarray:
        """Flat residual vector F in the documented ordering."""
        if self.mode == "l2":
            return self.r_abs.reshape(-1).copy()
        return np.concatenate([self.r_abs.reshape(-1), self.r_ssim.reshape(-1)])

    @property
    def energy(self) -> float:
        """Squared residual norm ||F||^2."""
        e = float(np.sum(self.r_abs ** 2))
        if self.r_ssim is not None:
            e += float(np.sum(self.r_ssim ** 2))
        return e


def compute_residuals(rendered: np.ndarray, gt: np.ndarray,
                      lambda1: float = 0.8, lambda2: float = 0.2,
                      mode: str = "l1ssim", window: int = DEFAULT_WINDOW,
                      sigma: float = DEFAULT_SIGMA, eps_den: float = EPS_DEN) -> ResidualBundle:
    """Build the residual bundle for one rendered/ground-truth image pair."""
    rendered, gt = _check_pair(rendered, gt)
    if mode == "l2":
        diff = rendered - gt
        ones = np.ones_like(diff)
        return ResidualBundle(mode="l2", lambda1=lambda1, lambda2=lambda2,
                              r_abs=diff, r_ssim=None, grad_r_sq=ones,
                              color_grad=diff.copy(), drabs_dc=ones, drssim_dc=None)
    if mode != "l1ssim":
        raise ValueError(f"unknown loss mode {mode!r}")
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be >= 0")

    err = rendered - gt
    abs_err = np.abs(err)
    r_abs = np.sqrt(lambda1 * abs_err)
    if lambda1 > 0:
        guarded = np.maximum(abs_err, eps_den)
        drabs_dc = lambda1 * np.sign(err) / (2.0 * np.sqrt(lambda1 * guarded))
        grad_l1 = lambda1 / (4.0 * guarded)
    else:
        drabs_dc = np.zeros_like(err)
        grad_l1 = np.zeros_like(err)

    if lambda2 > 0:
        score = ssim_map(rendered, gt, window, sigma)
        one_minus = np.maximum(1.0 - score, 0.0)
        r_ssim = np.sqrt(lambda2 * one_minus)
        ds_dc = ssim_center_grad(rendered, gt, window, sigma)
        guarded = np.maximum(one_minus, eps_den)
        drssim_dc = -lambda2 * ds_dc / (2.0 * np.sqrt(lambda2 * guarded))
        grad_ssim = lambda2 * ds_dc ** 2 / (4.0 * guarded)
    else:
        r_ssim = np.zeros_like(err)
        drssim_dc = np.zeros_like(err)
        grad_ssim = np.zeros_like(err)

    return ResidualBundle(
        mode="l1ssim", lambda1=lambda1, lambda2=lambda2,
        r_abs=r_abs, r_ssim=r_ssim,
        grad_r_sq=grad_l1 + grad_ssim,
        color_grad=drabs_dc * r_abs + drssim_dc * r_ssim,
        drabs_dc=drabs_dc, drssim_dc=drssim_dc,
    )


def compute_grad_r_sq(rendered: np.ndarray, gt: np.ndarray,
                      lambda1: float = 0.8, lambda2: float = 0.2,
                      mode: str = "l1ssim", window: int = DEFAULT_WINDOW,
                      sigma: float = DEFAULT_SIGMA, eps_den: float = EPS_DEN) -> np.ndarray:
    """Per-pixel-channel (dr/dc)^2 weights summed over both loss terms."""
    bundle = compute_residuals(rendered, gt, lambda1, lambda2, mode, window, sigma, eps_den)
    return bundle.grad_r_sq


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range, capped at 100."""
    img, ref = _check_pair(img, ref)
    mse = float(np.mean((img - ref) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * np.log10(1.0 / mse)


def ssim_score(img: np.ndarray, ref: np.ndarray,
               window: int = DEFAULT_WINDOW, sigma: float = DEFAULT_SIGMA) -> float:
    """Scalar SSIM metric: mean of the per-pixel-per-channel score map."""
    return float(np.mean(ssim_map(img, ref, window, sigma)))
