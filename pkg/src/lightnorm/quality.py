"""Training objective and evaluation metrics.

The loss is mean absolute error plus a weighted multi-scale structural
dissimilarity term:  L = |gt - restored| + lambda * (1 - MS-SSIM), with
lambda = 0.25 by default. MS-SSIM follows the classic 5-scale construction:
Gaussian 11x11 / sigma 1.5 windows in *valid* mode (no padding), 2x2 average
pool between scales, per-scale contrast-structure terms raised to the
normalized scale weights. Evaluation adds PSNR (capped at 100 dB) and RMSE in
CIELAB under D65, optionally split by a binary shadow mask.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError

# Classic 5-scale weights, normalized to sum exactly to 1.
_RAW_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_WEIGHTS = tuple(w / sum(_RAW_WEIGHTS) for w in _RAW_WEIGHTS)

PSNR_CAP = 100.0
_TERM_FLOOR = 1e-12  # keeps fractional powers defined if a cs term dips <= 0


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.25
    ms_ssim_scales: int = 5
    ms_ssim_weights: tuple = MS_SSIM_WEIGHTS
    gaussian_sigma: float = 1.5
    window_size: int = 11

    def __post_init__(self):
        if self.lam < 0:
            raise InputError(f"lambda must be >= 0, got {self.lam}")
        if len(self.ms_ssim_weights) != self.ms_ssim_scales:
            raise InputError("one weight per scale is required")
        if abs(sum(self.ms_ssim_weights) - 1.0) > 1e-6:
            raise InputError("ms_ssim_weights must sum to 1")


def gaussian_profile(size, sigma):
    half = (size - 1) / 2.0
    coords = torch.arange(size, dtype=torch.float64) - half
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


def gaussian_window(size, sigma, dtype=torch.float32):
    g = gaussian_profile(size, sigma)
    return (g[:, None] * g[None, :]).to(dtype)


def _check_pair(gt, restored):
    if gt.shape != restored.shape:
        raise InputError(f"shape mismatch: {tuple(gt.shape)} vs {tuple(restored.shape)}")


def _blur_valid(x, g1d):
    # separable valid-mode filtering with the outer-product window
    ch = x.shape[1]
    x = F.conv2d(x, g1d.view(1, 1, 1, -1).expand(ch, 1, 1, -1), groups=ch)
    return F.conv2d(x, g1d.view(1, 1, -1, 1).expand(ch, 1, -1, 1), groups=ch)


def _ssim_terms(x, y, g1d, c1=0.01**2, c2=0.03**2):
    """Mean luminance*cs map and mean cs map, valid-mode windows."""
    mu_x = _blur_valid(x, g1d)
    mu_y = _blur_valid(y, g1d)
    xx = _blur_valid(x * x, g1d) - mu_x * mu_x
    yy = _blur_valid(y * y, g1d) - mu_y * mu_y
    xy = _blur_valid(x * y, g1d) - mu_x * mu_y
    cs_map = (2 * xy + c2) / (xx + yy + c2)
    lum_map = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return (lum_map * cs_map).mean(), cs_map.mean()


def _usable_scales(h, w, cfg):
    scales = cfg.ms_ssim_scales
    while scales > 1 and cfg.window_size * 2 ** (scales - 1) > min(h, w):
        scales -= 1
    return scales


def ms_ssim(gt, restored, cfg=LossConfig()):
    """Multi-scale SSIM on [N,3,H,W] tensors in [0,1]; differentiable."""
    _check_pair(gt, restored)
    h, w = gt.shape[-2:]
    scales = _usable_scales(h, w, cfg)
    if scales < cfg.ms_ssim_scales:
        warnings.warn(
            f"image {h}x{w} too small for {cfg.ms_ssim_scales} scales; using {scales}"
        )
    weights = torch.tensor(cfg.ms_ssim_weights[:scales], dtype=gt.dtype)
    weights = weights / weights.sum()

    g1d = gaussian_profile(cfg.window_size, cfg.gaussian_sigma).to(gt.dtype)
    x, y = gt, restored
    terms = []
    for s in range(scales):
        ssim_mean, cs_mean = _ssim_terms(x, y, g1d)
        terms.append(ssim_mean if s == scales - 1 else cs_mean)
        if s < scales - 1:
            x = F.avg_pool2d(x, kernel_size=2)
            y = F.avg_pool2d(y, kernel_size=2)
    total = torch.ones((), dtype=gt.dtype)
    for t, wgt in zip(terms, weights):
        total = total * t.clamp_min(_TERM_FLOOR) ** wgt
    return total


def ssim(gt, restored, cfg=LossConfig()):
    """Single-scale SSIM (MS-SSIM restricted to one scale)."""
    one = LossConfig(lam=cfg.lam, ms_ssim_scales=1, ms_ssim_weights=(1.0,),
                     gaussian_sigma=cfg.gaussian_sigma, window_size=cfg.window_size)
    return ms_ssim(gt, restored, one)


def total_loss(gt, restored, cfg=LossConfig()):
    """L1 + lambda * (1 - MS-SSIM); differentiable w.r.t. `restored`."""
    _check_pair(gt, restored)
    return (gt - restored).abs().mean() + cfg.lam * (1.0 - ms_ssim(gt, restored, cfg))


def loss_terms(gt, restored, cfg=LossConfig()):
    """Diagnostic split of the objective (floats)."""
    with torch.no_grad():
        mae = (gt - restored).abs().mean()
        ms = ms_ssim(gt, restored, cfg)
    return {"mae": float(mae), "ms_ssim": float(ms),
            "total": float(mae + cfg.lam * (1.0 - ms))}


##########################################################################
## Image-space metrics (numpy [H,W,3] images in [0,1])


def psnr(gt, restored, cap=PSNR_CAP):
    gt = np.asarray(gt, dtype=np.float64)
    restored = np.asarray(restored, dtype=np.float64)
    _check_pair(gt, restored)
    mse = float(np.mean((gt - restored) ** 2))
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def ssim_np(gt, restored, cfg=LossConfig()):
    t = lambda a: torch.from_numpy(
        np.ascontiguousarray(np.asarray(a, dtype=np.float64).transpose(2, 0, 1))
    )[None]
    return float(ssim(t(gt), t(restored), cfg))


def srgb_to_lab(image):
    """sRGB [H,W,3] in [0,1] -> CIELAB (D65, IEC 61966-2-1 transfer)."""
    rgb = np.asarray(image, dtype=np.float64)
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    m = np.array([
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ])
    xyz = linear @ m.T
    white = np.array([0.95047, 1.0, 1.08883])
    t = xyz / white
    delta = 6.0 / 29.0
    f = np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_rmse(gt, restored, shadow_mask=None):
    """RMSE in CIELAB, overall and split by a binary shadow mask.

    Returns {"total", "shadow", "shadow_free"}; region keys are NaN (with a
    warning) when the mask leaves a region empty, and absent mask yields only
    "total".
    """
    gt = np.asarray(gt, dtype=np.float64)
    restored = np.asarray(restored, dtype=np.float64)
    _check_pair(gt, restored)
    sq = np.sum((srgb_to_lab(gt) - srgb_to_lab(restored)) ** 2, axis=-1)
    out = {"total": float(np.sqrt(sq.mean()))}
    if shadow_mask is None:
        return out
    mask = np.asarray(shadow_mask)
    if mask.shape != sq.shape:
        raise InputError(f"mask shape {mask.shape} does not match image {sq.shape}")
    mask = mask.astype(bool)
    for key, sel in (("shadow", mask), ("shadow_free", ~mask)):
        if sel.any():
            out[key] = float(np.sqrt(sq[sel].mean()))
        else:
            warnings.warn(f"empty {key} region; reporting NaN")
            out[key] = float("nan")
    return out
