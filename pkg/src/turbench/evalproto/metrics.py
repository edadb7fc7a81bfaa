"""Full-reference image quality metrics: PSNR and SSIM."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from ..imgcore import Image


class SsimMode(enum.Enum):
    WINDOWED_MEAN = "windowed"
    GLOBAL = "global"


@dataclass(frozen=True)
class SsimOptions:
    """SSIM constants and window.

    ``window`` is the side of the Gaussian window (std ``sigma``). The
    stabilising constants are ``(k1 * dyn)^2`` and ``(k2 * dyn)^2``.
    """

    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    mode: SsimMode = SsimMode.WINDOWED_MEAN

    def __post_init__(self):
        if isinstance(self.mode, str):
            object.__setattr__(self, "mode", SsimMode(self.mode))
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if not (self.k1 > 0 and self.k2 > 0):
            raise ValueError("k1 and k2 must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def to_dict(self) -> dict:
        return {"window": self.window, "sigma": self.sigma, "k1": self.k1, "k2": self.k2, "mode": self.mode.value}


def _check_pair(gt: Image, rest: Image) -> None:
    if gt.shape != rest.shape:
        raise ValueError(f"image shapes differ: {gt.shape} vs {rest.shape}")
    if gt.dyn_range != rest.dyn_range:
        raise ValueError(f"dynamic ranges differ: {gt.dyn_range} vs {rest.dyn_range}")


def psnr(gt: Image, rest: Image) -> float:
    """10*log10(dyn^2 / MSE); ``math.inf`` for identical images."""
    _check_pair(gt, rest)
    diff = gt.data - rest.data
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(gt.dyn_range ** 2 / mse)


def gaussian_window_1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _ssim_formula(mu_x, mu_y, var_x, var_y, cov, c1, c2):
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def ssim_map(gt: Image, rest: Image, opts: SsimOptions | None = None) -> np.ndarray:
    """Local SSIM at every position where the window fits inside the image."""
    opts = opts or SsimOptions()
    _check_pair(gt, rest)
    if opts.window > min(gt.shape):
        raise ValueError(f"SSIM window {opts.window} larger than image {gt.shape}")
    w = gaussian_window_1d(opts.window, opts.sigma)
    r = opts.window // 2

    def filt(a):
        out = ndi.correlate1d(a, w, axis=0, mode="constant")
        out = ndi.correlate1d(out, w, axis=1, mode="constant")
        return out[r:a.shape[0] - r, r:a.shape[1] - r]

    x, y = gt.data, rest.data
    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    c1 = (opts.k1 * gt.dyn_range) ** 2
    c2 = (opts.k2 * gt.dyn_range) ** 2
    return _ssim_formula(mu_x, mu_y, var_x, var_y, cov, c1, c2)


def ssim(gt: Image, rest: Image, opts: SsimOptions | None = None) -> float:
    opts = opts or SsimOptions()
    if opts.mode is SsimMode.WINDOWED_MEAN:
        return float(ssim_map(gt, rest, opts).mean())
    _check_pair(gt, rest)
    if opts.window > min(gt.shape):
        raise ValueError(f"SSIM window {opts.window} larger than image {gt.shape}")
    x, y = gt.data, rest.data
    mu_x, mu_y = float(x.mean()), float(y.mean())
    dx, dy = x - mu_x, y - mu_y
    c1 = (opts.k1 * gt.dyn_range) ** 2
    c2 = (opts.k2 * gt.dyn_range) ** 2
    return float(_ssim_formula(mu_x, mu_y, float((dx * dx).mean()), float((dy * dy).mean()),
                               float((dx * dy).mean()), c1, c2))
