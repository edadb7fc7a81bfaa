"""Deconvolution baselines: Wiener, Lucy-Richardson, TV, and a semi-blind r0 search.

All operators use circular boundaries, matching ``convolve_fft``.

The semi-blind search ranks candidate kernels by how well they explain the
observed spectrum, using a Gaussian model of the image with power-law
spectrum plus white noise. The variance-of-Laplacian ``sharpness_score`` is
kept as a diagnostic; it rewards over-sharpening and reliably favours the
blurriest candidate kernel, so it is not used for selection.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi
from scipy.optimize import minimize

from . import _tv
from .imgcore import Image, kernel_otf
from .turbsim import (DEFAULT_KERNEL_SIZE, Kernel, TurbulenceParams, kernel_energy_fraction, kernel_size_for,
                      long_exposure_kernel)

LR_EPS = 1e-12
TV_INNER_ITERS = 20
RING_PENALTY = 0.1
# bounds on the fitted spectral exponent of the image model
ALPHA_BOUNDS = (0.0, 8.0)
MIN_KERNEL_ENERGY = 0.97


class DeblurMethod(enum.Enum):
    WIENER = "wiener"
    LUCY_RICHARDSON = "lr"
    TV = "tv"


@dataclass(frozen=True)
class SemiBlind:
    r0_grid: tuple

    def __post_init__(self):
        grid = tuple(float(r) for r in self.r0_grid)
        if not grid:
            raise ValueError("r0_grid must not be empty")
        if any(not r > 0 for r in grid):
            raise ValueError("r0_grid values must be positive")
        object.__setattr__(self, "r0_grid", grid)


DEFAULT_R0_GRID = (0.003, 0.005, 0.008, 0.012, 0.02, 0.035, 0.06, 0.1, 0.2, 0.5)


@dataclass(frozen=True)
class DeblurSpec:
    """Deconvolver choice and parameters.

    ``kernel`` is either a fixed ``Kernel``, a ``SemiBlind`` r0 search, or
    ``None`` to use the long-exposure kernel implied by the sequence's
    turbulence parameters.
    """

    method: DeblurMethod = DeblurMethod.WIENER
    nsr: float = 1e-3
    lr_iterations: int = 30
    tv_lambda: float = 0.01
    tv_iterations: int = 200
    kernel: Kernel | SemiBlind | None = field(default=None)
    kernel_size: int = DEFAULT_KERNEL_SIZE

    def __post_init__(self):
        if isinstance(self.method, str):
            object.__setattr__(self, "method", DeblurMethod(self.method))
        if self.nsr < 0:
            raise ValueError("nsr must be >= 0")
        if self.lr_iterations < 1 or self.tv_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if not self.tv_lambda > 0:
            raise ValueError("tv_lambda must be > 0")

    @property
    def label(self) -> str:
        name = {DeblurMethod.WIENER: "wiener", DeblurMethod.LUCY_RICHARDSON: "lr", DeblurMethod.TV: "tv"}[self.method]
        return f"semiblind-{name}" if isinstance(self.kernel, SemiBlind) else name


def _otf(k: Kernel, shape) -> np.ndarray:
    return kernel_otf(k.taps, shape)


def wiener_deconvolve(img: Image, k: Kernel, nsr: float = 1e-3) -> Image:
    """conj(K) F / (|K|^2 + nsr), with the zero-frequency term left unregularised.

    Leaving DC alone keeps mean brightness, so a constant offset passes
    through unchanged for a unit-gain kernel.
    """
    if nsr < 0:
        raise ValueError("nsr must be >= 0")
    otf = _otf(k, img.shape)
    power = (otf * otf.conj()).real
    reg = np.full(power.shape, float(nsr))
    reg[0, 0] = 0.0
    denom = power + reg
    safe = np.where(denom > 0, denom, 1.0)
    gain = np.where(denom > 0, otf.conj() / safe, 0.0)
    out = np.fft.irfft2(np.fft.rfft2(img.data) * gain, s=img.shape)
    return img.like(out)


def lucy_richardson(img: Image, k: Kernel, iters: int = 30) -> Image:
    """Multiplicative Richardson-Lucy updates starting from the observation.

    Negative inputs are shifted up before iterating and shifted back after.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    otf = _otf(k, img.shape)
    shift = min(0.0, float(img.data.min()))
    f = img.data - shift
    u = f.copy()
    spec_conj = otf.conj()
    for _ in range(iters):
        est = np.fft.irfft2(np.fft.rfft2(u) * otf, s=img.shape)
        ratio = f / np.maximum(est, LR_EPS)
        u = u * np.fft.irfft2(np.fft.rfft2(ratio) * spec_conj, s=img.shape)
    return img.like(u + shift)


def tv_objective(u: np.ndarray, f: np.ndarray, otf: np.ndarray, lam: float) -> float:
    r = np.fft.irfft2(np.fft.rfft2(u) * otf, s=u.shape) - f
    return 0.5 * float((r * r).sum()) + lam * _tv.tv(u)


@dataclass
class TVResult:
    image: Image
    objectives: list[float]


def tv_deconvolve(img: Image, k: Kernel, lam: float = 0.01, iters: int = 200) -> Image:
    return tv_deconvolve_run(img, k, lam, iters).image


def tv_deconvolve_run(img: Image, k: Kernel, lam: float = 0.01, iters: int = 200) -> TVResult:
    """Minimise 0.5*||k*u - f||^2 + lam*TV(u) with monotone FISTA.

    The TV proximal step is computed by warm-started dual projection. The
    monotone variant keeps the better of the new proximal point and the
    previous iterate, so the recorded objective never increases.
    """
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    f = img.data
    otf = _otf(k, img.shape)
    lip = float(np.max((otf * otf.conj()).real))
    step = 1.0 / lip
    x = f.copy()
    y = x.copy()
    t = 1.0
    dual = None
    obj = tv_objective(x, f, otf, lam)
    history = [obj]
    for _ in range(iters):
        resid = np.fft.irfft2(np.fft.rfft2(y) * otf, s=f.shape) - f
        g = np.fft.irfft2(np.fft.rfft2(resid) * otf.conj(), s=f.shape)
        z, dual = _tv.rof_denoise(y - step * g, step * lam, TV_INNER_ITERS, dual=dual)
        z_obj = tv_objective(z, f, otf, lam)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        x_prev = x
        if z_obj <= obj:
            x, obj = z, z_obj
        y = x + (t / t_next) * (z - x) + ((t - 1.0) / t_next) * (x - x_prev)
        t = t_next
        history.append(obj)
    return TVResult(img.like(x), history)


def deconvolve(img: Image, k: Kernel, spec: DeblurSpec) -> Image:
    if spec.method is DeblurMethod.WIENER:
        return wiener_deconvolve(img, k, spec.nsr)
    if spec.method is DeblurMethod.LUCY_RICHARDSON:
        return lucy_richardson(img, k, spec.lr_iterations)
    return tv_deconvolve(img, k, spec.tv_lambda, spec.tv_iterations)


def sharpness_score(img: Image) -> float:
    """Variance of the Laplacian over intensity variance, minus a range-violation penalty."""
    data = img.data
    var = float(data.var())
    if var <= 0:
        return 0.0
    lap = ndi.laplace(data, mode="wrap")
    out_of_range = float(np.mean((data < 0) | (data > img.dyn_range)))
    return float(lap.var()) / var - RING_PENALTY * out_of_range


def periodic_component(u: np.ndarray) -> np.ndarray:
    """Periodic part of the periodic-plus-smooth decomposition of ``u``.

    Removes the cross-shaped spectral leakage that the jump between
    opposite borders otherwise adds to the periodogram.
    """
    h, w = u.shape
    v = np.zeros_like(u)
    v[0, :] += u[-1, :] - u[0, :]
    v[-1, :] += u[0, :] - u[-1, :]
    v[:, 0] += u[:, -1] - u[:, 0]
    v[:, -1] += u[:, 0] - u[:, -1]
    q = np.arange(h)[:, None]
    r = np.arange(w)[None, :]
    den = 2.0 * np.cos(2.0 * np.pi * q / h) + 2.0 * np.cos(2.0 * np.pi * r / w) - 4.0
    den[0, 0] = 1.0
    smooth = np.fft.fft2(v) / den
    smooth[0, 0] = 0.0
    return u - np.fft.ifft2(smooth).real


class _SpectrumModel:
    """Observed periodogram and frequency grid shared by all candidate kernels."""

    def __init__(self, data: np.ndarray):
        data = periodic_component(data)
        h, w = data.shape
        fy = np.fft.fftfreq(h)[:, None]
        fx = np.fft.rfftfreq(w)[None, :]
        r2 = fy * fy + fx * fx
        # rfft halves: interior columns stand for two conjugate frequencies
        mult = np.ones(r2.shape)
        mult[:, 1:(w - 1) // 2 + 1] = 2.0
        self.mask = r2 > 0
        self.log_r2 = np.log(r2[self.mask])
        self.mult = mult[self.mask]
        self.energy = np.abs(np.fft.rfft2(data)[self.mask]) ** 2 / (h * w)
        self.shape = data.shape


def kernel_neg_log_likelihood(img: Image, k: Kernel, model: _SpectrumModel | None = None) -> float:
    """Negative log-likelihood of ``img`` as a blurred random image plus white noise.

    Each non-DC Fourier coefficient is modelled as zero-mean Gaussian with
    variance (c * |nu|^-alpha + d) * |K|^2 + s: a power-law image spectrum
    with a white floor, blurred by ``k``, plus unblurred sensor noise. The
    nuisance parameters (c, d, alpha, s) are fitted by maximum likelihood
    for this kernel.
    """
    model = model or _SpectrumModel(img.data)
    otf = _otf(k, model.shape)
    power = (otf * otf.conj()).real[model.mask]
    e, mult, lr = model.energy, model.mult, model.log_r2
    law = np.exp(-0.5 * lr)

    def fun(x):
        lc, ld, ls, alpha = x
        shaped = np.exp(lc) * law ** alpha * power
        floor = np.exp(ld) * power
        noise = np.exp(ls)
        var = shaped + floor + noise
        val = float((mult * (np.log(var) + e / var)).sum())
        dv = mult * (1.0 / var - e / (var * var))
        grad = np.array([(dv * shaped).sum(), (dv * floor).sum(), (dv * noise).sum(),
                         (dv * shaped * -0.5 * lr).sum()])
        return val, grad

    l0 = np.log(max(float(e.mean()), 1e-300))
    x0 = np.array([l0 - 4.0, l0 - 4.0, l0 - 4.0, 2.0])
    bounds = [(l0 - 60.0, l0 + 30.0), (l0 - 60.0, l0 + 30.0), (l0 - 60.0, l0 + 5.0), ALPHA_BOUNDS]
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds)
    return float(res.fun)


def select_r0(img: Image, p: TurbulenceParams, r0_grid, kernel_size: int = DEFAULT_KERNEL_SIZE) -> float:
    """Maximum-likelihood choice of r0 over ``r0_grid``; ties go to the smallest r0."""
    grid = sorted(float(r) for r in r0_grid)
    if not grid:
        raise ValueError("r0_grid must not be empty")
    if len(grid) == 1 or float(np.ptp(img.data)) == 0.0:
        return grid[0]
    size = kernel_size_for(img.shape, kernel_size)
    # Heavily truncated kernels have spurious spectral nulls that the
    # likelihood latches onto; drop them unless nothing else is left.
    energy = {r0: kernel_energy_fraction(p, size, r0=r0) for r0 in grid}
    kept = [r0 for r0 in grid if energy[r0] >= MIN_KERNEL_ENERGY]
    if not kept:
        return max(grid, key=lambda r0: (energy[r0], -r0))
    if len(kept) == 1:
        return kept[0]
    model = _SpectrumModel(img.data)
    best_r0, best = kept[0], np.inf
    for r0 in kept:
        nll = kernel_neg_log_likelihood(img, long_exposure_kernel(p, size, r0=r0), model)
        if nll < best:
            best_r0, best = r0, nll
    return best_r0


def semiblind_deconvolve(img: Image, p: TurbulenceParams, spec: DeblurSpec) -> tuple[Image, float]:
    """Estimate r0 from ``spec.kernel.r0_grid`` by likelihood, then deconvolve with it."""
    if not isinstance(spec.kernel, SemiBlind):
        raise ValueError("semiblind_deconvolve needs a SemiBlind kernel spec")
    r0 = select_r0(img, p, spec.kernel.r0_grid, spec.kernel_size)
    k = long_exposure_kernel(p, kernel_size_for(img.shape, spec.kernel_size), r0=r0)
    return deconvolve(img, k, spec), r0


def restore(img: Image, p: TurbulenceParams | None, spec: DeblurSpec) -> tuple[Image, float | None]:
    """Deblur ``img`` per ``spec``; returns the image and the chosen r0 for semi-blind runs."""
    if isinstance(spec.kernel, SemiBlind):
        if p is None:
            raise ValueError("semi-blind deblurring needs turbulence parameters")
        return semiblind_deconvolve(img, p, spec)
    if isinstance(spec.kernel, Kernel):
        return deconvolve(img, spec.kernel, spec), None
    if p is None:
        raise ValueError("deblurring without an explicit kernel needs turbulence parameters")
    k = long_exposure_kernel(p, kernel_size_for(img.shape, spec.kernel_size))
    return deconvolve(img, k, spec), None
