"""Dense optical flow: pyramidal Lucas-Kanade and pyramidal TV-L1.

Flows follow the backward convention used by ``warp_image``: the returned
field ``d`` satisfies ``frame(x + d(x)) ~= ref(x)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage as ndi

from .._tv import div, grad
from ..imgcore import Image, WarpField, _warp_array

EIG_FLOOR = 1e-8
# Windows whose smaller eigenvalue is this small relative to the larger one
# only constrain motion along the dominant gradient direction.
EIG_RATIO = 1e-4
MEDIAN_SIZE = 5


class FlowMethod(enum.Enum):
    LUCAS_KANADE = "lk"
    TVL1 = "tvl1"


@dataclass(frozen=True)
class FlowOptions:
    """Optical-flow settings.

    ``tvl1_lambda`` weighs the L1 data term for intensities on a 0..255
    scale (inputs of any dynamic range are rescaled to it). ``tvl1_tau`` and
    ``tvl1_sigma`` are the primal and dual steps of the inner TV solve;
    ``tvl1_theta`` couples the data and smoothness sub-problems.
    """

    method: FlowMethod = FlowMethod.LUCAS_KANADE
    pyramid_levels: int = 3
    lk_window: int = 7
    lk_iterations: int = 3
    tvl1_lambda: float = 0.15
    tvl1_tau: float = 0.25
    tvl1_sigma: float = 0.5
    tvl1_theta: float = 0.3
    tvl1_warps: int = 5
    tvl1_inner_iters: int = 30

    def __post_init__(self):
        if isinstance(self.method, str):
            object.__setattr__(self, "method", FlowMethod(self.method))
        if self.lk_window < 3 or self.lk_window % 2 == 0:
            raise ValueError("lk_window must be odd and >= 3")
        for name in ("pyramid_levels", "lk_iterations", "tvl1_warps", "tvl1_inner_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if min(self.tvl1_lambda, self.tvl1_tau, self.tvl1_sigma, self.tvl1_theta) <= 0:
            raise ValueError("TV-L1 parameters must be positive")
        if self.tvl1_tau * self.tvl1_sigma > 1.0 / 8.0 + 1e-12:
            raise ValueError("tvl1_tau * tvl1_sigma must not exceed 1/8")


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [img]
    for _ in range(levels - 1):
        cur = pyr[-1]
        if min(cur.shape) < 16:
            break
        pyr.append(ndi.gaussian_filter(cur, 1.0, mode="nearest")[::2, ::2])
    return pyr


def _upsample_flow(u: np.ndarray, v: np.ndarray, shape: tuple[int, int]):
    zy = shape[0] / u.shape[0]
    zx = shape[1] / u.shape[1]
    uu = ndi.zoom(u, (zy, zx), order=1, mode="nearest", grid_mode=True) * zx
    vv = ndi.zoom(v, (zy, zx), order=1, mode="nearest", grid_mode=True) * zy
    return uu[: shape[0], : shape[1]], vv[: shape[0], : shape[1]]


def _median(a: np.ndarray, size: int = MEDIAN_SIZE) -> np.ndarray:
    """Square median filter with edge replication.

    Same result as ``ndi.median_filter(a, size, mode="nearest")`` for odd
    sizes, but a partial sort over a window view is several times faster.
    """
    r = size // 2
    win = sliding_window_view(np.pad(a, r, mode="edge"), (size, size)).reshape(*a.shape, size * size)
    k = size * size // 2
    return np.partition(win, k, axis=-1)[..., k]


def _lk_level(i0, i1, u, v, opts: FlowOptions):
    size = opts.lk_window
    for _ in range(opts.lk_iterations):
        w = _warp_array(i1, u, v)
        iy, ix = np.gradient(w)
        it = w - i0
        sxx = ndi.uniform_filter(ix * ix, size, mode="nearest")
        syy = ndi.uniform_filter(iy * iy, size, mode="nearest")
        sxy = ndi.uniform_filter(ix * iy, size, mode="nearest")
        bx = -ndi.uniform_filter(ix * it, size, mode="nearest")
        by = -ndi.uniform_filter(iy * it, size, mode="nearest")

        # closed-form eigen-decomposition of the 2x2 structure tensor
        half_tr = 0.5 * (sxx + syy)
        disc = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))
        lmax = half_tr + disc
        lmin = half_tr - disc
        det = sxx * syy - sxy * sxy
        full = (lmin >= EIG_FLOOR) & (lmin >= EIG_RATIO * lmax)
        normal = ~full & (lmax >= EIG_FLOOR)

        du = np.zeros_like(u)
        dv = np.zeros_like(v)
        safe = np.where(full, det, 1.0)
        du[full] = ((syy * bx - sxy * by) / safe)[full]
        dv[full] = ((sxx * by - sxy * bx) / safe)[full]

        # normal flow along the dominant eigenvector
        ex = np.where(np.abs(sxy) > 1e-300, sxy, np.where(sxx >= syy, 1.0, 0.0))
        ey = np.where(np.abs(sxy) > 1e-300, lmax - sxx, np.where(sxx >= syy, 0.0, 1.0))
        en = np.hypot(ex, ey)
        en[en == 0] = 1.0
        ex, ey = ex / en, ey / en
        proj = (ex * bx + ey * by) / np.where(normal, lmax, 1.0)
        du[normal] = (proj * ex)[normal]
        dv[normal] = (proj * ey)[normal]

        # Dense per-pixel refinement has oscillating error modes between
        # neighbouring windows; a median pass after each step damps them.
        u = _median(u + du)
        v = _median(v + dv)
    return u, v


def _tvl1_level(i0, i1, u, v, opts: FlowOptions):
    lam, theta = opts.tvl1_lambda, opts.tvl1_theta
    tau, sigma = opts.tvl1_tau, opts.tvl1_sigma
    pux = np.zeros_like(u)
    puy = np.zeros_like(u)
    pvx = np.zeros_like(u)
    pvy = np.zeros_like(u)
    lt = lam * theta
    for _ in range(opts.tvl1_warps):
        w = _warp_array(i1, u, v)
        iy, ix = np.gradient(w)
        g2 = ix * ix + iy * iy
        g2safe = np.where(g2 > 1e-12, g2, 1.0)
        rho0 = w - i0 - ix * u - iy * v
        ubar, vbar = u.copy(), v.copy()
        for _ in range(opts.tvl1_inner_iters):
            rho = rho0 + ix * u + iy * v
            # pointwise thresholding of the linearised L1 data term
            lo = rho < -lt * g2
            hi = rho > lt * g2
            mid = ~(lo | hi) & (g2 > 1e-12)
            step = np.where(mid, -rho / g2safe, 0.0)
            sx = np.where(lo, lt * ix, np.where(hi, -lt * ix, step * ix))
            sy = np.where(lo, lt * iy, np.where(hi, -lt * iy, step * iy))
            vu = u + sx
            vv = v + sy

            # one primal-dual step on sum_k TV(u_k) + ||u - v||^2 / (2 theta)
            gx, gy = grad(ubar)
            pux, puy = _proj(pux + sigma * gx, puy + sigma * gy)
            gx, gy = grad(vbar)
            pvx, pvy = _proj(pvx + sigma * gx, pvy + sigma * gy)
            c = tau / theta
            u_new = (u + tau * div(pux, puy) + c * vu) / (1.0 + c)
            v_new = (v + tau * div(pvx, pvy) + c * vv) / (1.0 + c)
            ubar = 2.0 * u_new - u
            vbar = 2.0 * v_new - v
            u, v = u_new, v_new
    return u, v


def _proj(px, py):
    n = np.maximum(1.0, np.sqrt(px * px + py * py))
    return px / n, py / n


def _flow_arrays(ref: np.ndarray, frame: np.ndarray, opts: FlowOptions):
    p0 = _pyramid(ref, opts.pyramid_levels)
    p1 = _pyramid(frame, opts.pyramid_levels)
    level = _lk_level if opts.method is FlowMethod.LUCAS_KANADE else _tvl1_level
    u = np.zeros(p0[-1].shape)
    v = np.zeros(p0[-1].shape)
    for k in range(len(p0) - 1, -1, -1):
        if u.shape != p0[k].shape:
            u, v = _upsample_flow(u, v, p0[k].shape)
        u, v = level(p0[k], p1[k], u, v, opts)
    return u, v


def estimate_flow(ref: Image, frame: Image, opts: FlowOptions | None = None) -> WarpField:
    """Backward flow such that ``warp_image(frame, flow)`` approximates ``ref``."""
    opts = opts or FlowOptions()
    if ref.shape != frame.shape:
        raise ValueError(f"image shapes differ: {ref.shape} vs {frame.shape}")
    scale = 1.0 / ref.dyn_range
    if opts.method is FlowMethod.TVL1:
        scale *= 255.0
    u, v = _flow_arrays(ref.data * scale, frame.data * scale, opts)
    return WarpField(u, v)
