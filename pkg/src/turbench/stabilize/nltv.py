"""Non-local weight graphs and NLTV-regularised denoising."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi


@dataclass(frozen=True, eq=False)
class WeightGraph:
    """For each pixel, ``k`` neighbour coordinates and row-normalised weights.

    Arrays have shape (height, width, k).
    """

    ys: np.ndarray
    xs: np.ndarray
    weights: np.ndarray

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    def flat_index(self) -> np.ndarray:
        return self.ys * self.weights.shape[1] + self.xs


def patch_distances(img: np.ndarray, patch: int, search: int):
    """Mean squared patch difference for every offset of the search window.

    Returns ``(offsets, dist)`` with ``dist`` of shape (n_offsets, h, w).
    Offsets landing outside the image get ``inf``; the centre offset is
    excluded. Patches near the border use reflected pixels.
    """
    h, w = img.shape
    r = search // 2
    pr = patch // 2
    pad = r + pr
    padded = np.pad(img, pad, mode="reflect")
    yy, xx = np.mgrid[0:h, 0:w]
    offsets = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]
    dist = np.empty((len(offsets), h, w))
    for n, (dy, dx) in enumerate(offsets):
        shifted = padded[pad + dy - pr:pad + dy + h + pr, pad + dx - pr:pad + dx + w + pr]
        centre = padded[pad - pr:pad + h + pr, pad - pr:pad + w + pr]
        sq = (shifted - centre) ** 2
        d = ndi.uniform_filter(sq, patch, mode="constant")[pr:pr + h, pr:pr + w]
        inside = (yy + dy >= 0) & (yy + dy < h) & (xx + dx >= 0) & (xx + dx < w)
        dist[n] = np.where(inside, d, np.inf)
    return np.array(offsets), dist


def build_weights(guide: np.ndarray, patch: int = 5, search: int = 11, neighbors: int = 10,
                  h: float = 10.0) -> WeightGraph:
    """Keep the ``neighbors`` most similar patches per pixel, weighted by exp(-d / h^2).

    ``d`` is the mean squared difference between the two patches. Ties are
    broken by scan order of the search window.
    """
    if patch % 2 == 0 or search % 2 == 0 or patch >= search:
        raise ValueError("patch and search sizes must be odd with patch < search")
    r = search // 2
    if neighbors < 1 or neighbors > (r + 1) ** 2 - 1:
        raise ValueError(f"neighbors must be in [1, {(r + 1) ** 2 - 1}] for search window {search}")
    offsets, dist = patch_distances(guide, patch, search)
    order = np.argsort(dist, axis=0, kind="stable")[:neighbors]
    d = np.take_along_axis(dist, order, axis=0)
    # subtracting the row minimum leaves the normalised weights unchanged
    w = np.exp(-(d - d[:1]) / (h * h))
    w /= w.sum(axis=0, keepdims=True)
    hh, ww = guide.shape
    yy, xx = np.mgrid[0:hh, 0:ww]
    ys = yy[None] + offsets[order, 0]
    xs = xx[None] + offsets[order, 1]
    return WeightGraph(np.moveaxis(ys, 0, -1), np.moveaxis(xs, 0, -1), np.moveaxis(w, 0, -1))


def nl_grad(u: np.ndarray, g: WeightGraph) -> np.ndarray:
    """sqrt(w_xy) * (u(y) - u(x)), shape (h, w, k)."""
    return np.sqrt(g.weights) * (u[g.ys, g.xs] - u[..., None])


def nl_grad_adjoint(q: np.ndarray, g: WeightGraph) -> np.ndarray:
    sq = np.sqrt(g.weights) * q
    out = -sq.sum(axis=2)
    out += np.bincount(g.flat_index().ravel(), weights=sq.ravel(), minlength=out.size).reshape(out.shape)
    return out


def nltv(u: np.ndarray, g: WeightGraph) -> float:
    return float(np.sqrt((nl_grad(u, g) ** 2).sum(axis=2)).sum())


def nltv_objective(u: np.ndarray, f: np.ndarray, weight: float, g: WeightGraph) -> float:
    r = u - f
    return 0.5 * float((r * r).sum()) + weight * nltv(u, g)


def nltv_denoise(f: np.ndarray, weight: float, g: WeightGraph, iters: int, candidates=()) -> np.ndarray:
    """Minimise 0.5*||u - f||^2 + weight*NLTV(u) by accelerated primal-dual iterations.

    Returns the lowest-objective iterate, also considering ``candidates``.
    """
    if weight <= 0:
        return f.copy()
    # ||grad_w||^2 <= 2 (max row sum + max column sum); rows sum to one
    col = np.bincount(g.flat_index().ravel(), weights=g.weights.ravel(), minlength=f.size)
    lip2 = 2.0 * (1.0 + col.max())
    tau = sigma = 1.0 / np.sqrt(lip2)
    u = f.copy()
    ubar = u.copy()
    q = np.zeros(f.shape + (g.k,))
    best_u, best_obj = f, nltv_objective(f, f, weight, g)
    for c in (*candidates, np.full_like(f, f.mean())):
        obj = nltv_objective(c, f, weight, g)
        if obj < best_obj:
            best_u, best_obj = c, obj
    for _ in range(iters):
        q = q + sigma * nl_grad(ubar, g)
        norm = np.sqrt((q * q).sum(axis=2, keepdims=True))
        q = q / np.maximum(1.0, norm / weight)
        u_new = (u - tau * nl_grad_adjoint(q, g) + tau * f) / (1.0 + tau)
        # the data term is 1-strongly convex: accelerate
        theta = 1.0 / np.sqrt(1.0 + 2.0 * tau)
        tau, sigma = theta * tau, sigma / theta
        ubar = u_new + theta * (u_new - u)
        u = u_new
        obj = nltv_objective(u, f, weight, g)
        if obj < best_obj:
            best_u, best_obj = u, obj
    return best_u
