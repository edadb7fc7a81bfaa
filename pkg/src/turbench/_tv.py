"""Discrete isotropic total variation and an ROF (TV-L2) denoiser.

Forward differences with Neumann boundary; ``div`` is the negative adjoint
of ``grad``.
"""

from __future__ import annotations

import numpy as np


def grad(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def div(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    out = np.zeros_like(px)
    out[:, :-1] += px[:, :-1]
    out[:, 1:] -= px[:, :-1]
    out[:-1, :] += py[:-1, :]
    out[1:, :] -= py[:-1, :]
    return out


def tv(u: np.ndarray) -> float:
    gx, gy = grad(u)
    return float(np.sqrt(gx * gx + gy * gy).sum())


def _project_unit(px: np.ndarray, py: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.maximum(1.0, np.sqrt(px * px + py * py))
    return px / norm, py / norm


def rof_objective(u: np.ndarray, f: np.ndarray, weight: float) -> float:
    r = u - f
    return 0.5 * float((r * r).sum()) + weight * tv(u)


def rof_denoise(f: np.ndarray, weight: float, iters: int, dual=None, candidates=(), track_best: bool = False):
    """Minimise 0.5*||u - f||^2 + weight*TV(u) with fast gradient projection on the dual.

    Returns ``(u, dual)`` so the dual state can warm-start a later call.
    With ``track_best`` the lowest-objective iterate (including any
    ``candidates``) is returned instead of the last one.
    """
    if weight <= 0:
        return f.copy(), dual
    if dual is None:
        px = np.zeros_like(f)
        py = np.zeros_like(f)
    else:
        px, py = dual
    qx, qy = px, py
    t = 1.0
    step = 1.0 / (8.0 * weight)
    best_u, best_obj = None, np.inf
    if track_best:
        # the constant image is always feasible and wins for very large weights
        for c in (*candidates, np.full_like(f, f.mean())):
            obj = rof_objective(c, f, weight)
            if obj < best_obj:
                best_u, best_obj = c, obj
    for _ in range(iters):
        gx, gy = grad(f + weight * div(qx, qy))
        nx, ny = _project_unit(qx + step * gx, qy + step * gy)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        mom = (t - 1.0) / t_next
        qx = nx + mom * (nx - px)
        qy = ny + mom * (ny - py)
        px, py, t = nx, ny, t_next
        if track_best:
            u = f + weight * div(px, py)
            obj = rof_objective(u, f, weight)
            if obj < best_obj:
                best_u, best_obj = u, obj
    if track_best and best_u is not None:
        return best_u, (px, py)
    return f + weight * div(px, py), (px, py)
