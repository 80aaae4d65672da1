"""Quadrature rules on the reference simplex.

Rules are returned in barycentric form: ``lam`` has shape (nq, dim+1) and the
weights sum to one, so that ``int_K f = |K| * sum_q w_q f(x_q)``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


def _edge_midpoint_rule() -> tuple[np.ndarray, np.ndarray]:
    lam = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    return lam, np.full(3, 1.0 / 3.0)


def _four_point_rule() -> tuple[np.ndarray, np.ndarray]:
    a = (5.0 - np.sqrt(5.0)) / 20.0
    b = (5.0 + 3.0 * np.sqrt(5.0)) / 20.0
    lam = np.full((4, 4), a)
    np.fill_diagonal(lam, b)
    return lam, np.full(4, 0.25)


def _gauss_jacobi01(n: int, alpha: int) -> tuple[np.ndarray, np.ndarray]:
    # nodes on [0, 1] for the weight (1 - u)^alpha, normalized to unit mass
    x, w = roots_jacobi(n, alpha, 0)
    u = 0.5 * (1.0 + x)
    return u, w / w.sum()


def _conical_rule(dim: int, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed (Stroud) product rule, exact up to ``degree``."""
    n = max(1, (degree + 2) // 2)
    if dim == 2:
        u, wu = _gauss_jacobi01(n, 1)
        v, wv = _gauss_jacobi01(n, 0)
        U, V = np.meshgrid(u, v, indexing="ij")
        W = np.outer(wu, wv)
        x = U
        y = (1.0 - U) * V
        lam = np.stack([1.0 - x - y, x, y], axis=-1).reshape(-1, 3)
        return lam, W.ravel()
    if dim == 3:
        u, wu = _gauss_jacobi01(n, 2)
        v, wv = _gauss_jacobi01(n, 1)
        s, ws = _gauss_jacobi01(n, 0)
        U, V, S = np.meshgrid(u, v, s, indexing="ij")
        W = wu[:, None, None] * wv[None, :, None] * ws[None, None, :]
        x = U
        y = (1.0 - U) * V
        z = (1.0 - U) * (1.0 - V) * S
        lam = np.stack([1.0 - x - y - z, x, y, z], axis=-1).reshape(-1, 4)
        return lam, W.ravel()
    raise ValueError(f"unsupported dimension {dim}")


@lru_cache(maxsize=None)
def simplex_rule(dim: int, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric points and unit-sum weights exact for polynomials of ``degree``.

    Degree <= 2 uses the symmetric edge-midpoint (triangle) or 4-point (tet)
    rule; higher degrees use a collapsed Gauss-Jacobi product rule.
    """
    if degree <= 2:
        lam, w = _edge_midpoint_rule() if dim == 2 else _four_point_rule()
    else:
        lam, w = _conical_rule(dim, degree)
    lam.setflags(write=False)
    w.setflags(write=False)
    return lam, w
