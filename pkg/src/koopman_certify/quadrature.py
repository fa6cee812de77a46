"""Composite tensor Gauss-Legendre rules on axis-aligned boxes."""

from functools import lru_cache

import numpy as np

from .errors import UsageError


@lru_cache(maxsize=64)
def _leggauss(q):
    return np.polynomial.legendre.leggauss(q)


def box_rule(lower, upper, q=40, cells=1, triangulated=False):
    """Nodes and weights integrating against Lebesgue measure on the box.

    The box is split into ``cells`` equal sub-boxes per axis and a q-point
    Gauss-Legendre rule is applied on each. With ``triangulated=True``
    (2D only) every cell is cut along its lower-left/upper-right diagonal
    and each triangle gets a collapsed (Duffy) q x q rule, so piecewise
    polynomials on that triangulation are integrated exactly.

    Returns ``(points, weights)`` of shapes ``(M, d)`` and ``(M,)``.
    """
    if q < 1:
        raise UsageError("quadrature order must be >= 1")
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    d = len(lower)
    cells = np.broadcast_to(np.asarray(cells, dtype=int), (d,))
    g, w = _leggauss(q)
    g01, w01 = 0.5 * (g + 1.0), 0.5 * w

    if triangulated:
        if d != 2:
            raise UsageError("triangulated rules are only available in 2D")
        return _triangulated_rule(lower, upper, cells, g01, w01)

    axes_pts, axes_w = [], []
    for k in range(d):
        edges = np.linspace(lower[k], upper[k], cells[k] + 1)
        h = np.diff(edges)
        axes_pts.append((edges[:-1, None] + h[:, None] * g01[None, :]).ravel())
        axes_w.append((h[:, None] * w01[None, :]).ravel())
    grids = np.meshgrid(*axes_pts, indexing="ij")
    wgrids = np.meshgrid(*axes_w, indexing="ij")
    points = np.stack([gr.ravel() for gr in grids], axis=-1)
    weights = np.prod(np.stack([wg.ravel() for wg in wgrids], axis=-1), axis=-1)
    return points, weights


def _triangulated_rule(lower, upper, cells, g01, w01):
    # reference triangles in the unit square: lower {(0,0),(1,0),(1,1)}, upper {(0,0),(1,1),(0,1)}
    a, b = np.meshgrid(g01, g01, indexing="ij")
    wa, wb = np.meshgrid(w01, w01, indexing="ij")
    a, b, wab = a.ravel(), b.ravel(), (wa * wb).ravel()
    # Duffy map of the unit square onto {0 <= t <= s <= 1}: s = a, t = a b, jacobian a
    s, t, wt = a, a * b, wab * a
    ref = np.concatenate([np.stack([s, t], -1), np.stack([t, s], -1)])
    ref_w = np.concatenate([wt, wt])

    hx = (upper[0] - lower[0]) / cells[0]
    hy = (upper[1] - lower[1]) / cells[1]
    ix, iy = np.meshgrid(np.arange(cells[0]), np.arange(cells[1]), indexing="ij")
    origins = np.stack([lower[0] + ix.ravel() * hx, lower[1] + iy.ravel() * hy], -1)
    pts = origins[:, None, :] + ref[None, :, :] * np.array([hx, hy])
    weights = np.broadcast_to(ref_w * hx * hy, (len(origins), len(ref_w)))
    return pts.reshape(-1, 2), weights.ravel().copy()


def integrate(fn, lower, upper, q=40, cells=1):
    """Integral of a vectorized scalar function over the box."""
    pts, w = box_rule(lower, upper, q, cells)
    return float(np.dot(w, np.asarray(fn(pts), dtype=float)))
