"""Small Nelder-Mead simplex minimizer with an explicit starting simplex."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    nit: int
    nfev: int


def nelder_mead(f, simplex, tol=1e-8, max_iter=200,
                reflect=1.0, expand=2.0, contract=0.5, shrink=0.5) -> MinimizeResult:
    """Minimize ``f`` from the ``(n+1, n)`` starting ``simplex``.

    Iteration stops once the mean cost over the simplex changes by no more
    than ``tol`` between iterations, or after ``max_iter`` iterations.  The
    previous mean starts at +inf so at least one iteration always runs.
    ``f`` may return +inf to reject a point.
    """
    pts = np.array(simplex, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] != pts.shape[1] + 1:
        raise ValueError("simplex must have shape (n+1, n)")
    vals = np.array([f(p) for p in pts], dtype=np.float64)
    nfev = len(pts)
    prev = math.inf
    nit = 0
    while nit < max_iter:
        nit += 1
        order = np.argsort(vals, kind="stable")
        pts, vals = pts[order], vals[order]
        centroid = pts[:-1].mean(axis=0)
        worst = pts[-1]

        xr = centroid + reflect * (centroid - worst)
        fr = f(xr)
        nfev += 1
        if vals[0] <= fr < vals[-2]:
            pts[-1], vals[-1] = xr, fr
        elif fr < vals[0]:
            xe = centroid + expand * (xr - centroid)
            fe = f(xe)
            nfev += 1
            if fe < fr:
                pts[-1], vals[-1] = xe, fe
            else:
                pts[-1], vals[-1] = xr, fr
        else:
            if fr < vals[-1]:
                xc = centroid + contract * (xr - centroid)
            else:
                xc = centroid + contract * (worst - centroid)
            fc = f(xc)
            nfev += 1
            if fc < min(fr, vals[-1]):
                pts[-1], vals[-1] = xc, fc
            else:
                for i in range(1, len(pts)):
                    pts[i] = pts[0] + shrink * (pts[i] - pts[0])
                    vals[i] = f(pts[i])
                nfev += len(pts) - 1

        finite = vals[np.isfinite(vals)]
        cur = finite.mean() if finite.size == vals.size else math.inf
        if math.isfinite(cur) and math.isfinite(prev) and abs(cur - prev) <= tol:
            break
        prev = cur

    best = int(np.argmin(vals))
    return MinimizeResult(pts[best].copy(), float(vals[best]), nit, nfev)
