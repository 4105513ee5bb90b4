"""Independent reference computations shared by the unit and acceptance tests."""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate


def fbm_level_cov(s, t, H):
    s, t = np.asarray(s, float), np.asarray(t, float)
    return 0.5 * (s ** (2 * H) + t ** (2 * H) - np.abs(s - t) ** (2 * H))


def mixed_increment_cov(points, H):
    """Covariance of the increments of W + W^H built from level covariances."""
    t = np.asarray(points, float)
    lev = np.minimum.outer(t, t) + fbm_level_cov(t[:, None], t[None, :], H)
    return lev[1:, 1:] - lev[:-1, 1:] - lev[1:, :-1] + lev[:-1, :-1]


_GL_X, _GL_W = np.polynomial.legendre.leggauss(40)


def fredholm_lhs(row, nodes, H):
    """``g(s_i) + H(2H-1) int_0^{t_k} g(r) |s_i - r|^{2H-2} dr`` at every node ``s_i``.

    ``g`` is the piecewise-linear interpolant of ``row`` on ``nodes``. Segments
    with the singular point at an endpoint use QUADPACK's algebraic-weight rule;
    all other segments use 40-point Gauss-Legendre.
    """
    row = np.asarray(row, float)
    nodes = np.asarray(nodes, float)
    k = len(nodes) - 1
    a = 2 * H - 2
    c = H * (2 * H - 1)
    out = np.empty(k + 1)
    for i, s in enumerate(nodes):
        total = 0.0
        for m in (i - 1, i):
            if 0 <= m < k:
                lo, hi = nodes[m], nodes[m + 1]
                gl, gr = row[m], row[m + 1]

                def f(r, lo=lo, hi=hi, gl=gl, gr=gr):
                    return gl + (gr - gl) * (r - lo) / (hi - lo)

                wvar = (a, 0.0) if s == lo else (0.0, a)
                val, _ = integrate.quad(f, lo, hi, weight="alg", wvar=wvar, epsabs=1e-15, epsrel=1e-13)
                total += val
        far = np.array([m for m in range(k) if m not in (i - 1, i)], dtype=int)
        if far.size:
            lo, hi = nodes[far], nodes[far + 1]
            half = 0.5 * (hi - lo)
            r = 0.5 * (lo + hi)[:, None] + half[:, None] * _GL_X[None, :]
            g = row[far][:, None] + (row[far + 1] - row[far])[:, None] * (r - lo[:, None]) / (hi - lo)[:, None]
            total += float(np.sum(half[:, None] * _GL_W[None, :] * g * np.abs(s - r) ** a))
        out[i] = row[i] + c * total
    return out


def gaussian_mixture_loglik_quad(u, v, mu, s2):
    """``log int N(psi; mu, s2) exp(psi u - psi^2 v / 2) dpsi`` by adaptive quadrature."""
    if s2 == 0:
        return mu * u - 0.5 * mu * mu * v
    prec = 1.0 / s2 + v
    center = (mu / s2 + u) / prec
    sd = 1.0 / math.sqrt(prec)

    def expo(p):
        return -0.5 * (p - mu) ** 2 / s2 + p * u - 0.5 * p * p * v

    peak = expo(center)
    val, _ = integrate.quad(
        lambda p: math.exp(expo(p) - peak), center - 40 * sd, center + 40 * sd, epsabs=0, epsrel=1e-13, limit=200
    )
    return peak + math.log(val) - 0.5 * math.log(2 * math.pi * s2)
