"""Shifted square-integral operator on Brownian motion.

The latent ``f`` is a Brownian motion on ``[0, z]``; the forward map is
``T(f)(t) = int_0^t (f(s) - theta)^2 ds`` and the observation is the vector of
its first three Legendre coefficients plus Gaussian noise.  Mean and
covariance of the coefficients are available in closed form.
"""

from __future__ import annotations

from functools import lru_cache
from math import sqrt

import numpy as np

from .legendre import LegendreBasis, legendre_coeff, trapezoid_weights
from .model_core import MCEstimate, MomentModel, MomentPair, RandomStream

__all__ = [
    "legendre_coeff",
    "mean_mu",
    "dmean_mu",
    "cov_coeff_b",
    "cov_coeff_c",
    "covariance_sigma",
    "dcovariance_sigma",
    "simulate_bm_path",
    "simulate_bm_paths",
    "forward_map",
    "project_legendre",
    "projection_weights",
    "path_functionals",
    "mc_moments_oracle",
    "jackknife_se",
    "SquareIntModel",
    "SquareIntGenerator",
    "DEFAULT_LAMBDA_SCALE",
]

DEFAULT_LAMBDA_SCALE = 0.01
P_MAX = 3


def _check_z(z):
    if z <= 0:
        raise ValueError(f"interval length must be positive, got {z}")


def mean_mu(theta, z=1.0):
    _check_z(z)
    t2 = float(np.squeeze(theta)) ** 2
    return np.array([
        z**2.5 / 6 + z**1.5 * t2 / 2,
        sqrt(3) * z**2.5 / 12 + sqrt(3) * z**1.5 * t2 / 6,
        sqrt(5) * z**2.5 / 60,
    ])


def dmean_mu(theta, z=1.0):
    _check_z(z)
    t = float(np.squeeze(theta))
    return np.array([z**1.5 * t, sqrt(3) * z**1.5 * t / 3, 0.0])


def cov_coeff_b(k: int, l: int) -> float:
    s = k + l + 6
    return (2 / 3 * (1 / ((4 + k) * s) + 1 / (k + 2) * (1 / (l + 4) - 1 / s))
            - 1 / 3 * (1 / ((5 + k) * s) + 1 / (k + 1) * (1 / (l + 5) - 1 / s)))


def cov_coeff_c(k: int, l: int) -> float:
    s = k + l + 5
    return (2 * (1 / ((k + 3) * s) + 1 / (k + 2) * (1 / (l + 3) - 1 / s))
            - 2 / 3 * (1 / ((k + 4) * s) + 1 / (k + 1) * (1 / (l + 4) - 1 / s)))


@lru_cache(maxsize=None)
def _cov_blocks(n=P_MAX):
    """Matrices ``A``, ``B`` with ``Cov(eta) = z^5 A + theta^2 z^4 B`` (at z = 1 scaling)."""
    A = np.zeros((n, n))
    B = np.zeros((n, n))
    for j1 in range(n):
        for j2 in range(n):
            for k in range(j1 + 1):
                for l in range(j2 + 1):
                    w = legendre_coeff(j1, k) * legendre_coeff(j2, l)
                    A[j1, j2] += w * cov_coeff_b(k, l)
                    B[j1, j2] += w * cov_coeff_c(k, l)
    # the double sum is symmetric analytically; remove rounding asymmetry
    return 0.5 * (A + A.T), 0.5 * (B + B.T)


def covariance_sigma(theta, z=1.0, Lambda=None):
    _check_z(z)
    A, B = _cov_blocks()
    t2 = float(np.squeeze(theta)) ** 2
    lam = np.zeros((P_MAX, P_MAX)) if Lambda is None else np.asarray(Lambda, dtype=float)
    return lam + z**5 * A + t2 * z**4 * B


def dcovariance_sigma(theta, z=1.0):
    _check_z(z)
    _, B = _cov_blocks()
    return 2.0 * float(np.squeeze(theta)) * z**4 * B


def _bm_paths(z, n_steps, n_paths, rng):
    inc = rng.standard_normal((n_paths, n_steps)) * np.sqrt(z / n_steps)
    out = np.zeros((n_paths, n_steps + 1))
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return out


def simulate_bm_path(z, n_steps, stream: RandomStream):
    """Brownian path on ``n_steps + 1`` uniform nodes of ``[0, z]``, starting at 0."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    return _bm_paths(z, n_steps, 1, stream.generator())[0]


def simulate_bm_paths(z, n_steps, n_paths, stream: RandomStream):
    """``(n_paths, n_steps + 1)`` independent Brownian paths on ``[0, z]``."""
    if n_steps < 1 or n_paths < 1:
        raise ValueError("n_steps and n_paths must be at least 1")
    return _bm_paths(z, n_steps, n_paths, stream.generator())


def forward_map(path, theta, z=1.0, output_points=None):
    """Cumulative trapezoid of ``(f - theta)^2``; works on ``(..., n+1)`` arrays.

    ``output_points`` optionally selects a coarser set of node indices (the
    path grid must contain the output grid).
    """
    path = np.asarray(path, dtype=float)
    n = path.shape[-1] - 1
    if n < 1:
        raise ValueError("path needs at least two nodes")
    g = (path - theta) ** 2
    h = z / n
    out = np.zeros_like(g)
    np.cumsum(0.5 * h * (g[..., 1:] + g[..., :-1]), axis=-1, out=out[..., 1:])
    if output_points is None:
        return out
    idx = np.asarray(output_points)
    if idx.dtype.kind != "i" or np.any(idx < 0) or np.any(idx > n):
        raise ValueError("output grid must be a subset of the path grid")
    return out[..., idx]


def project_legendre(values, basis: LegendreBasis, j):
    """Trapezoid inner product of grid values on ``[0, z]`` with ``e_j``."""
    if not 0 <= j <= basis.max_order:
        raise ValueError(f"order {j} outside 0..{basis.max_order}")
    values = np.asarray(values, dtype=float)
    m = values.shape[-1]
    x = np.linspace(0.0, basis.z, m)
    return values @ (trapezoid_weights(m, basis.z) * basis.evaluate(j, x))


@lru_cache(maxsize=32)
def projection_weights(z, n_steps, p=P_MAX):
    """Linear map ``W`` (p x (n+1)) with ``eta = W @ (f - theta)^2``.

    Built from the cumulative-trapezoid matrix and :func:`project_legendre`,
    so it is the same discrete operator as :func:`forward_map` followed by
    the projection.
    """
    basis = LegendreBasis(p - 1, z)
    cum = _cumtrapz_operator(n_steps, z)
    W = np.array([project_legendre(cum.T, basis, j) for j in range(p)])
    W.setflags(write=False)
    return W


def _cumtrapz_operator(n_steps, z):
    # row t holds the trapezoid weights of int_0^{t h}
    h = z / n_steps
    C = np.tril(np.full((n_steps + 1, n_steps + 1), h))
    C[:, 0] = 0.5 * h
    C[np.arange(n_steps + 1), np.arange(n_steps + 1)] = 0.5 * h
    C[0, 0] = 0.0
    return C


def path_functionals(paths, z, n_steps, p=P_MAX):
    """``(F2, F1, F0)`` with ``eta(theta) = F2 - 2 theta F1 + theta^2 F0``.

    ``d eta / d theta = -2 F1 + 2 theta F0``.
    """
    W = projection_weights(z, n_steps, p)
    paths = np.atleast_2d(paths)
    return (paths**2) @ W.T, paths @ W.T, np.broadcast_to(W.sum(axis=1), (paths.shape[0], p))


def jackknife_se(samples, stat, n_blocks=100):
    """Delete-one-block jackknife standard error of ``stat(samples)``."""
    n = samples.shape[0]
    n_blocks = min(n_blocks, n)
    blocks = np.array_split(np.arange(n), n_blocks)
    reps = np.array([stat(np.delete(samples, b, axis=0)) for b in blocks])
    return np.sqrt((n_blocks - 1) / n_blocks * np.sum((reps - reps.mean(axis=0)) ** 2, axis=0))


def mc_moments_oracle(theta, z, n_paths, n_steps, stream: RandomStream, p=P_MAX, chunk=4096):
    """Brute-force mean and covariance of the noiseless coefficients.

    Returns two :class:`MCEstimate` objects (mean, covariance) with
    100-block jackknife standard errors.
    """
    if n_paths < 100:
        raise ValueError("oracle needs at least 100 paths")
    rng = stream.generator()
    basis = LegendreBasis(p - 1, z)
    eta = np.empty((n_paths, p))
    for start in range(0, n_paths, chunk):
        m = min(chunk, n_paths - start)
        T = forward_map(_bm_paths(z, n_steps, m, rng), theta, z)
        for j in range(p):
            eta[start:start + m, j] = project_legendre(T, basis, j)
    mean = eta.mean(axis=0)
    cov = np.cov(eta, rowvar=False).reshape(p, p)
    se_mean = jackknife_se(eta, lambda s: s.mean(axis=0))
    se_cov = jackknife_se(eta, lambda s: np.cov(s, rowvar=False).reshape(p, p))
    return MCEstimate(mean, se_mean, n_paths), MCEstimate(cov, se_cov, n_paths)


class SquareIntModel(MomentModel):
    """Closed-form surrogate moments; index ``i`` selects ``z_sequence[i]``.

    ``z_sequence`` may also be a callable ``i -> z``.  Observations use the
    first ``p`` Legendre coefficients.
    """

    d = 1
    derivative_mode = "analytic"

    def __init__(self, z_sequence=(1.0,), Lambda=None, p=P_MAX, theta_bounds=(1e-6, np.inf)):
        if not 1 <= p <= P_MAX:
            raise ValueError(f"p must be in 1..{P_MAX}")
        self.p = p
        self._z = z_sequence
        if Lambda is None:
            Lambda = DEFAULT_LAMBDA_SCALE * np.eye(p)
        Lambda = np.atleast_2d(np.asarray(Lambda, dtype=float))
        if Lambda.shape != (p, p):
            raise ValueError("Lambda must be p x p")
        if np.linalg.eigvalsh(Lambda)[0] <= 0:
            raise ValueError("Lambda must be positive definite")
        self.Lambda = Lambda
        self.theta_bounds = theta_bounds

    def z(self, i):
        z = self._z(i) if callable(self._z) else self._z[i]
        _check_z(z)
        return float(z)

    def moments(self, theta, i=0):
        z, p = self.z(i), self.p
        sig = covariance_sigma(theta, z)[:p, :p] + self.Lambda
        return MomentPair(mean_mu(theta, z)[:p], sig)

    def dmoments(self, theta, i=0, l=0):
        if l != 0:
            raise IndexError("square-integral model has d = 1")
        z, p = self.z(i), self.p
        return dmean_mu(theta, z)[:p], dcovariance_sigma(theta, z)[:p, :p]


class SquareIntGenerator:
    """Latent sampler: noiseless coefficient vectors for fresh Brownian paths."""

    def __init__(self, z_sequence=(1.0,), n_steps=1000, p=P_MAX, chunk=4096):
        self._z = z_sequence
        self.n_steps = n_steps
        self.p = p
        self.chunk = chunk

    def z(self, i):
        return float(self._z(i) if callable(self._z) else self._z[i])

    def functionals(self, index, rng):
        """Per-draw ``(F2, F1, F0)`` arrays, see :func:`path_functionals`."""
        index = np.asarray(index)
        out = [np.empty((len(index), self.p)) for _ in range(3)]
        zs = np.array([self.z(int(i)) for i in index])
        for zval in np.unique(zs):
            rows = np.flatnonzero(zs == zval)
            for start in range(0, rows.size, self.chunk):
                r = rows[start:start + self.chunk]
                paths = _bm_paths(zval, self.n_steps, r.size, rng)
                for o, part in zip(out, path_functionals(paths, zval, self.n_steps, self.p)):
                    o[r] = part
        return tuple(out)

    def __call__(self, theta0, index, rng):
        F2, F1, F0 = self.functionals(index, rng)
        t = float(np.squeeze(theta0))
        return F2 - 2 * t * F1 + t * t * F0
