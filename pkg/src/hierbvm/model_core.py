"""Gaussian surrogate likelihood for hierarchical models.

A hierarchical model draws a latent function ``f_i`` and observes
``X_i = eta_i(f_i) + gamma_i`` with Gaussian noise ``gamma_i``.  The
surrogate replaces the intractable law of ``X_i`` by the Gaussian with the
same mean and covariance; :class:`MomentModel` is the interface every example
model implements so the likelihood and asymptotic machinery can consume it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

__all__ = [
    "NotPositiveDefiniteError",
    "RandomStream",
    "MomentPair",
    "MCEstimate",
    "ObservationBatch",
    "MomentModel",
    "cholesky_checked",
    "surrogate_loglik",
    "surrogate_loglik_grad",
    "exp_family_stats",
    "sample_observations",
    "mc_estimate",
]

PIVOT_TOL = 1e-12
LOG_2PI = float(np.log(2.0 * np.pi))


class NotPositiveDefiniteError(ValueError):
    """A covariance that must be positive definite is not."""

    def __init__(self, message, index=None, theta=None, min_eigenvalue=None):
        super().__init__(message)
        self.index = index
        self.theta = None if theta is None else np.atleast_1d(theta).tolist()
        self.min_eigenvalue = min_eigenvalue


def cholesky_checked(cov, index=None, theta=None):
    """Lower Cholesky factor, failing when a pivot falls below ``PIVOT_TOL``.

    The threshold is relative to the largest diagonal entry (absolute when
    that entry is below one).
    """
    cov = np.asarray(cov, dtype=float)
    scale = max(1.0, float(np.max(np.abs(np.diag(cov))))) if cov.size else 1.0
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        chol = None
    if chol is None or np.min(np.diag(chol)) ** 2 <= PIVOT_TOL * scale:
        eig = float(np.linalg.eigvalsh(0.5 * (cov + cov.T))[0])
        raise NotPositiveDefiniteError(
            f"covariance is not positive definite at index {index}, "
            f"theta={None if theta is None else np.atleast_1d(theta).tolist()} "
            f"(smallest eigenvalue {eig:.3e})",
            index=index, theta=theta, min_eigenvalue=eig,
        )
    return chol


@dataclass(frozen=True)
class RandomStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Draws come from numpy's Philox generator keyed through a SeedSequence,
    so distinct stream ids (and sub-keys) give independent sequences and
    equal keys give bit-identical draws.
    """

    seed: int
    stream_id: int = 0
    subkeys: tuple = ()

    def __post_init__(self):
        for v in (self.seed, self.stream_id, *self.subkeys):
            if not 0 <= int(v) < 2**64:
                raise ValueError("stream keys must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.seed),
            spawn_key=(int(self.stream_id), *map(int, self.subkeys)),
        )
        return np.random.Generator(np.random.Philox(ss))

    def substream(self, *keys) -> "RandomStream":
        return RandomStream(self.seed, self.stream_id, self.subkeys + tuple(int(k) for k in keys))


@dataclass
class MomentPair:
    """Surrogate mean vector and covariance matrix for one model index."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        p = self.mean.shape[0]
        if self.covariance.shape != (p, p):
            raise ValueError(f"covariance shape {self.covariance.shape} does not match mean length {p}")
        asym = np.max(np.abs(self.covariance - self.covariance.T))
        scale = max(np.max(np.abs(self.covariance)), np.finfo(float).tiny)
        if asym > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")

    @property
    def p(self):
        return self.mean.shape[0]


@dataclass
class MCEstimate:
    """Monte Carlo value with its standard error."""

    value: np.ndarray | float
    std_error: np.ndarray | float
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if np.any(np.asarray(self.std_error) < 0):
            raise ValueError("standard errors must be nonnegative")


def mc_estimate(samples, axis=0) -> MCEstimate:
    """Sample mean and its standard error along ``axis``."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[axis]
    mean = samples.mean(axis=axis)
    se = samples.std(axis=axis, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    return MCEstimate(mean, se, n)


@dataclass
class ObservationBatch:
    """``N`` observations of dimension ``p`` with their model indices."""

    observations: np.ndarray
    index: np.ndarray = field(default=None)

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.ndim != 2 or obs.shape[0] < 1:
            raise ValueError("observations must be a non-empty (N, p) array")
        if not np.all(np.isfinite(obs)):
            raise ValueError("observations must be finite")
        self.observations = obs
        if self.index is None:
            self.index = np.zeros(obs.shape[0], dtype=np.int64)
        self.index = np.asarray(self.index, dtype=np.int64).reshape(-1)
        if self.index.shape[0] != obs.shape[0]:
            raise ValueError("index length differs from number of observations")

    @property
    def N(self):
        return self.observations.shape[0]

    @property
    def p(self):
        return self.observations.shape[1]

    def subset(self, rows) -> "ObservationBatch":
        rows = np.atleast_1d(rows)
        return ObservationBatch(self.observations[rows], self.index[rows])

    def groups(self):
        """Yield ``(model_index, rows)`` for each distinct index, ascending."""
        order = np.argsort(self.index, kind="stable")
        idx = self.index[order]
        cuts = np.flatnonzero(np.diff(idx)) + 1
        for rows in np.split(order, cuts):
            yield int(self.index[rows[0]]), rows

    def to_csv(self, path):
        header = ["index"] + [f"x_{j + 1}" for j in range(self.p)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i, row in zip(self.index, self.observations):
                w.writerow([int(i)] + [format(float(v), ".17g") for v in row])

    @classmethod
    def from_csv(cls, path) -> "ObservationBatch":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if not header or header[0] != "index" or header[1:] != [f"x_{j + 1}" for j in range(len(header) - 1)]:
            raise ValueError(f"unexpected observation header {header}")
        data = np.array([[float(v) for v in r[1:]] for r in body])
        index = np.array([int(r[0]) for r in body], dtype=np.int64)
        return cls(data.reshape(len(body), len(header) - 1), index)


class MomentModel:
    """Interface for surrogate moment models.

    Subclasses set ``d`` and ``p`` and implement :meth:`moments`.  When they
    also implement :meth:`dmoments` analytically they should set
    ``derivative_mode = "analytic"``; the default falls back to central
    differences with step ``1e-5 * max(1, |theta_l|)``.
    """

    d: int = 1
    p: int = 1
    derivative_mode: str = "central"
    fd_rel_step: float = 1e-5

    def moments(self, theta, i) -> MomentPair:
        raise NotImplementedError

    def dmoments(self, theta, i, l):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        h = self.fd_rel_step * max(1.0, abs(theta[l]))
        tp, tm = theta.copy(), theta.copy()
        tp[l] += h
        tm[l] -= h
        mp, mm = self.moments(tp, i), self.moments(tm, i)
        return (mp.mean - mm.mean) / (2 * h), (mp.covariance - mm.covariance) / (2 * h)

    def dmoments_all(self, theta, i):
        """Stacked derivatives: ``(d, p)`` mean and ``(d, p, p)`` covariance."""
        parts = [self.dmoments(theta, i, l) for l in range(self.d)]
        return np.array([a for a, _ in parts]), np.array([b for _, b in parts])


def _group_stats(x):
    n = x.shape[0]
    xbar = x.mean(axis=0)
    centered = x - xbar
    return n, xbar, centered.T @ centered


def surrogate_loglik(model: MomentModel, theta, batch: ObservationBatch) -> float:
    """Sum over the batch of Gaussian surrogate log densities.

    Observations sharing a model index are reduced to their mean and
    scatter matrix, so the cost is one Cholesky factorization per index.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    total = 0.0
    for i, rows in batch.groups():
        mp = model.moments(theta, i)
        chol = cholesky_checked(mp.covariance, index=i, theta=theta)
        n, xbar, scatter = _group_stats(batch.observations[rows])
        dev = xbar - mp.mean
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        linv = scipy.linalg.solve_triangular(chol, np.eye(mp.p), lower=True)
        quad = np.sum((linv @ scatter) * linv) + n * np.sum((linv @ dev) ** 2)
        total += -0.5 * (n * (mp.p * LOG_2PI + logdet) + quad)
    return float(total)


def surrogate_loglik_grad(model: MomentModel, theta, batch: ObservationBatch) -> np.ndarray:
    """Gradient of :func:`surrogate_loglik` in ``theta`` (length ``d``).

    Per index with ``S`` the scatter about ``mu`` and ``P = Sigma^{-1}``:
    ``d_l = dmu_l' P sum(x - mu) - n/2 tr(P dS_l) + 1/2 tr(P dS_l P S)``.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    grad = np.zeros(model.d)
    for i, rows in batch.groups():
        mp = model.moments(theta, i)
        chol = cholesky_checked(mp.covariance, index=i, theta=theta)
        prec = scipy.linalg.cho_solve((chol, True), np.eye(mp.p))
        n, xbar, scatter = _group_stats(batch.observations[rows])
        dev = xbar - mp.mean
        s_mu = scatter + n * np.outer(dev, dev)
        w = prec @ s_mu @ prec
        dmu, dsig = model.dmoments_all(theta, i)
        grad += n * dmu @ (prec @ dev)
        grad += -0.5 * n * np.einsum("ab,lba->l", prec, dsig) + 0.5 * np.einsum("ab,lba->l", w, dsig)
    return grad


def exp_family_stats(x) -> np.ndarray:
    """Gaussian sufficient statistics ``(x, vec(x x'))``, row-major vec."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return np.concatenate([x, np.outer(x, x).ravel()])


def _psd_factor(cov):
    # symmetric square root; tolerates singular (e.g. zero) noise covariance
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    if w.size and w[0] < -1e-12 * max(1.0, abs(w[-1])):
        raise NotPositiveDefiniteError("noise covariance has a negative eigenvalue", min_eigenvalue=float(w[0]))
    return v * np.sqrt(np.clip(w, 0.0, None))


def sample_observations(generator: Callable, theta0, N: int, stream: RandomStream,
                        noise_cov=None, index=None) -> ObservationBatch:
    """Draw ``X_i = eta_i(f_i) + gamma_i`` for ``i`` in ``index``.

    ``generator(theta0, index, rng)`` returns the ``(N, p)`` noiseless
    forward-map values for fresh latent draws.  ``noise_cov`` is either a
    ``(p, p)`` matrix shared by all indices or a callable ``i -> (p, p)``;
    singular matrices (including zero) are accepted here.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    index = np.zeros(N, dtype=np.int64) if index is None else np.asarray(index, dtype=np.int64)
    if index.shape[0] != N:
        raise ValueError("index length must equal N")
    rng_latent = stream.substream(0).generator()
    rng_noise = stream.substream(1).generator()
    eta = np.atleast_2d(np.asarray(generator(theta0, index, rng_latent), dtype=float))
    if eta.shape[0] != N:
        eta = eta.reshape(N, -1)
    if not np.all(np.isfinite(eta)):
        raise FloatingPointError("latent generator produced non-finite values")
    p = eta.shape[1]
    xi = rng_noise.standard_normal((N, p))
    if noise_cov is None:
        noise = np.zeros_like(eta)
    elif callable(noise_cov):
        noise = np.stack([_psd_factor(noise_cov(int(i))) @ z for i, z in zip(index, xi)])
    else:
        noise = xi @ _psd_factor(noise_cov).T
    return ObservationBatch(eta + noise, index)
