"""Nested Monte Carlo estimate of the true Fisher information.

Given the latent draw ``f`` the observation is ``N(eta_theta(f), Lambda)``,
so the marginal score is a ratio of latent averages,

    s(x) = E_f[dp_{theta,f}(x)] / E_f[p_{theta,f}(x)],

estimated with ``n_inner`` latent draws (weights handled in log domain) and
squared-averaged over ``n_outer`` observations from the true model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._backend import get_kernels
from .model_core import MCEstimate, NotPositiveDefiniteError, RandomStream, cholesky_checked
from .square_integral import jackknife_se, path_functionals, _bm_paths

__all__ = [
    "FisherSettings",
    "FisherResult",
    "TooManyDropsError",
    "SquareIntLatent",
    "LinearToyLatent",
    "ConstantLatent",
    "conditional_density_and_dtheta",
    "true_fisher_mc",
]

MAX_DROP_FRACTION = 0.01


class TooManyDropsError(RuntimeError):
    pass


@dataclass
class FisherSettings:
    n_outer: int = 10_000
    n_inner: int = 10_000
    derivative_mode: str = "analytic"
    shared_inner: bool = True
    fd_rel_step: float = 1e-5

    def __post_init__(self):
        if self.n_outer < 2 or self.n_inner < 2:
            raise ValueError("n_outer and n_inner must be at least 2")
        if self.derivative_mode not in ("analytic", "central"):
            raise ValueError(f"unknown derivative mode {self.derivative_mode!r}")


@dataclass
class SquareIntLatent:
    """Brownian latent for the square-integral map, observed through ``p`` coefficients."""

    z: float = 1.0
    n_steps: int = 1000
    p: int = 1
    d: int = 1
    chunk: int = 4096

    def draw(self, n, stream: RandomStream):
        rng = stream.generator()
        out = np.empty((n, 3, self.p))
        for s in range(0, n, self.chunk):
            m = min(self.chunk, n - s)
            F2, F1, F0 = path_functionals(_bm_paths(self.z, self.n_steps, m, rng), self.z, self.n_steps, self.p)
            out[s:s + m, 0], out[s:s + m, 1], out[s:s + m, 2] = F2, F1, F0
        return out

    def eta(self, state, theta):
        t = float(np.atleast_1d(theta)[0])
        return state[:, 0] - 2 * t * state[:, 1] + t * t * state[:, 2]

    def deta(self, state, theta):
        t = float(np.atleast_1d(theta)[0])
        return (-2 * state[:, 1] + 2 * t * state[:, 2])[:, :, None]


@dataclass
class LinearToyLatent:
    """``eta_theta(f) = theta + f`` with scalar ``f ~ N(0, 1)``."""

    p: int = 1
    d: int = 1

    def draw(self, n, stream: RandomStream):
        return stream.generator().standard_normal((n, self.p))

    def eta(self, state, theta):
        return state + float(np.atleast_1d(theta)[0])

    def deta(self, state, theta):
        return np.ones((state.shape[0], self.p, 1))


@dataclass
class ConstantLatent:
    """Forward map that ignores ``theta``: ``eta(f) = f``."""

    p: int = 1
    d: int = 1

    def draw(self, n, stream: RandomStream):
        return stream.generator().standard_normal((n, self.p))

    def eta(self, state, theta):
        return state.copy()

    def deta(self, state, theta):
        return np.zeros((state.shape[0], self.p, self.d))


def _deta(latent, state, theta, mode, rel_step):
    if mode == "analytic":
        return latent.deta(state, theta)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    cols = []
    for l in range(latent.d):
        h = rel_step * max(1.0, abs(theta[l]))
        tp, tm = theta.copy(), theta.copy()
        tp[l] += h
        tm[l] -= h
        cols.append((latent.eta(state, tp) - latent.eta(state, tm)) / (2 * h))
    return np.stack(cols, axis=-1)


def conditional_density_and_dtheta(x, state, theta, latent, Lambda, derivative_mode="analytic",
                                   rel_step=1e-5):
    """Density of ``x`` given one latent draw and its theta-gradient.

    ``state`` is a single latent draw as produced by ``latent.draw`` (leading
    axis of length one).
    """
    chol = cholesky_checked(np.atleast_2d(Lambda))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    eta = latent.eta(state, theta)[0]
    deta = _deta(latent, state, theta, derivative_mode, rel_step)[0]
    r = x - eta
    z = scipy.linalg.solve_triangular(chol, r, lower=True)
    logp = -0.5 * z @ z - np.sum(np.log(np.diag(chol))) - 0.5 * x.size * np.log(2 * np.pi)
    dens = float(np.exp(logp))
    pr = scipy.linalg.cho_solve((chol, True), r)
    return dens, dens * (deta.T @ pr)


@dataclass
class FisherResult:
    estimate: MCEstimate
    n_dropped: int
    scores: np.ndarray

    @property
    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(0.5 * (self.estimate.value + self.estimate.value.T))[0])


def _scores(kern, x, eta_in, deta_in, prec):
    n = x.shape[0]
    d = deta_in.shape[2]
    score = np.empty((n, d))
    log_mean = np.empty(n)
    kern.mixture_scores(np.ascontiguousarray(x), np.ascontiguousarray(eta_in),
                        np.ascontiguousarray(deta_in), np.ascontiguousarray(prec), score, log_mean)
    return score, log_mean


def true_fisher_mc(latent, theta0, settings: FisherSettings, stream: RandomStream, Lambda,
                   backend=None) -> FisherResult:
    """Nested Monte Carlo Fisher information at ``theta0``.

    Observations whose inner likelihood average is not finite are dropped
    and counted; more than 1% drops raises :class:`TooManyDropsError`.
    """
    kern = get_kernels(backend)
    Lambda = np.atleast_2d(np.asarray(Lambda, dtype=float))
    try:
        chol = cholesky_checked(Lambda)
    except NotPositiveDefiniteError as exc:
        raise NotPositiveDefiniteError(f"noise covariance: {exc}") from exc
    prec = scipy.linalg.cho_solve((chol, True), np.eye(Lambda.shape[0]))
    prec = 0.5 * (prec + prec.T)
    outer_state = latent.draw(settings.n_outer, stream.substream(1))
    x = latent.eta(outer_state, theta0)
    x = x + stream.substream(2).generator().standard_normal(x.shape) @ chol.T
    mode, h = settings.derivative_mode, settings.fd_rel_step
    if settings.shared_inner:
        inner = latent.draw(settings.n_inner, stream.substream(0))
        score, log_mean = _scores(kern, x, latent.eta(inner, theta0), _deta(latent, inner, theta0, mode, h), prec)
    else:
        score = np.empty((settings.n_outer, latent.d))
        log_mean = np.empty(settings.n_outer)
        for o in range(settings.n_outer):
            inner = latent.draw(settings.n_inner, stream.substream(3, o))
            s, lm = _scores(kern, x[o:o + 1], latent.eta(inner, theta0), _deta(latent, inner, theta0, mode, h), prec)
            score[o], log_mean[o] = s[0], lm[0]
    ok = np.isfinite(log_mean) & np.all(np.isfinite(score), axis=1)
    dropped = int(np.count_nonzero(~ok))
    if dropped > MAX_DROP_FRACTION * settings.n_outer:
        raise TooManyDropsError(f"{dropped} of {settings.n_outer} observations had a degenerate inner average; "
                                "increase n_inner")
    s = score[ok]
    outer = s[:, :, None] * s[:, None, :]
    value = outer.mean(axis=0)
    se = jackknife_se(outer, lambda a: a.mean(axis=0))
    return FisherResult(MCEstimate(0.5 * (value + value.T), se, int(s.shape[0])), dropped, score)
