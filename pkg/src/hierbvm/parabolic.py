"""Parabolic problems with a source term via Feynman-Kac and Euler-Maruyama.

For ``t < t_max`` and ``x`` in an open box ``O``,

    u(t, x) = E[ g(tau', X_tau') exp(-int_t^tau' c(X_s) ds)
                 + int_t^tau' f(X_s) exp(-int_t^s c(X_v) dv) ds ],

with ``tau' = min(exit time of O, t_max)`` and ``dX = b dt + sigma dW``,
``sigma sigma' = a``.  The theta-derivatives are taken pathwise on the same
Brownian increments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .legendre import LegendreBasis, trapezoid_weights
from .model_core import MCEstimate, MomentModel, MomentPair, ObservationBatch, RandomStream, sample_observations

__all__ = [
    "ParabolicSpec",
    "DiffusionPath",
    "BOUNDARY",
    "TERMINAL",
    "euler_maruyama_path",
    "fk_parabolic",
    "fk_parabolic_paths",
    "ParabolicSettings",
    "eta_coeffs_parabolic",
    "reference_spec",
    "BrownianExpField",
    "ParabolicMomentModel",
    "moment_model_parabolic",
    "sample_data_parabolic",
]

BOUNDARY, TERMINAL = "boundary", "terminal"
DEFAULT_STEP_CAP = 10_000_000


def _zero_source(x):
    return np.zeros(x.shape[0])


@dataclass
class ParabolicSpec:
    """Coefficients of the parabolic problem on the box ``(lower, upper)``.

    ``a`` is a constant ``(q, q)`` matrix or a callable ``x -> (n, q, q)``;
    ``b(x) -> (n, q)``; ``c(x, theta) -> (n,)`` with gradient
    ``dc(x, theta) -> (n, d)``; ``g(t, x, theta) -> (n,)`` with gradient
    ``dg``; ``source(x) -> (n,)`` is the default source term.
    """

    lower: np.ndarray
    upper: np.ndarray
    t_max: float
    a: object
    b: Callable
    c: Callable
    dc: Callable
    g: Callable
    dg: Callable
    source: Callable = _zero_source
    t_points: tuple = ()
    d: int = 1
    ellipticity: tuple = (1e-8, 1e8)
    allow_degenerate: bool = False

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape or np.any(self.upper <= self.lower):
            raise ValueError("domain must be a nonempty open box")
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        for t in self.t_points:
            if not 0 < t < self.t_max:
                raise ValueError(f"observation time {t} outside (0, t_max)")
        self._sigma = None
        if not callable(self.a):
            a = np.atleast_2d(np.asarray(self.a, dtype=float))
            if a.shape != (self.q, self.q):
                raise ValueError("diffusion matrix must be q x q")
            self._check_a(a[None])
            self._sigma = np.zeros_like(a) if not np.any(a) else np.linalg.cholesky(a)

    @property
    def q(self):
        return self.lower.size

    def _check_a(self, a):
        if self.allow_degenerate and not np.any(a):
            return
        if np.any(np.abs(a - np.swapaxes(a, -1, -2)) > 1e-12 * max(1.0, np.abs(a).max())):
            raise ValueError("diffusion matrix must be symmetric")
        ev = np.linalg.eigvalsh(a)
        lo, hi = self.ellipticity
        if ev.min() < lo or ev.max() > hi:
            raise ValueError(f"diffusion eigenvalues outside [{lo}, {hi}]")

    def sigma_times(self, x, xi):
        if self._sigma is not None:
            return xi @ self._sigma.T
        a = np.asarray(self.a(x), dtype=float)
        self._check_a(a)
        return np.einsum("nij,nj->ni", np.linalg.cholesky(a), xi)


@dataclass
class DiffusionPath:
    times: np.ndarray
    states: np.ndarray
    exit_flag: str
    exit_time: float
    exit_point: np.ndarray


def _crossing(x, nx, lo, hi):
    # fraction of the step spent inside the box, per walker
    with np.errstate(divide="ignore", invalid="ignore"):
        f_lo = np.where(nx <= lo, (lo - x) / (nx - x), 1.0)
        f_hi = np.where(nx >= hi, (hi - x) / (nx - x), 1.0)
    return np.minimum(f_lo, f_hi).min(axis=1)


@dataclass
class _Run:
    payoff: np.ndarray
    dpayoff: np.ndarray
    discount: np.ndarray
    exit_flag: np.ndarray
    exit_time: np.ndarray
    exit_point: np.ndarray
    path: list = field(default_factory=list)


def _simulate(x0, t0, spec: ParabolicSpec, theta, dt, rng, source=None, record=False,
              step_cap=DEFAULT_STEP_CAP):
    """Vectorized Euler-Maruyama with Feynman-Kac weights and their theta-gradients."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n, q = x0.shape
    if q != spec.q:
        raise ValueError("start points have wrong dimension")
    if np.any(x0 <= spec.lower) or np.any(x0 >= spec.upper):
        raise ValueError("start points must be interior")
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (n,)).copy()
    if np.any(t0 > spec.t_max):
        raise ValueError("start time beyond t_max")
    source = spec.source if source is None else source
    d = spec.d
    nsteps = np.maximum(np.rint((spec.t_max - t0) / dt).astype(np.int64), 0)
    nsteps[(nsteps == 0) & (t0 < spec.t_max)] = 1
    if nsteps.max(initial=0) > step_cap:
        raise RuntimeError(f"path needs {nsteps.max()} steps, above the cap {step_cap}")
    h = np.where(nsteps > 0, (spec.t_max - t0) / np.maximum(nsteps, 1), 0.0)
    pos = x0.copy()
    t = t0.copy()
    log_d = np.zeros(n)
    dlog_d = np.zeros((n, d))
    src = np.zeros(n)
    dsrc = np.zeros((n, d))
    exit_flag = np.full(n, TERMINAL, dtype=object)
    exit_time = np.full(n, float(spec.t_max))
    exit_point = x0.copy()
    alive = nsteps > 0
    path = [x0[0].copy()] if record else []
    k = 0
    while True:
        act = np.flatnonzero(alive)
        if act.size == 0:
            break
        x = pos[act]
        hh = h[act]
        w = np.exp(log_d[act]) * hh
        fx = np.asarray(source(x), dtype=float)
        if np.any(~np.isfinite(fx)):
            raise FloatingPointError("non-finite source value")
        src[act] += fx * w
        dsrc[act] += (fx * w)[:, None] * dlog_d[act]
        log_d[act] -= np.asarray(spec.c(x, theta), dtype=float) * hh
        dlog_d[act] -= np.asarray(spec.dc(x, theta), dtype=float).reshape(act.size, d) * hh[:, None]
        xi = rng.standard_normal((act.size, q))
        nx = x + np.asarray(spec.b(x), dtype=float) * hh[:, None] + spec.sigma_times(x, xi) * np.sqrt(hh)[:, None]
        if not np.all(np.isfinite(nx)):
            raise FloatingPointError("non-finite diffusion state")
        out = np.any((nx <= spec.lower) | (nx >= spec.upper), axis=1)
        if out.any():
            frac = _crossing(x[out], nx[out], spec.lower, spec.upper)
            ep = np.clip(x[out] + frac[:, None] * (nx[out] - x[out]), spec.lower, spec.upper)
            nx[out] = ep
            gone = act[out]
            exit_flag[gone] = BOUNDARY
            exit_time[gone] = t[gone] + frac * hh[out]
            exit_point[gone] = ep
            alive[gone] = False
        pos[act] = nx
        t[act] = t[act] + hh
        k += 1
        done = act[~out & (k >= nsteps[act])]
        exit_point[done] = pos[done]
        alive[done] = False
        if record:
            path.append(nx[0].copy())
    disc = np.exp(log_d)
    gval = np.asarray(spec.g(exit_time, exit_point, theta), dtype=float)
    dgval = np.asarray(spec.dg(exit_time, exit_point, theta), dtype=float).reshape(n, d)
    payoff = gval * disc + src
    dpayoff = dgval * disc[:, None] + (gval * disc)[:, None] * dlog_d + dsrc
    return _Run(payoff, dpayoff, disc, exit_flag, exit_time, exit_point, path)


def euler_maruyama_path(x0, t0, spec: ParabolicSpec, dt, stream: RandomStream, theta=0.0) -> DiffusionPath:
    """Single path from ``(t0, x0)`` until it leaves the box or reaches ``t_max``."""
    run = _simulate(np.atleast_2d(x0), t0, spec, theta, dt, stream.generator(), record=True)
    states = np.array(run.path)
    n_steps = states.shape[0] - 1
    times = np.full(n_steps + 1, float(t0))
    if n_steps:
        h = (spec.t_max - t0) / max(1, round((spec.t_max - t0) / dt))
        times = t0 + h * np.arange(n_steps + 1)
        times[-1] = min(times[-1], run.exit_time[0])
    return DiffusionPath(times, states, run.exit_flag[0], float(run.exit_time[0]), run.exit_point[0])


def fk_parabolic_paths(t, x0, spec: ParabolicSpec, theta, n_paths, dt, stream: RandomStream, source=None):
    """Per-path Feynman-Kac payoffs and their theta-gradients."""
    starts = np.repeat(np.atleast_2d(np.asarray(x0, dtype=float)), n_paths, axis=0)
    run = _simulate(starts, t, spec, theta, dt, stream.generator(), source=source)
    return run.payoff, run.dpayoff


def fk_parabolic(t, x0, spec: ParabolicSpec, theta, n_paths, dt, stream: RandomStream, source=None) -> MCEstimate:
    vals, _ = fk_parabolic_paths(t, x0, spec, theta, n_paths, dt, stream, source)
    se = vals.std(ddof=1) / np.sqrt(n_paths) if n_paths > 1 else 0.0
    return MCEstimate(float(vals.mean()), float(se), n_paths)


@dataclass
class BrownianExpField:
    """``f(x) = exp(B(x))`` on a uniform grid of ``[0, 1]``, linearly interpolated."""

    values: np.ndarray

    @classmethod
    def sample(cls, rng, n=100):
        b = np.zeros(n)
        b[1:] = np.cumsum(rng.standard_normal(n - 1) * np.sqrt(1.0 / (n - 1)))
        return cls(np.exp(b))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        pts = x[:, 0] if x.ndim == 2 else x
        return np.interp(pts, np.linspace(0.0, 1.0, self.values.size), self.values)


def _th(theta):
    return float(np.atleast_1d(theta)[0])


def reference_spec(t_points=5, t_max=0.5) -> ParabolicSpec:
    """1-D instance: ``a = 1``, ``b = 0``, ``c = theta^2``, ``g = 1 + theta x`` on ``(0, 1)``."""
    times = tuple(np.linspace(0.05, 0.45, t_points)) if t_points > 1 else (0.25,)
    return ParabolicSpec(
        lower=[0.0], upper=[1.0], t_max=t_max, a=np.eye(1),
        b=lambda x: np.zeros_like(x),
        c=lambda x, th: np.full(x.shape[0], _th(th) ** 2),
        dc=lambda x, th: np.full((x.shape[0], 1), 2.0 * _th(th)),
        g=lambda t, x, th: 1.0 + _th(th) * x[:, 0],
        dg=lambda t, x, th: x[:, :1].copy(),
        t_points=times,
    )


@dataclass
class ParabolicSettings:
    dt: float = 1e-3
    paths_per_node: int = 200
    quad_grid: int = 21
    n_fields: int = 100
    p: int = 3
    lambda_scale: float = 0.01
    grid_n: int = 100

    @property
    def Lambda(self):
        return self.lambda_scale * np.eye(self.p)


def _node_values(spec, theta, t_list, source, settings, rng):
    """``u`` and ``du/dtheta`` on the quadrature grid for each time in ``t_list``."""
    if spec.q != 1:
        raise NotImplementedError("projection is implemented for one space dimension")
    m = settings.quad_grid
    xs = np.linspace(spec.lower[0], spec.upper[0], m)
    inner = np.arange(1, m - 1)
    P = settings.paths_per_node
    T = len(t_list)
    starts = np.tile(np.repeat(xs[inner], P), T)[:, None]
    t0 = np.repeat(np.asarray(t_list, dtype=float), inner.size * P)
    run = _simulate(starts, t0, spec, theta, settings.dt, rng, source=source)
    pay = run.payoff.reshape(T, inner.size, P)
    dpay = run.dpayoff.reshape(T, inner.size, P, spec.d)
    u = np.empty((T, m))
    du = np.empty((T, m, spec.d))
    se = np.zeros((T, m))
    u[:, inner] = pay.mean(axis=2)
    du[:, inner] = dpay.mean(axis=2)
    se[:, inner] = pay.std(axis=2, ddof=1) / np.sqrt(P) if P > 1 else 0.0
    edge = np.array([0, m - 1])
    for k, tk in enumerate(t_list):
        pts = xs[edge][:, None]
        tt = np.full(2, float(tk))
        u[k, edge] = spec.g(tt, pts, theta)
        du[k, edge] = np.asarray(spec.dg(tt, pts, theta), dtype=float).reshape(2, spec.d)
    return xs, u, du, se


def _projector(spec, settings):
    L = spec.upper[0] - spec.lower[0]
    basis = LegendreBasis(settings.p - 1, L)
    xs = np.linspace(0.0, L, settings.quad_grid)
    w = trapezoid_weights(settings.quad_grid, L)
    return np.array([basis.evaluate(j, xs) * w for j in range(settings.p)])


def eta_coeffs_parabolic(source, spec: ParabolicSpec, theta, i, settings: ParabolicSettings,
                         stream: RandomStream, return_nodes=False):
    """First ``p`` Legendre coefficients of ``u_theta(t_i, .)``."""
    if not 0 <= i < len(spec.t_points):
        raise IndexError(f"no observation time with index {i}")
    xs, u, du, se = _node_values(spec, theta, [spec.t_points[i]], source, settings, stream.generator())
    E = _projector(spec, settings)
    coeffs = E @ u[0]
    if return_nodes:
        return coeffs, xs, u[0], se[0]
    return coeffs


class ParabolicMomentModel(MomentModel):
    """Monte Carlo moments per observation time over cached latent fields.

    Every evaluation at a new ``theta`` reruns the walks from the same
    sub-streams, so moments are smooth in ``theta`` and the pathwise
    derivatives are exact derivatives of the estimator.
    """

    derivative_mode = "analytic"

    def __init__(self, spec: ParabolicSpec | None = None, settings: ParabolicSettings | None = None,
                 stream: RandomStream | None = None, field_sampler=None, Lambda=None):
        self.spec = spec or reference_spec()
        self.settings = settings or ParabolicSettings()
        self.stream = stream or RandomStream(0)
        self.field_sampler = field_sampler or (lambda rng: BrownianExpField.sample(rng, self.settings.grid_n))
        self.d = self.spec.d
        self.p = self.settings.p
        self.Lambda = self.settings.Lambda if Lambda is None else np.atleast_2d(Lambda)
        self._E = _projector(self.spec, self.settings)
        self._fields = [self.field_sampler(self.stream.substream(0, k).generator())
                        for k in range(self.settings.n_fields)]
        self._cache = {}

    def _eval(self, theta):
        key = tuple(np.atleast_1d(np.asarray(theta, dtype=float)).tolist())
        if key not in self._cache:
            T = len(self.spec.t_points)
            F = len(self._fields)
            eta = np.empty((T, F, self.p))
            deta = np.empty((T, F, self.p, self.d))
            for k, fld in enumerate(self._fields):
                rng = self.stream.substream(1, k).generator()
                _, u, du, _ = _node_values(self.spec, theta, self.spec.t_points, fld, self.settings, rng)
                eta[:, k] = u @ self._E.T
                deta[:, k] = np.einsum("jm,tml->tjl", self._E, du)
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = (eta, deta)
        return self._cache[key]

    def samples(self, theta):
        """Per-field coefficients ``(T, F, p)`` and their derivatives ``(T, F, p, d)``."""
        return self._eval(theta)

    def moments(self, theta, i=0):
        e = self._eval(theta)[0][i]
        cov = np.atleast_2d(np.cov(e, rowvar=False))
        return MomentPair(e.mean(axis=0), 0.5 * (cov + cov.T) + self.Lambda)

    def dmoments(self, theta, i=0, l=0):
        eta, deta = self._eval(theta)
        e, de = eta[i], deta[i, :, :, l]
        ec = e - e.mean(axis=0)
        dc = de - de.mean(axis=0)
        c = ec.T @ dc / (e.shape[0] - 1)
        return de.mean(axis=0), c + c.T

    def estimates(self, theta, i=0):
        eta, deta = self._eval(theta)
        n = eta.shape[1]
        return (MCEstimate(eta[i].mean(axis=0), eta[i].std(axis=0, ddof=1) / np.sqrt(n), n),
                MCEstimate(deta[i].mean(axis=0), deta[i].std(axis=0, ddof=1) / np.sqrt(n), n))


def moment_model_parabolic(spec=None, field_sampler=None, settings=None, stream=None, Lambda=None):
    return ParabolicMomentModel(spec, settings, stream, field_sampler, Lambda)


def sample_data_parabolic(theta0, N, spec: ParabolicSpec, settings: ParabolicSettings, stream: RandomStream,
                          index=None, field_sampler=None) -> ObservationBatch:
    """Observations at the declared times; ``index`` defaults to cycling through them."""
    T = len(spec.t_points)
    index = np.arange(N) % T if index is None else np.asarray(index)
    sampler = field_sampler or (lambda rng: BrownianExpField.sample(rng, settings.grid_n))
    E = _projector(spec, settings)
    latent = stream.substream(2)

    def gen(theta, idx, rng):
        out = np.empty((len(idx), settings.p))
        for k, i in enumerate(idx):
            r = latent.substream(k).generator()
            fld = sampler(r)
            _, u, _, _ = _node_values(spec, theta, [spec.t_points[int(i)]], fld, settings, r)
            out[k] = E @ u[0]
        return out

    return sample_observations(gen, theta0, N, stream, noise_cov=settings.Lambda, index=index)
