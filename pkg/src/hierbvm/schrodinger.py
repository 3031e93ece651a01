"""Stationary Schrodinger problem on the unit square via Feynman-Kac.

``Delta u - 2 f u = 0`` in ``(0, 1)^2`` with ``u = g_theta`` on the boundary
has ``u(x) = E[g_theta(B_tau) exp(-int_0^tau f(B_s) ds)]`` for a standard
planar Brownian motion started at ``x``.

Boundary data are written as ``g_theta = sum_c coef_c(theta) phi_c``, so a
single set of walks per field serves every ``theta`` and the theta-derivative
reuses the same paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._backend import get_kernels
from ._kernels_py import _bilinear
from .legendre import TensorLegendreBasis, trapezoid_weights
from .square_integral import jackknife_se
from .model_core import MCEstimate, MomentModel, MomentPair, ObservationBatch, RandomStream, sample_observations

__all__ = [
    "Field2D",
    "sample_field",
    "BoundaryFn",
    "default_boundary",
    "StepCapExceeded",
    "WalkResult",
    "walk_unit_square",
    "fk_solution_at",
    "SchrodingerSettings",
    "quadrature_nodes",
    "field_components",
    "eta_coeffs",
    "SchrodingerLatent",
    "sample_data_schrodinger",
    "SchrodingerMomentModel",
    "mc_moment_model",
]

# exp(-x) underflows to zero in double precision beyond this level
KILL_LEVEL = 746.0
DEFAULT_STEP_CAP = 10_000_000


class StepCapExceeded(RuntimeError):
    pass


@dataclass
class Field2D:
    """Potential on a uniform ``n x n`` grid of ``[0, 1]^2``; ``values[i, j] = f(x_i, y_j)``."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=float)
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] < 2:
            raise ValueError("field must be a square grid with n >= 2")
        if not np.all(v >= 0) or not np.all(np.isfinite(v)):
            raise ValueError("potential must be finite and nonnegative")

    @property
    def n(self):
        return self.values.shape[0]

    @classmethod
    def constant(cls, c, n=2):
        return cls(np.full((n, n), float(c)))

    def __call__(self, x, y):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        owner = np.zeros(x.shape, dtype=np.int64)
        return _bilinear(self.values[None], owner, x, y)


def _brownian_on_grid(n, rng):
    b = np.zeros(n)
    b[1:] = np.cumsum(rng.standard_normal(n - 1) * np.sqrt(1.0 / (n - 1)))
    return b


def sample_field(stream: RandomStream | np.random.Generator, n=100) -> Field2D:
    """``f(x, y) = exp(2 B1(x) + 3 B2(y))`` for independent Brownian motions on ``[0, 1]``."""
    if n < 2:
        raise ValueError("grid needs n >= 2")
    rng = stream.generator() if isinstance(stream, RandomStream) else stream
    b1 = _brownian_on_grid(n, rng)
    b2 = _brownian_on_grid(n, rng)
    return Field2D(np.exp(2.0 * b1[:, None] + 3.0 * b2[None, :]))


@dataclass
class BoundaryFn:
    """``g_theta(x, y) = sum_c coef(theta)[c] * components[c](x, y)``.

    ``dcoef(theta)`` returns the ``(d, C)`` Jacobian of the coefficients.
    """

    components: Sequence[Callable]
    coef: Callable
    dcoef: Callable
    d: int = 1

    @property
    def n_components(self):
        return len(self.components)

    def basis_values(self, x, y):
        return np.array([np.broadcast_to(c(x, y), np.shape(x)) for c in self.components], dtype=float)

    def __call__(self, x, y, theta):
        return np.tensordot(np.asarray(self.coef(theta), dtype=float), self.basis_values(x, y), axes=1)

    def dtheta(self, x, y, theta):
        return np.tensordot(np.atleast_2d(self.dcoef(theta)), self.basis_values(x, y), axes=1)


def _scalar(theta):
    return float(np.atleast_1d(theta)[0])


def default_boundary() -> BoundaryFn:
    """``g_theta(x, y) = (x - 1/2)^2 + theta^2 y``."""
    return BoundaryFn(
        components=[lambda x, y: (x - 0.5) ** 2, lambda x, y: y],
        coef=lambda t: np.array([1.0, _scalar(t) ** 2]),
        dcoef=lambda t: np.array([[0.0, 2.0 * _scalar(t)]]),
    )


@dataclass
class WalkResult:
    exit_pos: np.ndarray
    discount: np.ndarray
    steps: np.ndarray


def walk_unit_square(starts, fields, owner, dt, rng, block=256, step_cap=DEFAULT_STEP_CAP, backend=None,
                     kill_level=KILL_LEVEL):
    """Run Brownian walkers from ``starts`` until they leave ``(0, 1)^2``.

    ``fields`` is an ``(F, m, m)`` stack and ``owner[w]`` picks the potential
    of walker ``w``.  The discount is ``exp(-int f)`` with the left-endpoint
    rule; walkers whose integral passes ``kill_level`` (default: the
    underflow level) stop early with discount zero.  With
    ``kill_level=inf`` the paths depend on the random draws only, which
    couples runs on different potentials.
    """
    kern = get_kernels(backend)
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    n = starts.shape[0]
    if np.any(starts <= 0.0) or np.any(starts >= 1.0):
        raise ValueError("start points must be interior")
    if dt <= 0:
        raise ValueError("dt must be positive")
    fields = np.ascontiguousarray(fields, dtype=float)
    if fields.ndim == 2:
        fields = fields[None]
    owner = np.ascontiguousarray(np.broadcast_to(owner, (n,)), dtype=np.int64)
    pos = starts.copy()
    integral = np.zeros(n)
    state = np.zeros(n, dtype=np.int8)
    exit_pos = np.full((n, 2), np.nan)
    steps = np.zeros(n, dtype=np.int64)
    sqrt_dt = float(np.sqrt(dt))
    alive = np.arange(n)
    while alive.size:
        if steps[alive].max() >= step_cap:
            raise StepCapExceeded(f"{alive.size} walkers still inside after {step_cap} steps")
        # compact the live walkers so that draws only go to them
        p_pos = np.ascontiguousarray(pos[alive])
        p_int = np.ascontiguousarray(integral[alive])
        p_state = np.zeros(alive.size, dtype=np.int8)
        p_exit = np.full((alive.size, 2), np.nan)
        p_steps = np.ascontiguousarray(steps[alive])
        normals = rng.standard_normal((alive.size, block, 2))
        kern.advance_square(p_pos, p_int, p_state, p_exit, p_steps, owner[alive], fields,
                            normals, sqrt_dt, float(dt), float(kill_level))
        pos[alive] = p_pos
        integral[alive] = p_int
        state[alive] = p_state
        exit_pos[alive] = p_exit
        steps[alive] = p_steps
        alive = alive[p_state == 0]
    with np.errstate(under="ignore"):
        discount = np.where(state == 1, np.exp(-integral), 0.0)
    return WalkResult(exit_pos, discount, steps)


def fk_solution_at(x0, field: Field2D, g: BoundaryFn, theta, n_paths, dt, stream: RandomStream,
                   step_cap=DEFAULT_STEP_CAP) -> MCEstimate:
    """Monte Carlo estimate of ``u_theta(x0)``."""
    x0 = np.asarray(x0, dtype=float)
    starts = np.broadcast_to(x0, (n_paths, 2))
    res = walk_unit_square(starts, field.values, 0, dt, stream.generator(), step_cap=step_cap)
    vals = g(res.exit_pos[:, 0], res.exit_pos[:, 1], theta) * res.discount
    # killed walkers carry no exit point; their contribution is exactly zero
    vals = np.where(res.discount > 0, vals, 0.0)
    se = vals.std(ddof=1) / np.sqrt(n_paths) if n_paths > 1 else 0.0
    return MCEstimate(float(vals.mean()), float(se), n_paths)


@dataclass
class SchrodingerSettings:
    grid_n: int = 100
    dt: float = 1e-4
    paths_per_node: int = 2000
    quad_grid: int = 21
    n_fields: int = 100
    p: int = 1
    lambda_scale: float = 0.01
    block: int = 256

    def __post_init__(self):
        if not 1 <= self.p <= 16:
            raise ValueError("p must lie in 1..16")
        if self.quad_grid < 3:
            raise ValueError("quadrature grid needs at least 3 nodes per axis")

    @property
    def Lambda(self):
        return self.lambda_scale * np.eye(self.p)


def quadrature_nodes(m):
    """Nodes and 2-D trapezoid weights of the ``m x m`` grid, plus an interior mask."""
    t = np.linspace(0.0, 1.0, m)
    X, Y = np.meshgrid(t, t, indexing="ij")
    w1 = trapezoid_weights(m, 1.0)
    W = np.outer(w1, w1)
    interior = (X > 0) & (X < 1) & (Y > 0) & (Y < 1)
    return X.ravel(), Y.ravel(), W.ravel(), interior.ravel()


def field_components(fields, g: BoundaryFn, basis: TensorLegendreBasis, settings: SchrodingerSettings,
                     rng, return_nodes=False):
    """Projections ``M[f, k, c]`` of the component solutions onto the basis.

    ``u_theta = sum_c coef_c(theta) U_c`` where ``U_c`` solves the problem
    with boundary data ``phi_c``; interior values of ``U_c`` come from walks,
    boundary nodes take ``phi_c`` exactly.  ``eta_theta(f) = M[f] @ coef``.
    """
    fields = np.asarray(fields, dtype=float)
    if fields.ndim == 2:
        fields = fields[None]
    F = fields.shape[0]
    X, Y, W, inner = quadrature_nodes(settings.quad_grid)
    E = basis.matrix(X, Y) * W  # (p, nodes)
    n_in = int(inner.sum())
    P = settings.paths_per_node
    starts = np.repeat(np.column_stack([X[inner], Y[inner]]), P, axis=0)
    C = g.n_components
    M = np.empty((F, basis.p, C))
    U_all = np.empty((F, C, X.size)) if return_nodes else None
    U_se = np.empty((F, C, X.size)) if return_nodes else None
    phi_b = g.basis_values(X[~inner], Y[~inner])
    for f in range(F):
        res = walk_unit_square(starts, fields[f], 0, settings.dt, rng, block=settings.block)
        ok = res.discount > 0
        ex = np.where(ok[:, None], res.exit_pos, 0.5)
        vals = g.basis_values(ex[:, 0], ex[:, 1]) * np.where(ok, res.discount, 0.0)  # (C, n_in * P)
        vals = vals.reshape(C, n_in, P)
        U = np.empty((C, X.size))
        U[:, inner] = vals.mean(axis=2)
        U[:, ~inner] = phi_b
        M[f] = E @ U.T
        if return_nodes:
            U_all[f] = U
            se = np.zeros((C, X.size))
            se[:, inner] = vals.std(axis=2, ddof=1) / np.sqrt(P)
            U_se[f] = se
    if return_nodes:
        return M, U_all, U_se
    return M


def eta_coeffs(field: Field2D, g: BoundaryFn, theta, settings: SchrodingerSettings, stream: RandomStream,
               basis: TensorLegendreBasis | None = None, return_nodes=False):
    """First ``p`` tensor-Legendre coefficients of the Monte Carlo solution.

    With ``return_nodes`` also returns node values of ``u`` and their
    standard errors on the quadrature grid.
    """
    basis = basis or TensorLegendreBasis(3, settings.p)
    out = field_components(field.values, g, basis, settings, stream.generator(), return_nodes=return_nodes)
    coef = np.asarray(g.coef(theta), dtype=float)
    if not return_nodes:
        return out[0] @ coef
    M, U, S = out
    u = np.tensordot(coef, U[0], axes=1)
    se = np.sqrt(np.tensordot(coef**2, S[0] ** 2, axes=1))
    return M[0] @ coef, u, se


@dataclass
class SchrodingerLatent:
    """Latent draws for the Schrodinger model: one field and its walks per draw.

    ``draw`` returns component matrices ``(n, p, C)``; forward-map values and
    their theta-derivatives are linear in the boundary coefficients.
    """

    settings: SchrodingerSettings = field(default_factory=SchrodingerSettings)
    boundary: BoundaryFn = field(default_factory=default_boundary)
    fixed_field: Field2D | None = None

    def __post_init__(self):
        self.basis = TensorLegendreBasis(3, self.settings.p)

    @property
    def d(self):
        return self.boundary.d

    def draw(self, n, stream: RandomStream, offset=0):
        """``n`` independent draws; draw ``k`` uses sub-stream ``offset + k``.

        With ``fixed_field`` set, every draw reuses that field and the same
        walks, so the forward map becomes deterministic (a test mode).
        """
        out = np.empty((n, self.settings.p, self.boundary.n_components))
        for k in range(n):
            if self.fixed_field is not None:
                rng = stream.substream(0).generator()
                fld = self.fixed_field
            else:
                rng = stream.substream(offset + k).generator()
                fld = sample_field(rng, self.settings.grid_n)
            out[k] = field_components(fld.values, self.boundary, self.basis, self.settings, rng)[0]
        return out

    def eta(self, M, theta):
        return M @ np.asarray(self.boundary.coef(theta), dtype=float)

    def deta(self, M, theta):
        """``(n, p, d)`` derivatives of the forward map."""
        return np.einsum("npc,lc->npl", M, np.atleast_2d(self.boundary.dcoef(theta)))


def sample_data_schrodinger(theta0, Lambda, N, settings: SchrodingerSettings, stream: RandomStream,
                            boundary: BoundaryFn | None = None, fixed_field: Field2D | None = None) -> ObservationBatch:
    latent = SchrodingerLatent(settings, boundary or default_boundary(), fixed_field)

    def gen(theta, index, rng):
        # per-draw sub-streams keep each field's walks independent of N
        return latent.eta(latent.draw(len(index), stream.substream(2)), theta)

    return sample_observations(gen, theta0, N, stream, noise_cov=Lambda)


class SchrodingerMomentModel(MomentModel):
    """Monte Carlo surrogate moments over ``n_fields`` cached latent draws.

    Moments are those of the empirical law of ``eta_theta(f)`` plus ``Lambda``;
    derivatives are exact for that empirical law (same fields and paths for
    every ``theta``), so ``derivative_mode`` is analytic.
    """

    derivative_mode = "analytic"

    def __init__(self, settings: SchrodingerSettings | None = None, stream: RandomStream | None = None,
                 boundary: BoundaryFn | None = None, Lambda=None, components=None):
        self.settings = settings or SchrodingerSettings()
        self.latent = SchrodingerLatent(self.settings, boundary or default_boundary())
        self.p = self.settings.p
        self.d = self.latent.d
        self.Lambda = self.settings.Lambda if Lambda is None else np.atleast_2d(Lambda)
        if components is None:
            components = self.latent.draw(self.settings.n_fields, stream or RandomStream(0))
        self.components = components

    def _eta(self, theta):
        return self.latent.eta(self.components, theta)

    def moments(self, theta, i=0):
        e = self._eta(theta)
        cov = np.atleast_2d(np.cov(e, rowvar=False)) if e.shape[0] > 1 else np.zeros((self.p, self.p))
        return MomentPair(e.mean(axis=0), 0.5 * (cov + cov.T) + self.Lambda)

    def dmoments(self, theta, i=0, l=0):
        e = self._eta(theta)
        de = self.latent.deta(self.components, theta)[:, :, l]
        n = e.shape[0]
        ec = e - e.mean(axis=0)
        dc = de - de.mean(axis=0)
        c = ec.T @ dc / (n - 1)
        return de.mean(axis=0), c + c.T

    def estimates(self, theta):
        """Mean, covariance and mean-derivative as :class:`MCEstimate` objects."""
        e = self._eta(theta)
        de = self.latent.deta(self.components, theta)
        n = e.shape[0]
        cov = lambda s: np.atleast_2d(np.cov(s, rowvar=False))
        return (
            MCEstimate(e.mean(axis=0), e.std(axis=0, ddof=1) / np.sqrt(n), n),
            MCEstimate(cov(e), jackknife_se(e, cov), n),
            MCEstimate(de.mean(axis=0), de.std(axis=0, ddof=1) / np.sqrt(n), n),
        )


def mc_moment_model(theta, settings: SchrodingerSettings, stream: RandomStream, boundary=None):
    """Moment model plus its estimates at ``theta``."""
    model = SchrodingerMomentModel(settings, stream, boundary)
    return model, model.estimates(theta)
