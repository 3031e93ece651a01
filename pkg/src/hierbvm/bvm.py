"""Gaussian limit of the surrogate posterior.

KL divergence between Gaussians, the precision ``V`` (Hessian of the
average KL at the true parameter), its finite-difference oracle, the
recentering point ``T_N``, grid posteriors and the L1 diagnostic.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import scipy.linalg

from .model_core import (
    MomentModel,
    MomentPair,
    NotPositiveDefiniteError,
    ObservationBatch,
    cholesky_checked,
    surrogate_loglik,
    surrogate_loglik_grad,
)

__all__ = [
    "gaussian_kl",
    "kl_profile",
    "kl_argmin",
    "PrecisionResult",
    "bvm_precision_index",
    "bvm_precision_avg",
    "hessian_kl_fd",
    "center_Tn",
    "PriorSpec",
    "Lattice",
    "PosteriorGrid",
    "posterior_grid",
    "BvmLimit",
    "bvm_limit",
    "l1_distance",
    "interval_mass",
    "taylor_remainder_scalar",
    "SingularPrecisionError",
]


class SingularPrecisionError(np.linalg.LinAlgError):
    def __init__(self, message, min_eigenvalue):
        super().__init__(f"{message} (smallest eigenvalue {min_eigenvalue:.3e})")
        self.min_eigenvalue = min_eigenvalue


def _theta(theta):
    return np.atleast_1d(np.asarray(theta, dtype=float))


def gaussian_kl(m0: MomentPair, m1: MomentPair) -> float:
    """``KL(N(mu0, S0) || N(mu1, S1))``."""
    if m0.p != m1.p:
        raise ValueError(f"dimension mismatch: {m0.p} vs {m1.p}")
    c0 = cholesky_checked(m0.covariance)
    c1 = cholesky_checked(m1.covariance)
    diff = m1.mean - m0.mean
    a = scipy.linalg.solve_triangular(c1, diff, lower=True)
    # tr(S1^{-1} S0) = ||L1^{-1} L0||_F^2
    m = scipy.linalg.solve_triangular(c1, c0, lower=True)
    logdet_ratio = 2.0 * (np.sum(np.log(np.diag(c1))) - np.sum(np.log(np.diag(c0))))
    kl = 0.5 * (a @ a + np.sum(m * m) - m0.p + logdet_ratio)
    return float(max(kl, 0.0))


def _avg_kl(model, theta0, theta, indices):
    return float(np.mean([gaussian_kl(model.moments(theta0, i), model.moments(theta, i)) for i in indices]))


class Lattice:
    """Regular grid over an axis-aligned box; nodes in row-major order."""

    def __init__(self, lower, upper, counts):
        self.lower = _theta(lower)
        self.upper = _theta(upper)
        self.counts = tuple(int(c) for c in np.atleast_1d(counts))
        if not (self.lower.size == self.upper.size == len(self.counts)):
            raise ValueError("lower, upper and counts must have equal length")
        if any(c < 1 for c in self.counts) or np.any(self.upper < self.lower):
            raise ValueError("invalid lattice box")

    @property
    def d(self):
        return len(self.counts)

    @property
    def axes(self):
        return [np.linspace(lo, hi, c) for lo, hi, c in zip(self.lower, self.upper, self.counts)]

    @property
    def spacing(self):
        return np.array([(hi - lo) / (c - 1) if c > 1 else 1.0
                         for lo, hi, c in zip(self.lower, self.upper, self.counts)])

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    def nodes(self):
        return np.array(list(product(*self.axes)))


def kl_profile(model: MomentModel, theta0, lattice: Lattice, indices=(0,)):
    """Average Gaussian KL from the moments at ``theta0`` to those at each node."""
    theta0 = _theta(theta0)
    return np.array([_avg_kl(model, theta0, t, indices) for t in lattice.nodes()])


def kl_argmin(values, lattice: Lattice):
    """Node minimizing a profile; ties go to the lowest lexicographic node."""
    # nodes are already in lexicographic order, and argmin returns the first hit
    return lattice.nodes()[int(np.argmin(values))]


@dataclass
class PrecisionResult:
    V: np.ndarray
    min_eigenvalue: float
    positive_definite: bool
    per_index: list = field(default_factory=list, repr=False)


def bvm_precision_index(model: MomentModel, theta0, i=0) -> np.ndarray:
    """``V^(i) = 1/2 tr(A_l A_k) + dmu_l' Sigma^{-1} dmu_k`` with ``A_l = Sigma^{-1} dSigma_l``."""
    theta0 = _theta(theta0)
    mp = model.moments(theta0, i)
    chol = cholesky_checked(mp.covariance, index=i, theta=theta0)
    dmu, dsig = model.dmoments_all(theta0, i)
    A = np.array([scipy.linalg.cho_solve((chol, True), s) for s in dsig])
    pdmu = scipy.linalg.cho_solve((chol, True), dmu.T)
    V = 0.5 * np.einsum("lab,kba->lk", A, A) + dmu @ pdmu
    return 0.5 * (V + V.T)


def bvm_precision_avg(model: MomentModel, theta0, indices=(0,)) -> PrecisionResult:
    """Average of the per-index precisions with a definiteness report."""
    per = [bvm_precision_index(model, theta0, i) for i in indices]
    V = np.mean(per, axis=0)
    lam = float(np.linalg.eigvalsh(V)[0])
    scale = max(1.0, float(np.max(np.abs(V)))) if V.size else 1.0
    return PrecisionResult(V, lam, lam > 1e-12 * scale, per)


def hessian_kl_fd(model: MomentModel, theta0, indices=(0,), rel_step=1e-3) -> np.ndarray:
    """Central second differences of ``theta -> avg KL(theta0, theta)`` at ``theta0``."""
    theta0 = _theta(theta0)
    d = theta0.size
    h = rel_step * np.maximum(1.0, np.abs(theta0))

    def kl(t):
        v = _avg_kl(model, theta0, t, indices)
        if not np.isfinite(v):
            raise FloatingPointError(f"non-finite KL at theta={t}")
        return v

    H = np.empty((d, d))
    k0 = kl(theta0)
    for a in range(d):
        ea = np.zeros(d)
        ea[a] = h[a]
        H[a, a] = (kl(theta0 + ea) - 2 * k0 + kl(theta0 - ea)) / h[a] ** 2
        for b in range(a + 1, d):
            eb = np.zeros(d)
            eb[b] = h[b]
            H[a, b] = (kl(theta0 + ea + eb) - kl(theta0 + ea - eb)
                       - kl(theta0 - ea + eb) + kl(theta0 - ea - eb)) / (4 * h[a] * h[b])
            H[b, a] = H[a, b]
    return 0.5 * (H + H.T)


def center_Tn(model: MomentModel, theta_star, batch: ObservationBatch, V=None):
    """``T_N = theta* + V^{-1} grad l(theta*) / N``."""
    theta_star = _theta(theta_star)
    if V is None:
        V = bvm_precision_avg(model, theta_star, batch.index).V
    V = np.atleast_2d(V)
    lam = float(np.linalg.eigvalsh(V)[0])
    if lam <= 1e-12 * max(1.0, float(np.max(np.abs(V)))):
        raise SingularPrecisionError("precision matrix is singular", lam)
    g = surrogate_loglik_grad(model, theta_star, batch)
    return theta_star + np.linalg.solve(V, g) / batch.N


@dataclass
class PriorSpec:
    """Uniform box prior or a tabulated density ``density(theta)``."""

    lower: np.ndarray
    upper: np.ndarray
    kind: str = "uniform-box"
    table: object = None

    def __post_init__(self):
        self.lower = _theta(self.lower)
        self.upper = _theta(self.upper)
        if self.kind not in ("uniform-box", "tabulated"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if np.any(self.upper <= self.lower):
            raise ValueError("prior box must have positive volume")
        if self.kind == "tabulated" and not callable(self.table):
            raise ValueError("tabulated prior needs a callable density")

    @classmethod
    def uniform(cls, lower, upper):
        return cls(lower, upper)

    def inside(self, theta):
        theta = _theta(theta)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def density(self, theta):
        if not self.inside(theta):
            return 0.0
        if self.kind == "uniform-box":
            return float(1.0 / np.prod(self.upper - self.lower))
        return float(self.table(_theta(theta)))

    def log_density(self, theta):
        p = self.density(theta)
        return np.log(p) if p > 0 else -np.inf


@dataclass
class PosteriorGrid:
    lattice: Lattice
    nodes: np.ndarray
    log_unnorm: np.ndarray
    density: np.ndarray
    cell_volume: float
    log_norm: float

    def mean(self):
        w = self.density * self.cell_volume
        return w @ self.nodes

    def to_csv(self, path):
        d = self.nodes.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"theta_{k + 1}" for k in range(d)] + ["log_unnorm", "density"])
            for t, lu, de in zip(self.nodes, self.log_unnorm, self.density):
                w.writerow([f"{v:.17g}" for v in t] + [f"{lu:.17g}", f"{de:.17g}"])


def normalize_log(log_unnorm, cell_volume):
    """Max-shifted normalization; returns ``(density, log normalizer)``."""
    log_unnorm = np.asarray(log_unnorm, dtype=float)
    top = np.max(log_unnorm)
    if not np.isfinite(top):
        raise ValueError("posterior is zero on every grid node")
    w = np.exp(log_unnorm - top)
    z = w.sum() * cell_volume
    return w / z, top + np.log(z)


def posterior_grid(model: MomentModel, batch: ObservationBatch, prior: PriorSpec, lattice: Lattice,
                   loglik=None) -> PosteriorGrid:
    """Surrogate posterior tabulated on the lattice.

    ``loglik`` overrides the surrogate log-likelihood (used by tests).
    """
    loglik = loglik or (lambda t: surrogate_loglik(model, t, batch))
    nodes = lattice.nodes()
    lu = np.empty(len(nodes))
    for k, t in enumerate(nodes):
        lp = prior.log_density(t)
        lu[k] = lp + loglik(t) if np.isfinite(lp) else -np.inf
    dens, log_norm = normalize_log(lu, lattice.cell_volume)
    return PosteriorGrid(lattice, nodes, lu, dens, lattice.cell_volume, float(log_norm))


@dataclass
class BvmLimit:
    theta_star: np.ndarray
    V: np.ndarray
    V_per_index: list
    T_N: np.ndarray
    N: int

    @property
    def covariance(self):
        return np.linalg.inv(self.V) / self.N

    def to_json(self, path=None):
        obj = {
            "theta_star": [float(v) for v in self.theta_star],
            "T_N": [float(v) for v in self.T_N],
            "V": [float(v) for v in np.ravel(self.V)],
            "V_inverse": [float(v) for v in np.ravel(np.linalg.inv(self.V))],
            "per_index_count": len(self.V_per_index),
        }
        text = json.dumps(obj, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def bvm_limit(model: MomentModel, theta_star, batch: ObservationBatch) -> BvmLimit:
    theta_star = _theta(theta_star)
    # one precision per distinct index, weighted by multiplicity
    uniq, counts = np.unique(batch.index, return_counts=True)
    per = [bvm_precision_index(model, theta_star, int(i)) for i in uniq]
    V = np.tensordot(counts / counts.sum(), np.array(per), axes=1)
    T = center_Tn(model, theta_star, batch, V)
    return BvmLimit(theta_star, V, per, T, batch.N)


def _gaussian_logpdf(nodes, mean, cov):
    chol = cholesky_checked(cov)
    r = scipy.linalg.solve_triangular(chol, (nodes - mean).T, lower=True)
    return -0.5 * np.sum(r * r, axis=0) - np.sum(np.log(np.diag(chol)))


def l1_distance(pg: PosteriorGrid, approx: BvmLimit) -> float:
    """Grid L1 distance to ``N(T_N, (N V)^{-1})`` renormalized on the grid."""
    lg = _gaussian_logpdf(pg.nodes, approx.T_N, approx.covariance)
    g, _ = normalize_log(lg, pg.cell_volume)
    return float(np.sum(np.abs(pg.density - g)) * pg.cell_volume)


def interval_mass(pg: PosteriorGrid, lower, upper) -> float:
    inside = np.all((pg.nodes >= _theta(lower)) & (pg.nodes <= _theta(upper)), axis=1)
    return float(pg.density[inside].sum() * pg.cell_volume)


def taylor_remainder_scalar(model: MomentModel, batch: ObservationBatch, theta, theta_star, V,
                            loglik=None, grad=None) -> float:
    """Normalized second-order Taylor residual of the log-likelihood around ``theta_star``."""
    theta = _theta(theta)
    theta_star = _theta(theta_star)
    delta = theta - theta_star
    nrm2 = float(delta @ delta)
    if nrm2 == 0.0:
        raise ValueError("theta must differ from theta_star")
    loglik = loglik or (lambda t: surrogate_loglik(model, t, batch))
    grad = grad or (lambda t: surrogate_loglik_grad(model, t, batch))
    N = batch.N
    V = np.atleast_2d(V)
    r = loglik(theta) - loglik(theta_star) - grad(theta_star) @ delta + 0.5 * N * delta @ V @ delta
    return float(r / (N * nrm2))


__all__ += ["normalize_log", "NotPositiveDefiniteError"]
