"""Orthonormal shifted Legendre polynomials on ``[0, z]`` and tensor products."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, sqrt

import numpy as np

__all__ = ["legendre_coeff", "LegendreBasis", "TensorLegendreBasis", "trapezoid_weights"]


def legendre_coeff(j: int, k: int) -> float:
    """Monomial coefficient ``a_{j,k}`` of the j-th normalized Legendre polynomial.

    ``e_j(x) = z^{-1/2} sum_k a_{j,k} (x/z)^k`` on ``[0, z]``.
    """
    if j < 0 or k < 0 or k > j:
        raise ValueError(f"need 0 <= k <= j, got j={j}, k={k}")
    return sqrt(2 * j + 1) * (-1) ** (j + k) * comb(j, k) * comb(j + k, k)


def trapezoid_weights(n_points: int, length: float) -> np.ndarray:
    """Composite trapezoid weights for ``n_points`` uniform nodes on ``[0, length]``."""
    if n_points < 2:
        raise ValueError("need at least two nodes")
    w = np.full(n_points, length / (n_points - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


@dataclass
class LegendreBasis:
    max_order: int
    z: float = 1.0
    coeffs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.z <= 0:
            raise ValueError("interval length z must be positive")
        if self.max_order < 0:
            raise ValueError("max_order must be nonnegative")
        J = self.max_order
        self.coeffs = np.zeros((J + 1, J + 1))
        for j in range(J + 1):
            for k in range(j + 1):
                self.coeffs[j, k] = legendre_coeff(j, k)

    def evaluate(self, j, x):
        if not 0 <= j <= self.max_order:
            raise ValueError(f"order {j} outside 0..{self.max_order}")
        s = np.asarray(x, dtype=float) / self.z
        # Horner in the rescaled variable
        out = np.zeros_like(s)
        for k in range(j, -1, -1):
            out = out * s + self.coeffs[j, k]
        return out / np.sqrt(self.z)

    def gram(self, n_points=2048):
        x = np.linspace(0.0, self.z, n_points)
        w = trapezoid_weights(n_points, self.z)
        E = np.array([self.evaluate(j, x) for j in range(self.max_order + 1)])
        return (E * w) @ E.T


@dataclass
class TensorLegendreBasis:
    """Products ``e_i(x) e_j(y)`` on ``[0, 1]^2``, ordered row-major in ``(i, j)``."""

    max_order: int = 3
    p: int = 16

    def __post_init__(self):
        n = (self.max_order + 1) ** 2
        if not 1 <= self.p <= n:
            raise ValueError(f"p must lie in 1..{n}")
        self._1d = LegendreBasis(self.max_order, 1.0)

    @property
    def pairs(self):
        m = self.max_order + 1
        return [(i, j) for i in range(m) for j in range(m)][: self.p]

    def evaluate(self, k, x, y):
        i, j = self.pairs[k]
        return self._1d.evaluate(i, x) * self._1d.evaluate(j, y)

    def matrix(self, x, y):
        """``(p, n)`` values of the selected basis functions at points ``(x, y)``."""
        return np.array([self.evaluate(k, x, y) for k in range(self.p)])
