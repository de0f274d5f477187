"""Dirichlet heat kernel of (1/2) d^2/dx^2 on [0, 1].

    p_t(x, y) = 2 sum_{k>=1} sin(k pi x) sin(k pi y) exp(-k^2 pi^2 t / 2)

The generator carries the factor 1/2, so mode k decays at rate
k^2 pi^2 / 2, not k^2 pi^2. Getting this wrong does not crash anything; it
just quietly makes the L^2 bound below look twice as loose as it is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.fft import dst, idst

DEFAULT_TOL = 1e-12


class BoundViolation(AssertionError):
    pass


@dataclass(frozen=True)
class HeatKernelExpansion:
    """Sine expansion truncated at ``modes`` terms."""

    modes: int

    def __post_init__(self):
        if self.modes < 1:
            raise ValueError("need at least one mode")

    @classmethod
    def for_time(cls, t: float, tol: float = DEFAULT_TOL, rate: float = math.pi**2 / 2) -> "HeatKernelExpansion":
        """Fewest modes whose discarded tail ``2 sum_{k>M} exp(-k^2 rate t)``
        is below ``tol`` (the M-th term itself then is too)."""
        if t <= 0:
            raise ValueError("t must be positive")
        a = rate * t
        M = max(1, math.ceil(math.sqrt(math.log(2 / tol) / a)))
        # geometric bound on the tail beyond M
        while 2 * math.exp(-((M + 1) ** 2) * a) / (1 - math.exp(-(2 * M + 3) * a)) > tol:
            M += 1
        return cls(M)

    def kernel(self, t: float, x, y):
        k = np.arange(1, self.modes + 1)
        x = np.asarray(x, dtype=float)[..., None]
        y = np.asarray(y, dtype=float)[..., None]
        terms = np.sin(k * np.pi * x) * np.sin(k * np.pi * y) * np.exp(-(k**2) * np.pi**2 * t / 2)
        return 2 * terms.sum(axis=-1)


def kernel_eval(t: float, x, y, tol: float = DEFAULT_TOL):
    """p_t(x, y), truncated adaptively so the discarded tail is below ``tol``."""
    if t <= 0:
        raise ValueError("heat kernel needs t > 0")
    out = HeatKernelExpansion.for_time(t, tol).kernel(t, x, y)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Samples of an element of C_0([0, 1]) on ``J + 1`` uniform nodes."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim != 1 or v.size < 3:
            raise ValueError("need a 1-D grid with at least 3 nodes")
        v[0] = 0.0
        v[-1] = 0.0
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, fn, J: int) -> "GridFunction":
        return cls(fn(np.linspace(0.0, 1.0, J + 1)))

    @classmethod
    def zeros(cls, J: int) -> "GridFunction":
        return cls(np.zeros(J + 1))

    @property
    def J(self) -> int:
        return self.values.size - 1

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.J + 1)

    @property
    def interior(self) -> np.ndarray:
        return self.values[1:-1]

    def sup_distance(self, other: "GridFunction") -> float:
        if other.J != self.J:
            raise ValueError("grids differ")
        return float(np.max(np.abs(self.values - other.values)))

    def scaled(self, lam: float) -> "GridFunction":
        return GridFunction(lam * self.values)


def sine_coefficients(interior: np.ndarray) -> np.ndarray:
    """Coefficients c_k with ``u(x_j) = sum_k c_k sin(k pi x_j)``, k = 1..J-1.

    Works along axis 0, so a (J-1, batch) block transforms column by column.
    """
    n = interior.shape[0]
    return dst(interior, type=1, axis=0) / (n + 1)


def from_sine_coefficients(coeffs: np.ndarray) -> np.ndarray:
    n = coeffs.shape[0]
    return idst(coeffs * (n + 1), type=1, axis=0)


def semigroup_apply(f: GridFunction, t: float) -> GridFunction:
    """P_t f through the sine modes the grid can carry."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return f
    c = sine_coefficients(f.interior)
    k = np.arange(1, c.size + 1)
    out = np.zeros(f.J + 1)
    out[1:-1] = from_sine_coefficients(c * np.exp(-(k**2) * np.pi**2 * t / 2))
    return GridFunction(out)


def l2_bound(t: float) -> float:
    """sqrt(2t / pi): the uniform-in-x bound on the time-integrated squared kernel."""
    return math.sqrt(2 * t / math.pi)


def kernel_l2_time_integral(t: float, x, tol: float = DEFAULT_TOL):
    """int_0^t ds int_0^1 p_{t-s}(x, y)^2 dy.

    Using int p_u(x, y)^2 dy = p_{2u}(x, x) and integrating in time gives
    2 sum_k sin^2(k pi x) (1 - exp(-k^2 pi^2 t)) / (k^2 pi^2). The slowly
    converging part sums to x(1 - x) exactly, leaving a Gaussian-decaying
    remainder. Raises :class:`BoundViolation` if the result exceeds
    sqrt(2t/pi) + 1e-9.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=float)
    M = HeatKernelExpansion.for_time(t, tol, rate=math.pi**2).modes
    k = np.arange(1, M + 1)
    s2 = np.sin(k * np.pi * x[..., None]) ** 2
    remainder = 2 * np.sum(s2 * np.exp(-(k**2) * np.pi**2 * t) / (k**2 * np.pi**2), axis=-1)
    val = x * (1 - x) - remainder
    val = np.maximum(val, 0.0)
    bound = l2_bound(t)
    if np.any(val > bound + 1e-9):
        raise BoundViolation(f"kernel L2 integral {np.max(val)!r} exceeds sqrt(2t/pi) = {bound!r}")
    return float(val) if val.ndim == 0 else val
