"""Finite metric spaces, probability vectors on them, and relative entropy.

Everything here is immutable once built: arrays are copied and flagged
read-only, so a measure can be shared freely between workers.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

WEIGHT_TOL = 1e-12
MAX_POINTS = 10**5


class DimensionError(ValueError):
    """Raised when two objects that must share a space do not."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def _check_triangle(dist: np.ndarray, atol: float) -> None:
    # d[i,j] <= d[i,k] + d[k,j] for all k, one pivot row at a time
    for k in range(dist.shape[0]):
        slack = dist[:, k][:, None] + dist[k, :][None, :] - dist
        if slack.min() < -atol:
            i, j = np.unravel_index(np.argmin(slack), slack.shape)
            raise ValueError(
                f"triangle inequality fails for ({i}, {k}, {j}): "
                f"{dist[i, j]:.6g} > {dist[i, k]:.6g} + {dist[k, j]:.6g}"
            )


@dataclass(frozen=True, eq=False)
class FiniteMetricSpace:
    """A finite set of labelled points with a dense distance matrix."""

    labels: tuple
    dist: np.ndarray

    def __init__(self, labels: Sequence[Hashable], dist, validate: bool = True):
        labels = tuple(labels)
        dist = _frozen(dist)
        n = len(labels)
        if n == 0:
            raise ValueError("a metric space needs at least one point")
        if n > MAX_POINTS:
            raise ValueError(f"{n} points exceeds the enumeration guard of {MAX_POINTS}")
        if dist.shape != (n, n):
            raise DimensionError(f"distance matrix shape {dist.shape} does not match {n} labels")
        if validate:
            atol = 1e-12 * max(1.0, float(np.abs(dist).max()))
            if not np.all(np.isfinite(dist)) or dist.min() < 0:
                raise ValueError("distances must be finite and nonnegative")
            if not np.array_equal(dist, dist.T):
                raise ValueError("distance matrix is not symmetric")
            if np.any(np.diag(dist) != 0):
                raise ValueError("distance matrix has a nonzero diagonal")
            off = dist[~np.eye(n, dtype=bool)]
            if off.size and off.min() <= 0:
                raise ValueError("distinct points must be at positive distance")
            _check_triangle(dist, atol)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "dist", dist)

    @property
    def size(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def same_as(self, other: "FiniteMetricSpace") -> bool:
        return self is other or (
            self.labels == other.labels and np.array_equal(self.dist, other.dist)
        )

    @classmethod
    def from_points(cls, coords, labels=None) -> "FiniteMetricSpace":
        """Euclidean distances between points given as rows (or scalars)."""
        pts = np.asarray(coords, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=-1))
        dist = 0.5 * (dist + dist.T)
        if labels is None:
            labels = range(len(pts))
        return cls(labels, dist)


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Probability weights on the points of a :class:`FiniteMetricSpace`."""

    space: FiniteMetricSpace
    weights: np.ndarray = field(repr=False)

    def __init__(self, space: FiniteMetricSpace, weights):
        w = _frozen(weights)
        if w.shape != (space.size,):
            raise DimensionError(f"{w.shape[0] if w.ndim else 0} weights for a {space.size}-point space")
        if not np.all(np.isfinite(w)) or w.min() < 0:
            raise ValueError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "space", space)
        object.__setattr__(self, "weights", w)

    @classmethod
    def normalized(cls, space: FiniteMetricSpace, weights) -> "DiscreteMeasure":
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if not total > 0:
            raise ValueError("cannot normalize a measure with zero total mass")
        return cls(space, w / total)

    @classmethod
    def dirac(cls, space: FiniteMetricSpace, index: int) -> "DiscreteMeasure":
        w = np.zeros(space.size)
        w[index] = 1.0
        return cls(space, w)

    @classmethod
    def uniform(cls, space: FiniteMetricSpace) -> "DiscreteMeasure":
        return cls(space, np.full(space.size, 1.0 / space.size))

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights > 0)

    def expect(self, values) -> float:
        return float(np.dot(self.weights, np.asarray(values, dtype=float)))

    def mix(self, other: "DiscreteMeasure", lam: float) -> "DiscreteMeasure":
        """``lam * self + (1 - lam) * other``."""
        _require_same_space(self, other)
        return DiscreteMeasure.normalized(self.space, lam * self.weights + (1 - lam) * other.weights)

    def allclose(self, other: "DiscreteMeasure", atol: float = WEIGHT_TOL) -> bool:
        _require_same_space(self, other)
        return bool(np.max(np.abs(self.weights - other.weights)) <= atol)


def _require_same_space(a: DiscreteMeasure, b: DiscreteMeasure) -> None:
    if not a.space.same_as(b.space):
        raise DimensionError("measures live on different spaces")


def relative_entropy(nu: DiscreteMeasure, mu: DiscreteMeasure) -> float:
    """H(nu | mu) with 0 log 0 = 0; ``inf`` when nu is not absolutely continuous."""
    _require_same_space(nu, mu)
    p, q = nu.weights, mu.weights
    pos = p > 0
    if np.any(q[pos] == 0):
        return math.inf
    val = float(np.sum(p[pos] * (np.log(p[pos]) - np.log(q[pos]))))
    # rounding can push an exact zero slightly negative
    return max(val, 0.0)


def empirical_measure(sample_indices: Sequence[int], space: FiniteMetricSpace) -> DiscreteMeasure:
    idx = np.asarray(sample_indices, dtype=int)
    if idx.size == 0:
        raise ValueError("empirical measure of an empty sample")
    if idx.min() < 0 or idx.max() >= space.size:
        raise IndexError("sample index outside the space")
    counts = np.bincount(idx, minlength=space.size)
    return DiscreteMeasure(space, counts / idx.size)


def tilt_measure(mu: DiscreteMeasure, potential, beta: float) -> DiscreteMeasure:
    """Exponential tilt: weights proportional to ``mu_i * exp(beta * potential_i)``."""
    phi = np.asarray(potential, dtype=float)
    if phi.shape != mu.weights.shape:
        raise DimensionError("potential length does not match the space")
    expo = beta * phi
    supp = mu.weights > 0
    # shift by the max over the support only; off-support entries stay zero
    expo = expo - expo[supp].max()
    w = np.where(supp, mu.weights * np.exp(expo), 0.0)
    return DiscreteMeasure.normalized(mu.space, w)


def product_metric_max(spaces: Sequence[FiniteMetricSpace], validate: bool = True) -> FiniteMetricSpace:
    """Tuples of points with the max-over-coordinates distance.

    Points are enumerated in row-major order (last coordinate fastest), so
    tuple ``(x0, ..., xn)`` of an ``S``-point base has index
    ``sum(x_k * S**(n-k))``.
    """
    if not spaces:
        raise ValueError("product of zero factors")
    base = spaces[0]
    if any(not s.same_as(base) for s in spaces[1:]):
        raise DimensionError("all factors must share one base space")
    n_factors = len(spaces)
    total = base.size**n_factors
    if total > MAX_POINTS:
        raise ValueError(f"{total} tuples exceeds the enumeration guard of {MAX_POINTS}")
    tuples = np.array(list(itertools.product(range(base.size), repeat=n_factors)), dtype=int)
    dist = np.zeros((total, total))
    for k in range(n_factors):
        col = tuples[:, k]
        np.maximum(dist, base.dist[col[:, None], col[None, :]], out=dist)
    labels = [tuple(base.labels[i] for i in row) for row in tuples]
    return FiniteMetricSpace(labels, dist, validate=validate)


def random_tilts(rng: np.random.Generator, n_points: int, count: int, beta_range=(0.5, 2.0)):
    """``count`` pairs ``(potential, beta)``: standard normal potentials and
    betas uniform on ``beta_range``."""
    lo, hi = beta_range
    return [(rng.standard_normal(n_points), float(rng.uniform(lo, hi))) for _ in range(count)]
