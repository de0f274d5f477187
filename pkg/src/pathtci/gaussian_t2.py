"""Talagrand's inequality W2^2 <= 2 KL for diagonal Gaussians against N(0, I).

Both sides have closed forms per axis:

    W2^2 = sum_k (m1 - m2)^2 + (s1 - s2)^2
    KL   = sum_k log(s2 / s1) + (s1^2 + (m1 - m2)^2) / (2 s2^2) - 1/2

A pure mean shift against the standard Gaussian gives W2^2 = m^2 and
KL = m^2 / 2, so the constant 2 is attained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pathtci.metric_measure import DimensionError

SHARP_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class GaussianParams:
    mean: np.ndarray
    sdev: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        s = np.atleast_1d(np.asarray(self.sdev, dtype=float))
        if m.shape != s.shape or m.ndim != 1:
            raise DimensionError("mean and sdev must be vectors of equal length")
        if np.any(s <= 0):
            raise ValueError("standard deviations must be positive")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "sdev", s)

    @classmethod
    def standard(cls, d: int = 1) -> "GaussianParams":
        return cls(np.zeros(d), np.ones(d))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def is_standard(self) -> bool:
        return bool(np.all(self.mean == 0) and np.all(self.sdev == 1))


def gaussian_w2_and_kl(nu: GaussianParams, mu: GaussianParams) -> tuple[float, float]:
    if nu.dim != mu.dim:
        raise DimensionError(f"dimension {nu.dim} vs {mu.dim}")
    dm = nu.mean - mu.mean
    w2 = float(np.sum(dm**2 + (nu.sdev - mu.sdev) ** 2))
    kl = float(
        np.sum(np.log(mu.sdev / nu.sdev) + (nu.sdev**2 + dm**2) / (2 * mu.sdev**2) - 0.5)
    )
    return w2, max(kl, 0.0)


@dataclass(frozen=True)
class TalagrandRow:
    index: int
    w2_squared: float
    kl: float
    ratio: float  # W2^2 / (2 KL); 0 when KL == 0
    mean_shift_only: bool


@dataclass
class TalagrandReport:
    rows: list[TalagrandRow] = field(default_factory=list)
    violations: list[int] = field(default_factory=list)
    sharpness_failures: list[int] = field(default_factory=list)

    @property
    def max_ratio(self) -> float:
        return max((r.ratio for r in self.rows), default=0.0)

    @property
    def ok(self) -> bool:
        return not self.violations and not self.sharpness_failures


def talagrand_sweep(mu: GaussianParams | None, family) -> TalagrandReport:
    """Evaluate W2^2 <= 2 KL for each member of ``family``.

    ``mu=None`` compares each member with the standard Gaussian of its own
    dimension. When the reference is standard, members that differ only by
    a mean shift must hit ratio 1 (to 1e-12) and members with some sdev != 1
    must stay strictly below 1; either failure lands in ``sharpness_failures``.
    """
    report = TalagrandReport()
    for i, nu in enumerate(family):
        ref = GaussianParams.standard(nu.dim) if mu is None else mu
        sharp = ref.is_standard
        w2, kl = gaussian_w2_and_kl(nu, ref)
        ratio = w2 / (2 * kl) if kl > 0 else 0.0
        shift_only = bool(np.all(nu.sdev == ref.sdev))
        report.rows.append(TalagrandRow(i, w2, kl, ratio, shift_only))
        if w2 > 2 * kl + SHARP_TOL:
            report.violations.append(i)
        if sharp and kl > 1e-10:
            if shift_only and abs(ratio - 1) > SHARP_TOL:
                report.sharpness_failures.append(i)
            elif not shift_only and not ratio < 1:
                report.sharpness_failures.append(i)
    return report


def random_family(rng: np.random.Generator, count: int, max_dim: int = 8) -> list[GaussianParams]:
    """Diagonal Gaussians with means in [-3, 3] and sdevs in [0.25, 4]."""
    out = []
    for _ in range(count):
        d = int(rng.integers(1, max_dim + 1))
        out.append(GaussianParams(rng.uniform(-3, 3, d), rng.uniform(0.25, 4, d)))
    return out
