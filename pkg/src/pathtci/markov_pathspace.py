"""Free path space of a finite-state, discrete-time Markov chain.

The path law with a random start is the mixture of the laws started at each
state, which is all the composition argument for TCI constants needs; time
continuity never enters. With a few states and a few steps the whole path
space can be enumerated, so every relative entropy and every W2 below is
exact (up to floating point).

Path ``(x0, ..., xn)`` has index ``sum(x_k * S**(n-k))`` for an ``S``-state
base (row-major, last step fastest).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, NamedTuple, Sequence, TypeVar, Union

import numpy as np

from pathtci.metric_measure import (
    MAX_POINTS,
    DimensionError,
    DiscreteMeasure,
    FiniteMetricSpace,
    product_metric_max,
    relative_entropy,
    tilt_measure,
)
from pathtci.transport import w2_squared_exact

log = logging.getLogger(__name__)

STOCHASTIC_TOL = 1e-12
IDENTITY_TOL = 1e-10
CHECK_TOL = 1e-9
MIN_ENTROPY = 1e-12

T = TypeVar("T")
R = TypeVar("R")


def _pmap(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> list[R]:
    # results always come back in input order
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True, eq=False)
class PathSpace:
    """Enumerated paths of ``steps + 1`` states with the sup-over-time metric."""

    base: FiniteMetricSpace
    steps: int
    metric: FiniteMetricSpace = field(repr=False)
    paths: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, base: FiniteMetricSpace, steps: int) -> "PathSpace":
        if steps < 1:
            raise ValueError("need at least one step")
        if base.size ** (steps + 1) > MAX_POINTS:
            raise ValueError(
                f"{base.size}^{steps + 1} paths exceeds the enumeration guard of {MAX_POINTS}"
            )
        metric = product_metric_max([base] * (steps + 1))
        radix = base.size ** np.arange(steps, -1, -1)
        paths = (np.arange(metric.size)[:, None] // radix[None, :]) % base.size
        paths.setflags(write=False)
        return cls(base, steps, metric, paths)

    @property
    def size(self) -> int:
        return self.metric.size

    def index(self, states: Sequence[int]) -> int:
        if len(states) != self.steps + 1:
            raise DimensionError(f"path of length {len(states)}, expected {self.steps + 1}")
        idx = 0
        for s in states:
            if not 0 <= s < self.base.size:
                raise IndexError(f"state {s} outside the base space")
            idx = idx * self.base.size + int(s)
        return idx

    def states(self, index: int) -> tuple[int, ...]:
        return tuple(int(s) for s in self.paths[index])

    @property
    def initial_states(self) -> np.ndarray:
        """The map ``u0``: path index -> starting state."""
        return self.paths[:, 0]

    def path_distance(self, i: int, j: int) -> float:
        """Direct sup-over-time distance, independent of the stored matrix."""
        d = self.base.dist
        return max(float(d[a, b]) for a, b in zip(self.paths[i], self.paths[j]))


@dataclass(frozen=True, eq=False)
class MarkovChainSpec:
    base: FiniteMetricSpace
    transition: np.ndarray = field(repr=False)
    steps: int
    initial: DiscreteMeasure = field(repr=False)

    def __post_init__(self):
        P = np.array(self.transition, dtype=float, copy=True)
        s = self.base.size
        if P.shape != (s, s):
            raise DimensionError(f"transition shape {P.shape} for a {s}-state base")
        if P.min() < 0 or np.max(np.abs(P.sum(axis=1) - 1)) > STOCHASTIC_TOL:
            raise ValueError("transition matrix is not row-stochastic")
        if not self.initial.space.same_as(self.base):
            raise DimensionError("initial law does not live on the base space")
        if self.steps < 1:
            raise ValueError("need at least one step")
        if s ** (self.steps + 1) > MAX_POINTS:
            raise ValueError(f"{s}^{self.steps + 1} paths exceeds the enumeration guard")
        P.setflags(write=False)
        object.__setattr__(self, "transition", P)

    @cached_property
    def path_space(self) -> PathSpace:
        return PathSpace.build(self.base, self.steps)

    @cached_property
    def law(self) -> DiscreteMeasure:
        """P^mu for the chain's own initial law."""
        return path_law(self, self.initial)

    @cached_property
    def laws_from_states(self) -> tuple[DiscreteMeasure, ...]:
        return tuple(path_law(self, x) for x in range(self.base.size))


@dataclass(frozen=True)
class TciConstants:
    c0: float
    c1: float
    c2: float

    def __post_init__(self):
        for name in ("c0", "c1", "c2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def composed_C(self) -> float:
        return (math.sqrt(self.c1) + math.sqrt(self.c0 * self.c2)) ** 2


# --- path laws and the split ------------------------------------------------


def path_law(spec: MarkovChainSpec, start: Union[int, DiscreteMeasure]) -> DiscreteMeasure:
    """Law of the chain on the enumerated path space."""
    space = spec.path_space
    if isinstance(start, DiscreteMeasure):
        if not start.space.same_as(spec.base):
            raise DimensionError("start law does not live on the base space")
        w0 = start.weights
    else:
        if not 0 <= int(start) < spec.base.size:
            raise IndexError(f"state {start} outside the base space")
        w0 = np.zeros(spec.base.size)
        w0[int(start)] = 1.0
    paths = space.paths
    w = w0[paths[:, 0]]
    for k in range(1, paths.shape[1]):
        w = w * spec.transition[paths[:, k - 1], paths[:, k]]
    return DiscreteMeasure.normalized(space.metric, w)


def initial_marginal(Q: DiscreteMeasure, spec: MarkovChainSpec) -> DiscreteMeasure:
    """Image of Q under ``u0``."""
    nu = np.bincount(spec.path_space.initial_states, weights=Q.weights, minlength=spec.base.size)
    return DiscreteMeasure.normalized(spec.base, nu)


def condition_on_initial(Q: DiscreteMeasure, spec: MarkovChainSpec):
    """Split Q into its starting law and the conditional laws given the start.

    Returns ``(nu, conditionals)``; ``conditionals[x]`` is Q restricted to
    paths starting at x and renormalized, present only when ``nu(x) > 0``.
    """
    if not Q.space.same_as(spec.path_space.metric):
        raise DimensionError("Q does not live on the chain's path space")
    starts = spec.path_space.initial_states
    nu = initial_marginal(Q, spec)
    conditionals = {}
    for x in range(spec.base.size):
        if nu.weights[x] > 0:
            w = np.where(starts == x, Q.weights, 0.0)
            conditionals[x] = DiscreteMeasure.normalized(Q.space, w)
    return nu, conditionals


def remix(nu: DiscreteMeasure, conditionals: dict) -> DiscreteMeasure:
    """Inverse of :func:`condition_on_initial`."""
    first = next(iter(conditionals.values()))
    acc = np.zeros(first.space.size)
    for x, q in conditionals.items():
        acc += nu.weights[x] * q.weights
    return DiscreteMeasure.normalized(first.space, acc)


def lift_initial_density(nu: DiscreteMeasure, spec: MarkovChainSpec) -> DiscreteMeasure:
    """``(p o u0) P^mu`` with ``p = d nu / d mu``: keep the dynamics, swap the start."""
    mu = spec.initial.weights
    if np.any((nu.weights > 0) & (mu == 0)):
        raise ValueError("nu is not absolutely continuous with respect to the initial law")
    p = np.divide(nu.weights, mu, out=np.zeros_like(mu), where=mu > 0)
    P_mu = spec.law.weights
    return DiscreteMeasure.normalized(spec.path_space.metric, p[spec.path_space.initial_states] * P_mu)


class EntropyDecomposition(NamedTuple):
    total: float
    initial_part: float
    conditional_part: float


class IdentityViolation(AssertionError):
    pass


def entropy_chain_identity(Q: DiscreteMeasure, spec: MarkovChainSpec) -> EntropyDecomposition:
    """H(Q|P^mu) = H(nu|mu) + sum_x nu(x) H(Q_x|P^x), checked numerically.

    With infinite total entropy the identity is not checked and the parts
    are returned as computed (the conditional part is then infinite too).
    """
    total = relative_entropy(Q, spec.law)
    nu, cond = condition_on_initial(Q, spec)
    initial = relative_entropy(nu, spec.initial)
    laws = spec.laws_from_states
    conditional = 0.0
    for x, qx in cond.items():
        conditional += nu.weights[x] * relative_entropy(qx, laws[x])
    if not math.isfinite(total):
        log.debug("infinite relative entropy; chain identity skipped")
        return EntropyDecomposition(total, initial, conditional)
    if abs(total - (initial + conditional)) > IDENTITY_TOL:
        raise IdentityViolation(
            f"H(Q|P) = {total!r} but initial + conditional = {initial + conditional!r}"
        )
    if initial > total + IDENTITY_TOL:
        raise IdentityViolation(f"initial part {initial!r} exceeds total {total!r}")
    return EntropyDecomposition(total, initial, conditional)


# --- constants --------------------------------------------------------------


def feller_lipschitz_c2(spec: MarkovChainSpec, workers: int = 1) -> tuple[float, tuple[int, int]]:
    """Smallest c2 with W_{2,T}(P^x, P^y)^2 <= c2 d(x, y)^2 over all state pairs."""
    s = spec.base.size
    if s < 2:
        raise ValueError("need at least two states")
    laws = spec.laws_from_states
    pairs = [(x, y) for x in range(s) for y in range(x + 1, s)]
    ratios = _pmap(
        lambda xy: w2_squared_exact(laws[xy[0]], laws[xy[1]]).value / spec.base.dist[xy] ** 2,
        pairs,
        workers,
    )
    k = int(np.argmax(ratios))
    return float(ratios[k]), pairs[k]


def tci_ratio(nu: DiscreteMeasure, base_law: DiscreteMeasure) -> float | None:
    """W2^2 / H for one measure, or None when H is negligible or infinite."""
    H = relative_entropy(nu, base_law)
    if not (MIN_ENTROPY <= H < math.inf):
        return None
    return w2_squared_exact(nu, base_law).value / H


def tci_constant_lower_bound(base_law: DiscreteMeasure, tilts: Iterable[tuple], workers: int = 1) -> float:
    """Largest W2^2/H over a family of exponential tilts of ``base_law``.

    Tilts with H below 1e-12 are skipped; an empty admissible set gives 0.
    """
    tilts = list(tilts)
    if not tilts:
        raise ValueError("empty tilt family")
    ratios = _pmap(lambda t: tci_ratio(tilt_measure(base_law, t[0], t[1]), base_law), tilts, workers)
    admissible = [r for r in ratios if r is not None]
    return max(admissible, default=0.0)


def fit_constants(
    spec: MarkovChainSpec,
    Q_family: Sequence[DiscreteMeasure],
    extra_nus: Sequence[DiscreteMeasure] = (),
    workers: int = 1,
) -> TciConstants:
    """Smallest c0, c1 valid on the measures the composition argument touches
    for this family (starting laws and conditional laws of each Q), plus the
    exact c2.

    On a finite space no finite constant works for every measure (W2^2 is
    linear and H quadratic in a small perturbation), so these constants are
    always relative to a family.
    """

    def one(Q):
        nu, cond = condition_on_initial(Q, spec)
        r0 = tci_ratio(nu, spec.initial)
        r1 = [tci_ratio(qx, spec.laws_from_states[x]) for x, qx in cond.items()]
        return r0, max((r for r in r1 if r is not None), default=None)

    rows = _pmap(one, list(Q_family), workers)
    extra = _pmap(lambda nu: tci_ratio(nu, spec.initial), list(extra_nus), workers)
    c0 = max([r for r, _ in rows if r is not None] + [r for r in extra if r is not None], default=0.0)
    c1 = max((r for _, r in rows if r is not None), default=0.0)
    c2, _ = feller_lipschitz_c2(spec, workers)
    # a zero would mean the family never moved; any positive constant is then valid
    return TciConstants(c0 or 1.0, c1 or 1.0, c2)


# --- composition checks ---------------------------------------------------


@dataclass(frozen=True)
class PreconditionFailure:
    index: int
    constant: str
    state: int | None
    lhs: float
    rhs: float

    def describe(self) -> str:
        where = f"state {self.state}" if self.state is not None else "initial law"
        return (
            f"tilt {self.index}: {self.constant} too small at {where} "
            f"(W2^2 = {self.lhs:.6g} > {self.constant} * H = {self.rhs:.6g})"
        )


@dataclass(frozen=True)
class ForwardRow:
    index: int
    entropy: float
    w2_squared: float
    rhs: float
    ratio: float
    restart_lhs: float
    restart_rhs: float
    glue_lhs: float
    glue_rhs: float
    start_rhs: float
    w2_initial: float
    skipped: bool = False

    @property
    def violated(self) -> bool:
        return not self.skipped and self.w2_squared > self.rhs + CHECK_TOL

    @property
    def restart_violated(self) -> bool:
        return not self.skipped and self.restart_lhs > self.restart_rhs + CHECK_TOL

    @property
    def glue_violated(self) -> bool:
        return not self.skipped and self.glue_lhs > self.glue_rhs + CHECK_TOL


@dataclass
class ForwardReport:
    constants: TciConstants
    rows: list[ForwardRow] = field(default_factory=list)
    precondition_failures: list[PreconditionFailure] = field(default_factory=list)

    @property
    def violations(self) -> list[int]:
        return [r.index for r in self.rows if r.violated]

    @property
    def restart_violations(self) -> list[int]:
        return [r.index for r in self.rows if r.restart_violated]

    @property
    def glue_violations(self) -> list[int]:
        return [r.index for r in self.rows if r.glue_violated]

    @property
    def skipped(self) -> list[int]:
        return [r.index for r in self.rows if r.skipped]

    @property
    def max_ratio(self) -> float:
        return max((r.ratio for r in self.rows if not r.skipped and r.rhs > 0), default=0.0)

    @property
    def ok(self) -> bool:
        return not (
            self.precondition_failures or self.violations or self.restart_violations or self.glue_violations
        )


def _check_preconditions(spec, constants, index, Q) -> list[PreconditionFailure]:
    out = []
    nu, cond = condition_on_initial(Q, spec)
    H0 = relative_entropy(nu, spec.initial)
    if math.isfinite(H0):
        w = w2_squared_exact(nu, spec.initial).value
        if w > constants.c0 * H0 + CHECK_TOL:
            out.append(PreconditionFailure(index, "c0", None, w, constants.c0 * H0))
    for x, qx in cond.items():
        Px = spec.laws_from_states[x]
        H1 = relative_entropy(qx, Px)
        if not math.isfinite(H1):
            continue
        w = w2_squared_exact(qx, Px).value
        if w > constants.c1 * H1 + CHECK_TOL:
            out.append(PreconditionFailure(index, "c1", x, w, constants.c1 * H1))
    return out


def _forward_row(spec, constants, index, Q) -> ForwardRow:
    P_mu = spec.law
    H = relative_entropy(Q, P_mu)
    if not math.isfinite(H):
        nan = float("nan")
        return ForwardRow(index, H, nan, nan, nan, nan, nan, nan, nan, nan, nan, skipped=True)
    nu = initial_marginal(Q, spec)
    P_nu = path_law(spec, nu)
    lhs = w2_squared_exact(Q, P_mu).value
    rhs = constants.composed_C * H
    restart = w2_squared_exact(Q, P_nu).value
    glue = w2_squared_exact(P_nu, P_mu).value
    w2_base = w2_squared_exact(nu, spec.initial).value
    return ForwardRow(
        index=index,
        entropy=H,
        w2_squared=lhs,
        rhs=rhs,
        ratio=lhs / rhs if rhs > 0 else 0.0,
        restart_lhs=restart,
        restart_rhs=constants.c1 * H,
        glue_lhs=glue,
        glue_rhs=constants.c2 * w2_base,
        start_rhs=constants.c0 * constants.c2 * H,
        w2_initial=w2_base,
    )


def verify_composed_forward(
    spec: MarkovChainSpec,
    constants: TciConstants,
    Q_family: Sequence[DiscreteMeasure],
    workers: int = 1,
) -> ForwardReport:
    """Check W_{2,T}(Q, P^mu)^2 <= C H(Q|P^mu) on a family, with C composed
    from (c0, c1, c2), after confirming c0 and c1 hold on the same family.

    Each row also records the two intermediate bounds: the distance from Q
    to the path law restarted from Q's own initial marginal (against
    c1 H), and the distance between the two path laws (against c2 times the
    base W2^2). If c0 or c1 fails on the family, the report lists where and
    stops there.
    """
    report = ForwardReport(constants)
    items = list(enumerate(Q_family))
    for fails in _pmap(lambda iq: _check_preconditions(spec, constants, *iq), items, workers):
        report.precondition_failures.extend(fails)
    if report.precondition_failures:
        for f in report.precondition_failures[:5]:
            log.warning("precondition failed: %s", f.describe())
        return report
    report.rows = _pmap(lambda iq: _forward_row(spec, constants, *iq), items, workers)
    return report


@dataclass(frozen=True)
class ConverseRow:
    index: int
    entropy_nu: float
    entropy_Q: float
    w2_base: float
    w2_path: float
    rhs: float

    @property
    def entropy_mismatch(self) -> bool:
        return abs(self.entropy_Q - self.entropy_nu) > 1e-12

    @property
    def projection_violated(self) -> bool:
        return self.w2_base > self.w2_path + CHECK_TOL

    @property
    def violated(self) -> bool:
        return self.w2_base > self.rhs + CHECK_TOL


@dataclass
class ConverseReport:
    C: float
    rows: list[ConverseRow] = field(default_factory=list)

    @property
    def violations(self) -> list[int]:
        return [r.index for r in self.rows if r.violated]

    @property
    def entropy_mismatches(self) -> list[int]:
        return [r.index for r in self.rows if r.entropy_mismatch]

    @property
    def projection_violations(self) -> list[int]:
        return [r.index for r in self.rows if r.projection_violated]

    @property
    def max_ratio(self) -> float:
        return max((r.w2_base / r.rhs for r in self.rows if r.rhs > 0), default=0.0)

    @property
    def ok(self) -> bool:
        return not (self.violations or self.entropy_mismatches or self.projection_violations)


def _converse_row(spec, C, index, nu) -> ConverseRow:
    Q = lift_initial_density(nu, spec)
    H_nu = relative_entropy(nu, spec.initial)
    H_Q = relative_entropy(Q, spec.law)
    w_base = w2_squared_exact(nu, spec.initial).value
    w_path = w2_squared_exact(Q, spec.law).value
    return ConverseRow(index, H_nu, H_Q, w_base, w_path, C * H_nu)


def verify_composed_converse(
    spec: MarkovChainSpec, C: float, nu_family: Sequence[DiscreteMeasure], workers: int = 1
) -> ConverseReport:
    """For each nu, lift it to ``(p o u0) P^mu`` and check that entropy is
    unchanged, that projecting to time 0 cannot increase W2, and hence
    W2(nu, mu)^2 <= C H(nu|mu)."""
    report = ConverseReport(C)
    report.rows = _pmap(lambda inu: _converse_row(spec, C, *inu), list(enumerate(nu_family)), workers)
    return report


# --- chain construction helpers ---------------------------------------------


def random_chain(
    rng: np.random.Generator, n_states: int, steps: int, positions=None, concentration: float = 1.0
) -> MarkovChainSpec:
    """Chain on points of the real line with Dirichlet-random transition rows
    and a Dirichlet-random initial law."""
    if positions is None:
        positions = np.cumsum(rng.uniform(0.5, 1.5, size=n_states))
    base = FiniteMetricSpace.from_points(positions)
    transition = rng.dirichlet(np.full(n_states, concentration), size=n_states)
    initial = DiscreteMeasure(base, rng.dirichlet(np.full(n_states, concentration)))
    # rows from dirichlet sum to 1 only up to rounding
    transition = transition / transition.sum(axis=1, keepdims=True)
    return MarkovChainSpec(base, transition, steps, initial)


def tilt_family(law: DiscreteMeasure, tilts: Iterable[tuple]) -> list[DiscreteMeasure]:
    return [tilt_measure(law, phi, beta) for phi, beta in tilts]


def point_masses(law: DiscreteMeasure) -> list[DiscreteMeasure]:
    return [DiscreteMeasure.dirac(law.space, i) for i in law.support]
