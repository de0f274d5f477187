"""Stochastic reaction-diffusion on [0, 1] with Dirichlet boundary.

    du = (1/2) u'' dt + b(u) dt + sigma(u) W(dt, dx)

Finite differences on J intervals, implicit in the diffusion and explicit
in reaction and noise:

    (I - dt/2 * Lap_h) u_{n+1} = u_n + dt b(u_n) + sigma(u_n) xi_n sqrt(dt/dx)

with xi_n i.i.d. standard normal per interior node. A space-time white noise
cell of size dt x dx has variance dt*dx; dividing the cell integral by dx to
get a nodal value leaves variance dt/dx, hence the sqrt(dt/dx) factor.

Noise for path ``k`` comes from ``SeedSequence([seed, k])`` and paths are
simulated in fixed-size chunks, so every statistic is a pure function of the
config no matter how many worker threads are used.
"""

from __future__ import annotations

import logging
import math
import re
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import toeplitz

from pathtci.heat import (
    GridFunction,
    from_sine_coefficients,
    kernel_l2_time_integral,
    l2_bound,
    sine_coefficients,
)

log = logging.getLogger(__name__)

CHUNK = 64
Z95 = 1.959963984540054


class BlowUpError(FloatingPointError):
    pass


# --- coefficient catalog ----------------------------------------------------


@dataclass(frozen=True)
class Coefficient:
    """One entry of the closed catalog: zero, constant(c), linear(a), sin."""

    kind: str
    param: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "linear", "sin"):
            raise ValueError(f"unknown coefficient {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "Coefficient":
        m = re.fullmatch(r"\s*(zero|sin|constant|linear)\s*(?:\(\s*([-+0-9.eE]+)\s*\))?\s*", text)
        if not m:
            raise ValueError(f"cannot parse coefficient {text!r}; expected zero, sin, constant(c) or linear(a)")
        kind, arg = m.group(1), m.group(2)
        if kind in ("constant", "linear"):
            if arg is None:
                raise ValueError(f"{kind} needs a parameter, e.g. {kind}(1.0)")
            return cls(kind, float(arg))
        if arg is not None:
            raise ValueError(f"{kind} takes no parameter")
        return cls(kind)

    def __str__(self) -> str:
        return f"{self.kind}({self.param:g})" if self.kind in ("constant", "linear") else self.kind

    def __call__(self, u: np.ndarray) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros_like(u)
        if self.kind == "constant":
            return np.full_like(u, self.param)
        if self.kind == "linear":
            return self.param * u
        return np.sin(u)

    @property
    def lipschitz(self) -> float:
        return {"zero": 0.0, "constant": 0.0, "linear": abs(self.param), "sin": 1.0}[self.kind]

    @property
    def bounded(self) -> bool:
        return self.kind != "linear" or self.param == 0


@dataclass(frozen=True)
class SpdeConfig:
    J: int
    n_steps: int
    T: float
    b: Coefficient = Coefficient("zero")
    sigma: Coefficient = Coefficient("zero")
    seed: int = 0
    n_paths: int = 1

    def __post_init__(self):
        if self.J < 2 or self.n_steps < 1 or not self.T > 0:
            raise ValueError("need J >= 2, n_steps >= 1 and T > 0")
        if not self.sigma.bounded:
            raise ValueError("sigma must be bounded (linear diffusion coefficients are excluded)")
        if self.dt * self.J**2 > 4:
            warnings.warn(
                f"dt*J^2 = {self.dt * self.J**2:.3g} > 4: stable, but time error will dominate",
                stacklevel=2,
            )

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def dx(self) -> float:
        return 1.0 / self.J

    @property
    def lipschitz_K(self) -> float:
        return max(self.b.lipschitz, self.sigma.lipschitz)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def noise_scale(self) -> float:
        return math.sqrt(self.dt / self.dx)

    def with_(self, **kw) -> "SpdeConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return SpdeConfig(**d)


# --- grid objects -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GridPath:
    """u[n, j] for time levels n = 0..N and nodes j = 0..J."""

    u: np.ndarray = field(repr=False)
    path_id: int = -1

    def sup_distance(self, other: "GridPath") -> float:
        return float(np.max(np.abs(self.u - other.u)))

    def level(self, n: int) -> GridFunction:
        return GridFunction(self.u[n])


def noise_field(config: SpdeConfig, path_id: int) -> np.ndarray:
    """xi[n, j] for steps n = 0..N-1 and interior nodes j = 1..J-1."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, path_id]))
    return rng.standard_normal((config.n_steps, config.J - 1))


# --- the scheme -------------------------------------------------------------


class _Tridiag:
    """Precomputed Thomas factors for I - (dt/2) Lap_h on the interior."""

    def __init__(self, config: SpdeConfig):
        n = config.J - 1
        r = config.dt / (2 * config.dx**2)
        self.lower = -r
        diag = 1 + 2 * r
        cp = np.empty(n)
        denom = np.empty(n)
        denom[0] = diag
        cp[0] = -r / diag
        for i in range(1, n):
            denom[i] = diag - self.lower * cp[i - 1]
            cp[i] = -r / denom[i]
        self.cp = cp
        self.denom = denom

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        # rhs has shape (J-1,) or (J-1, batch); every op is elementwise over batch
        n = rhs.shape[0]
        d = np.empty_like(rhs)
        d[0] = rhs[0] / self.denom[0]
        for i in range(1, n):
            d[i] = (rhs[i] - self.lower * d[i - 1]) / self.denom[i]
        x = np.empty_like(rhs)
        x[n - 1] = d[n - 1]
        for i in range(n - 2, -1, -1):
            x[i] = d[i] - self.cp[i] * x[i + 1]
        return x


def discrete_eigenvalues(J: int) -> np.ndarray:
    """Eigenvalues of -Lap_h on the interior, k = 1..J-1."""
    k = np.arange(1, J)
    dx = 1.0 / J
    return 2 * (1 - np.cos(k * np.pi * dx)) / dx**2


def _forcing(config: SpdeConfig, u: np.ndarray, xi: np.ndarray) -> np.ndarray:
    return config.dt * config.b(u) + config.sigma(u) * xi * config.noise_scale


def step(state, noise_row, config: SpdeConfig, n: int | None = None, _solver: _Tridiag | None = None) -> np.ndarray:
    """One time step on the full grid (J+1 values, Dirichlet zeros kept)."""
    state = np.asarray(state, dtype=float)
    if state[0] != 0 or state[-1] != 0:
        raise ValueError("state violates the Dirichlet condition")
    solver = _solver or _Tridiag(config)
    inner = state[1:-1]
    nxt = solver.solve(inner + _forcing(config, inner, np.asarray(noise_row, dtype=float)))
    if not np.all(np.isfinite(nxt)):
        where = "" if n is None else f" at time index {n + 1}"
        raise BlowUpError(f"non-finite values{where}")
    out = np.zeros_like(state)
    out[1:-1] = nxt
    return out


def _evolve(config: SpdeConfig, u0: np.ndarray, xi: np.ndarray, solver: _Tridiag) -> np.ndarray:
    """Interior trajectories for a block: u0 (J-1, B), xi (N, J-1, B) ->
    (N+1, J-1, B)."""
    traj = np.empty((config.n_steps + 1,) + u0.shape)
    traj[0] = u0
    u = u0
    for n in range(config.n_steps):
        u = solver.solve(u + _forcing(config, u, xi[n]))
        if not np.all(np.isfinite(u)):
            raise BlowUpError(f"non-finite values at time index {n + 1}")
        traj[n + 1] = u
    return traj


def _pad(interior: np.ndarray) -> np.ndarray:
    shape = list(interior.shape)
    shape[1] += 2
    out = np.zeros(shape)
    out[:, 1:-1] = interior
    return out


def _check_initial(config: SpdeConfig, *fs: GridFunction) -> None:
    for f in fs:
        if f.J != config.J:
            raise ValueError(f"initial profile has J = {f.J}, config has J = {config.J}")


def simulate(config: SpdeConfig, f: GridFunction, path_id: int = 0) -> GridPath:
    _check_initial(config, f)
    xi = noise_field(config, path_id)[:, :, None]
    traj = _evolve(config, f.interior[:, None].copy(), xi, _Tridiag(config))
    return GridPath(_pad(traj[:, :, 0]), path_id)


def simulate_coupled(config: SpdeConfig, f: GridFunction, g: GridFunction, path_id: int = 0):
    """Two solutions driven by one noise realisation (synchronous coupling)."""
    _check_initial(config, f, g)
    xi = noise_field(config, path_id)
    u0 = np.stack([f.interior, g.interior], axis=1)
    traj = _evolve(config, u0, np.repeat(xi[:, :, None], 2, axis=2), _Tridiag(config))
    return GridPath(_pad(traj[:, :, 0]), path_id), GridPath(_pad(traj[:, :, 1]), path_id)


# --- Monte Carlo machinery --------------------------------------------------


def _chunks(n_paths: int) -> list[range]:
    return [range(s, min(s + CHUNK, n_paths)) for s in range(0, n_paths, CHUNK)]


def _map_chunks(fn: Callable[[range], np.ndarray], n_paths: int, workers: int) -> np.ndarray:
    chunks = _chunks(n_paths)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    return np.concatenate(parts, axis=0)


def _noise_block(config: SpdeConfig, ids: range) -> np.ndarray:
    return np.stack([noise_field(config, k) for k in ids], axis=2)


def mean_and_half_width(samples: np.ndarray) -> tuple[float, float]:
    n = samples.shape[0]
    mean = float(np.mean(samples))
    if n < 2:
        return mean, math.inf
    return mean, float(Z95 * np.std(samples, ddof=1) / math.sqrt(n))


def coupled_sup_squares(config: SpdeConfig, f: GridFunction, g: GridFunction, workers: int = 1) -> np.ndarray:
    """Per-path sup over (levels, nodes) of |u^f - u^g|^2, indexed by path id."""
    _check_initial(config, f, g)
    solver = _Tridiag(config)

    def run(ids: range) -> np.ndarray:
        xi = _noise_block(config, ids)
        B = len(ids)
        u0 = np.concatenate(
            [np.repeat(f.interior[:, None], B, axis=1), np.repeat(g.interior[:, None], B, axis=1)], axis=1
        )
        traj = _evolve(config, u0, np.concatenate([xi, xi], axis=2), solver)
        diff = traj[:, :, :B] - traj[:, :, B:]
        return np.max(diff**2, axis=(0, 1))

    return _map_chunks(run, config.n_paths, workers)


def sup_distance_moment(config: SpdeConfig, f: GridFunction, g: GridFunction, workers: int = 1) -> tuple[float, float]:
    """Monte Carlo E[sup_{t,x} |u^f - u^g|^2] with a 95% normal half-width."""
    if config.n_paths < 2:
        raise ValueError("need at least two paths for a confidence interval")
    return mean_and_half_width(coupled_sup_squares(config, f, g, workers))


def terminal_fields(config: SpdeConfig, f: GridFunction, workers: int = 1) -> np.ndarray:
    """u_T for every path, shape (n_paths, J+1)."""
    _check_initial(config, f)
    solver = _Tridiag(config)

    def run(ids: range) -> np.ndarray:
        xi = _noise_block(config, ids)
        u0 = np.repeat(f.interior[:, None], len(ids), axis=1)
        return _evolve(config, u0, xi, solver)[-1].T

    inner = _map_chunks(run, config.n_paths, workers)
    out = np.zeros((inner.shape[0], config.J + 1))
    out[:, 1:-1] = inner
    return out


@dataclass(frozen=True)
class ScanRow:
    label: str
    scale: float
    rho_squared: float
    estimate: float
    half_width: float

    @property
    def ratio(self) -> float:
        return self.estimate / self.rho_squared

    @property
    def upper(self) -> float:
        return (self.estimate + self.half_width) / self.rho_squared


@dataclass
class ScanReport:
    rows: list[ScanRow]

    @property
    def fitted_c2(self) -> float:
        return max(r.upper for r in self.rows)

    @property
    def fitted_by_scale(self) -> dict[float, float]:
        out: dict[float, float] = {}
        for r in self.rows:
            out[r.scale] = max(out.get(r.scale, 0.0), r.upper)
        return out

    @property
    def scaling_spread(self) -> float:
        vals = list(self.fitted_by_scale.values())
        return max(vals) / min(vals)

    @property
    def scaling_stable(self) -> bool:
        return self.scaling_spread < 2.0

    @property
    def bounds_all(self) -> bool:
        c2 = self.fitted_c2
        return all(r.upper <= c2 for r in self.rows)


def lipschitz_ratio_scan(
    config: SpdeConfig,
    pairs: Sequence[tuple[GridFunction, GridFunction]],
    scales: Sequence[float] = (0.5, 1.0, 2.0),
    labels: Sequence[str] | None = None,
    workers: int = 1,
) -> ScanReport:
    """Ratios E[sup|u^f - u^g|^2] / rho(f, g)^2 for every pair at every scale
    (f, g) -> (lam f, lam g).

    ``fitted_c2`` is the largest ratio-plus-half-width over all rows, so it
    bounds every row by construction. The same maximum taken separately at
    each scale should not move by a factor 2 or more if the estimate is
    Lipschitz rather than local.
    """
    if not pairs:
        raise ValueError("no pairs")
    labels = list(labels) if labels is not None else [f"pair{i}" for i in range(len(pairs))]
    if 1.0 not in scales:
        scales = [1.0, *scales]
    rows = []
    for lam in scales:
        for label, (f, g) in zip(labels, pairs):
            fs, gs = (f, g) if lam == 1.0 else (f.scaled(lam), g.scaled(lam))
            rho2 = fs.sup_distance(gs) ** 2
            if rho2 == 0:
                raise ValueError(f"{label}: f and g coincide, ratio undefined")
            est, hw = sup_distance_moment(config, fs, gs, workers)
            rows.append(ScanRow(label, float(lam), rho2, est, hw))
    return ScanReport(rows)


def gronwall_c2(K: float, T: float, C_T_eps: float) -> float:
    """6 exp(c(T) T) with c(T) = 6 K^2 (sqrt(2T/pi) + C_{T,eps}) at eps = 1/(6K^2)."""
    c_T = 6 * K**2 * (l2_bound(T) + C_T_eps)
    return 6 * math.exp(c_T * T)


# --- stochastic convolution -------------------------------------------------


@dataclass
class ConvolutionReport:
    times: np.ndarray
    lhs: np.ndarray  # E sup_{s<=t, x} |conv|^2
    lhs_half_width: np.ndarray
    gamma_sup: np.ndarray  # E sup_{s<=t, x} |gamma|^2
    gamma_integral: np.ndarray  # int_0^t gamma_sup
    eps: float
    fitted_C_T_eps: float
    fixed_point: np.ndarray | None = None  # E |conv_t(1/2)|^2, gamma = 1 only
    fixed_point_half_width: np.ndarray | None = None
    isometry: np.ndarray | None = None  # int_0^t int p^2 at x = 1/2

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.lhs) >= -1e-15 * max(1.0, float(self.lhs.max()))))

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.lhs))) and math.isfinite(self.fitted_C_T_eps)


def stochastic_convolution_check(
    config: SpdeConfig,
    gamma_kind: str,
    eps: float,
    f: GridFunction | None = None,
    workers: int = 1,
) -> ConvolutionReport:
    """Estimate E sup |int int p gamma dW|^2 on every time level and fit the
    smallest C with lhs(t) <= eps E sup|gamma|^2 + C int_0^t E sup|gamma|^2.

    ``gamma_kind``: ``"zero"``, ``"one"`` (gamma = 1), or ``"sigma"``
    (gamma = sigma(u) along the config's solution started at ``f``, driven by
    the same noise as the convolution).
    """
    if gamma_kind not in ("zero", "one", "sigma"):
        raise ValueError(f"unknown gamma kind {gamma_kind!r}")
    if not eps > 0:
        raise ValueError("eps must be positive")
    if f is None:
        f = GridFunction.from_callable(lambda x: np.sin(np.pi * x), config.J)
    _check_initial(config, f)
    solver = _Tridiag(config)
    N, mid = config.n_steps, config.J // 2
    scale = config.noise_scale

    def run(ids: range) -> np.ndarray:
        xi = _noise_block(config, ids)
        B = len(ids)
        v = np.zeros((config.J - 1, B))
        u = np.repeat(f.interior[:, None], B, axis=1)
        out = np.zeros((N + 1, 3, B))  # running sup |v|^2, running sup |gamma|^2, v(1/2)^2
        run_v = np.zeros(B)
        run_g = np.zeros(B)
        for n in range(N):
            if gamma_kind == "zero":
                gam = np.zeros_like(v)
            elif gamma_kind == "one":
                gam = np.ones_like(v)
            else:
                gam = config.sigma(u)
            run_g = np.maximum(run_g, np.max(gam**2, axis=0))
            out[n, 1] = run_g
            v = solver.solve(v + gam * xi[n] * scale)
            if gamma_kind == "sigma":
                u = solver.solve(u + _forcing(config, u, xi[n]))
            run_v = np.maximum(run_v, np.max(v**2, axis=0))
            out[n + 1, 0] = run_v
            out[n + 1, 2] = v[mid - 1] ** 2
        # gamma at the final level enters only the sup, never the integral
        if gamma_kind == "sigma":
            run_g = np.maximum(run_g, np.max(config.sigma(u) ** 2, axis=0))
        elif gamma_kind == "one":
            run_g = np.maximum(run_g, 1.0)
        out[N, 1] = run_g
        return np.moveaxis(out, 2, 0)

    samples = _map_chunks(run, config.n_paths, workers)  # (paths, N+1, 3)
    n = samples.shape[0]
    means = samples.mean(axis=0)
    hws = Z95 * samples.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full_like(means, np.inf)
    lhs, gamma_sup = means[:, 0], means[:, 1]
    times = config.times
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (gamma_sup[1:] + gamma_sup[:-1]) * config.dt)])
    excess = np.maximum(lhs[1:] - eps * gamma_sup[1:], 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        need = np.where(integral[1:] > 0, excess / integral[1:], np.where(excess > 0, np.inf, 0.0))
    report = ConvolutionReport(times, lhs, hws[:, 0], gamma_sup, integral, eps, float(need.max()))
    if gamma_kind == "one":
        report.fixed_point = means[:, 2]
        report.fixed_point_half_width = hws[:, 2]
        report.isometry = np.array([0.0] + [kernel_l2_time_integral(t, 0.5) for t in times[1:]])
    return report


# --- mild form --------------------------------------------------------------


def mild_residual(path: GridPath, config: SpdeConfig, f: GridFunction, noise: np.ndarray | None = None) -> float:
    """Largest gap between a simulated path and the discrete Duhamel sum
    R^n f + sum_{m<n} R^{n-m} F_m, with R = (I - dt/2 Lap_h)^{-1} applied
    through its sine eigenbasis and F_m the reaction and noise increments
    read off the path itself."""
    if path.path_id < 0 and noise is None:
        raise ValueError("path carries no noise id and no noise field was given")
    xi = noise if noise is not None else noise_field(config, path.path_id)
    N = config.n_steps
    if path.u.shape != (N + 1, config.J + 1) or xi.shape != (N, config.J - 1):
        raise ValueError("path or noise shape does not match the config")
    inner = path.u[:, 1:-1]
    F = _forcing(config, inner[:-1], xi)  # (N, J-1)
    r = 1.0 / (1.0 + 0.5 * config.dt * discrete_eigenvalues(config.J))
    f_hat = sine_coefficients(f.interior)
    F_hat = sine_coefficients(F.T)  # (J-1, N)
    recon_hat = np.empty((config.J - 1, N + 1))
    steps = np.arange(N + 1)
    for k in range(config.J - 1):
        powers = r[k] ** np.arange(N + 2)
        # L[n, m] = r^(n-m) for m < n, else 0
        L = toeplitz(np.concatenate([[0.0], powers[1 : N + 1]]), np.zeros(N))
        recon_hat[k] = powers[steps] * f_hat[k] + (L * F_hat[k][None, :]).sum(axis=1)
    recon = from_sine_coefficients(recon_hat).T
    return float(np.max(np.abs(inner - recon)))
