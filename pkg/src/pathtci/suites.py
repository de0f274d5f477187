"""The five experiment suites behind ``pathtci run``.

Each suite takes validated parameters, a seed and a worker count and
returns a :class:`SuiteResult`: CSV tables, a summary dict, and a list of
named assertions. Assertions are collected, never raised, so one failing
check does not hide the others.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from pathtci.heat import GridFunction


@dataclass
class Assertion:
    name: str
    invariant: str
    passed: bool
    detail: str = ""

    def as_dict(self) -> dict:
        return {"name": self.name, "invariant": self.invariant, "passed": bool(self.passed), "detail": self.detail}


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[list[Any]] = field(default_factory=list)


@dataclass
class SuiteResult:
    tables: list[Table] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    assertions: list[Assertion] = field(default_factory=list)

    def check(self, name: str, invariant: str, passed, detail: str = "") -> bool:
        self.assertions.append(Assertion(name, invariant, bool(passed), detail))
        return bool(passed)

    @property
    def ok(self) -> bool:
        return all(a.passed for a in self.assertions)


# --- initial profiles -------------------------------------------------------

_TERM = re.compile(r"^\s*(?:([-+]?[0-9.]+(?:[eE][-+]?\d+)?)\s*\*\s*)?(sin\((\d+)\)|tent|bump|zero)\s*$")


def parse_profile(text: str, J: int) -> GridFunction:
    """``"sin(1) + 0.5*sin(3)"``, ``"0.5*tent"``, ``"bump"``, ``"zero"``.

    ``sin(k)`` is sin(k pi x), ``tent`` is 1 - |2x - 1|, ``bump`` is 4x(1 - x).
    """
    x = np.linspace(0.0, 1.0, J + 1)
    total = np.zeros_like(x)
    for term in re.split(r"\s*\+\s*(?=[0-9.a-z])", text.strip()):
        m = _TERM.match(term)
        if not m:
            raise ValueError(f"cannot parse profile term {term!r} in {text!r}")
        amp = float(m.group(1)) if m.group(1) else 1.0
        name = m.group(2)
        if name.startswith("sin"):
            total += amp * np.sin(int(m.group(3)) * np.pi * x)
        elif name == "tent":
            total += amp * (1 - np.abs(2 * x - 1))
        elif name == "bump":
            total += amp * 4 * x * (1 - x)
    return GridFunction(total)


# --- gaussian-t2 ------------------------------------------------------------


def run_gaussian(params: dict, seed: int, workers: int) -> SuiteResult:
    from pathtci.gaussian_t2 import GaussianParams, random_family, talagrand_sweep

    res = SuiteResult()
    mu = GaussianParams.standard(1)
    shifts = [GaussianParams([m], [1.0]) for m in params["mean_shifts"]]
    scales = [GaussianParams([0.0], [s]) for s in params["sdevs"]]
    rng = np.random.default_rng(seed)
    rand = random_family(rng, params["n_random"], params["max_dim"])
    table = Table("cases", ["family", "member", "dim", "w2_squared", "kl", "ratio"])

    shift_rep = talagrand_sweep(mu, shifts)
    scale_rep = talagrand_sweep(mu, scales)
    rand_rep = talagrand_sweep(None, rand)
    for fam, rep, members in (("mean_shift", shift_rep, shifts), ("sdev", scale_rep, scales), ("random", rand_rep, rand)):
        for r, nu in zip(rep.rows, members):
            table.rows.append([fam, r.index, nu.dim, r.w2_squared, r.kl, r.ratio])
    res.tables.append(table)

    res.check(
        "gaussian.mean_shift_sharp",
        "W2^2 / (2 KL) = 1 within 1e-12 for pure mean shifts against N(0, 1)",
        all(abs(r.ratio - 1) <= 1e-12 for r in shift_rep.rows if r.kl > 0) and not shift_rep.violations,
        f"ratios {[r.ratio for r in shift_rep.rows]}",
    )
    res.check(
        "gaussian.variance_strict",
        "W2^2 / (2 KL) < 1 when some sdev differs from 1",
        all(r.ratio < 1 for r in scale_rep.rows) and scale_rep.ok,
        f"ratios {[r.ratio for r in scale_rep.rows]}",
    )
    res.check(
        "gaussian.random_talagrand",
        "W2^2 <= 2 KL + 1e-12 for random diagonal Gaussians against the standard one",
        not rand_rep.violations and not rand_rep.sharpness_failures,
        f"{len(rand_rep.violations)} violations in {len(rand)} members",
    )
    res.summary = {
        "max_ratio_mean_shift": shift_rep.max_ratio,
        "max_ratio_sdev": scale_rep.max_ratio,
        "max_ratio_random": rand_rep.max_ratio,
    }
    return res


# --- heat-kernel ------------------------------------------------------------


def run_heat(params: dict, seed: int, workers: int) -> SuiteResult:
    from scipy.integrate import simpson

    from pathtci.heat import BoundViolation, kernel_eval, kernel_l2_time_integral, l2_bound

    res = SuiteResult()
    xs = np.linspace(0.0, 1.0, params["n_x"])
    table = Table("cases", ["t", "x", "integral", "bound", "slack"])
    worst = math.inf
    failed = []
    for t in params["times"]:
        try:
            vals = kernel_l2_time_integral(t, xs)
        except BoundViolation as exc:
            failed.append(f"t={t}: {exc}")
            continue
        b = l2_bound(t)
        for x, v in zip(xs, vals):
            table.rows.append([t, float(x), float(v), b, b - float(v)])
        worst = min(worst, float(b - vals.max()))
    res.tables.append(table)
    res.check(
        "heat.l2_time_integral_bound",
        "sup_x int_0^t int_0^1 p_{t-s}(x,y)^2 dy ds <= sqrt(2t/pi) + 1e-9",
        not failed,
        "; ".join(failed) or f"smallest slack {worst!r}",
    )

    z = np.linspace(0.0, 1.0, 2049)
    ck_err = 0.0
    for s, t in params["ck_times"]:
        for x in params["ck_points"]:
            for y in params["ck_points"]:
                lhs = simpson(kernel_eval(s, x, z) * kernel_eval(t, z, y), x=z)
                ck_err = max(ck_err, float(abs(lhs - kernel_eval(s + t, x, y))))
    res.check(
        "heat.chapman_kolmogorov",
        "int p_s(x,z) p_t(z,y) dz = p_{s+t}(x,y) within 1e-8 (Simpson, 2049 nodes)",
        ck_err <= 1e-8,
        f"max error {ck_err!r}",
    )
    spot = kernel_l2_time_integral(0.1, 0.5)
    res.summary = {"min_slack": worst, "chapman_kolmogorov_max_error": ck_err, "spot_t0.1_x0.5": spot}
    return res


# --- markov-tci -------------------------------------------------------------


def build_chain(params: dict, rng: np.random.Generator):
    from pathtci.markov_pathspace import MarkovChainSpec, random_chain
    from pathtci.metric_measure import DiscreteMeasure, FiniteMetricSpace

    n = params["n_states"]
    positions = params["positions"] or None
    if positions is not None and len(positions) != n:
        raise ValueError(f"positions has {len(positions)} entries for {n} states")
    spec = random_chain(rng, n, params["steps"], positions=positions)
    if params["transition"] or params["initial"]:
        base = spec.base if positions is None else FiniteMetricSpace.from_points(positions)
        P = np.array(params["transition"], dtype=float) if params["transition"] else spec.transition
        mu = DiscreteMeasure(base, params["initial"]) if params["initial"] else DiscreteMeasure(base, spec.initial.weights)
        spec = MarkovChainSpec(base, P, params["steps"], mu)
    return spec


def run_markov(params: dict, seed: int, workers: int) -> SuiteResult:
    from pathtci.markov_pathspace import (
        IdentityViolation,
        TciConstants,
        entropy_chain_identity,
        feller_lipschitz_c2,
        fit_constants,
        path_law,
        point_masses,
        tilt_family,
    )
    from pathtci.metric_measure import DiscreteMeasure, random_tilts, tilt_measure

    res = SuiteResult()
    rng = np.random.default_rng(seed)
    spec = build_chain(params, rng)
    beta = (params["beta_min"], params["beta_max"])
    P_mu = spec.law
    Qs = tilt_family(P_mu, random_tilts(rng, P_mu.space.size, params["n_tilts"], beta))
    if params["point_masses"]:
        Qs += point_masses(P_mu)
    nus = [tilt_measure(spec.initial, phi, b) for phi, b in random_tilts(rng, spec.base.size, params["n_converse"], beta)]
    nus += [DiscreteMeasure.dirac(spec.base, x) for x in spec.initial.support]

    # mixture identity
    mixed = sum(spec.initial.weights[x] * path_law(spec, x).weights for x in range(spec.base.size))
    mk_err = float(np.max(np.abs(P_mu.weights - mixed)))
    res.check("markov.mixture_identity", "P^mu = sum_x mu(x) P^x entrywise within 1e-12", mk_err <= 1e-12, f"max error {mk_err!r}")

    fitted = fit_constants(spec, Qs, extra_nus=nus, workers=workers)
    c0 = fitted.c0 if params["c0"] == "auto" else float(params["c0"])
    c1 = fitted.c1 if params["c1"] == "auto" else float(params["c1"])
    c2, c2_pair = feller_lipschitz_c2(spec, workers)
    const = TciConstants(c0, c1, c2)

    from pathtci.markov_pathspace import verify_composed_converse, verify_composed_forward

    fwd = verify_composed_forward(spec, const, Qs, workers)
    res.check(
        "markov.preconditions",
        "c0 and c1 hold on every initial marginal / conditional law of the family",
        not fwd.precondition_failures,
        "; ".join(f.describe() for f in fwd.precondition_failures[:10]),
    )
    table = Table(
        "cases",
        ["tilt", "entropy", "w2_squared", "lhs", "rhs", "ratio", "restart_lhs", "restart_rhs", "glue_lhs", "glue_rhs"],
    )
    for r in fwd.rows:
        table.rows.append([r.index, r.entropy, r.w2_squared, r.w2_squared, r.rhs, r.ratio, r.restart_lhs, r.restart_rhs, r.glue_lhs, r.glue_rhs])
    res.tables.append(table)

    summary = {
        "states": spec.base.size,
        "steps": spec.steps,
        "paths": spec.path_space.size,
        "family_size": len(Qs),
        "c0": c0,
        "c1": c1,
        "c2": c2,
        "c2_argmax_pair": list(c2_pair),
        "composed_C": const.composed_C,
    }
    if not fwd.precondition_failures:
        res.check(
            "markov.forward",
            "W_{2,T}(Q,P^mu)^2 <= (sqrt(c1) + sqrt(c0 c2))^2 H(Q|P^mu) on the family",
            not fwd.violations,
            f"{len(fwd.violations)} violations, max ratio {fwd.max_ratio!r}",
        )
        res.check(
            "markov.restart_step",
            "W_{2,T}(Q,P^nu)^2 <= c1 H(Q|P^mu), nu = Q o u0^{-1}",
            not fwd.restart_violations,
            f"{len(fwd.restart_violations)} violations",
        )
        res.check(
            "markov.gluing_step",
            "W_{2,T}(P^nu,P^mu)^2 <= c2 W2(nu,mu)^2",
            not fwd.glue_violations,
            f"{len(fwd.glue_violations)} violations",
        )
        contraction = [r.index for r in fwd.rows if not r.skipped and r.w2_initial > r.w2_squared + 1e-9]
        res.check(
            "markov.marginal_contraction",
            "W2(Q o u0^{-1}, mu)^2 <= W_{2,T}(Q, P^mu)^2",
            not contraction,
            f"{len(contraction)} violations",
        )
        summary["max_forward_ratio"] = fwd.max_ratio
        summary["skipped"] = len(fwd.skipped)

    chain_fail = []
    for i, Q in enumerate(Qs):
        try:
            entropy_chain_identity(Q, spec)
        except IdentityViolation as exc:
            chain_fail.append(f"tilt {i}: {exc}")
    res.check(
        "markov.entropy_chain",
        "H(Q|P^mu) = H(nu|mu) + sum_x nu(x) H(Q_x|P^x) within 1e-10, and H(nu|mu) <= H(Q|P^mu)",
        not chain_fail,
        "; ".join(chain_fail[:5]),
    )

    conv = verify_composed_converse(spec, const.composed_C, nus, workers)
    ctable = Table("converse", ["nu", "entropy_nu", "entropy_Q", "w2_base", "w2_path", "rhs"])
    for r in conv.rows:
        ctable.rows.append([r.index, r.entropy_nu, r.entropy_Q, r.w2_base, r.w2_path, r.rhs])
    res.tables.append(ctable)
    res.check("markov.converse_entropy", "H((p o u0) P^mu | P^mu) = H(nu|mu) within 1e-12", not conv.entropy_mismatches, f"{len(conv.entropy_mismatches)} mismatches")
    res.check("markov.converse_projection", "W2(nu,mu)^2 <= W_{2,T}((p o u0) P^mu, P^mu)^2", not conv.projection_violations, f"{len(conv.projection_violations)} violations")
    res.check("markov.converse", "W2(nu,mu)^2 <= C H(nu|mu) with C the composed constant", not conv.violations, f"max ratio {conv.max_ratio!r}")
    summary["max_converse_ratio"] = conv.max_ratio
    res.summary = summary
    return res


# --- spde suites ------------------------------------------------------------


def spde_config(params: dict, seed: int):
    from pathtci.spde_sim import Coefficient, SpdeConfig

    return SpdeConfig(
        J=params["J"],
        n_steps=params["n_steps"],
        T=params["T"],
        b=Coefficient.parse(params["b"]),
        sigma=Coefficient.parse(params["sigma"]),
        seed=seed,
        n_paths=params["n_paths"],
    )


def run_spde_coupling(params: dict, seed: int, workers: int) -> SuiteResult:
    from pathtci.heat import semigroup_apply
    from pathtci.spde_sim import Coefficient, lipschitz_ratio_scan, sup_distance_moment, terminal_fields

    res = SuiteResult()
    cfg = spde_config(params, seed)
    J = cfg.J
    pairs = [(parse_profile(f, J), parse_profile(g, J)) for f, g in params["pairs"]]
    labels = [f"{f} | {g}" for f, g in params["pairs"]]
    scan = lipschitz_ratio_scan(cfg, pairs, params["scales"], labels, workers)
    table = Table("cases", ["pair", "scale", "rho_squared", "estimate", "half_width", "ratio", "upper"])
    for r in scan.rows:
        table.rows.append([r.label, r.scale, r.rho_squared, r.estimate, r.half_width, r.ratio, r.upper])

    f0, g0 = pairs[0]
    same = sup_distance_moment(cfg, f0, f0, workers)
    res.check("spde.equal_start", "f = g gives sup-distance exactly 0", same == (0.0, 0.0), f"{same}")

    additive = cfg.with_(b=Coefficient("zero"), sigma=Coefficient("constant", params["additive_sigma"]))
    add_rows = []
    for label, (f, g) in zip(labels, pairs):
        est, hw = sup_distance_moment(additive, f, g, workers)
        rho2 = f.sup_distance(g) ** 2
        add_rows.append((label, est / rho2, hw))
        table.rows.append([f"additive: {label}", 1.0, rho2, est, hw, est / rho2, (est + hw) / rho2])
    res.tables.append(table)
    res.check(
        "spde.additive_contraction",
        "additive noise: E sup|u^f - u^g|^2 / rho(f,g)^2 <= 1 + 1e-9",
        all(r <= 1 + 1e-9 for _, r, _ in add_rows),
        f"max ratio {max(r for _, r, _ in add_rows)!r}",
    )
    res.check("spde.c2_bounds_ratios", "fitted c2 >= every ratio + half-width / rho^2", scan.bounds_all, f"fitted c2 {scan.fitted_c2!r}")
    res.check(
        "spde.scaling_stable",
        "fitted c2 over the family moves by < 2x under (f,g) -> (lam f, lam g)",
        scan.scaling_stable,
        f"per-scale {scan.fitted_by_scale}, spread {scan.scaling_spread!r}",
    )
    summary = {
        "fitted_c2": scan.fitted_c2,
        "fitted_c2_by_scale": {repr(k): v for k, v in scan.fitted_by_scale.items()},
        "scaling_spread": scan.scaling_spread,
        "lipschitz_K": cfg.lipschitz_K,
        "seed": seed,
    }

    # sup over grid levels only approximates the continuous sup; report how the
    # first pair's estimate moves under J -> 2J, dt -> dt/2 (not asserted)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fine = cfg.with_(J=2 * J, n_steps=2 * cfg.n_steps)
    f_fine, g_fine = (parse_profile(p, 2 * J) for p in params["pairs"][0])
    coarse_est, _ = sup_distance_moment(cfg, f0, g0, workers)
    fine_est, fine_hw = sup_distance_moment(fine, f_fine, g_fine, workers)
    summary["refinement"] = {
        "pair": labels[0],
        "coarse": {"J": J, "n_steps": cfg.n_steps, "estimate": coarse_est},
        "fine": {"J": 2 * J, "n_steps": 2 * cfg.n_steps, "estimate": fine_est, "half_width": fine_hw},
        "delta": fine_est - coarse_est,
        "relative_delta": (fine_est - coarse_est) / coarse_est if coarse_est else 0.0,
    }

    if params["mean_check"]:
        mcfg = cfg.with_(b=Coefficient("zero"))
        fields = terminal_fields(mcfg, f0, workers)
        mean = fields.mean(axis=0)
        se = fields.std(axis=0, ddof=1) / math.sqrt(fields.shape[0])
        target = semigroup_apply(f0, cfg.T).values
        agree = np.abs(mean - target) <= 3 * se
        frac = float(agree.mean())
        res.check("spde.mean_consistency", "b = 0: MC mean at T within 3 SE of P_T f at >= 95% of nodes", frac >= 0.95, f"fraction {frac!r}")
        summary["mean_agreement_fraction"] = frac
    res.summary = summary
    return res


def run_spde_convolution(params: dict, seed: int, workers: int) -> SuiteResult:
    from pathtci.spde_sim import gronwall_c2, stochastic_convolution_check

    res = SuiteResult()
    cfg = spde_config(params, seed)
    K = cfg.lipschitz_K
    eps = 1 / (6 * K**2) if params["eps"] == "auto" else float(params["eps"])
    f = parse_profile(params["f"], cfg.J)
    rep = stochastic_convolution_check(cfg, params["gamma"], eps, f, workers)
    table = Table("cases", ["t", "lhs", "lhs_half_width", "gamma_sup", "gamma_integral", "fixed_point", "isometry"])
    stride = max(1, cfg.n_steps // params["report_levels"])
    for n in range(0, cfg.n_steps + 1, stride):
        fp = rep.fixed_point[n] if rep.fixed_point is not None else ""
        iso = rep.isometry[n] if rep.isometry is not None else ""
        table.rows.append([rep.times[n], rep.lhs[n], rep.lhs_half_width[n], rep.gamma_sup[n], rep.gamma_integral[n], fp, iso])
    res.tables.append(table)
    res.check("spde.convolution_finite", "E sup|stochastic convolution|^2 finite and fitted C_{T,eps} finite", rep.finite, f"C {rep.fitted_C_T_eps!r}")
    res.check("spde.convolution_monotone", "E sup_{s<=t}|conv|^2 nondecreasing in t", rep.monotone)
    summary = {"eps": eps, "fitted_C_T_eps": rep.fitted_C_T_eps, "seed": seed, "lipschitz_K": K}
    if rep.fixed_point is not None:
        n = cfg.n_steps
        res.check(
            "spde.sup_exceeds_fixed_point",
            "E sup_{t,x}|conv|^2 >= E|conv_T(1/2)|^2",
            rep.lhs[n] >= rep.fixed_point[n],
            f"{float(rep.lhs[n])!r} vs {float(rep.fixed_point[n])!r}",
        )
        summary["fixed_point_T"] = rep.fixed_point[n]
        summary["isometry_T"] = rep.isometry[n]
    if K > 0:
        summary["gronwall_c2"] = gronwall_c2(K, cfg.T, rep.fitted_C_T_eps)
    res.summary = summary
    return res


RUNNERS = {
    "gaussian-t2": run_gaussian,
    "heat-kernel": run_heat,
    "markov-tci": run_markov,
    "spde-coupling": run_spde_coupling,
    "spde-convolution": run_spde_convolution,
}
