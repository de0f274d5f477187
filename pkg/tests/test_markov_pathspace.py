import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathtci.markov_pathspace import (
    MarkovChainSpec,
    PathSpace,
    TciConstants,
    condition_on_initial,
    entropy_chain_identity,
    feller_lipschitz_c2,
    fit_constants,
    lift_initial_density,
    path_law,
    random_chain,
    remix,
    tci_constant_lower_bound,
    tilt_family,
    verify_composed_converse,
    verify_composed_forward,
)
from pathtci.metric_measure import DiscreteMeasure, FiniteMetricSpace, relative_entropy, tilt_measure
from pathtci.transport import w2_squared_exact


def chain(P, steps, mu=None, positions=None):
    P = np.asarray(P, dtype=float)
    base = FiniteMetricSpace.from_points(positions if positions is not None else np.arange(P.shape[0], dtype=float))
    mu = DiscreteMeasure.uniform(base) if mu is None else DiscreteMeasure(base, mu)
    return MarkovChainSpec(base, P, steps, mu)


def enumerate_law(P, w0, steps):
    """Brute-force oracle: dict path -> probability."""
    n = len(w0)
    out = {}
    for path in itertools.product(range(n), repeat=steps + 1):
        p = w0[path[0]]
        for s, t in zip(path, path[1:]):
            p *= P[s][t]
        out[path] = p
    return out


# --- path space ---------------------------------------------------------------


def test_path_space_indexing_round_trips():
    base = FiniteMetricSpace.from_points([0.0, 1.0, 3.0])
    ps = PathSpace.build(base, 2)
    assert ps.size == 27
    for i in range(ps.size):
        assert ps.index(ps.states(i)) == i
    rng = np.random.default_rng(0)
    for _ in range(40):
        i, j = rng.integers(27, size=2)
        assert ps.metric.dist[i, j] == ps.path_distance(i, j)


def test_spec_validation():
    with pytest.raises(ValueError):
        chain([[0.5, 0.6], [0.5, 0.5]], 1)
    with pytest.raises(ValueError):
        chain([[1.0, 0.0], [0.0, 1.0]], 0)
    with pytest.raises(ValueError):
        chain(np.full((10, 10), 0.1), 6)  # 10^7 paths


# --- path_law ---------------------------------------------------------------------


def test_path_law_examples():
    spec = chain(np.eye(3), 3)
    law = path_law(spec, 1)
    assert law.weights[spec.path_space.index((1, 1, 1, 1))] == 1.0

    spec = chain([[0.5, 0.5], [0.5, 0.5]], 1)
    law = path_law(spec, 0)
    idx = spec.path_space.index
    assert law.weights[idx((0, 0))] == 0.5 and law.weights[idx((0, 1))] == 0.5
    assert law.weights.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_path_law_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    spec = random_chain(rng, 3, 3)
    oracle = enumerate_law(spec.transition, spec.initial.weights, 3)
    law = spec.law
    for path, p in oracle.items():
        assert law.weights[spec.path_space.index(path)] == pytest.approx(p, abs=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_mixture_identity(seed):
    rng = np.random.default_rng(seed)
    spec = random_chain(rng, int(rng.integers(2, 5)), int(rng.integers(1, 4)))
    mixed = sum(spec.initial.weights[x] * path_law(spec, x).weights for x in range(spec.base.size))
    assert np.max(np.abs(spec.law.weights - mixed)) <= 1e-12


# --- conditioning -----------------------------------------------------------------


def test_condition_on_initial_of_path_law_is_markov():
    spec = random_chain(np.random.default_rng(1), 3, 2)
    nu, cond = condition_on_initial(spec.law, spec)
    assert nu.allclose(spec.initial)
    for x, q in cond.items():
        assert np.allclose(q.weights, path_law(spec, x).weights, atol=1e-12)
    assert np.max(np.abs(remix(nu, cond).weights - spec.law.weights)) <= 1e-12


def test_condition_on_single_path():
    spec = random_chain(np.random.default_rng(2), 3, 2)
    k = spec.path_space.index((2, 0, 1))
    Q = DiscreteMeasure.dirac(spec.path_space.metric, k)
    nu, cond = condition_on_initial(Q, spec)
    assert np.array_equal(nu.weights, [0, 0, 1])
    assert list(cond) == [2] and cond[2].weights[k] == 1


def test_condition_on_tilted_law_against_bayes():
    # 2 states, n = 2, tilt by 1{x_2 = 1}; hand Bayes: nu(x) ~ mu(x) (1 + (e^b - 1) P^2[x, 1])
    P = np.array([[0.7, 0.3], [0.4, 0.6]])
    mu = np.array([0.25, 0.75])
    spec = chain(P, 2, mu)
    beta = 0.8
    phi = np.array([1.0 if spec.path_space.states(i)[2] == 1 else 0.0 for i in range(spec.path_space.size)])
    Q = tilt_measure(spec.law, phi, beta)
    nu, cond = condition_on_initial(Q, spec)
    P2 = P @ P
    raw = mu * (1 + (math.exp(beta) - 1) * P2[:, 1])
    assert np.allclose(nu.weights, raw / raw.sum(), atol=1e-14)
    for x in range(2):
        for path in itertools.product(range(2), repeat=3):
            if path[0] != x:
                continue
            p = P[path[0], path[1]] * P[path[1], path[2]] * (math.exp(beta) if path[2] == 1 else 1.0)
            expected = p / (1 + (math.exp(beta) - 1) * P2[x, 1])
            assert cond[x].weights[spec.path_space.index(path)] == pytest.approx(expected, abs=1e-14)


# --- entropy chain identity --------------------------------------------------------


def test_chain_identity_examples():
    spec = random_chain(np.random.default_rng(3), 3, 2)
    assert entropy_chain_identity(spec.law, spec) == pytest.approx((0.0, 0.0, 0.0), abs=1e-15)

    nu = DiscreteMeasure(spec.base, [0.6, 0.3, 0.1])
    Q = lift_initial_density(nu, spec)
    dec = entropy_chain_identity(Q, spec)
    assert dec.conditional_part == pytest.approx(0.0, abs=1e-14)
    assert dec.total == pytest.approx(relative_entropy(nu, spec.initial), abs=1e-12)


def test_chain_identity_by_enumeration():
    P = np.array([[0.8, 0.2], [0.35, 0.65]])
    mu = np.array([0.4, 0.6])
    spec = chain(P, 2, mu)
    rng = np.random.default_rng(4)
    Q = tilt_measure(spec.law, rng.normal(size=spec.path_space.size), 1.3)
    oracle = enumerate_law(P, mu, 2)
    q = {p: Q.weights[spec.path_space.index(p)] for p in oracle}
    total = sum(q[p] * math.log(q[p] / oracle[p]) for p in oracle)
    nu = [sum(v for p, v in q.items() if p[0] == x) for x in range(2)]
    initial = sum(nu[x] * math.log(nu[x] / mu[x]) for x in range(2))
    conditional = 0.0
    for x in range(2):
        for p in oracle:
            if p[0] == x:
                cx, px = q[p] / nu[x], oracle[p] / mu[x]
                conditional += nu[x] * cx * math.log(cx / px)
    dec = entropy_chain_identity(Q, spec)
    assert dec.total == pytest.approx(total, abs=1e-13)
    assert dec.initial_part == pytest.approx(initial, abs=1e-13)
    assert dec.conditional_part == pytest.approx(conditional, abs=1e-13)


def test_chain_identity_skips_infinite_entropy():
    spec = chain([[1.0, 0.0], [0.0, 1.0]], 1)
    off = spec.path_space.index((0, 1))  # probability zero under P^mu
    Q = DiscreteMeasure.dirac(spec.path_space.metric, off)
    dec = entropy_chain_identity(Q, spec)
    assert dec.total == math.inf


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 3.0))
def test_chain_identity_property(seed, beta):
    rng = np.random.default_rng(seed)
    spec = random_chain(rng, 3, 2)
    Q = tilt_measure(spec.law, rng.normal(size=spec.path_space.size), beta)
    dec = entropy_chain_identity(Q, spec)
    assert abs(dec.total - dec.initial_part - dec.conditional_part) <= 1e-10
    assert dec.initial_part <= dec.total + 1e-12


# --- constants ------------------------------------------------------------------------


def test_c2_identity_transition():
    spec = chain(np.eye(3), 2, positions=[0.0, 1.0, 3.0])
    c2, _ = feller_lipschitz_c2(spec)
    assert c2 == pytest.approx(1.0, abs=1e-12)


def test_c2_identical_rows_one_step():
    row = [0.2, 0.5, 0.3]
    spec = chain([row, row, row], 1, positions=[0.0, 1.0, 3.0])
    c2, _ = feller_lipschitz_c2(spec)
    assert c2 == pytest.approx(1.0, abs=1e-12)


def test_c2_against_permutation_oracle():
    # deterministic cyclic walk: every P^x is a point mass, so W_{2,T} is a path distance
    P = np.roll(np.eye(3), 1, axis=1)
    spec = chain(P, 2, positions=[0.0, 1.0, 2.5])
    c2, pair = feller_lipschitz_c2(spec)
    ps = spec.path_space
    best = 0.0
    for x, y in itertools.permutations(range(3), 2):
        px = ps.index([(x + k) % 3 for k in range(3)])
        py = ps.index([(y + k) % 3 for k in range(3)])
        best = max(best, ps.metric.dist[px, py] ** 2 / spec.base.dist[x, y] ** 2)
    assert c2 == pytest.approx(best, abs=1e-12)


def test_tci_lower_bound_examples():
    S = FiniteMetricSpace.from_points([0.0, 1.0])
    mu = DiscreteMeasure.uniform(S)
    assert tci_constant_lower_bound(mu, [(np.array([1.0, 0.0]), 0.0)]) == 0.0
    val = tci_constant_lower_bound(mu, [(np.array([1.0, 0.0]), math.log(3))])
    nu = DiscreteMeasure(S, [0.75, 0.25])
    assert val == pytest.approx(w2_squared_exact(nu, mu).value / relative_entropy(nu, mu), abs=1e-12)
    assert val == pytest.approx(0.25 / (0.75 * math.log(1.5) + 0.25 * math.log(0.5)), abs=1e-12)
    hs = [relative_entropy(tilt_measure(mu, [1.0, 0.0], b), mu) for b in (0.5, 1.0, 2.0, 4.0)]
    assert hs == sorted(hs)


# --- forward / converse ---------------------------------------------------------------


@pytest.fixture(scope="module")
def small_setup():
    rng = np.random.default_rng(7)
    spec = random_chain(rng, 3, 2)
    from pathtci.metric_measure import random_tilts

    Qs = tilt_family(spec.law, random_tilts(rng, spec.path_space.size, 60))
    nus = tilt_family(spec.initial, random_tilts(rng, 3, 30))
    const = fit_constants(spec, Qs, extra_nus=nus)
    return spec, Qs, nus, const


def test_forward_on_small_family(small_setup):
    spec, Qs, _, const = small_setup
    rep = verify_composed_forward(spec, const, [spec.law] + Qs)
    assert not rep.precondition_failures
    assert rep.ok and not rep.violations and not rep.restart_violations and not rep.glue_violations
    first = rep.rows[0]
    assert first.w2_squared == pytest.approx(0.0, abs=1e-12) and first.entropy == 0.0
    assert 0 < rep.max_ratio < 1


def test_forward_logs_infinite_entropy_as_skipped(small_setup):
    spec, _, _, const = small_setup
    stuck = chain(np.eye(3), 2)
    off = stuck.path_space.index((0, 1, 1))
    Q = DiscreteMeasure.dirac(stuck.path_space.metric, off)
    rep = verify_composed_forward(stuck, TciConstants(100.0, 1.0, 1.0), [Q])
    assert rep.skipped == [0]


def test_forward_tiny_c1_names_the_state(small_setup):
    spec, Qs, _, const = small_setup
    rep = verify_composed_forward(spec, TciConstants(const.c0, 1e-6, const.c2), Qs)
    assert rep.precondition_failures
    assert not rep.rows
    f = rep.precondition_failures[0]
    assert f.constant == "c1" and f.state is not None
    assert f"state {f.state}" in f.describe()


def test_converse_examples(small_setup):
    spec, _, nus, const = small_setup
    C = const.composed_C
    rep = verify_composed_converse(spec, C, [spec.initial])
    r = rep.rows[0]
    assert r.entropy_nu == 0 and r.entropy_Q == pytest.approx(0.0, abs=1e-15) and r.w2_base == 0
    diracs = [DiscreteMeasure.dirac(spec.base, x) for x in range(3)]
    rep = verify_composed_converse(spec, C, diracs + nus)
    for x in range(3):
        assert rep.rows[x].entropy_nu == pytest.approx(-math.log(spec.initial.weights[x]), abs=1e-14)
    assert rep.ok


def test_thread_count_does_not_change_results(small_setup):
    spec, Qs, _, const = small_setup
    a = verify_composed_forward(spec, const, Qs[:20], workers=1)
    b = verify_composed_forward(spec, const, Qs[:20], workers=4)
    assert [r.w2_squared for r in a.rows] == [r.w2_squared for r in b.rows]
