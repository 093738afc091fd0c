import math

import numpy as np
import pytest
from scipy.linalg import expm

from pptransport.bounds import (BoundReport, OccupationSample, ZeroMeanRate, asymptotic_bound,
                                asymptotic_objective, burstiness, mean_rate, mmpp_bound_from_sample,
                                mmpp_bound_mc, optimize_lambda, poisson_bound_closed_form,
                                resolvent_bound, resolvent_bound_exact, sample_occupations,
                                variance_rate)
from pptransport.engine import FiniteCarrierModel
from pptransport.rng import substream
from pptransport.simulate import (ConstantIntensity, IntensityFunction, PiecewiseConstantIntensity,
                                  Window, stationary_distribution, validate_generator)

UNIT = Window.interval(1.0)
TWO_STATE = validate_generator([[-1.0, 1.0], [2.0, -2.0]], [1.0, 4.0])


def feynman_kac_bound(model, lam, T, variant):
    """E[A exp(Phi_T/2)] under stationary start, exactly.

    exp(Phi/2) = exp(sum_i occ_i c_i) with c_i = (rate_i - lam)^2 / (2 lam), and
    A = sum_i occ_i a_i is linear in occupation times, so the expectation is the
    derivative of a Feynman-Kac semigroup: the upper-right block of
    expm([[Q + diag c, diag a], [0, Q + diag c]] T).
    """
    r = model.rates
    c = (r - lam) ** 2 / (2 * lam)
    a = r if variant == "paper" else np.abs(r - lam)
    m = model.m
    A = model.Q + np.diag(c)
    block = np.block([[A, np.diag(a)], [np.zeros((m, m)), A]]) * T
    return float(stationary_distribution(model) @ expm(block)[:m, m:] @ np.ones(m))


def brute_resolvent_bound(weights, h, K):
    """Loop-built generator, dense solve and full state-space sum."""
    weights = np.asarray(weights, float)
    h = np.asarray(h, float)
    m = len(weights)
    states = [tuple(s) for s in np.ndindex(*(K + 1,) * m)]
    index = {s: n for n, s in enumerate(states)}
    n = len(states)
    A = np.eye(n)
    for s in states:
        r = index[s]
        for i in range(m):
            if s[i] < K:
                up = list(s); up[i] += 1
                A[r, r] += weights[i]; A[r, index[tuple(up)]] -= weights[i]
            if s[i] > 0:
                dn = list(s); dn[i] -= 1
                A[r, r] += s[i]; A[r, index[tuple(dn)]] -= s[i]
    arr = np.array(states, dtype=float)
    L = lambda k: np.prod(h ** k, axis=-1) * math.exp(-np.dot(h - 1, weights))  # noqa: E731
    pmf = np.array([np.prod([weights[i] ** s[i] * math.exp(-weights[i]) / math.factorial(s[i])
                             for i in range(m)]) for s in states])
    pmf /= pmf.sum()
    total = 0.0
    for i in range(m):
        e = np.zeros(m); e[i] = 1
        g = L(arr + e) - L(arr)
        total += weights[i] * pmf @ np.abs(np.linalg.solve(A, g))
    return total


class TestClosedForm:
    def test_identity_intensity(self):
        h = ConstantIntensity(1.0, UNIT)
        assert poisson_bound_closed_form(h, UNIT, 1.0, "paper", 1.0).value == 1.0
        assert poisson_bound_closed_form(h, UNIT, 1.0, "paper", 3.0).value == 3.0
        assert poisson_bound_closed_form(h, UNIT, 1.0, "derived").value == 0.0

    def test_constant_two(self):
        r = poisson_bound_closed_form(ConstantIntensity(2.0, UNIT), UNIT, 1.0, "derived")
        assert (r.l1_term, r.exponent) == (1.0, 1.0)
        assert r.value == pytest.approx(math.exp(0.5), rel=1e-15)

    def test_linear(self):
        h = IntensityFunction(lambda x: 1.0 + x[:, 0], 2.0, UNIT)
        r = poisson_bound_closed_form(h, UNIT, 1.0, "derived", C=2.0)
        assert r.value == pytest.approx(2.0 * 0.5 * math.exp(1 / 6), rel=1e-13)
        p = poisson_bound_closed_form(h, UNIT, 1.0, "paper")
        assert p.l1_term == pytest.approx(1.5, rel=1e-14)

    def test_ref_rate_scaling(self):
        # exponent is int (h - r)^2 / r
        r = poisson_bound_closed_form(ConstantIntensity(3.0, UNIT), UNIT, 2.0, "derived")
        assert r.exponent == pytest.approx(0.5)
        assert r.l1_term == pytest.approx(1.0)

    def test_report_invariant_and_dict(self):
        h = PiecewiseConstantIntensity([0, 0.3, 1], [0.5, 2.5])
        r = poisson_bound_closed_form(h, ref_rate=1.0, variant="paper", C=1.7)
        assert r.value == pytest.approx(r.C * r.l1_term * math.exp(r.exponent / 2), rel=1e-15)
        d = r.to_dict()
        assert d["std_error"] is None and d["variant"] == "paper" and d["C"] == 1.7

    def test_bad_arguments(self):
        h = ConstantIntensity(2.0, UNIT)
        with pytest.raises(ValueError):
            poisson_bound_closed_form(h, variant="other")
        with pytest.raises(ValueError):
            poisson_bound_closed_form(h, C=0.0)


class TestResolventBound:
    def test_identity_is_zero(self):
        m = FiniteCarrierModel([0.5, 0.5], 30)
        assert resolvent_bound([1.0, 1.0], mode="exact", model=m).value == 0.0
        h = ConstantIntensity(1.0, UNIT)
        r = resolvent_bound(h, UNIT, 1.0, mode="mc", n_samples=20, rng=substream(1))
        assert r.value == 0.0

    def test_engine_matches_brute_force(self):
        m = FiniteCarrierModel([0.5, 0.5], 14)
        ours = resolvent_bound_exact(m, [2.0, 1.0]).value
        assert ours == pytest.approx(brute_resolvent_bound([0.5, 0.5], [2.0, 1.0], 14), abs=1e-9)
        assert ours == pytest.approx(0.5, abs=1e-6)

    def test_engine_mc_matches_exact(self):
        m = FiniteCarrierModel([0.5, 0.5], 40)
        exact = resolvent_bound([2.0, 1.0], mode="exact", model=m).value
        mc = resolvent_bound([2.0, 1.0], mode="mc", model=m, n_samples=3000, n_inner=4,
                             rng=substream(2))
        assert abs(mc.value - exact) <= 3 * mc.std_error

    def test_window_mc_equals_derived_l1(self):
        # E[(Id+L)^{-1} L] = E[L] = 1, so the bound is int |h - 1| = 1/2
        h = IntensityFunction(lambda x: 1.0 + x[:, 0], 2.0, UNIT, n_quad=16)
        r = resolvent_bound(h, UNIT, 1.0, mode="mc", n_samples=400, n_inner=8, rng=substream(3))
        assert abs(r.value - 0.5) <= 3 * r.std_error


class TestMmpp:
    def test_degenerate_single_state(self):
        model = validate_generator([[0.0]], [2.0])
        r = mmpp_bound_mc(model, 2.0, 3.0, "paper", 1000, substream(1))
        assert (r.value, r.std_error, r.exponent) == (6.0, 0.0, 0.0)
        assert mmpp_bound_mc(model, 2.0, 3.0, "derived", 100, substream(1)).value == 0.0

    def test_single_state_matches_closed_form(self):
        model = validate_generator([[0.0]], [3.0])
        mc = mmpp_bound_mc(model, 2.0, 1.5, "paper", 10, substream(2))
        cf = poisson_bound_closed_form(ConstantIntensity(3.0, Window.interval(1.5)),
                                       ref_rate=2.0, variant="paper")
        assert mc.l1_term == pytest.approx(cf.l1_term, rel=1e-14)
        assert mc.exponent == pytest.approx(cf.exponent, rel=1e-14)
        assert mc.value == pytest.approx(cf.value, rel=1e-14)

    @pytest.mark.parametrize("variant", ["paper", "derived"])
    def test_two_state_vs_feynman_kac(self, variant):
        r = mmpp_bound_mc(TWO_STATE, 2.0, 1.0, variant, 100_000, substream(3))
        target = feynman_kac_bound(TWO_STATE, 2.0, 1.0, variant)
        assert abs(r.value - target) <= 3 * r.std_error

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")  # the blow-up is the point
    def test_blow_up(self):
        vals = [mmpp_bound_mc(TWO_STATE, lam, 1.0, "paper", 2000, substream(4)).value
                for lam in (10.0, 100.0, 1000.0)]
        assert vals[0] < vals[1] < vals[2]
        assert vals[2] > 1e100

    def test_thread_count_does_not_change_results(self, monkeypatch):
        monkeypatch.setenv("PPT_THREADS", "1")
        a = mmpp_bound_mc(TWO_STATE, 2.0, 1.0, "derived", 35_000, substream(5))
        monkeypatch.setenv("PPT_THREADS", "4")
        b = mmpp_bound_mc(TWO_STATE, 2.0, 1.0, "derived", 35_000, substream(5))
        assert a == b

    def test_per_path_convexity(self):
        sample = sample_occupations(TWO_STATE, 5.0, 200, substream(6))
        grid = np.linspace(0.5, 8.0, 400)
        for variant in ("paper", "derived"):
            vals = np.array([sample.per_path(lam, variant) for lam in grid])
            second = vals[2:] - 2 * vals[1:-1] + vals[:-2]
            assert second.min() >= -1e-9 * np.abs(vals).max()

    def test_phi_closed_form(self):
        s = OccupationSample(np.array([[0.25, 0.75]]), np.array([1.0, 4.0]), 1.0)
        # S1 = 3.25, S2 = 12.25
        assert s.phi(2.0)[0] == pytest.approx(12.25 / 2 - 6.5 + 2.0)
        r = mmpp_bound_from_sample(s, 2.0, "derived")
        assert r.l1_term == pytest.approx(0.25 * 1 + 0.75 * 2)


class TestAsymptotics:
    def test_two_state_values(self):
        assert mean_rate(TWO_STATE) == pytest.approx(2.0, abs=1e-14)
        assert variance_rate(TWO_STATE) == pytest.approx(2.0, abs=1e-14)
        assert burstiness(TWO_STATE) == pytest.approx(1.0, abs=1e-14)
        assert asymptotic_bound(TWO_STATE, 1.0) == pytest.approx(2 * math.exp(0.5), abs=1e-12)

    def test_objective_at_mean_rate_is_burstiness(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = rng.integers(1, 5)
            Q = rng.uniform(0.2, 2.0, size=(m, m))
            np.fill_diagonal(Q, 0)
            np.fill_diagonal(Q, -Q.sum(axis=1))
            model = validate_generator(Q, rng.uniform(0.1, 5.0, size=m))
            assert asymptotic_objective(model, mean_rate(model)) == pytest.approx(
                burstiness(model), abs=1e-12)

    def test_equal_rates(self):
        model = validate_generator([[-1.0, 1.0], [2.0, -2.0]], [3.0, 3.0])
        assert variance_rate(model) == 0.0 and burstiness(model) == 0.0
        assert asymptotic_bound(model, 2.0) == pytest.approx(6.0)

    def test_zero_mean(self):
        with pytest.raises(ZeroMeanRate):
            burstiness(validate_generator([[-1.0, 1.0], [2.0, -2.0]], [0.0, 0.0]))

    def test_monotone_in_T(self):
        vals = [asymptotic_bound(TWO_STATE, T) for T in np.linspace(0.01, 20, 200)]
        assert np.all(np.diff(vals) >= 0)


class TestOptimize:
    def test_equal_rates(self):
        model = validate_generator([[-1.0, 1.0], [2.0, -2.0]], [2.5, 2.5])
        assert optimize_lambda(model, 3.0).argmin == 2.5
        r = optimize_lambda(model, 3.0, "finite_T", n_paths=500, rng=substream(1))
        assert r.argmin == 2.5

    def test_asymptotic_argmin_is_root_second_moment(self):
        r = optimize_lambda(TWO_STATE, 50.0, "asymptotic")
        grid = np.linspace(0.9, 4.4, 10**6)
        pi = stationary_distribution(TWO_STATE)
        obj = grid * (((TWO_STATE.rates[None, :] / grid[:, None] - 1) ** 2) @ pi)
        assert abs(grid[np.argmin(obj)] - math.sqrt(6)) < 1e-5
        assert r.argmin == pytest.approx(math.sqrt(6), abs=1e-6)
        assert r.candidates["mean_rate"]["lambda"] == pytest.approx(2.0)
        assert r.candidates["mean_rate"]["objective"] == pytest.approx(1.0, abs=1e-12)
        assert r.candidates["argmin"]["objective"] < r.candidates["mean_rate"]["objective"]

    def test_finite_T_converges_to_asymptotic_argmin(self):
        r = optimize_lambda(TWO_STATE, 50.0, "finite_T", n_paths=10_000, rng=substream(2),
                            variant="paper")
        assert abs(r.argmin / math.sqrt(6) - 1) < 0.02
        assert set(r.std_errors) == {"argmin", "mean_rate", "sqrt_second_moment"}

    def test_finite_T_uses_common_paths(self):
        sample = sample_occupations(TWO_STATE, 2.0, 2000, substream(3))
        r = optimize_lambda(TWO_STATE, 2.0, "finite_T", sample=sample)
        direct = mmpp_bound_from_sample(sample, r.candidates["mean_rate"]["lambda"]).value
        assert r.candidates["mean_rate"]["objective"] == direct
        grid = np.linspace(0.9, 4.4, 2001)
        vals = [sample.per_path(l, "derived").mean() for l in grid]
        assert abs(grid[int(np.argmin(vals))] - r.argmin) < 2e-3


def test_bound_report_roundtrip():
    r = BoundReport("derived", 1.0, 0.5, 0.2, 0.5 * math.exp(0.1), 0.01, 100)
    assert set(r.to_dict()) == {"variant", "C", "l1_term", "exponent", "value",
                                "std_error", "n_samples"}


def test_bound_dominates_empirical_transport_on_finite_carrier():
    # atoms are shared on a finite carrier, so the plug-in estimator is consistent there
    from pptransport.config import GroundMetricSpec, rademacher_constant
    from pptransport.transport import EmpiricalLaw, empirical_rubinstein, engine_transport

    model = FiniteCarrierModel([0.5, 1.0], 25)
    h = np.array([1.8, 0.4])
    rng = substream(11)
    draw = lambda rates: [model.to_configuration(k)  # noqa: E731
                          for k in rng.poisson(rates, size=(500, 2))]
    mu = EmpiricalLaw(draw(model.weights))
    nu = EmpiricalLaw(draw(h * model.weights))
    est, se = empirical_rubinstein(mu, nu, GroundMetricSpec("d1"), 50, substream(12))
    bound = resolvent_bound_exact(model, h, C=rademacher_constant("d1")).value
    exact, _ = engine_transport(model, h)
    assert est - 3 * se <= bound
    assert abs(est - exact) <= 3 * se
