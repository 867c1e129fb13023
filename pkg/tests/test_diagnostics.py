"""Closed-form bound constants, empirical bound checks and the island benchmark."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxsmc.bounds import (
    edge_sites, epsilon_threshold, lambda_theta, lambda_theta_raw, log_mgf_bound, mixing_time_bound,
    mixing_time_from_zetas, zeta_of,
)
from ctxsmc.bridge import sample_ism_bridge
from ctxsmc.diagnostics import (
    L2_STAGE_LIMIT, bench_island, bound_report, check_l2_ladder, check_mgf_bound, island_pair,
    jackknife_second_moment_se,
)
from ctxsmc.mcmc import build_island_partition
from ctxsmc.model import DNA, ContextModel, TableMultiplier
from ctxsmc.path import jump_counts
from ctxsmc.rng import stream
from ctxsmc.smc import build_ladder, run_is, uniform_ladder

from conftest import FIXTURE_T, FIXTURE_X, FIXTURE_Y

ISLANDS_X = "AAGGAAAAAAAGGAAAAAAAGGAA"
ISLANDS_Y = ISLANDS_X.replace("GG", "TT")


@pytest.fixture(scope="module")
def k4():
    return ContextModel(DNA, np.ones((4, 4)), k=4, multiplier=TableMultiplier({"AAAAA": 1.1}, default=1.0))


class TestLambda:
    def test_symmetric_at_e(self):
        lt = lambda_theta_raw(3, 0.0, math.e, 1.0, 1.0, 2)
        l1, l2, l3, lam = lt.as_tuple()
        assert l1 == pytest.approx(9 + 9 * math.e, rel=1e-12)
        assert l1 == pytest.approx(33.4645, abs=5e-5)
        assert l2 == pytest.approx(1.0)
        assert l3 == pytest.approx(9 + 9 * math.e ** 2, rel=1e-12)
        assert l3 == pytest.approx(75.5015, abs=5e-5)
        assert lam == l3

    def test_symmetric_at_one(self):
        l1, l2, l3, lam = lambda_theta_raw(3, 0.0, 1.0, 1.0, 1.0, 2).as_tuple()
        assert (l1, l2, l3) == pytest.approx((18.0, 0.0, 18.0))

    def test_against_direct_formula(self, cpg2):
        T, th = 0.05, 2.5
        g_min, g_max = cpg2.tempered_extrema(1.0)
        q, k = 3, 2
        dt = q * (k + 1) * (g_max - g_min)
        c = th * g_max * math.exp(T * dt)
        l1 = q * q * math.exp(T * q) + c * q * q * math.exp(T * q * c)
        l3 = q * q * math.exp(T * q) + c * c * q * q * math.exp(T * q * c)
        l2 = math.log(th * math.exp(2 * T * dt) * g_max / g_min)
        got = lambda_theta(cpg2, th, T)
        assert (got.lambda1, got.lambda2, got.lambda3) == pytest.approx((l1, l2, l3), rel=1e-12)
        assert got.delta_tilde == pytest.approx(dt)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(1.01, 5.0), st.floats(0.0, 0.3), st.floats(1.0, 3.0))
    def test_monotone_in_theta(self, theta, T, gmax):
        a = lambda_theta_raw(4, T, theta, gmax, 1.0, 2)
        b = lambda_theta_raw(4, T, theta * 1.1, gmax, 1.0, 2)
        assert b.log_value >= a.log_value

    def test_large_values_stay_in_log_space(self, cpg4):
        lt = lambda_theta(cpg4, math.e, 2.0)
        assert math.isfinite(lt.log_value) and lt.log_value > 709
        assert lt.value == math.inf


class TestMixingBound:
    def test_three_island_instance_finite(self, k4):
        part = build_island_partition(k4, ISLANDS_X, ISLANDS_Y)
        b = mixing_time_bound(k4, part, ISLANDS_X, ISLANDS_Y, 0.05, 0.25, 2.0)
        assert math.isfinite(b.log_value)
        assert b.c3 == pytest.approx(3 * (b.c1 + 2 * 0.05 * b.c2) / lambda_theta(k4, math.e, 0.05).value, rel=1e-10)

    def test_nonincreasing_in_epsilon(self, k4):
        part = build_island_partition(k4, ISLANDS_X, ISLANDS_Y)
        vals = [mixing_time_bound(k4, part, ISLANDS_X, ISLANDS_Y, 0.05, e, 2.0).log_value for e in (0.05, 0.1, 0.25, 0.5)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_grows_with_island_size(self):
        # doubling every island-local zeta term (as when r_star doubles) raises the bound
        args = dict(B=3, lambda_e=40.0, log_phi_star=0.1, dtilde_plus_delta=0.2, T=0.1, epsilon=0.25, omega=2.0)
        z = dict(z_I_max=0.5, z_Dj_max=0.2, z_D=0.4, z_dD=0.4, z_dDj_max=0.2)
        a = mixing_time_from_zetas(**args, **z)
        b = mixing_time_from_zetas(**args, **{k: 2 * v for k, v in z.items()})
        assert b.log_value - a.log_value > 0

    @pytest.mark.parametrize("eps,omega", [(0.0, 2.0), (1.0, 2.0), (0.5, 0.5)])
    def test_invalid_arguments(self, eps, omega):
        with pytest.raises(ValueError):
            mixing_time_from_zetas(1, 1.0, 0.1, 0.1, 0.1, eps, omega, 0, 0, 0, 0, 0)

    def test_threshold(self):
        assert epsilon_threshold(0.0, math.inf, 3, 0.25) == pytest.approx(math.log(36))
        assert epsilon_threshold(2.0, 5.0, 3, 0.25) == pytest.approx(10 + math.log(36))


class TestMGF:
    def test_zero_zeta_is_prefactor_only(self, cpg2):
        # sites 0 and 3 of ACGT -> ATGT carry no mutation
        A = [3]
        g_min, g_max = cpg2.tempered_extrema()
        pref = FIXTURE_T * 3 * len(edge_sites(cpg2, 4, A)) * (g_max - g_min)
        assert zeta_of(np.array([0, 1, 2, 3]), np.array([0, 3, 2, 3]), A, FIXTURE_T) == pytest.approx(
            FIXTURE_T ** 2)
        assert edge_sites(cpg2, 4, A) == [3]
        assert log_mgf_bound(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, [], math.e) == 0.0
        assert pref > 0

    def test_bound_holds_on_bridge_draws(self, cpg2):
        paths = [sample_ism_bridge(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, stream(11, i)) for i in range(2000)]
        for A in ([0, 1, 2, 3], [1], [0, 2]):
            chk = check_mgf_bound(paths, cpg2, FIXTURE_X, FIXTURE_Y, A, math.e, FIXTURE_T)
            assert chk.passed
            manual = math.log(np.mean([math.e ** jump_counts(p, A) for p in paths]))
            assert chk.log_empirical == pytest.approx(manual, rel=1e-10)

    def test_counts_and_weights(self, cpg2):
        chk = check_mgf_bound([0, 1, 2], cpg2, FIXTURE_X, FIXTURE_Y, [1], 2.0, FIXTURE_T,
                              log_weights=[0.0, math.log(2), -math.inf])
        assert chk.log_empirical == pytest.approx(math.log((1 + 2 * 2) / 3))

    def test_empty(self, cpg2):
        with pytest.raises(ValueError):
            check_mgf_bound([], cpg2, FIXTURE_X, FIXTURE_Y, [1], 2.0, FIXTURE_T)


class TestL2Ladder:
    def test_independent_model_is_one(self, unit_k2):
        out = check_l2_ladder(unit_k2, "ACGT", "ATGT", 0.3, uniform_ladder(1))
        assert out[0].l2 == pytest.approx(1.0, abs=1e-10) and out[0].method == "exact"

    def test_tiny_step_near_one(self, cpg2):
        from ctxsmc.smc import TemperatureLadder
        out = check_l2_ladder(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, TemperatureLadder((0.0, 0.5, 0.5 + 1e-9, 1.0)))
        assert out[1].l2 == pytest.approx(1.0, abs=1e-7)

    def test_exact_matches_is_second_moment(self, cpg2):
        exact = check_l2_ladder(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, uniform_ladder(1))[0].l2
        rep = run_is(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, N=100_000, seed=5)
        se = jackknife_second_moment_se(rep.final_log_w)
        assert abs(rep.stages[0].chi2_hat - exact) < 4 * se

    def test_theory_ladder_every_stage_within_limit(self, mild):
        lad = build_ladder(mild, "ACGT", "ATGT", 0.1)
        out = check_l2_ladder(mild, "ACGT", "ATGT", 0.1, lad)
        assert len(out) == lad.V
        assert max(s.l2 for s in out) <= L2_STAGE_LIMIT
        assert L2_STAGE_LIMIT == pytest.approx(40.171, abs=1e-3)

    def test_large_state_space_needs_report(self, cpg2):
        x, y = island_pair(3)
        with pytest.raises(ValueError):
            check_l2_ladder(cpg2, x, y, 0.4, uniform_ladder(2), cap=4 ** 6)


class TestJackknife:
    def test_against_loop(self):
        rng = np.random.default_rng(0)
        lw = rng.normal(size=200)
        w = np.exp(lw - lw.max())
        parts = np.array_split(np.arange(200), 20)
        loo = []
        for p in parts:
            keep = np.setdiff1d(np.arange(200), p)
            loo.append(np.mean(w[keep] ** 2) / np.mean(w[keep]) ** 2)
        loo = np.array(loo)
        ref = math.sqrt(19 / 20 * np.sum((loo - loo.mean()) ** 2))
        assert jackknife_second_moment_se(lw) == pytest.approx(ref, rel=1e-10)

    def test_equal_weights_zero(self):
        assert jackknife_second_moment_se(np.zeros(100)) == pytest.approx(0.0, abs=1e-12)


class TestBoundReport:
    def test_keys(self, cpg2):
        rep = bound_report(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T)
        assert {"lambda", "zeta", "M_eps", "mixing_time", "delta_beta_cap", "partition"} <= set(rep)
        assert rep["zeta"]["all"] == pytest.approx(1 + FIXTURE_T + 3 * FIXTURE_T ** 2)
        assert all(not (isinstance(v, float) and math.isnan(v)) for v in rep["M_eps"].values())
        assert not math.isnan(rep["mixing_time"]["c3"])

    def test_with_samples(self, cpg2):
        paths = [sample_ism_bridge(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, stream(3, i)) for i in range(200)]
        rep = bound_report(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, samples=paths)
        assert "all" in rep["mgf_checks"] and all(c["passed"] for c in rep["mgf_checks"].values())


class TestIsland:
    def test_pair(self):
        assert island_pair(1) == ("TTCATT", "TTTGTT")
        with pytest.raises(ValueError):
            island_pair(0)

    def test_bench_reproducible(self):
        a = bench_island(1, N=256, seeds=(3,), V=4)
        b = bench_island(1, N=256, seeds=(3,), V=4)
        assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
        row = a[0]
        assert (row.n, row.r, row.B, row.is_chi2_method) == (6, 2, 1, "exact")
        assert row.T == pytest.approx(2 / 6)
        assert row.smc_stage_l2_exact_max >= 1.0
