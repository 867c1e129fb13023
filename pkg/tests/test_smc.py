"""Tempering ladders, weights, resampling and the SMC / IS estimators."""
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ctxsmc.bounds import delta_beta_cap, zeta
from ctxsmc.diagnostics import island_pair
from ctxsmc.mcmc import Target, single_partition
from ctxsmc.model import cpg_model
from ctxsmc.oracle import exact_marginal
from ctxsmc.path import log_density_dsm
from ctxsmc.rng import stream
from ctxsmc.smc import (
    LadderError, TemperatureLadder, WeightDegeneracy, build_ladder, ess, log_weight, resample, run_is, run_smc,
    uniform_ladder,
)

from conftest import FIXTURE_P, FIXTURE_T, FIXTURE_X, FIXTURE_Y


def step_cap_mp(q, k, T, gmin, gmax, phimin, phimax, z):
    """High-precision evaluation of the tempering step cap, written out term by term."""
    mp = mpmath.mp
    mp.dps = 50
    e = mpmath.e
    dt = q * (k + 1) * (mpmath.mpf(gmax) - gmin)
    c = e * gmax * mpmath.exp(T * dt)
    l1 = q ** 2 * mpmath.exp(T * q) + c * q ** 2 * mpmath.exp(T * q * c)
    l2 = mpmath.log(e * mpmath.exp(2 * T * dt) * gmax / gmin)
    l3 = q ** 2 * mpmath.exp(T * q) + c ** 2 * q ** 2 * mpmath.exp(T * q * c)
    lam = max(l1, l2, l3)
    phibar = mpmath.log(max(1, phimax ** 2) / min(1, phimin))
    cap = 1 / (z * 8 * lam * phibar * (1 + T * gmax / max(1, phimax) * max(1, phimax) ** 2 / max(1, phimax)
                                        * q * (k + 1)))
    return mpmath.log(cap)


class TestZeta:
    def test_values(self):
        assert zeta(24, 6, 0.25) == 8.625
        assert zeta(10, 0, 0.3) == pytest.approx(10 * 0.09)
        assert zeta(7, 3, 0.0) == 3

    def test_errors(self):
        with pytest.raises(ValueError):
            zeta(3, 4, 0.1)


class TestLadder:
    def test_independent_model(self, unit_k2):
        lad = build_ladder(unit_k2, "ACGT", "ATGT", 0.25)
        assert lad.betas == (0.0, 1.0) and lad.V == 1

    def test_island_cap_independent_evaluation(self, cpg2):
        # the n = 10 island instance: the cap overflows double precision, so compare logs
        x, y = island_pair(2)
        T = 4 / 10
        cap = delta_beta_cap(cpg2, x, y, T)
        z = zeta(10, 4, T)
        # gamma_max * max(1, phi_max) with tempered extrema (gamma = 1, phi in [1, 4])
        ref = step_cap_mp(3, 2, T, 1.0, 4.0, 1.0, 4.0, z)
        assert cap.log_cap == pytest.approx(float(ref), rel=1e-9)
        with pytest.raises(LadderError):
            build_ladder(cpg2, x, y, T)

    def test_safety_halves_step(self, mild):
        a = build_ladder(mild, "ACGT", "ATGT", 0.1)
        b = build_ladder(mild, "ACGT", "ATGT", 0.1, safety=0.5)
        assert abs(b.V - 2 * a.V) <= 1
        gaps = np.diff(a.betas)
        assert gaps.max() <= a.delta_beta_cap * (1 + 1e-12)

    def test_uniform(self):
        lad = uniform_ladder(4)
        assert lad.betas == (0.0, 0.25, 0.5, 0.75, 1.0)

    @pytest.mark.parametrize("betas", [(0.0, 0.5), (0.1, 1.0), (0.0, 0.5, 0.5, 1.0), (0.0, 0.7, 0.3, 1.0)])
    def test_invalid(self, betas):
        with pytest.raises(ValueError):
            TemperatureLadder(betas)


class TestWeights:
    def test_zero_step(self, cpg2):
        t = Target.build(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T)
        p = t.sample_mu(stream(0, 0))
        assert log_weight(cpg2.view(0.4), cpg2.view(0.4), FIXTURE_X, FIXTURE_Y, p) == 0.0

    def test_unit_multiplier(self, unit_k2):
        t = Target.build(unit_k2, "ACGT", "ATGT", 0.5)
        for i in range(20):
            p = t.sample_mu(stream(1, i))
            assert log_weight(unit_k2.view(0.0), unit_k2.view(1.0), "ACGT", "ATGT", p) == pytest.approx(0, abs=1e-13)

    def test_difference_of_densities(self, cpg2):
        t = Target.build(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T)
        for i in range(20):
            p = t.sample_mu(stream(2, i))
            a = log_density_dsm(cpg2.view(0.8), FIXTURE_X, FIXTURE_Y, p)
            b = log_density_dsm(cpg2.view(0.3), FIXTURE_X, FIXTURE_Y, p)
            assert log_weight(cpg2.view(0.3), cpg2.view(0.8), FIXTURE_X, FIXTURE_Y, p) == pytest.approx(a - b, abs=1e-12)


class TestResampling:
    def test_equal_weights(self):
        N = 1000
        counts = np.bincount(resample(np.zeros(N), stream(0, 5)), minlength=N)
        assert counts.sum() == N
        # counts of a multinomial with equal cells: dispersion test
        hist = np.bincount(counts)
        ks = np.arange(hist.size)
        expected = stats.binom.pmf(ks, N, 1 / N) * N
        expected[-1] += stats.binom.sf(ks[-1], N, 1 / N) * N
        obs = np.append(hist[:3], hist[3:].sum())
        exp = np.append(expected[:3], expected[3:].sum())
        assert stats.chisquare(obs, exp * obs.sum() / exp.sum()).pvalue > 1e-3

    def test_single_finite(self):
        lw = np.full(50, -np.inf)
        lw[17] = 3.0
        assert np.all(resample(lw, stream(0, 6)) == 17)

    def test_all_minus_inf(self):
        with pytest.raises(WeightDegeneracy):
            resample(np.full(5, -np.inf), stream(0, 7))

    @pytest.mark.parametrize("scheme", ["multinomial", "systematic"])
    def test_expected_counts(self, scheme):
        w = np.array([0.1, 0.2, 0.3, 0.4])
        lw = np.log(w) + 100.0
        R = 10_000
        tot = np.zeros(4)
        sq = np.zeros(4)
        for r in range(R):
            c = np.bincount(resample(lw, stream(1, r), scheme), minlength=4)
            tot += c
            sq += c ** 2
        mean = tot / R
        se = np.sqrt(np.maximum(sq / R - mean ** 2, 1e-12) / R)
        assert np.all(np.abs(mean - 4 * w) <= 3 * se + 1e-12)


class TestESS:
    def test_values(self):
        assert ess(np.zeros(7)) == pytest.approx(7)
        lw = np.full(7, -np.inf)
        lw[2] = 0.0
        assert ess(lw) == pytest.approx(1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=2, max_size=40), st.floats(-300, 300))
    def test_shift_invariance_and_range(self, lw, c):
        lw = np.array(lw)
        e = ess(lw)
        assert 1 - 1e-9 <= e <= lw.size + 1e-9
        assert ess(lw + c) == pytest.approx(e, rel=1e-9)


class TestEstimators:
    def test_unit_multiplier_exact(self, unit_k2):
        from ctxsmc.bridge import log_ism_marginal
        rep = run_smc(unit_k2, "ACGT", "ATGT", 0.3, uniform_ladder(3), N=64, s=2, seed=1)
        assert rep.log_z == pytest.approx(log_ism_marginal(unit_k2, "ACGT", "ATGT", 0.3), abs=1e-12)
        rep = run_is(unit_k2, "ACGT", "ATGT", 0.3, N=64, seed=1)
        assert rep.log_z == pytest.approx(rep.log_z0, abs=1e-12)

    def test_two_point_ladder_equals_is(self, cpg2):
        t = Target.build(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, single_partition(cpg2, FIXTURE_X, FIXTURE_Y))
        a = run_smc(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, uniform_ladder(1), N=500, s=1, seed=4, target=t)
        b = run_is(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, N=500, seed=4, target=t)
        assert a.log_z == b.log_z

    def test_seed_determinism(self, cpg2):
        a = run_smc(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, uniform_ladder(3), N=300, seed=9)
        b = run_smc(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, uniform_ladder(3), N=300, seed=9)
        assert a.to_dict() == b.to_dict()

    def test_threads_do_not_matter(self, cpg2):
        a = run_smc(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, uniform_ladder(3), N=300, seed=9, threads=1)
        b = run_smc(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, uniform_ladder(3), N=300, seed=9, threads=3)
        assert a.to_dict() == b.to_dict()

    def test_small_n(self, cpg2):
        with pytest.raises(ValueError):
            run_smc(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, uniform_ladder(2), N=1)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_underflowing_weights(self, cpg2):
        # a denormal branch length drives every bridge probability to underflow
        with pytest.raises(WeightDegeneracy):
            run_is(cpg2, "AAAA", "CCCC", 1e-320, N=10, seed=0)

    def test_is_fixture_within_se(self, cpg2):
        rep = run_is(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, N=20000, seed=3)
        assert abs(rep.z - FIXTURE_P) < 3 * rep.se_z

    def test_smc_island_fixture(self, cpg2):
        x, y = island_pair(1)
        T = 2 / 6
        p = exact_marginal(cpg2, x, y, T).value
        rep = run_smc(cpg2, x, y, T, uniform_ladder(6), N=2048, seed=2)
        assert abs(rep.z / p - 1) < 0.05

    @pytest.mark.slow
    def test_unbiasedness_replicates(self, cpg2):
        # the product estimator is unbiased: mean over replicate seeds sits within 3 SE of the truth
        zs = np.array([run_smc(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, uniform_ladder(3), N=128, s=4, seed=s).z
                       for s in range(200)])
        assert abs(zs.mean() - FIXTURE_P) < 3 * zs.std(ddof=1) / math.sqrt(zs.size)

    def test_report_fields(self, cpg2):
        rep = run_smc(cpg2, FIXTURE_X, FIXTURE_Y, FIXTURE_T, uniform_ladder(2), N=100, seed=0)
        d = rep.to_dict()
        assert {"log_z", "stages", "ladder", "N", "s", "seed", "theory_N_formula", "assumptions"} <= set(d)
        assert "wall_time" not in d and "wall_time" in rep.to_dict(timing=True)
        assert all(st["acceptance"] is not None for st in d["stages"])
