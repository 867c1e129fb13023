"""Path validation, log-densities, projection and serialization."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxsmc.mcmc import build_island_partition
from ctxsmc.model import DNA, Sequence, cpg_model, symmetric_model
from ctxsmc.path import (
    BlockPath, Path, TimeCollisionError, jump_counts, log_density_dsm, log_density_ism, merge, project,
    read_paths, validate, write_paths,
)


def reference_log_density(seq: str, y: str, T: float, events, lam: float, beta: float) -> float:
    """Straight-line tempered CpG path density (gamma = 1), written without the package."""
    def rate(s, i):
        e = 0
        if i > 0 and s[i - 1] == "C" and s[i] == "G":
            e += 1
        if i + 1 < len(s) and s[i] == "C" and s[i + 1] == "G":
            e += 1
        return lam ** (beta * e)

    def total(s):
        return sum(3 * rate(s, i) for i in range(len(s)))

    s, t_prev, out = list(seq), 0.0, 0.0
    for t, i, b in events:
        out += math.log(rate(s, i)) - (t - t_prev) * total(s)
        s[i] = b
        t_prev = t
    out -= (T - t_prev) * total(s)
    return out if "".join(s) == y else -math.inf


@st.composite
def random_paths(draw, n_max=6, m_max=8):
    """A random valid path together with its endpoints."""
    n = draw(st.integers(1, n_max))
    x = draw(st.text(alphabet="ACGT", min_size=n, max_size=n))
    T = draw(st.floats(0.05, 2.0))
    m = draw(st.integers(0, m_max))
    times = sorted(set(draw(st.lists(st.floats(1e-3, 0.999), min_size=m, max_size=m))))
    seq = list(x)
    events = []
    for t in times:
        i = draw(st.integers(0, n - 1))
        b = draw(st.sampled_from([c for c in "ACGT" if c != seq[i]]))
        seq[i] = b
        events.append((t * T, i, b))
    return x, "".join(seq), T, events


def make_path(x, T, events):
    return Path(Sequence.from_string(x), T, [e[0] for e in events], [e[1] for e in events],
                [DNA.index(e[2]) for e in events])


class TestValidate:
    def test_empty_equal(self):
        assert validate(make_path("AC", 1.0, []), "AC", "AC") is None

    def test_empty_mismatch(self):
        assert validate(make_path("AC", 1.0, []), "AC", "AG").kind == "endpoint"

    def test_equal_times(self):
        p = make_path("AC", 1.0, [(0.3, 0, "G"), (0.3, 1, "T")])
        assert validate(p, "AC", "GT").kind == "ordering"

    def test_self_substitution(self):
        p = Path(Sequence.from_string("AC"), 1.0, [0.2], [0], [DNA.index("A")])
        assert validate(p, "AC", "AC").kind == "self-substitution"

    def test_horizon(self):
        assert validate(make_path("A", 1.0, [(1.2, 0, "C")]), "A", "C").kind == "horizon"

    @settings(max_examples=80, deadline=None)
    @given(random_paths())
    def test_replay_reaches_endpoint(self, case):
        x, y, T, events = case
        p = make_path(x, T, events)
        assert validate(p, x, y) is None
        assert DNA.decode(p.final_state()) == y
        other = "".join("A" if c != "A" else "C" for c in y)
        assert validate(p, x, other).kind == "endpoint"


class TestDensities:
    def test_empty_path(self, sym):
        assert log_density_dsm(sym.view(1.0), "AA", "AA", make_path("AA", 1.0, [])) == pytest.approx(-6.0)

    def test_single_event(self, sym):
        p = make_path("A", 1.0, [(0.3, 0, "C")])
        assert log_density_dsm(sym.view(1.0), "A", "C", p) == pytest.approx(-3.0, abs=1e-14)
        assert log_density_ism(sym, "A", "C", p) == pytest.approx(-3.0, abs=1e-14)

    def test_ism_empty(self, sym):
        assert log_density_ism(sym, "ACGT", "ACGT", make_path("ACGT", 0.5, [])) == pytest.approx(-3 * 4 * 0.5)

    def test_endpoint_mismatch_is_minus_inf(self, cpg2):
        assert log_density_dsm(cpg2.view(1.0), "AC", "AG", make_path("AC", 1.0, [])) == -math.inf

    def test_invalid_raises(self, cpg2):
        p = make_path("AC", 1.0, [(0.5, 0, "G"), (0.4, 1, "T")])
        with pytest.raises(ValueError):
            log_density_dsm(cpg2.view(1.0), "AC", "GT", p)

    def test_cpg_three_sites(self):
        events = [(0.4, 1, "G")]
        p = make_path("ACA", 1.0, events)
        for beta in (0.0, 0.3, 1.0):
            got = log_density_dsm(cpg_model(2.0).view(beta), "ACA", "AGA", p)
            assert got == pytest.approx(reference_log_density("ACA", "AGA", 1.0, events, 2.0, beta), abs=1e-12)

    @settings(max_examples=80, deadline=None)
    @given(random_paths(), st.floats(0, 1), st.sampled_from([0.5, 2.0, 4.0]))
    def test_matches_reference(self, case, beta, lam):
        x, y, T, events = case
        got = log_density_dsm(cpg_model(lam).view(beta), x, y, make_path(x, T, events))
        assert got == pytest.approx(reference_log_density(x, y, T, events, lam, beta), rel=1e-11, abs=1e-11)

    @settings(max_examples=80, deadline=None)
    @given(random_paths())
    def test_factorization_at_beta_zero(self, case):
        x, y, T, events = case
        m = cpg_model(4.0)
        p = make_path(x, T, events)
        assert abs(log_density_ism(m, x, y, p) - log_density_dsm(m.view(0.0), x, y, p)) <= 1e-12

    @settings(max_examples=40, deadline=None)
    @given(random_paths(), st.floats(0.1, 0.9))
    def test_time_shift_invariance(self, case, scale):
        x, y, T, events = case
        m = symmetric_model()
        shifted = [(t * scale, i, b) for t, i, b in events]
        a = log_density_dsm(m.view(1.0), x, y, make_path(x, T, events))
        b = log_density_dsm(m.view(1.0), x, y, make_path(x, T, shifted))
        assert a == pytest.approx(b, abs=1e-12)


class TestProjection:
    def setup_method(self):
        self.p = make_path("ACGT", 1.0, [(0.1, 0, "G"), (0.2, 2, "A"), (0.5, 1, "T"), (0.7, 0, "C")])

    def test_project_all(self):
        b = project(self.p, range(4))
        assert np.array_equal(b.times, self.p.times) and np.array_equal(b.sites, self.p.sites)

    def test_project_empty(self):
        assert project(self.p, []).m == 0

    def test_round_trip(self):
        for A in ([0], [1, 2], [0, 3], []):
            assert merge(self.p, A, project(self.p, A)) == self.p

    def test_collision(self):
        blk = BlockPath({3}, [0.5], [3], [0])
        with pytest.raises(TimeCollisionError):
            merge(self.p, [3], blk)

    def test_merge_outside_block(self):
        with pytest.raises(ValueError):
            merge(self.p, [3], BlockPath({3}, [0.6], [2], [0]))

    def test_jump_counts(self):
        assert jump_counts(make_path("A", 1.0, []), [0]) == 0
        assert jump_counts(self.p, [0]) == 2
        assert jump_counts(self.p, [0]) + jump_counts(self.p, [1, 2, 3]) == self.p.m

    @settings(max_examples=60, deadline=None)
    @given(random_paths(), st.data())
    def test_random_round_trip(self, case, data):
        x, y, T, events = case
        p = make_path(x, T, events)
        A = data.draw(st.sets(st.integers(0, len(x) - 1)))
        assert merge(p, A, project(p, A)) == p
        assert jump_counts(p, A) + jump_counts(p, set(range(len(x))) - A) == p.m

    def test_island_division_sites_unmutated(self, cpg2):
        # one event per observed mutation on the r_I = 2 island pair
        x, y = "TTCATTCATT", "TTTGTTTGTT"
        part = build_island_partition(cpg2, x, y)
        diff = [i for i in range(len(x)) if x[i] != y[i]]
        p = make_path(x, 1.0, [(0.1 * (k + 1), i, y[i]) for k, i in enumerate(diff)])
        assert validate(p, x, y) is None
        for Dj in part.division_sites:
            assert jump_counts(p, Dj) == 0


class TestSerialization:
    @settings(max_examples=30, deadline=None)
    @given(st.lists(random_paths(), min_size=1, max_size=3))
    def test_round_trip(self, tmp_path_factory, cases):
        d = tmp_path_factory.mktemp("paths")
        paths = [make_path(x, T, ev) for x, _, T, ev in cases]
        write_paths(paths, d / "p.tsv")
        assert read_paths(d / "p.tsv", DNA) == paths
