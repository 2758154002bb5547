"""Combination rules, their closed-form oracles and registry behaviour."""

import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from setmerge.aggregate import (
    ARBITRARY,
    HEURISTIC,
    INDEPENDENT,
    Aggregator,
    UnknownRuleError,
    am_calibrator_combine,
    cct_combine,
    e_mean,
    e_merge_uk,
    fisher_combine,
    gamma_exclusion_level,
    gamma_threshold,
    generic_calibrator_combine,
    generic_s_combine,
    get_aggregator,
    get_calibrator,
    liptak_combine,
    register_calibrator,
    register_score,
    rueger_combine,
    uk_exclusion_level,
)
from setmerge.aggregate import Calibrator
from setmerge.numerics import open_unit, std_normal_cdf, substream

pvals = st.floats(1e-6, 1 - 1e-6)
pvecs = st.lists(pvals, min_size=1, max_size=8)


def brute_uk(e, k):
    total = sum(math.prod(c) for c in itertools.combinations(e, k))
    return total / math.comb(len(e), k)


# --- closed-form rules ------------------------------------------------------

class TestFisher:
    def test_half_half(self):
        assert fisher_combine([0.5, 0.5]) == pytest.approx(0.5966, abs=5e-5)
        # exact: 1 - F(x, 4) = exp(-x/2)(1 + x/2) at x = 4 log 2
        x = 4 * math.log(2)
        assert fisher_combine([0.5, 0.5]) == pytest.approx(math.exp(-x / 2) * (1 + x / 2), rel=1e-13)

    def test_limit_near_one(self):
        assert fisher_combine([1 - 1e-12] * 3) == pytest.approx(1.0, abs=1e-9)

    def test_small_against_monte_carlo(self):
        u = open_unit(substream(0, "fisher-mc"), (1_000_000, 3))
        null = -2 * np.log(u).sum(axis=1)
        obs = -2 * 3 * math.log(0.01)
        mc = (null >= obs).mean()
        exact = fisher_combine([0.01, 0.01, 0.01])
        assert exact < 1e-3
        assert abs(mc - exact) <= 3 * math.sqrt(exact * (1 - exact) / null.size)

    def test_single_study_identity(self):
        assert fisher_combine([0.3]) == pytest.approx(0.3, rel=1e-14)


class TestLiptak:
    def test_examples(self):
        assert liptak_combine([0.5, 0.5]) == pytest.approx(0.5, abs=1e-15)
        assert liptak_combine([0.0228, 0.0228]) == pytest.approx(0.00234, abs=5e-5)
        z = -2.0 * 2 / math.sqrt(2)
        assert liptak_combine([0.0228, 0.0228]) == pytest.approx(float(std_normal_cdf(z)), rel=2e-2)
        assert liptak_combine([0.3], [1.0]) == pytest.approx(0.3, rel=1e-12)

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            liptak_combine([0.3, 0.4], [1.0, 0.0])
        with pytest.raises(ValueError):
            liptak_combine([0.3, 0.4], [1.0])


class TestCCT:
    def test_examples(self):
        assert cct_combine([0.5] * 4) == pytest.approx(0.5, abs=1e-15)
        assert cct_combine([0.25, 0.75]) == pytest.approx(0.5, abs=1e-15)
        assert cct_combine([0.01, 0.5, 0.99]) == pytest.approx(0.5, abs=1e-12)

    def test_single_identity(self):
        assert cct_combine([0.2]) == pytest.approx(0.2, abs=1e-14)


class TestRueger:
    def test_examples(self):
        assert rueger_combine([0.2, 0.5, 0.7], 1) == pytest.approx(0.6)
        assert rueger_combine([0.2, 0.5, 0.7], 2) == pytest.approx(0.75)
        assert rueger_combine([0.9, 0.9], 1) == 1.0

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_range(self, k):
        with pytest.raises(ValueError):
            rueger_combine([0.1, 0.2, 0.3], k)


class TestAMCalibrator:
    def test_examples(self):
        assert am_calibrator_combine([0.5] * 3) == 1.0
        assert am_calibrator_combine([0.25] * 3) == pytest.approx(0.5)
        # inverting mean(2 - 2 p / a) >= 1 gives a = 2 mean(p) = 0.3
        assert am_calibrator_combine([0.1, 0.2]) == pytest.approx(0.3)


@pytest.mark.parametrize("rule", [fisher_combine, liptak_combine, cct_combine, rueger_combine,
                                  am_calibrator_combine])
def test_domain(rule):
    for bad in ([0.0, 0.5], [1.0, 0.2], [], [np.nan]):
        with pytest.raises(ValueError):
            rule(bad)


# --- properties ---------------------------------------------------------------

RULES = [fisher_combine, liptak_combine, cct_combine, am_calibrator_combine,
         lambda p: rueger_combine(p, 1), lambda p: rueger_combine(p, len(p))]


@pytest.mark.parametrize("rule", RULES)
@given(p=pvecs, data=st.data())
def test_monotone_in_each_coordinate(rule, p, data):
    i = data.draw(st.integers(0, len(p) - 1))
    bigger = list(p)
    bigger[i] = data.draw(st.floats(p[i], 1 - 1e-6))
    assert rule(bigger) >= rule(p) - 1e-12


@pytest.mark.parametrize("rule", RULES)
@given(p=pvecs, seed=st.integers(0, 1000))
def test_permutation_symmetric(rule, p, seed):
    q = list(np.random.default_rng(seed).permutation(p))
    assert rule(q) == pytest.approx(rule(p), rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("rule", RULES)
@given(p=pvecs)
def test_range(rule, p):
    assert 0.0 <= rule(p) <= 1.0


def test_matrix_input_matches_rows():
    P = np.random.default_rng(1).uniform(0.01, 0.99, (20, 4))
    for rule in RULES[:5]:
        out = rule(P)
        assert np.allclose(out, [rule(row) for row in P], rtol=1e-14, atol=0)


# --- generic score rule ---------------------------------------------------------

class TestGenericS:
    @pytest.mark.parametrize("score,exact", [("neg2log", fisher_combine), ("negphiinv", liptak_combine)])
    def test_reproduces_closed_forms(self, score, exact):
        # independent null table per input, so each error is a plain binomial error
        P = np.random.default_rng(4).uniform(0.01, 0.99, (100, 3))
        z = []
        for i, row in enumerate(P):
            g = generic_s_combine(row, score, 100_000, substream(9, "gs-oracle", score, i))
            e = exact(row)
            z.append(abs(g - e) / math.sqrt(e * (1 - e) / 100_000))
        z = np.array(z)
        assert z.max() <= 4.0
        assert (z > 2).sum() <= 10

    def test_symmetric_score_at_half(self):
        # S(1/2) = 0 for the inverse-normal score, so the tail is P(sum Z >= 0) = 1/2
        g = generic_s_combine([0.5] * 4, "negphiinv", 100_000, substream(2, "half"))
        assert abs(g - 0.5) <= 3 * math.sqrt(0.25 / 100_000)

    def test_add_one_floor(self):
        g = generic_s_combine([1e-6] * 5, "neg2log", 10_000, substream(0, "floor"))
        assert g == pytest.approx(1 / 10_001)

    def test_needs_enough_draws(self):
        with pytest.raises(ValueError):
            generic_s_combine([0.5], "neg2log", 100)

    def test_unknown_score(self):
        with pytest.raises(UnknownRuleError):
            generic_s_combine([0.5], "nope")

    def test_register_rejects_increasing(self):
        with pytest.raises(ValueError):
            register_score("increasing", lambda t: t)

    def test_deterministic(self):
        a = generic_s_combine([0.2, 0.4], "neg2log", 20_000, substream(5, "d"))
        b = generic_s_combine([0.2, 0.4], "neg2log", 20_000, substream(5, "d"))
        assert a == b


# --- calibrators -------------------------------------------------------------------

class TestCalibrators:
    def test_matches_am(self):
        P = np.random.default_rng(5).uniform(1e-4, 1 - 1e-4, (100, 5))
        got = generic_calibrator_combine(P, "am")
        assert np.max(np.abs(got - am_calibrator_combine(P))) <= 1e-8

    @pytest.mark.parametrize("k", [1, 2, 5])
    def test_matches_rueger(self, k):
        P = np.random.default_rng(6).uniform(1e-4, 1 - 1e-4, (100, 5))
        got = generic_calibrator_combine(P, "rueger", k=k)
        assert np.max(np.abs(got - rueger_combine(P, k))) <= 1e-8

    @pytest.mark.parametrize("L", range(1, 13))
    def test_matches_rueger_every_order(self, L):
        # weighted step sums such as 5 * (1/6) * (6/5) round below 1 at the jump
        P = np.random.default_rng(60 + L).uniform(0, 1, (40, L)) ** 3
        for k in range(1, L + 1):
            got = generic_calibrator_combine(P, "rueger", k=k)
            assert np.max(np.abs(got - rueger_combine(P, k))) <= 1e-8

    def test_single_study_hand_algebra(self):
        assert generic_calibrator_combine([0.25], "am") == pytest.approx(0.5, abs=1e-9)

    def test_residual_at_solution(self):
        cal = get_calibrator("am")
        P = np.random.default_rng(7).uniform(0.01, 0.4, (50, 3))
        for row in P:
            a = generic_calibrator_combine(row, "am")
            if a < 1:
                assert abs(np.mean(cal.fn(row / a)) - 1.0) <= 1e-6

    def test_weights(self):
        with pytest.raises(ValueError):
            generic_calibrator_combine([0.1, 0.2], "am", weights=[0.5, 0.6])
        # all weight on the first study reduces to that study's calibrator
        assert generic_calibrator_combine([0.1, 0.4], "am", weights=[1.0, 0.0]) == pytest.approx(0.2, abs=1e-9)

    def test_non_calibrator_rejected(self):
        register_calibrator("too-big", lambda **_: Calibrator("too-big", lambda t: 3.0 - 2.0 * np.asarray(t)))
        with pytest.raises(ValueError):
            get_calibrator("too-big")

    def test_unknown(self):
        with pytest.raises(UnknownRuleError):
            get_calibrator("nope")


# --- e-value merges ------------------------------------------------------------------

class TestEMerge:
    def test_examples(self):
        e = [0, 20, 20, 0, 20]
        assert e_merge_uk(e, 1) == pytest.approx(12)
        assert e_merge_uk(e, 2) == pytest.approx(120)
        v = [1.5, 2.0, 0.5, 3.0]
        assert e_merge_uk(v, 4) == pytest.approx(math.prod(v))

    def test_brute_force_exact(self):
        rng = np.random.default_rng(8)
        for L in range(1, 13):
            for _ in range(5):
                e = [Fraction(int(x), int(d)) for x, d in zip(rng.integers(0, 40, L), rng.integers(1, 9, L))]
                for k in range(1, L + 1):
                    assert e_merge_uk(np.array(e, dtype=object), k) == brute_uk(e, k)

    @given(st.lists(st.floats(0, 50), min_size=1, max_size=10), st.data())
    def test_float_matches_brute_force(self, e, data):
        k = data.draw(st.integers(1, len(e)))
        assert e_merge_uk(e, k) == pytest.approx(brute_uk(e, k), rel=1e-10, abs=1e-12)

    def test_mean(self):
        assert e_mean([0, 20, 20, 0, 20]) == pytest.approx(12)

    def test_domain(self):
        with pytest.raises(ValueError):
            e_merge_uk([1, 2], 3)
        with pytest.raises(ValueError):
            e_merge_uk([-1, 2], 1)
        with pytest.raises(ValueError):
            e_mean([-1.0])


# --- size diagnostics ------------------------------------------------------------------

class TestGamma:
    @pytest.mark.parametrize("a,ap", [(0.05, 0.1), (0.01, 0.05), (0.2, 0.3)])
    def test_am_level(self, a, ap):
        level = (1 - a) * ((1 - ap) - (1 - ap) ** 2) / ((1 - a) - (1 - ap) ** 2) + a
        assert gamma_exclusion_level(a, ap, "am") == pytest.approx(level, rel=1e-12)
        assert gamma_threshold(min(level + 1e-6, 1), a, ap, "am") > 1
        assert gamma_threshold(level - 1e-6, a, ap, "am") < 1

    def test_rueger_level(self):
        a, ap, k, L = 0.05, 0.1, 2, 4   # a / ap = 1/2 >= k / L = 1/2
        assert gamma_exclusion_level(a, ap, "rueger", k, L) == pytest.approx(a / ap, rel=1e-12)
        assert gamma_threshold(a / ap + 1e-6, a, ap, "rueger", k, L) > 1
        assert gamma_threshold(a / ap - 1e-6, a, ap, "rueger", k, L) < 1

    @pytest.mark.parametrize("cal,k,L", [("am", 1, 1), ("rueger", 1, 5), ("rueger", 2, 3)])
    def test_at_nominal(self, cal, k, L):
        assert gamma_threshold(0.05, 0.05, 0.2, cal, k, L) == pytest.approx(0.2)

    def test_domain(self):
        with pytest.raises(ValueError):
            gamma_threshold(0.1, 0.2, 0.1)
        with pytest.raises(ValueError):
            gamma_threshold(1.5, 0.05, 0.1)

    def test_uk_level(self):
        assert uk_exclusion_level(0.05, 0.05, 2) == pytest.approx(0.05 * 20 ** 0.5)
        assert uk_exclusion_level(0.05, 0.05, 1, 0.5) == pytest.approx(0.5)
        with pytest.raises(ValueError):
            uk_exclusion_level(0.05, 0.05, 0)


# --- registry ------------------------------------------------------------------------

class TestRegistry:
    @pytest.mark.parametrize("mid,kind,validity", [
        ("fisher", "p", INDEPENDENT), ("liptak", "p", INDEPENDENT), ("cct", "p", HEURISTIC),
        ("rueger", "p", ARBITRARY), ("rueger:3", "p", ARBITRARY), ("am", "p", ARBITRARY),
        ("neg2log", "p", INDEPENDENT), ("negphiinv", "p", INDEPENDENT),
        ("calibrator:am", "p", ARBITRARY), ("calibrator:rueger:2", "p", ARBITRARY),
        ("am-e", "e", ARBITRARY), ("u2", "e", INDEPENDENT), ("uk:1", "e", ARBITRARY), ("uk:3", "e", INDEPENDENT),
    ])
    def test_validity_tags(self, mid, kind, validity):
        agg = get_aggregator(mid)
        assert (agg.kind, agg.validity) == (kind, validity)

    @pytest.mark.parametrize("mid", ["nope", "fisher:2", "uk", "calibrator:nope", "rueger:x"])
    def test_unknown(self, mid):
        with pytest.raises(UnknownRuleError):
            get_aggregator(mid)

    def test_width_check(self):
        with pytest.raises(ValueError):
            get_aggregator("rueger:4").combine(np.full((2, 3), 0.5))

    def test_combine_dispatch(self):
        P = np.random.default_rng(9).uniform(0.01, 0.99, (10, 4))
        assert np.allclose(get_aggregator("fisher").combine(P), fisher_combine(P))
        assert np.allclose(get_aggregator("rueger:2").combine(P), rueger_combine(P, 2))
        assert np.allclose(get_aggregator("calibrator:am").combine(P), am_calibrator_combine(P), atol=1e-8)
        E = np.where(P < 0.3, 20.0, 0.0)
        assert np.allclose(get_aggregator("u2").combine(E), e_merge_uk(E, 2))

    def test_aggregator_validation(self):
        with pytest.raises(ValueError):
            Aggregator("fisher", "x", INDEPENDENT)
