"""Synthetic p- and e-values from (set, level) pairs."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from setmerge.numerics import RngStream, open_unit, substream
from setmerge.synthetic import (
    synth_e,
    synth_p,
    synthetic_e_matrix,
    synthetic_p_matrix,
    theoretical_p_cdf_gap,
)

T_GRID = np.arange(1, 100) / 100.0


def test_synth_p_ranges():
    for s in range(50):
        assert 0.0 < synth_p(False, 0.05, RngStream(s)) < 0.05
        assert 0.05 < synth_p(True, 0.05, RngStream(s)) < 1.0


def test_synth_p_reproducible():
    assert synth_p(True, 0.1, RngStream(9, 1)) == synth_p(True, 0.1, RngStream(9, 1))


def test_synth_e_values():
    assert synth_e(True, 0.05) == 0.0
    assert synth_e(False, 0.05) == 20.0
    assert synth_e(False, 0.1) == 10.0


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.2, 1.3])
def test_level_domain(alpha):
    with pytest.raises(ValueError):
        synth_p(True, alpha, RngStream(0))
    with pytest.raises(ValueError):
        synth_e(True, alpha)


def test_never_equals_level():
    # the extreme uniforms map strictly inside each branch
    u = np.array([[1e-300, 1 - 2 ** -53]] * 2)
    mem = np.array([[True, True], [False, False]])
    p = synthetic_p_matrix(mem, [0.05, 0.3], u)
    assert np.all(p != np.array([0.05, 0.3]))
    assert np.all((p > 0) & (p < 1))


@given(st.floats(1e-6, 1 - 1e-6), st.floats(0.001, 0.999), st.booleans())
def test_branch_property(u, alpha, member):
    p = float(synthetic_p_matrix(np.array(member), np.array(alpha), np.array(u)))
    assert 0.0 < p < 1.0
    assert (p < alpha) == (not member)


def test_e_matrix_two_values():
    mem = np.random.default_rng(0).random((50, 4)) < 0.5
    e = synthetic_e_matrix(mem, [0.05, 0.1, 0.2, 0.5])
    for col, a in enumerate([0.05, 0.1, 0.2, 0.5]):
        assert set(np.unique(e[:, col])) <= {0.0, 1.0 / a}


class TestGap:
    def test_exact_case_is_zero(self):
        assert np.all(theoretical_p_cdf_gap(T_GRID, 0.05, 0.05) == 0)

    def test_whole_space_set(self):
        assert theoretical_p_cdf_gap(0.05, 0.05, 0.0) == pytest.approx(-0.05, abs=1e-15)

    def test_endpoint(self):
        assert theoretical_p_cdf_gap(1.0, 0.2, 0.07) == pytest.approx(0.0, abs=1e-15)

    @given(st.floats(0, 1), st.floats(0.001, 0.999), st.floats(0, 1))
    def test_non_positive(self, t, alpha, frac):
        assert theoretical_p_cdf_gap(t, alpha, frac * alpha) <= 1e-15

    def test_domain(self):
        with pytest.raises(ValueError):
            theoretical_p_cdf_gap(0.5, 0.05, 0.06)
        with pytest.raises(ValueError):
            theoretical_p_cdf_gap(1.5, 0.05, 0.01)

    def test_whole_space_monte_carlo(self):
        # C = whole space: p(Y) ~ Unif(alpha, 1), so P(p <= alpha) = 0 = alpha + gap
        u = open_unit(substream(1, "gap-mc"), 20_000)
        p = synthetic_p_matrix(np.ones(u.size, dtype=bool), np.array(0.05), u)
        F = (p[:, None] <= T_GRID).mean(axis=0)
        target = T_GRID + theoretical_p_cdf_gap(T_GRID, 0.05, 0.0)
        se = np.sqrt(np.maximum(target * (1 - target), 1e-12) / u.size)
        assert np.all(np.abs(F - target) <= 3 * se + 1e-12)


def test_marginal_super_uniformity_small():
    # Y ~ N(0,1) and C = [-z, z] with miscoverage below the nominal level
    rng = substream(2, "su-small").generator
    n, alpha, miscover = 20_000, 0.1, 0.06
    outside = rng.random(n) < miscover
    p = synthetic_p_matrix(~outside, np.array(alpha), open_unit(substream(2, "su-u"), n))
    F = (p[:, None] <= T_GRID).mean(axis=0)
    se = np.sqrt(T_GRID * (1 - T_GRID) / n)
    assert np.all(F <= T_GRID + 3 * se)
    assert math.isclose(float((p <= alpha).mean()), miscover, abs_tol=4 * math.sqrt(miscover / n))
