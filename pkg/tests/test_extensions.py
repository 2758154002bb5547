"""Risk-controlled merging and synthetic statistics for rejection sets."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from setmerge.extensions import (
    POINT_MASS_ONE,
    UNIF_TAIL,
    LossSpec,
    MiscoverageLoss,
    MissingRateLoss,
    RejectionSetInput,
    RiskStudyInput,
    bh_procedure,
    merge_risk,
    synth_e_mt,
    synth_e_risk,
    synth_mt_matrix,
    synth_p_mt,
    synth_p_risk,
)
from setmerge.merge import MergeConfig, merge
from setmerge.numerics import RngStream
from setmerge.sets import Continuous, Discrete, IntervalSet, LabelSet, StudyInput
from setmerge.synthetic import synth_e, synth_p

I = IntervalSet.from_pairs
TOP = float(np.nextafter(1.0, 0.0))


class TestRiskSynthesis:
    def test_ranges(self):
        for s in range(30):
            assert 0.0 < synth_p_risk(1.0, 0.1, 0.5, RngStream(s)) < 0.2
            assert 0.2 < synth_p_risk(0.0, 0.1, 0.5, RngStream(s)) < 1.0

    def test_threshold_is_inclusive(self):
        assert synth_p_risk(0.5, 0.1, 0.5, RngStream(0)) < 0.2

    def test_reduces_to_miscoverage(self):
        for s in range(30):
            for member in (True, False):
                a = synth_p_risk(0.0 if member else 1.0, 0.1, TOP, RngStream(s))
                b = synth_p(member, 0.1, RngStream(s))
                assert a == pytest.approx(b, rel=1e-15, abs=1e-17)

    def test_e_examples(self):
        assert synth_e_risk(0.0, 0.1) == 0.0
        assert synth_e_risk(0.3, 0.1) == pytest.approx(3.0)
        assert synth_e_risk(1.0, 0.05) == synth_e(False, 0.05)
        assert synth_e_risk(0.0, 0.05) == synth_e(True, 0.05)

    def test_domain(self):
        with pytest.raises(ValueError):
            synth_p_risk(0.5, 0.3, 0.2, RngStream(0))
        with pytest.raises(ValueError):
            synth_p_risk(1.5, 0.1, 0.5, RngStream(0))
        with pytest.raises(ValueError):
            synth_e_risk(0.5, 1.0)

    def test_study_input(self):
        s = RiskStudyInput(LabelSet("a"), 0.1)
        assert s.tau_ell == pytest.approx(0.55)
        with pytest.raises(ValueError):
            RiskStudyInput(LabelSet("a"), 0.1, tau_ell=0.05)
        with pytest.raises(ValueError):
            RiskStudyInput(LabelSet("a"), 1.0)


class TestLosses:
    def test_miscoverage(self):
        assert MiscoverageLoss(LabelSet("ab"), "a") == 0.0
        assert MiscoverageLoss(I([[0, 1]]), 2.0) == 1.0

    def test_missing_rate(self):
        assert MissingRateLoss(LabelSet([0, 1]), frozenset({0, 1, 2})) == pytest.approx(1 / 3)
        assert MissingRateLoss(LabelSet([0, 1, 2, 5]), frozenset({0, 1, 2})) == 0.0
        with pytest.raises(ValueError):
            MissingRateLoss(LabelSet([0]), frozenset())

    def test_bound_enforced(self):
        bad = LossSpec("bad", 1.0, lambda s, t: 2.0)
        with pytest.raises(ValueError):
            bad(LabelSet("a"), "a")


class TestMergeRisk:
    @given(st.lists(st.frozensets(st.sampled_from("abcdef")), min_size=1, max_size=5),
           st.sampled_from([0.05, 0.1, 0.2]), st.integers(0, 2 ** 32))
    def test_miscoverage_e_mode_is_base_merge(self, label_sets, beta, seed):
        space = Discrete(tuple("abcdef"))
        risk = [RiskStudyInput(LabelSet(s), beta) for s in label_sets]
        base = [StudyInput(LabelSet(s), beta) for s in label_sets]
        a = merge_risk(space, risk, MiscoverageLoss, beta, "am-e", seed=seed)
        b = merge(space, base, MergeConfig("am-e", alpha=beta, seed=seed))
        assert a.merged == b.merged
        assert np.array_equal(a.statistics, b.statistics)

    @given(st.lists(st.frozensets(st.sampled_from("abcdef")), min_size=1, max_size=5),
           st.sampled_from(["rueger", "fisher", "am"]), st.integers(0, 2 ** 32))
    def test_miscoverage_p_mode_is_base_merge(self, label_sets, mid, seed):
        space = Discrete(tuple("abcdef"))
        risk = [RiskStudyInput(LabelSet(s), 0.1, tau_ell=TOP) for s in label_sets]
        base = [StudyInput(LabelSet(s), 0.1) for s in label_sets]
        a = merge_risk(space, risk, MiscoverageLoss, 0.1, mid, seed=seed, independent=True)
        b = merge(space, base, MergeConfig(mid, alpha=0.1, seed=seed, independent=True))
        assert a.merged == b.merged

    def test_continuous_miscoverage(self):
        space = Continuous(0, 10)
        sets = [I([[1, 4]]), I([[3, 6]]), I([[2, 5]])]
        a = merge_risk(space, [RiskStudyInput(s, 0.05) for s in sets], MiscoverageLoss, 0.05, "am-e")
        b = merge(space, [StudyInput(s, 0.05) for s in sets], MergeConfig("am-e", alpha=0.05))
        assert a.merged == b.merged

    def test_single_study_threshold(self):
        truth_sets = [frozenset(c) for c in ({0}, {1}, {0, 1}, {0, 2}, {0, 1, 2})]
        space = Discrete(tuple(truth_sets))
        study = RiskStudyInput(LabelSet([0, 1]), 0.4)
        rep = merge_risk(space, [study], MissingRateLoss, 0.5, "am-e")
        for theta, c in zip(space.labels, rep.cells):
            loss = MissingRateLoss(study.set, theta)
            assert c.kept == (loss / 0.4 < 1.0 / 0.5)

    def test_zero_losses_keep_everything(self):
        space = Discrete(tuple(frozenset({j}) for j in range(4)))
        studies = [RiskStudyInput(LabelSet(range(4)), 0.1) for _ in range(3)]
        for mid in ("am-e", "rueger", "fisher"):
            rep = merge_risk(space, studies, MissingRateLoss, 0.1, mid, independent=True)
            assert rep.merged == LabelSet(space.labels)

    def test_validation(self):
        space = Discrete(("a", "b"))
        st1 = [RiskStudyInput(LabelSet("a"), 0.1)]
        with pytest.raises(ValueError):
            merge_risk(space, st1, MiscoverageLoss, 1.0, "am-e")
        with pytest.raises(ValueError):
            merge_risk(space, st1, MiscoverageLoss, 0.1, "am-e", mode="p")
        with pytest.raises(ValueError):
            merge_risk(space, [], MiscoverageLoss, 0.1, "am-e")
        with pytest.raises(ValueError):
            merge_risk(Continuous(0, 1), [RiskStudyInput(I([[0, 1]]), 0.1)], MissingRateLoss, 0.1, "am-e")


class TestMultipleTesting:
    def test_p_examples(self):
        rej = RejectionSetInput(100, frozenset(range(20)), 0.05)
        for s in range(20):
            assert 0.0 < synth_p_mt(3, rej, RngStream(s)) < 0.01
            assert 0.01 < synth_p_mt(50, rej, RngStream(s), UNIF_TAIL) < 1.0
            assert synth_p_mt(50, rej, RngStream(s), POINT_MASS_ONE) == 1.0

    def test_empty_rejection_set(self):
        rej = RejectionSetInput(10, frozenset(), 0.1)
        for s in range(20):
            assert 0.0 < synth_p_mt(3, rej, RngStream(s), UNIF_TAIL) < 1.0
        assert synth_e_mt(3, rej) == 0.0

    def test_e_examples(self):
        rej = RejectionSetInput(100, frozenset(range(20)), 0.05)
        assert synth_e_mt(3, rej) == pytest.approx(100.0)
        assert synth_e_mt(50, rej) == 0.0
        assert sum(synth_e_mt(i, rej) for i in rej.rejected) == pytest.approx(100 / 0.05)

    def test_index_range(self):
        rej = RejectionSetInput(5, frozenset({1}), 0.1)
        with pytest.raises(IndexError):
            synth_p_mt(5, rej, RngStream(0))
        with pytest.raises(IndexError):
            synth_e_mt(-1, rej)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            RejectionSetInput(5, frozenset({5}), 0.1)
        with pytest.raises(ValueError):
            RejectionSetInput(0, frozenset(), 0.1)

    def test_matrix_layout(self):
        studies = [RejectionSetInput(6, frozenset({0, 2}), 0.1), RejectionSetInput(6, frozenset(), 0.2)]
        p = synth_mt_matrix(studies, "p", POINT_MASS_ONE, seed=3)
        assert p.shape == (2, 6)
        assert np.all(p[1] == 1.0) and np.all(p[0, [1, 3, 4, 5]] == 1.0)
        assert np.all(p[0, [0, 2]] < 0.1 * 2 / 6)
        e = synth_mt_matrix(studies, "e")
        assert e[0].sum() == pytest.approx(6 / 0.1) and np.all(e[1] == 0)
        assert np.array_equal(p, synth_mt_matrix(studies, "p", POINT_MASS_ONE, seed=3))

    def test_matrix_validation(self):
        with pytest.raises(ValueError):
            synth_mt_matrix([RejectionSetInput(3, frozenset(), 0.1), RejectionSetInput(4, frozenset(), 0.1)])
        with pytest.raises(ValueError):
            synth_mt_matrix([RejectionSetInput(3, frozenset(), 0.1)], kind="z")
        with pytest.raises(ValueError):
            synth_mt_matrix([RejectionSetInput(3, frozenset(), 0.1)], variant="nope")


class TestBH:
    def test_examples(self):
        assert bh_procedure([1.0] * 5, 0.05) == frozenset()
        # hypotheses are indexed from zero: the first one is rejected
        assert bh_procedure([0.001, 0.9, 0.9], 0.05) == frozenset({0})
        assert bh_procedure([0.001, 0.002, 0.004], 0.05) == frozenset({0, 1, 2})

    def test_step_up(self):
        # p_(2) = 0.03 > 0.05 * 2 / 4 fails but p_(3) = 0.035 <= 0.05 * 3 / 4 passes
        assert bh_procedure([0.001, 0.03, 0.035, 0.9], 0.05) == frozenset({0, 1, 2})

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.floats(0.01, 0.5))
    def test_against_definition(self, p, alpha):
        m = len(p)
        ranked = sorted(p)
        ok = [i for i in range(1, m + 1) if m * ranked[i - 1] / i <= alpha]
        expected = frozenset() if not ok else frozenset(i for i in range(m) if p[i] <= ranked[max(ok) - 1])
        assert bh_procedure(p, alpha) == expected

    def test_domain(self):
        with pytest.raises(ValueError):
            bh_procedure([1.2], 0.1)
