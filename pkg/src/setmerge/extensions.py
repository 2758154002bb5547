"""Risk-controlled set merging and synthetic statistics for rejection sets.

Risk control replaces the miscoverage indicator by a bounded loss
``loss(C, theta)`` in [0, B] that vanishes when ``theta`` is covered by
``C``. Multiple testing turns each study's rejection set into per-hypothesis
synthetic p-values and generalized e-values. The multiple-testing values can
be fed to any registered aggregator, but no merged FDR procedure is built on
top of them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Any, Callable, Hashable, Sequence

import numpy as np

from .aggregate import Aggregator, get_aggregator
from .merge import CellResult, MergeConfig, MergeReport, _aggregate, synthetic_uniforms
from .numerics import RngStream, _scale_open, open_unit
from .sets import (
    CandidateSpace,
    Continuous,
    Discrete,
    LabelSet,
    PartitionCell,
    build_partition,
    canonicalize,
)

__all__ = [
    "LossSpec",
    "MiscoverageLoss",
    "MissingRateLoss",
    "RiskStudyInput",
    "RejectionSetInput",
    "synth_p_risk",
    "synth_e_risk",
    "merge_risk",
    "synth_p_mt",
    "synth_e_mt",
    "synth_mt_matrix",
    "bh_procedure",
    "UNIF_TAIL",
    "POINT_MASS_ONE",
]

UNIF_TAIL = "UnifTail"
POINT_MASS_ONE = "PointMassOne"


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    """Bounded loss ``fn(study_set, theta) -> [0, bound]``."""

    name: str
    bound: float
    fn: Callable[[Any, Hashable], float]
    membership_only: bool = False

    def __call__(self, study_set, theta) -> float:
        v = float(self.fn(study_set, theta))
        if not 0.0 <= v <= self.bound + 1e-12:
            raise ValueError(f"loss {self.name!r} returned {v}, outside [0, {self.bound}]")
        return v


def _miscoverage(study_set, theta):
    return 0.0 if theta in study_set else 1.0


def _missing_rate(study_set, theta):
    # theta is a non-empty collection of true labels; study_set a collection of labels
    truth = frozenset(theta)
    if not truth:
        raise ValueError("missing rate needs a non-empty target label set")
    covered = set(study_set.labels if isinstance(study_set, LabelSet) else study_set)
    return 1.0 - len(truth & covered) / len(truth)


MiscoverageLoss = LossSpec("miscoverage", 1.0, _miscoverage, membership_only=True)
MissingRateLoss = LossSpec("missing-rate", 1.0, _missing_rate)


@dataclass(frozen=True)
class RiskStudyInput:
    """A risk-controlling set with its level ``beta`` and p-variant threshold.

    ``tau_ell`` defaults to the midpoint of ``(beta, bound)``.
    """

    set: Any
    beta: float
    tau_ell: float | None = None
    bound: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.beta < self.bound:
            raise ValueError(f"beta must lie in (0, {self.bound}), got {self.beta}")
        if self.tau_ell is None:
            object.__setattr__(self, "tau_ell", 0.5 * (self.beta + self.bound))
        if not self.beta < self.tau_ell < self.bound:
            raise ValueError(f"tau_ell must lie in (beta, B) = ({self.beta}, {self.bound})")


# ---------------------------------------------------------------------------
# risk synthesis and merge
# ---------------------------------------------------------------------------

def _risk_p_from_uniform(loss_value, beta, tau_ell, u):
    cut = np.asarray(beta, dtype=float) / np.asarray(tau_ell, dtype=float)
    high = np.asarray(loss_value, dtype=float) >= tau_ell
    return np.where(high, _scale_open(u, 0.0, cut), _scale_open(u, cut, 1.0))


def synth_p_risk(loss_value: float, beta: float, tau_ell: float, rng: RngStream, bound: float = 1.0) -> float:
    if not 0.0 < beta < tau_ell < bound:
        raise ValueError("need 0 < beta < tau_ell < B")
    if not 0.0 <= loss_value <= bound:
        raise ValueError("loss value must lie in [0, B]")
    return float(_risk_p_from_uniform(loss_value, beta, tau_ell, open_unit(rng)))


def synth_e_risk(loss_value: float, beta: float, bound: float = 1.0) -> float:
    if not 0.0 < beta < bound:
        raise ValueError("need 0 < beta < B")
    if not 0.0 <= loss_value <= bound:
        raise ValueError("loss value must lie in [0, B]")
    return loss_value / beta


def merge_risk(space: CandidateSpace, studies: Sequence[RiskStudyInput], loss: LossSpec,
               beta_target: float, aggregator: Aggregator | str, mode: str | None = None,
               seed: int = 0, independent: bool = False, keys: tuple = ()) -> MergeReport:
    """Merge risk-controlling sets by test inversion.

    Keeps ``theta`` when the aggregated p-value exceeds ``beta/B`` or the
    aggregated e-value is below ``B/beta``. Discrete spaces are scanned
    label by label; continuous spaces are only supported for losses that
    depend on membership alone, in which case the signature partition is
    used. With :data:`MiscoverageLoss` and e-values the result coincides
    with :func:`setmerge.merge.merge` at ``alpha = beta``; with p-values it
    does so in the limit ``tau_ell -> B``. ``keys`` selects a separate
    synthetic stream under the same seed (the base merge uses none).
    """
    t0 = time.perf_counter()
    studies = list(studies)
    if not studies:
        raise ValueError("need at least one study")
    B = loss.bound
    if not 0.0 < beta_target < B:
        raise ValueError(f"beta must lie in (0, {B})")
    for s in studies:
        if s.bound != B:
            raise ValueError("study bound differs from the loss bound")
    agg = get_aggregator(aggregator) if isinstance(aggregator, str) else aggregator
    if mode is not None and mode != agg.kind:
        raise ValueError(f"mode {mode!r} does not match aggregator kind {agg.kind!r}")
    # thresholds: p > beta/B, e < B/beta; reuse the merge inversion with tau=1
    config = MergeConfig(agg, alpha=beta_target / B, tau=1.0, seed=seed, independent=independent)
    config.check_validity()
    agg.check_width(len(studies))

    if isinstance(space, Discrete):
        cells = [PartitionCell(LabelSet([lab]), (), lab) for lab in space.labels]
        points = list(space.labels)
    elif isinstance(space, Continuous):
        if not loss.membership_only:
            raise ValueError(f"loss {loss.name!r} is not constant on partition cells")
        cells = build_partition(space, [s.set for s in studies])
        points = [c.representative for c in cells]
    else:
        raise TypeError("unknown candidate space")

    losses = np.array([[loss(s.set, theta) for s in studies] for theta in points], dtype=float)
    betas = np.array([s.beta for s in studies])
    if agg.kind == "e":
        stats = losses / betas
    else:
        taus = np.array([s.tau_ell for s in studies])
        u = synthetic_uniforms(seed, len(points), len(studies), *keys)
        stats = _risk_p_from_uniform(losses, betas, taus, u)
    values = _aggregate(stats, config)
    if agg.kind == "p":
        kept = values > beta_target / B
    else:
        kept = values < B / beta_target

    if isinstance(space, Discrete):
        merged = LabelSet(lab for lab, k in zip(points, kept) if k)
    else:
        merged = canonicalize([c.region.pairs[0] for c, k in zip(cells, kept) if k])
    results = [CellResult(c, float(v), bool(k)) for c, v, k in zip(cells, values, kept)]
    return MergeReport(merged, results, config, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# multiple testing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RejectionSetInput:
    """Rejection set of one study over hypotheses ``0 .. m-1`` at FDR level ``alpha``."""

    m: int
    rejected: frozenset
    alpha: float

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("need at least one hypothesis")
        rej = frozenset(int(i) for i in self.rejected)
        if any(i < 0 or i >= self.m for i in rej):
            raise ValueError("rejected indices must lie in [0, m)")
        object.__setattr__(self, "rejected", rej)
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("FDR level must lie in (0, 1)")

    @property
    def cut(self) -> float:
        return self.alpha * len(self.rejected) / self.m


def _mt_from_uniform(rejected_mask, cut, u, variant):
    cut = np.asarray(cut, dtype=float)
    inside = _scale_open(u, 0.0, np.where(cut > 0, cut, 1.0))
    if variant == POINT_MASS_ONE:
        outside = np.ones_like(u)
    elif variant == UNIF_TAIL:
        outside = np.where(cut > 0, _scale_open(u, np.where(cut > 0, cut, 0.0), 1.0), _scale_open(u, 0.0, 1.0))
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return np.where(rejected_mask, inside, outside)


def synth_p_mt(i: int, rej: RejectionSetInput, rng: RngStream, variant: str = UNIF_TAIL) -> float:
    if not 0 <= i < rej.m:
        raise IndexError(f"hypothesis index {i} out of range [0, {rej.m})")
    u = open_unit(rng)
    return float(_mt_from_uniform(i in rej.rejected, rej.cut, u, variant))


def synth_e_mt(i: int, rej: RejectionSetInput) -> float:
    if not 0 <= i < rej.m:
        raise IndexError(f"hypothesis index {i} out of range [0, {rej.m})")
    if i not in rej.rejected:
        return 0.0
    return rej.m / (rej.alpha * len(rej.rejected))


def synth_mt_matrix(studies: Sequence[RejectionSetInput], kind: str = "p", variant: str = UNIF_TAIL,
                    seed: int = 0, keys: tuple = ()) -> np.ndarray:
    """Synthetic values for every (study, hypothesis) pair, shape ``(L, m)``.

    P-values for study ``l`` and hypothesis ``i`` use the ``l * m + i``-th
    uniform of the stream selected by ``seed`` and ``keys``.
    """
    studies = list(studies)
    if not studies:
        raise ValueError("need at least one study")
    m = studies[0].m
    if any(s.m != m for s in studies):
        raise ValueError("all studies must test the same m hypotheses")
    mask = np.zeros((len(studies), m), dtype=bool)
    for ell, s in enumerate(studies):
        mask[ell, sorted(s.rejected)] = True
    if kind == "e":
        sizes = mask.sum(axis=1)
        alphas = np.array([s.alpha for s in studies])
        with np.errstate(divide="ignore"):
            scale = np.where(sizes > 0, m / (alphas * np.maximum(sizes, 1)), 0.0)
        return np.where(mask, scale[:, None], 0.0)
    if kind != "p":
        raise ValueError("kind must be 'p' or 'e'")
    cuts = np.array([s.cut for s in studies])[:, None]
    u = synthetic_uniforms(seed, len(studies), m, "mt", *keys)
    return _mt_from_uniform(mask, cuts, u, variant)


def bh_procedure(pvalues, alpha: float) -> frozenset:
    """Benjamini-Hochberg step-up; returns the set of rejected indices."""
    p = np.asarray(pvalues, dtype=float)
    if p.ndim != 1 or np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must be a vector with entries in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order]
    ok = np.nonzero(m * ranked / np.arange(1, m + 1) <= alpha)[0]
    if ok.size == 0:
        return frozenset()
    cutoff = ranked[ok[-1]]
    return frozenset(int(i) for i in np.nonzero(p <= cutoff)[0])
