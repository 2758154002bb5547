"""Test-inversion merging of uncertainty sets.

For every candidate (finite space) or partition cell (continuous space)
the engine draws one synthetic statistic per study, aggregates the row and
keeps the candidate when the aggregate does not reject: ``p > alpha`` in
p-value mode, ``e < tau / alpha`` in e-value mode.

Synthetic draws come from a single counter-based stream per merge, laid out
row-major over (candidate index, study index). The uniform used for cell
``i`` and study ``l`` is therefore the ``i * L + l``-th draw of that stream
whatever the number of cells, which makes a continuous merge reproducible
by a finite merge over the cell representatives.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .aggregate import HEURISTIC, INDEPENDENT, Aggregator, get_aggregator
from .numerics import open_unit, substream
from .sets import (
    CandidateSpace,
    Continuous,
    Discrete,
    IntervalSet,
    LabelSet,
    PartitionCell,
    StudyInput,
    UncertaintySet,
    build_partition,
    canonicalize,
    hull,
    measure,
    membership_matrix,
)
from .synthetic import synthetic_e_matrix, synthetic_p_matrix

__all__ = [
    "MergeConfig",
    "MergeReport",
    "CellResult",
    "IndependenceNotAsserted",
    "HeuristicRuleWarning",
    "synthetic_uniforms",
    "synthesize",
    "keep_mask",
    "evaluate",
    "merge_finite",
    "merge_continuous",
    "merge",
    "majority_vote",
]


class IndependenceNotAsserted(ValueError):
    """An independence-only rule was requested without asserting independence."""


class HeuristicRuleWarning(UserWarning):
    """The chosen rule carries no coverage guarantee."""


@dataclass(frozen=True)
class MergeConfig:
    """Settings for one merge.

    ``aggregator`` may be an :class:`Aggregator` or a registry id such as
    ``"am-e"`` or ``"fisher"``. ``tau`` only matters in e-value mode.
    """

    aggregator: Aggregator | str = "am-e"
    alpha: float = 0.05
    tau: float = 1.0
    seed: int = 0
    independent: bool = False

    def __post_init__(self):
        if isinstance(self.aggregator, str):
            object.__setattr__(self, "aggregator", get_aggregator(self.aggregator))
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"target level must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def mode(self) -> str:
        return self.aggregator.kind

    def check_validity(self) -> None:
        v = self.aggregator.validity
        if v == INDEPENDENT and not self.independent:
            raise IndependenceNotAsserted(
                f"rule {self.aggregator.name!r} is only valid for independent studies; "
                "set independent=True to assert independence"
            )
        if v == HEURISTIC:
            warnings.warn(f"rule {self.aggregator.name!r} has no coverage guarantee",
                          HeuristicRuleWarning, stacklevel=3)

    def echo(self) -> dict:
        agg = self.aggregator
        return {
            "method": agg.name,
            "rule": agg.rule,
            "validity": agg.validity,
            "mode": agg.kind,
            "alpha": self.alpha,
            "tau": self.tau,
            "seed": self.seed,
            "independent": self.independent,
        }


@dataclass(frozen=True)
class CellResult:
    cell: PartitionCell
    statistic: float
    kept: bool


@dataclass
class MergeReport:
    merged: UncertaintySet
    cells: list[CellResult]
    config: MergeConfig
    wall_time: float = field(default=0.0, compare=False)

    @property
    def measure(self) -> float:
        return measure(self.merged)

    @property
    def kept(self) -> np.ndarray:
        return np.array([c.kept for c in self.cells], dtype=bool)

    @property
    def statistics(self) -> np.ndarray:
        return np.array([c.statistic for c in self.cells], dtype=float)


# ---------------------------------------------------------------------------
# engine pieces
# ---------------------------------------------------------------------------

def synthetic_uniforms(seed: int, n_rows: int, n_studies: int, *keys) -> np.ndarray:
    """Open uniforms for ``n_rows`` candidates times ``n_studies`` studies."""
    rng = substream(seed, "synthetic", *keys)
    return open_unit(rng, (n_rows, n_studies))


def synthesize(membership: np.ndarray, alphas, mode: str, uniforms=None) -> np.ndarray:
    if mode == "e":
        return synthetic_e_matrix(membership, alphas)
    if uniforms is None:
        raise ValueError("p-value synthesis needs uniforms")
    return synthetic_p_matrix(membership, alphas, uniforms)


def keep_mask(aggregated, config: MergeConfig) -> np.ndarray:
    agg = np.asarray(aggregated, dtype=float)
    if config.mode == "p":
        return agg > config.alpha
    return agg < config.tau / config.alpha


def _aggregate(stats: np.ndarray, config: MergeConfig) -> np.ndarray:
    rng = substream(config.seed, "generic-s")
    return np.atleast_1d(config.aggregator.combine(stats, rng=rng))


def evaluate(membership: np.ndarray, alphas, config: MergeConfig, uniforms=None):
    """Aggregate and threshold one synthetic row per candidate.

    Returns ``(aggregated, kept)``. In p-value mode ``uniforms`` must have
    the shape of ``membership``; the merge functions draw them from the
    stream keyed by ``config.seed``.
    """
    stats = synthesize(membership, alphas, config.mode, uniforms)
    agg = _aggregate(stats, config)
    return agg, keep_mask(agg, config)


def _studies(studies) -> list[StudyInput]:
    out = list(studies)
    if not out:
        raise ValueError("need at least one study")
    for s in out:
        if not isinstance(s, StudyInput):
            raise TypeError("studies must be StudyInput objects")
    return out


def _run(cells: list[PartitionCell], studies: list[StudyInput], config: MergeConfig, uniforms=None):
    config.check_validity()
    config.aggregator.check_width(len(studies))
    alphas = np.array([s.alpha for s in studies])
    mem = np.array([c.signature for c in cells], dtype=bool).reshape(len(cells), len(studies))
    if config.mode == "p" and uniforms is None:
        uniforms = synthetic_uniforms(config.seed, len(cells), len(studies))
    return evaluate(mem, alphas, config, uniforms)


# ---------------------------------------------------------------------------
# public merges
# ---------------------------------------------------------------------------

def merge_finite(space: Discrete, studies, config: MergeConfig, uniforms=None) -> MergeReport:
    """Merge over a finite candidate space, one synthetic row per label.

    The row for the label at position ``i`` of ``space.labels`` uses the
    ``i``-th block of the merge's synthetic stream, unless ``uniforms``
    (shape ``(n_labels, L)``) is given to replay draws made elsewhere.
    """
    t0 = time.perf_counter()
    if not isinstance(space, Discrete):
        raise TypeError("merge_finite needs a Discrete candidate space")
    studies = _studies(studies)
    universe = set(space.labels)
    for ell, s in enumerate(studies):
        if not isinstance(s.set, LabelSet):
            raise TypeError("finite merges need label sets")
        if not s.set.labels <= universe:
            raise ValueError(f"study {ell} has labels outside the candidate space")
    labels = list(space.labels)
    mem = membership_matrix(labels, [s.set for s in studies])
    cells = [PartitionCell(LabelSet([lab]), tuple(bool(v) for v in row), lab)
             for lab, row in zip(labels, mem)]
    agg, kept = _run(cells, studies, config, uniforms)
    merged = LabelSet(lab for lab, k in zip(labels, kept) if k)
    results = [CellResult(c, float(a), bool(k)) for c, a, k in zip(cells, agg, kept)]
    return MergeReport(merged, results, config, time.perf_counter() - t0)


def merge_continuous(space: Continuous, studies, config: MergeConfig,
                     cells: list[PartitionCell] | None = None, uniforms=None) -> MergeReport:
    """Merge over an interval candidate space via the signature partition.

    Each cell receives one synthetic row, shared by every point of the
    cell; the merged set is the union of kept cells. ``cells`` may be
    passed in to reuse a partition computed earlier for the same studies,
    and ``uniforms`` to replay externally drawn synthetic uniforms.
    """
    t0 = time.perf_counter()
    if not isinstance(space, Continuous):
        raise TypeError("merge_continuous needs a Continuous candidate space")
    studies = _studies(studies)
    if cells is None:
        cells = build_partition(space, studies)
    agg, kept = _run(cells, studies, config, uniforms)
    merged = canonicalize([c.region.pairs[0] for c, k in zip(cells, kept) if k])
    results = [CellResult(c, float(a), bool(k)) for c, a, k in zip(cells, agg, kept)]
    return MergeReport(merged, results, config, time.perf_counter() - t0)


def merge(space: CandidateSpace, studies, config: MergeConfig) -> MergeReport:
    if isinstance(space, Discrete):
        return merge_finite(space, studies, config)
    return merge_continuous(space, studies, config)


def majority_vote(studies, threshold: float = 0.5, space: CandidateSpace | None = None) -> UncertaintySet:
    """Region covered by more than ``threshold`` of the studies.

    The comparison is strict, so with an even number of studies a point
    covered by exactly half of them is left out. Without ``space`` the
    candidate space is the hull (or union) of the study sets.
    """
    sets = [s.set if isinstance(s, StudyInput) else s for s in studies]
    if not sets:
        raise ValueError("need at least one study")
    if space is None:
        if all(isinstance(s, LabelSet) for s in sets):
            labels = set().union(*(s.labels for s in sets))
            if not labels:
                return LabelSet()
            space = Discrete(tuple(LabelSet(labels).ordered()))
        else:
            h = hull(sets)
            if h is None:
                return IntervalSet()
            space = Continuous(h[0], h[1]) if h[0] < h[1] else Continuous(h[0], h[0] + 1.0)
    cells = build_partition(space, sets)
    L = len(sets)
    keep = [c for c in cells if sum(c.signature) / L > threshold]
    if isinstance(space, Discrete):
        return LabelSet(lab for c in keep for lab in c.region.labels)
    return canonicalize([c.region.pairs[0] for c in keep])
