"""Uncertainty sets, candidate spaces and the signature partition.

Interval sets are finite unions of closed intervals kept in canonical form
(sorted, pairwise disjoint, with a strict gap between neighbours). Removing
a closed interval leaves half-open pieces; those are stored closed as well,
since endpoints carry zero Lebesgue measure. Label sets are plain finite
sets over a discrete candidate space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence, Union

import numpy as np

__all__ = [
    "Continuous",
    "Discrete",
    "CandidateSpace",
    "IntervalSet",
    "LabelSet",
    "UncertaintySet",
    "StudyInput",
    "PartitionCell",
    "SetKindError",
    "canonicalize",
    "intersect",
    "difference",
    "union",
    "measure",
    "contains",
    "membership_matrix",
    "build_partition",
    "hull",
]


class SetKindError(TypeError):
    """Raised when interval sets and label sets are mixed."""


# ---------------------------------------------------------------------------
# candidate spaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Continuous:
    """Closed bounded interval ``[lo, hi]`` of candidate values."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ValueError("continuous candidate space needs finite bounds")
        if not self.lo < self.hi:
            raise ValueError(f"candidate space needs lo < hi, got [{self.lo}, {self.hi}]")

    def as_set(self) -> "IntervalSet":
        return IntervalSet.from_pairs([(self.lo, self.hi)])

    @property
    def measure(self) -> float:
        return float(self.hi - self.lo)


@dataclass(frozen=True)
class Discrete:
    """Finite ordered collection of distinct candidate labels."""

    labels: tuple

    def __post_init__(self):
        labels = tuple(self.labels)
        if not labels:
            raise ValueError("discrete candidate space must not be empty")
        if len(set(labels)) != len(labels):
            raise ValueError("discrete candidate space has duplicate labels")
        object.__setattr__(self, "labels", labels)

    def as_set(self) -> "LabelSet":
        return LabelSet(self.labels)

    @property
    def measure(self) -> float:
        return float(len(self.labels))

    def index(self) -> dict:
        return {lab: i for i, lab in enumerate(self.labels)}


CandidateSpace = Union[Continuous, Discrete]


# ---------------------------------------------------------------------------
# set types
# ---------------------------------------------------------------------------

class IntervalSet:
    """Canonical finite union of closed intervals.

    Build one with :func:`canonicalize` or :meth:`from_pairs`; the
    constructor trusts its input and is meant for already canonical data.
    """

    __slots__ = ("lefts", "rights")

    def __init__(self, lefts=(), rights=()):
        self.lefts = np.asarray(lefts, dtype=float)
        self.rights = np.asarray(rights, dtype=float)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence[float]]) -> "IntervalSet":
        return canonicalize(pairs)

    @classmethod
    def empty(cls) -> "IntervalSet":
        return cls()

    @property
    def pairs(self) -> list[tuple[float, float]]:
        return [(float(a), float(b)) for a, b in zip(self.lefts, self.rights)]

    def is_empty(self) -> bool:
        return self.lefts.size == 0

    def __len__(self):
        return int(self.lefts.size)

    def __eq__(self, other):
        if not isinstance(other, IntervalSet):
            return NotImplemented
        return np.array_equal(self.lefts, other.lefts) and np.array_equal(self.rights, other.rights)

    def __hash__(self):
        return hash((self.lefts.tobytes(), self.rights.tobytes()))

    def __repr__(self):
        body = ", ".join(f"[{a:g}, {b:g}]" for a, b in self.pairs)
        return f"IntervalSet({body})"

    def __contains__(self, y):
        return bool(contains(self, y))


class LabelSet:
    """Finite set of candidate labels."""

    __slots__ = ("labels",)

    def __init__(self, labels: Iterable[Hashable] = ()):
        self.labels = frozenset(labels)

    def is_empty(self) -> bool:
        return not self.labels

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, LabelSet):
            return NotImplemented
        return self.labels == other.labels

    def __hash__(self):
        return hash(self.labels)

    def __contains__(self, y):
        return y in self.labels

    def __iter__(self):
        return iter(self.labels)

    def ordered(self, space: Discrete | None = None) -> list:
        if space is None:
            try:
                return sorted(self.labels)
            except TypeError:
                return sorted(self.labels, key=repr)
        return [lab for lab in space.labels if lab in self.labels]

    def __repr__(self):
        return f"LabelSet({self.ordered()})"


UncertaintySet = Union[IntervalSet, LabelSet]


@dataclass(frozen=True)
class StudyInput:
    """One study's uncertainty set together with its control level."""

    set: UncertaintySet
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"study level must lie in (0, 1), got {self.alpha}")
        if not isinstance(self.set, (IntervalSet, LabelSet)):
            raise TypeError("study set must be an IntervalSet or LabelSet")


@dataclass(frozen=True)
class PartitionCell:
    """A region on which every study's membership indicator is constant."""

    region: UncertaintySet
    signature: tuple[bool, ...]
    representative: Hashable = field(compare=False)

    @property
    def measure(self) -> float:
        return measure(self.region)

    def bits(self) -> str:
        return "".join("1" if s else "0" for s in self.signature)


# ---------------------------------------------------------------------------
# algebra
# ---------------------------------------------------------------------------

def canonicalize(intervals) -> IntervalSet:
    """Sort, merge overlapping or touching intervals, keep isolated points."""
    if isinstance(intervals, IntervalSet):
        return intervals
    pairs = [(float(a), float(b)) for a, b in intervals]
    for a, b in pairs:
        if not a <= b:
            raise ValueError(f"interval [{a}, {b}] has a > b")
    if not pairs:
        return IntervalSet()
    pairs.sort()
    lefts, rights = [pairs[0][0]], [pairs[0][1]]
    for a, b in pairs[1:]:
        if a <= rights[-1]:
            if b > rights[-1]:
                rights[-1] = b
        else:
            lefts.append(a)
            rights.append(b)
    return IntervalSet(lefts, rights)


def _same_kind(a, b):
    if isinstance(a, IntervalSet) and isinstance(b, IntervalSet):
        return "intervals"
    if isinstance(a, LabelSet) and isinstance(b, LabelSet):
        return "labels"
    raise SetKindError(f"cannot combine {type(a).__name__} with {type(b).__name__}")


def intersect(a: UncertaintySet, b: UncertaintySet) -> UncertaintySet:
    if _same_kind(a, b) == "labels":
        return LabelSet(a.labels & b.labels)
    out = []
    i = j = 0
    al, ar, bl, br = a.lefts, a.rights, b.lefts, b.rights
    while i < al.size and j < bl.size:
        lo = max(al[i], bl[j])
        hi = min(ar[i], br[j])
        if lo <= hi:
            out.append((lo, hi))
        if ar[i] < br[j]:
            i += 1
        else:
            j += 1
    return canonicalize(out)


def difference(a: UncertaintySet, b: UncertaintySet) -> UncertaintySet:
    """``a`` minus ``b``; interval pieces keep the endpoints they touch."""
    if _same_kind(a, b) == "labels":
        return LabelSet(a.labels - b.labels)
    out = []
    for lo, hi in a.pairs:
        cur = lo
        alive = True
        for blo, bhi in b.pairs:
            if bhi < cur or blo > hi:
                continue
            if blo > cur:
                out.append((cur, blo))
            if bhi >= hi:
                alive = False
                break
            cur = max(cur, bhi)
        if alive and (cur < hi or (cur == hi == lo and not _point_covered(b, cur))):
            out.append((cur, hi))
    return canonicalize(out)


def _point_covered(s: IntervalSet, y: float) -> bool:
    return bool(contains(s, y))


def union(a: UncertaintySet, b: UncertaintySet) -> UncertaintySet:
    if _same_kind(a, b) == "labels":
        return LabelSet(a.labels | b.labels)
    return canonicalize(a.pairs + b.pairs)


def measure(s: UncertaintySet) -> float:
    """Lebesgue measure of an interval set, or the size of a label set."""
    if isinstance(s, LabelSet):
        return float(len(s.labels))
    return float(np.sum(s.rights - s.lefts))


def contains(s: UncertaintySet, y):
    """Membership of ``y`` (scalar or array of points) in ``s``."""
    if isinstance(s, LabelSet):
        if isinstance(y, (list, tuple, np.ndarray)):
            return np.array([v in s.labels for v in y], dtype=bool)
        return y in s.labels
    y = np.asarray(y, dtype=float)
    if s.lefts.size == 0:
        return np.zeros(y.shape, dtype=bool) if y.ndim else False
    idx = np.searchsorted(s.lefts, y, side="right") - 1
    inside = (idx >= 0) & (y <= s.rights[np.maximum(idx, 0)])
    return inside if y.ndim else bool(inside)


def membership_matrix(points, sets: Sequence[UncertaintySet]) -> np.ndarray:
    """Boolean matrix with entry ``[i, l]`` = point ``i`` lies in set ``l``."""
    if not sets:
        return np.zeros((len(points), 0), dtype=bool)
    out = np.empty((len(points), len(sets)), dtype=bool)
    for ell, s in enumerate(sets):
        out[:, ell] = contains(s, points)
    return out


def hull(sets: Sequence[IntervalSet]) -> tuple[float, float] | None:
    nonempty = [s for s in sets if not s.is_empty()]
    if not nonempty:
        return None
    return float(min(s.lefts[0] for s in nonempty)), float(max(s.rights[-1] for s in nonempty))


# ---------------------------------------------------------------------------
# partition refinement
# ---------------------------------------------------------------------------

def _study_sets(studies) -> list:
    return [s.set if isinstance(s, StudyInput) else s for s in studies]


def build_partition(space: CandidateSpace, studies) -> list[PartitionCell]:
    """Split ``space`` into regions of constant membership signature.

    ``studies`` may hold :class:`StudyInput` objects or bare sets. For a
    continuous space the cells are the connected components of each
    signature class, listed left to right; a breakpoint whose signature
    differs from both neighbours becomes its own single-point cell. For a
    discrete space the labels are grouped by signature in order of first
    appearance.
    """
    sets = _study_sets(studies)
    if not sets:
        raise ValueError("need at least one study")
    if isinstance(space, Discrete):
        return _partition_discrete(space, sets)
    return _partition_continuous(space, sets)


def _partition_discrete(space: Discrete, sets) -> list[PartitionCell]:
    universe = set(space.labels)
    for ell, s in enumerate(sets):
        if not isinstance(s, LabelSet):
            raise SetKindError("discrete candidate space needs label sets")
        stray = s.labels - universe
        if stray:
            raise ValueError(f"study {ell} contains labels outside the candidate space: {sorted(map(repr, stray))}")
    mem = membership_matrix(list(space.labels), sets)
    groups: dict[tuple, list] = {}
    for lab, row in zip(space.labels, mem):
        groups.setdefault(tuple(bool(v) for v in row), []).append(lab)
    return [PartitionCell(LabelSet(labs), sig, labs[0]) for sig, labs in groups.items()]


def _partition_continuous(space: Continuous, sets) -> list[PartitionCell]:
    lo, hi = float(space.lo), float(space.hi)
    ends = []
    for ell, s in enumerate(sets):
        if not isinstance(s, IntervalSet):
            raise SetKindError("continuous candidate space needs interval sets")
        if s.lefts.size and (s.lefts[0] < lo or s.rights[-1] > hi):
            raise ValueError(f"study {ell} escapes the candidate space [{lo}, {hi}]")
        ends.append(s.lefts)
        ends.append(s.rights)
    bp = np.unique(np.concatenate([[lo, hi]] + ends))
    mids = 0.5 * (bp[:-1] + bp[1:])
    seg_sig = membership_matrix(mids, sets)
    pt_sig = membership_matrix(bp, sets)

    # token stream: point 0, segment 0, point 1, segment 1, ..., point n
    cells: list[PartitionCell] = []
    start = None          # left end of the cell being grown
    cur_sig = None        # its signature row
    n_seg = mids.size
    seg_key = [row.tobytes() for row in seg_sig]
    pt_key = [row.tobytes() for row in pt_sig]

    def close(left, right, sig):
        region = IntervalSet([left], [right])
        rep = 0.5 * (left + right)
        cells.append(PartitionCell(region, tuple(bool(v) for v in sig), rep))

    for i in range(n_seg + 1):
        joins_left = i > 0 and pt_key[i] == seg_key[i - 1]
        joins_right = i < n_seg and pt_key[i] == seg_key[i]
        if i > 0 and not (joins_left and joins_right):
            close(start, bp[i], cur_sig)
            start = None
        if not joins_left and not joins_right:
            close(bp[i], bp[i], pt_sig[i])
        if i < n_seg and start is None:
            start, cur_sig = bp[i], seg_sig[i]

    direct = membership_matrix([c.representative for c in cells], sets)
    claimed = np.array([c.signature for c in cells], dtype=bool).reshape(direct.shape)
    if not np.array_equal(direct, claimed):
        bad = int(np.nonzero((direct != claimed).any(axis=1))[0][0])
        raise AssertionError(f"signature check failed for cell {cells[bad]}")
    return cells
