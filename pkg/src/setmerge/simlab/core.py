"""Scenario grids, result tables and the replication runner.

Every experiment is a function of ``(master seed, replication index)``: a
replication derives all of its random streams from those two numbers, so
the per-replication outputs do not depend on how replications are spread
over workers. The runner stacks them in replication order before any
averaging, which keeps the written tables byte-identical across worker
counts.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..aggregate import get_aggregator

__all__ = [
    "SCENARIOS",
    "ScenarioConfig",
    "GridPoint",
    "ResultRow",
    "Flag",
    "ExperimentResult",
    "method_label",
    "split_method",
    "run_replications",
    "worker_count",
    "fmt",
]

SCENARIOS = ("S1", "S2", "S3", "S4")
_ALPHA_GRID = tuple(round(0.01 * i, 2) for i in range(1, 11))
_L_GRID = tuple(range(2, 10))

# simulation-only benchmark ids, resolved by the experiments themselves
ORACLE_METHODS = {"orp-fisher": "OrP+Fisher", "orp-cct": "OrP+CCT"}
MAX_SINGLE, MIN_SINGLE, MEAN_SINGLE = "Max Single", "Min Single", "Mean Single"


def fmt(x) -> str:
    """Format a number with 17 significant digits (round-trip safe)."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def worker_count(requested: int | None = None) -> int:
    """Worker pool size, capped by ``SETMERGE_THREADS`` when it is set."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get("SETMERGE_THREADS")
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError as exc:
            raise ValueError(f"SETMERGE_THREADS must be an integer, got {cap!r}") from exc
    return max(1, int(n))


def split_method(method_id: str) -> tuple[str, float | None]:
    """Split ``"am-e@1"`` into the registry id and an explicit tau."""
    base, sep, tau = method_id.partition("@")
    if not sep:
        return base, None
    try:
        t = float(tau)
    except ValueError as exc:
        raise ValueError(f"bad tau suffix in method {method_id!r}") from exc
    if not 0.0 < t <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {t}")
    return base, t


def method_label(method_id: str) -> str:
    """Display name such as ``SyP+Fisher`` or ``SyE+AM[tau=1]`` for a method id.

    Ids may carry an ``@tau`` suffix fixing the e-merge adjustment factor.
    """
    if method_id in ORACLE_METHODS:
        return ORACLE_METHODS[method_id]
    base, tau = split_method(method_id)
    agg = get_aggregator(base)
    prefix = "SyP" if agg.kind == "p" else "SyE"
    name = agg.label.replace(" (e)", "")
    if name == "AMcal":
        name = "AM"
    suffix = f"[tau={tau:g}]" if tau is not None else ""
    return f"{prefix}+{name}{suffix}"


@dataclass(frozen=True)
class GridPoint:
    """One x-axis position of a scenario."""

    value: float
    L: int
    alphas: tuple
    target: float


@dataclass(frozen=True)
class ScenarioConfig:
    """Which scenario to sweep, how many replications and which methods.

    ``L`` fixes the number of studies for scenarios S1, S3 and S4 (the
    conformal experiment with four regressors uses ``L=4``); S2 sweeps
    ``L`` over 2..9. ``am_tau`` is the adjustment factor used by the
    arithmetic-mean e-merge, ``tau`` the one used by every other e-rule.
    """

    scenario: str = "S1"
    replications: int = 5000
    seed: int = 0
    methods: tuple | None = None
    L: int = 5
    am_tau: float = 0.5
    tau: float = 1.0
    workers: int | None = None
    chunk: int = 250
    grid: tuple | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.replications < 2:
            raise ValueError("need at least two replications")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.L < 1:
            raise ValueError("need at least one study")
        for t in (self.am_tau, self.tau):
            if not 0.0 < t <= 1.0:
                raise ValueError(f"tau must lie in (0, 1], got {t}")
        if self.methods is None:
            return
        object.__setattr__(self, "methods", tuple(self.methods))
        if not self.methods:
            raise ValueError("need at least one method")
        for m in self.methods:
            if m not in ORACLE_METHODS:
                get_aggregator(split_method(m)[0])

    def resolved(self, default_methods) -> "ScenarioConfig":
        """This config with ``methods`` filled in when it was left unset."""
        if self.methods is not None:
            return self
        from dataclasses import replace
        return replace(self, methods=tuple(default_methods))

    def tau_for(self, method_id: str) -> float:
        base, tau = split_method(method_id)
        if tau is not None:
            return tau
        return self.am_tau if base == "am-e" else self.tau

    def spec(self, method_id: str) -> tuple[str, float]:
        """Registry id and tau used for a (possibly suffixed) method id."""
        return split_method(method_id)[0], self.tau_for(method_id)

    def grid_points(self) -> list[GridPoint]:
        s = self.scenario
        if s == "S2":
            values = self.grid or _L_GRID
            return [GridPoint(int(v), int(v), (0.05,) * int(v), 0.05) for v in values]
        values = self.grid or _ALPHA_GRID
        L = self.L
        if s == "S1":
            return [GridPoint(a, L, (a,) * L, a) for a in values]
        if s == "S3":
            alphas = tuple(float(v) for v in np.linspace(0.01, 0.05, L)) if L > 1 else (0.01,)
            return [GridPoint(a, L, alphas, a) for a in values]
        return [GridPoint(a, L, (a,) * L, 0.1) for a in values]

    @property
    def max_L(self) -> int:
        return max(g.L for g in self.grid_points())


@dataclass(frozen=True)
class ResultRow:
    scenario: str
    grid_value: float
    method: str
    coverage: float
    coverage_se: float
    size: float
    size_se: float
    reps: int


@dataclass(frozen=True)
class Flag:
    """A grid point where a documented exception relaxes the coverage floor."""

    scenario: str
    grid_value: float
    method: str
    reason: str
    floor: float


CSV_COLUMNS = ("scenario", "grid_value", "method", "coverage", "coverage_se", "size", "size_se", "reps")


@dataclass
class ExperimentResult:
    """Tidy table of coverage and size estimates plus exception flags."""

    rows: list[ResultRow]
    flags: list[Flag] = field(default_factory=list)
    columns: tuple = CSV_COLUMNS

    def get(self, method: str, grid_value) -> ResultRow:
        for r in self.rows:
            if r.method == method and math.isclose(float(r.grid_value), float(grid_value)):
                return r
        raise KeyError((method, grid_value))

    def methods(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def series(self, method: str) -> list[ResultRow]:
        return [r for r in self.rows if r.method == method]

    def flag_for(self, method: str, grid_value) -> Flag | None:
        for f in self.flags:
            if f.method == method and math.isclose(float(f.grid_value), float(grid_value)):
                return f
        return None

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([fmt(getattr(r, c)) if not isinstance(getattr(r, c), str) else getattr(r, c)
                        for c in self.columns])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def coverage_row(scenario, value, method, hits: np.ndarray, sizes: np.ndarray) -> ResultRow:
    """Summarise per-replication coverage indicators and sizes."""
    R = hits.shape[0]
    c = float(np.mean(hits))
    s = float(np.mean(sizes))
    c_se = math.sqrt(max(c * (1.0 - c), 0.0) / R)
    s_se = float(np.std(sizes, ddof=1)) / math.sqrt(R)
    return ResultRow(scenario, value, method, c, c_se, s, s_se, R)


# ---------------------------------------------------------------------------
# replication runner
# ---------------------------------------------------------------------------

def _run_chunk(args):
    fn, start, stop, payload = args
    return [fn(r, payload) for r in range(start, stop)]


def run_replications(fn: Callable, reps: int, payload, workers: int | None = None,
                     chunk: int = 250) -> list:
    """Evaluate ``fn(r, payload)`` for ``r = 0 .. reps-1``, in order.

    ``fn`` must be a module-level function so it can be shipped to worker
    processes. Chunk boundaries are fixed by ``chunk`` alone; the result
    list is always in replication order.
    """
    n = worker_count(workers)
    bounds = [(s, min(s + chunk, reps)) for s in range(0, reps, chunk)]
    jobs = [(fn, a, b, payload) for a, b in bounds]
    if n == 1 or len(jobs) == 1:
        parts = [_run_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    return [x for part in parts for x in part]


def stack(results: Sequence, key: str) -> np.ndarray:
    return np.stack([r[key] for r in results])
