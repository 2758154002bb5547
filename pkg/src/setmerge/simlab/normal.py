"""Normal-mean experiments with independent z-interval studies.

Each study averages ``n`` draws from N(theta*, 1) with ``theta* = 0`` and
reports the two-sided z-interval ``xbar +- z_{1-alpha/2} / sqrt(n)``. The
synthetic-statistic mergers work on the signature partition of the
candidate space ``[min endpoint - 1, max endpoint + 1]``; the oracle
benchmark merges the exact z-test p-values with Fisher's rule.

Random streams, all under the master seed:

* ``("normal-mean", r)``: standard normals for the study means of
  replication ``r``; study ``l`` always takes the ``l``-th draw, so designs
  with fewer studies are nested in designs with more.
* ``("synthetic", "normal", r, g)``: synthetic uniforms for grid point ``g``
  in the layout used by :func:`setmerge.merge.merge_continuous`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import log_ndtr

from ..aggregate import uk_exclusion_level
from ..merge import MergeConfig, evaluate, synthetic_uniforms
from ..numerics import chi2_sf, open_unit, std_normal_cdf, std_normal_quantile, substream
from ..sets import Continuous, IntervalSet, build_partition
from .core import (
    MAX_SINGLE,
    MEAN_SINGLE,
    MIN_SINGLE,
    ORACLE_METHODS,
    ExperimentResult,
    Flag,
    ScenarioConfig,
    coverage_row,
    fmt,
    method_label,
    run_replications,
    stack,
)

__all__ = [
    "N_SAMPLES",
    "study_means",
    "z_halfwidth",
    "normal_mean_replication",
    "run_normal_mean",
    "run_oracle_p_benchmark",
    "oracle_fisher_region",
    "run_sensitivity",
    "SensitivityResult",
    "run_size_trend",
    "TrendReport",
    "run_uk_region_check",
    "miscover_to_offset",
    "am_exception",
]

N_SAMPLES = 3
NORMAL_METHODS = ("fisher", "cct", "rueger", "am-e", "u2", "orp-fisher")


def study_means(seed: int, r: int, L: int, n: int = N_SAMPLES, theta: float = 0.0) -> np.ndarray:
    """Study means of replication ``r`` (nested in ``L``)."""
    z = substream(seed, "normal-mean", r).generator.standard_normal(L)
    return theta + z / math.sqrt(n)


def z_halfwidth(alphas, n: int = N_SAMPLES) -> np.ndarray:
    return std_normal_quantile(1.0 - 0.5 * np.asarray(alphas, dtype=float)) / math.sqrt(n)


def _intervals(xbar, alphas, n):
    h = z_halfwidth(alphas, n)
    lefts, rights = xbar - h, xbar + h
    space = Continuous(float(lefts.min()) - 1.0, float(rights.max()) + 1.0)
    return lefts, rights, space


@lru_cache(maxsize=4096)
def _config(agg_id: str, alpha: float, tau: float) -> MergeConfig:
    return MergeConfig(agg_id, alpha=alpha, tau=tau, independent=True)


def am_exception(L: int, alphas, target: float, tau: float) -> bool:
    """True where the arithmetic-mean e-merge collapses to the intersection."""
    if tau >= 1.0:
        return False
    return L * min(alphas) <= target / (1.0 - tau) * (1.0 + 1e-12)


# ---------------------------------------------------------------------------
# one replication
# ---------------------------------------------------------------------------

def _sat_methods(config: ScenarioConfig):
    return [m for m in config.methods if m not in ORACLE_METHODS]


def _normal_rep(r: int, payload):
    seed, n, points, methods, probes, Lmax = payload
    xbar_all = study_means(seed, r, Lmax, n)
    G, M, P = len(points), len(methods), len(probes)
    hit = np.zeros((G, M, P), dtype=bool)
    size = np.zeros((G, M))
    s_hit = np.full((G, Lmax), np.nan)
    s_size = np.full((G, Lmax), np.nan)
    for g, (L, alphas, target) in enumerate(points):
        xbar = xbar_all[:L]
        lefts, rights, space = _intervals(xbar, alphas, n)
        s_hit[g, :L] = (lefts <= 0.0) & (0.0 <= rights)
        s_size[g, :L] = rights - lefts
        if not methods:
            continue
        sets = [IntervalSet([a], [b]) for a, b in zip(lefts, rights)]
        cells = build_partition(space, sets)
        mem = np.array([c.signature for c in cells], dtype=bool)
        cl = np.array([c.region.lefts[0] for c in cells])
        cr = np.array([c.region.rights[0] for c in cells])
        lengths = cr - cl
        at = [(cl <= y) & (y <= cr) for y in probes]
        u = synthetic_uniforms(seed, len(cells), L, "normal", r, g)
        a = np.asarray(alphas, dtype=float)
        for m, (agg_id, tau) in enumerate(methods):
            _, kept = evaluate(mem, a, _config(agg_id, target, tau), u)
            size[g, m] = lengths[kept].sum()
            for p in range(P):
                hit[g, m, p] = bool(np.any(kept & at[p]))
    return {"hit": hit, "size": size, "s_hit": s_hit, "s_size": s_size}


def _payload(config: ScenarioConfig, n: int, probes=(0.0,), methods=None):
    points = tuple((g.L, g.alphas, g.target) for g in config.grid_points())
    ids = _sat_methods(config) if methods is None else methods
    specs = tuple(config.spec(m) for m in ids)
    return (config.seed, n, points, specs, tuple(probes), config.max_L)


def normal_mean_replication(config: ScenarioConfig, r: int, n: int = N_SAMPLES) -> dict:
    """Raw outputs of replication ``r``: coverage hits and merged sizes.

    ``hit`` and ``size`` are indexed by (grid point, synthetic method) in
    the order of ``config.methods`` with oracle benchmarks removed.
    """
    config = config.resolved(NORMAL_METHODS)
    out = _normal_rep(r, _payload(config, n))
    out["hit"] = out["hit"][:, :, 0]
    return out


# ---------------------------------------------------------------------------
# oracle benchmark
# ---------------------------------------------------------------------------

def _fisher_statistic(y, xbar, n):
    # -2 sum log(2 Phi(-sqrt(n) |y - xbar|)), rows of xbar are replications
    d = math.sqrt(n) * np.abs(y[:, None] - xbar)
    return -2.0 * np.sum(math.log(2.0) + log_ndtr(-d), axis=1)


def _chi2_isf(alpha: float, dof: int) -> float:
    lo, hi = 0.0, 1.0
    while chi2_sf(hi, dof) > alpha:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_sf(mid, dof) > alpha:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * hi:
            break
    return 0.5 * (lo + hi)


def oracle_fisher_region(xbar: np.ndarray, alpha: float, n: int = N_SAMPLES):
    """Exact region ``{y : Fisher(p_or(y)) > alpha}`` for each row of ``xbar``.

    The Fisher statistic of the oracle p-values is convex in ``y`` so the
    region is one interval; it is located by golden-section search for
    the minimum and bisection for the two crossings. Returns ``(lo, hi)``
    arrays, with ``lo > hi`` marking an empty region.
    """
    xbar = np.atleast_2d(np.asarray(xbar, dtype=float))
    R, L = xbar.shape
    c = _chi2_isf(alpha, 2 * L)
    a, b = xbar.min(axis=1), xbar.max(axis=1)
    gr = (math.sqrt(5.0) - 1.0) / 2.0
    for _ in range(120):
        x1 = b - gr * (b - a)
        x2 = a + gr * (b - a)
        left = _fisher_statistic(x1, xbar, n) < _fisher_statistic(x2, xbar, n)
        b = np.where(left, x2, b)
        a = np.where(left, a, x1)
    ymin = 0.5 * (a + b)
    tmin = _fisher_statistic(ymin, xbar, n)
    empty = tmin >= c
    # one term alone exceeds c beyond this distance from every study mean
    reach = -std_normal_quantile(0.5 * math.exp(-0.5 * c)) / math.sqrt(n) + 1.0

    def crossing(inner, outer):
        for _ in range(200):
            mid = 0.5 * (inner + outer)
            below = _fisher_statistic(mid, xbar, n) < c
            inner = np.where(below, mid, inner)
            outer = np.where(below, outer, mid)
        return inner

    lo = crossing(ymin.copy(), xbar.min(axis=1) - reach)
    hi = crossing(ymin.copy(), xbar.max(axis=1) + reach)
    lo = np.where(empty, 1.0, lo)
    hi = np.where(empty, 0.0, hi)
    return lo, hi


def _oracle_rows(config: ScenarioConfig, n: int, probe: float = 0.0):
    """Per-replication OrP+Fisher hits and sizes, shape (R, G)."""
    Lmax = config.max_L
    X = np.stack([study_means(config.seed, r, Lmax, n) for r in range(config.replications)])
    pts = config.grid_points()
    hit = np.zeros((config.replications, len(pts)), dtype=bool)
    size = np.zeros((config.replications, len(pts)))
    for g, pt in enumerate(pts):
        xb = X[:, :pt.L]
        h = z_halfwidth(pt.alphas, n)
        s_lo = (xb - h).min(axis=1) - 1.0
        s_hi = (xb + h).max(axis=1) + 1.0
        lo, hi = oracle_fisher_region(xb, pt.target, n)
        lo_c, hi_c = np.maximum(lo, s_lo), np.minimum(hi, s_hi)
        size[:, g] = np.maximum(hi_c - lo_c, 0.0)
        hit[:, g] = (lo_c <= probe) & (probe <= hi_c)
    return hit, size


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def _single_rows(scenario, value, L, s_hit, s_size):
    hits, sizes = s_hit[:, :L], s_size[:, :L]
    means = sizes.mean(axis=0)
    big, small = int(np.argmax(means)), int(np.argmin(means))
    return [
        coverage_row(scenario, value, MAX_SINGLE, hits[:, big], sizes[:, big]),
        coverage_row(scenario, value, MIN_SINGLE, hits[:, small], sizes[:, small]),
        coverage_row(scenario, value, MEAN_SINGLE, hits.mean(axis=1), sizes.mean(axis=1)),
    ]


def run_normal_mean(config: ScenarioConfig, n: int = N_SAMPLES) -> ExperimentResult:
    """Coverage and mean size of every configured merger over a scenario.

    The synthetic mergers at one replication and grid point share a
    single partition and one block of synthetic uniforms. Max, Min and
    Mean Single rows report the study with the largest and smallest mean
    interval length and the average over studies. Without explicit
    ``config.methods`` the default set is :data:`NORMAL_METHODS`.
    """
    config = config.resolved(NORMAL_METHODS)
    sat = _sat_methods(config)
    payload = _payload(config, n)
    res = run_replications(_normal_rep, config.replications, payload, config.workers, config.chunk)
    hit, size = stack(res, "hit")[..., 0], stack(res, "size")
    s_hit, s_size = stack(res, "s_hit"), stack(res, "s_size")
    oracle = None
    if "orp-fisher" in config.methods:
        oracle = _oracle_rows(config, n)
    rows, flags = [], []
    sc = config.scenario
    for g, pt in enumerate(config.grid_points()):
        for m, mid in enumerate(config.methods):
            label = method_label(mid)
            if mid == "orp-fisher":
                rows.append(coverage_row(sc, pt.value, label, oracle[0][:, g], oracle[1][:, g]))
                continue
            if mid in ORACLE_METHODS:
                raise ValueError(f"{mid!r} is not available in the normal-mean experiment")
            k = sat.index(mid)
            rows.append(coverage_row(sc, pt.value, label, hit[:, g, k], size[:, g, k]))
            base, tau = config.spec(mid)
            if base == "am-e" and am_exception(pt.L, pt.alphas, pt.target, tau):
                floor = float(np.prod(1.0 - np.asarray(pt.alphas)))
                flags.append(Flag(sc, pt.value, label, "arithmetic-mean e-merge reduces to the intersection", floor))
        rows.extend(_single_rows(sc, pt.value, pt.L, s_hit[:, g], s_size[:, g]))
    return ExperimentResult(rows, flags)


def run_oracle_p_benchmark(config: ScenarioConfig, n: int = N_SAMPLES) -> ExperimentResult:
    """OrP+Fisher next to SyP+Fisher and the single-study baselines."""
    from dataclasses import replace
    return run_normal_mean(replace(config, methods=("fisher", "orp-fisher")), n)


# ---------------------------------------------------------------------------
# sensitivity to the synthetic draws
# ---------------------------------------------------------------------------

SENS_COLUMNS = ("scenario", "grid_value", "method", "min", "p2.5", "median", "p97.5", "max",
                "mean", "spread", "single_size", "reps")


@dataclass
class SensitivityResult:
    """Size quantiles over inner reruns, averaged over outer replications."""

    rows: list[dict]
    columns: tuple = SENS_COLUMNS

    def get(self, grid_value) -> dict:
        for r in self.rows:
            if math.isclose(float(r["grid_value"]), float(grid_value)):
                return r
        raise KeyError(grid_value)

    def to_csv(self, path=None) -> str:
        import csv
        import io
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([r[c] if isinstance(r[c], str) else fmt(r[c]) for c in self.columns])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _sens_rep(r: int, payload):
    seed, n, points, inner, Lmax = payload
    xbar_all = study_means(seed, r, Lmax, n)
    out = np.zeros((len(points), 7))
    cfg_cache = {}
    for g, (L, alphas, target) in enumerate(points):
        lefts, rights, space = _intervals(xbar_all[:L], alphas, n)
        sets = [IntervalSet([a], [b]) for a, b in zip(lefts, rights)]
        cells = build_partition(space, sets)
        mem = np.array([c.signature for c in cells], dtype=bool)
        lengths = np.array([c.region.rights[0] - c.region.lefts[0] for c in cells])
        k = len(cells)
        u = open_unit(substream(seed, "synthetic", "normal", r, g), (inner, k, L))
        cfg = cfg_cache.setdefault(target, _config("fisher", target, 1.0))
        memb = np.broadcast_to(mem, (inner, k, L)).reshape(inner * k, L)
        _, kept = evaluate(memb, np.asarray(alphas, dtype=float), cfg, u.reshape(inner * k, L))
        sizes = kept.reshape(inner, k) @ lengths
        q = np.quantile(sizes, [0.0, 0.025, 0.5, 0.975, 1.0])
        out[g, :5] = q
        out[g, 5] = sizes.mean()
        out[g, 6] = np.mean(rights - lefts)
    return out


def run_sensitivity(config: ScenarioConfig, repeats_inner: int = 2000, n: int = N_SAMPLES) -> SensitivityResult:
    """Rerun SyP+Fisher ``repeats_inner`` times per replication on fixed sets.

    Inner rerun ``j`` of replication ``r`` reads the ``j``-th block of the
    same synthetic stream that :func:`run_normal_mean` uses, so with one
    inner repeat the sizes are exactly those of the main experiment.
    """
    if repeats_inner < 1:
        raise ValueError("need at least one inner repeat")
    points = tuple((g.L, g.alphas, g.target) for g in config.grid_points())
    payload = (config.seed, n, points, repeats_inner, config.max_L)
    res = np.stack(run_replications(_sens_rep, config.replications, payload, config.workers, config.chunk))
    rows = []
    for g, pt in enumerate(config.grid_points()):
        m = res[:, g, :].mean(axis=0)
        rows.append({
            "scenario": config.scenario, "grid_value": pt.value, "method": method_label("fisher"),
            "min": m[0], "p2.5": m[1], "median": m[2], "p97.5": m[3], "max": m[4],
            "mean": m[5], "spread": m[4] - m[0], "single_size": m[6], "reps": config.replications,
        })
    return SensitivityResult(rows)


# ---------------------------------------------------------------------------
# inclusion of off-truth candidates
# ---------------------------------------------------------------------------

TREND_COLUMNS = ("scenario", "grid_value", "method", "offset", "inclusion", "inclusion_se",
                 "size", "size_se", "reps")


@dataclass
class TrendReport:
    """Inclusion probability of ``theta* + offset`` against the study count."""

    rows: list[dict]
    slopes: dict = field(default_factory=dict)
    columns: tuple = TREND_COLUMNS

    def series(self, offset: float) -> list[dict]:
        return [r for r in self.rows if math.isclose(r["offset"], offset)]

    def strictly_decreasing(self, offset: float) -> bool:
        p = [r["inclusion"] for r in self.series(offset)]
        return all(b < a for a, b in zip(p, p[1:]))

    def to_csv(self, path=None) -> str:
        return SensitivityResult(self.rows, self.columns).to_csv(path)


def run_size_trend(config: ScenarioConfig, offsets=(0.0, 1.0), method: str = "fisher",
                   n: int = N_SAMPLES) -> TrendReport:
    """Inclusion probability of off-truth candidates as ``L`` grows.

    Uses the scenario's grid (normally S2, L = 2..9). Alongside each
    series the least-squares slope of ``log P(theta in merged)`` against
    ``L`` is reported.
    """
    config = config.resolved((method,))
    payload = _payload(config, n, probes=offsets, methods=[method])
    res = run_replications(_normal_rep, config.replications, payload, config.workers, config.chunk)
    hit, size = stack(res, "hit")[:, :, 0, :], stack(res, "size")[:, :, 0]
    rows, slopes = [], {}
    label = method_label(method)
    pts = config.grid_points()
    for p, off in enumerate(offsets):
        for g, pt in enumerate(pts):
            cr = coverage_row(config.scenario, pt.value, label, hit[:, g, p], size[:, g])
            rows.append({"scenario": cr.scenario, "grid_value": pt.L, "method": label, "offset": float(off),
                         "inclusion": cr.coverage, "inclusion_se": cr.coverage_se,
                         "size": cr.size, "size_se": cr.size_se, "reps": cr.reps})
        probs = np.array([hit[:, g, p].mean() for g in range(len(pts))])
        Ls = np.array([pt.L for pt in pts], dtype=float)
        ok = probs > 0
        slopes[float(off)] = float(np.polyfit(Ls[ok], np.log(probs[ok]), 1)[0]) if ok.sum() >= 2 else float("nan")
    return TrendReport(rows, slopes)


def miscover_to_offset(q: float, alpha: float, n: int = N_SAMPLES) -> float:
    """Offset ``theta`` at which a z-interval misses ``theta`` with probability ``q``.

    Valid for ``alpha <= q < 1``; found by bisection on
    ``1 - [Phi(sqrt(n) theta + z) - Phi(sqrt(n) theta - z)]``.
    """
    if not alpha <= q < 1.0:
        raise ValueError("miscoverage must lie in [alpha, 1)")
    z = float(std_normal_quantile(1.0 - alpha / 2.0))

    def miss(t):
        s = math.sqrt(n) * t
        return 1.0 - (float(std_normal_cdf(s + z)) - float(std_normal_cdf(s - z)))

    lo, hi = 0.0, 1.0
    while miss(hi) < q:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if miss(mid) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def run_uk_region_check(Ls=(10, 20, 40, 80), miscovers=(0.1, 0.4), k: int = 2, alpha: float = 0.05,
                        alpha_prime: float = 0.05, tau: float = 1.0, reps: int = 2000, seed: int = 0,
                        n: int = N_SAMPLES) -> list[dict]:
    """Inclusion probability of candidates with a given miscoverage under U_k.

    Every study is a z-interval at level ``alpha``; the candidate
    ``theta* + offset`` is chosen so that each study misses it with
    probability ``q``. Candidates with ``q`` below
    :func:`setmerge.aggregate.uk_exclusion_level` need not be
    excluded as ``L`` grows, while those above it are.
    """
    Lmax = max(Ls)
    X = np.stack([study_means(seed, r, Lmax, n) for r in range(reps)])
    h = float(z_halfwidth(alpha, n))
    cfg = MergeConfig(f"uk:{k}", alpha=alpha_prime, tau=tau, independent=True)
    thr = uk_exclusion_level(alpha, alpha_prime, k, tau)
    rows = []
    for q in miscovers:
        theta = miscover_to_offset(q, alpha, n)
        for L in Ls:
            mem = np.abs(X[:, :L] - theta) <= h
            _, kept = evaluate(mem, np.full(L, alpha), cfg)
            p = float(kept.mean())
            rows.append({"miscover": q, "L": L, "offset": theta, "threshold": thr,
                         "inclusion": p, "inclusion_se": math.sqrt(p * (1 - p) / reps), "reps": reps})
    return rows
