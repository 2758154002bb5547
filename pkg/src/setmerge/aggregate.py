"""Aggregation rules for vectors of synthetic p-values and e-values.

All combine functions accept a 1-D vector of study statistics or a 2-D
array whose rows are such vectors (one row per candidate or cell) and
return a scalar or a vector accordingly. Rules are also available through
string ids (see :func:`get_aggregator`), which is how the CLI and the
simulation harness refer to them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

from .numerics import (
    RngStream,
    cauchy_sf,
    chi2_sf,
    open_unit,
    std_normal_cdf,
    std_normal_quantile,
    substream,
)

__all__ = [
    "INDEPENDENT",
    "ARBITRARY",
    "HEURISTIC",
    "Aggregator",
    "UnknownRuleError",
    "fisher_combine",
    "liptak_combine",
    "cct_combine",
    "rueger_combine",
    "am_calibrator_combine",
    "generic_s_combine",
    "generic_calibrator_combine",
    "e_merge_uk",
    "e_mean",
    "gamma_factor",
    "gamma_threshold",
    "uk_exclusion_level",
    "gamma_exclusion_level",
    "register_score",
    "register_calibrator",
    "get_score",
    "get_calibrator",
    "get_aggregator",
    "METHOD_IDS",
]

INDEPENDENT = "independent-only"
ARBITRARY = "arbitrary-dependence"
HEURISTIC = "heuristic"


class UnknownRuleError(KeyError):
    """Raised for an unregistered method, score or calibrator id."""


def _pmatrix(p):
    arr = np.asarray(p, dtype=float)
    if arr.ndim not in (1, 2) or arr.shape[-1] == 0:
        raise ValueError("expected a vector of p-values or a 2-D array of rows")
    if np.any(~((arr > 0.0) & (arr < 1.0))):
        raise ValueError("p-values must lie strictly inside (0, 1)")
    return arr


def _out(vals, arr):
    return float(vals) if arr.ndim == 1 else np.asarray(vals)


# ---------------------------------------------------------------------------
# p-value rules
# ---------------------------------------------------------------------------

def fisher_combine(p):
    """Fisher's method: chi-square tail of ``-2 sum log p`` with 2L dof."""
    arr = _pmatrix(p)
    stat = -2.0 * np.sum(np.log(arr), axis=-1)
    return _out(chi2_sf(stat, 2 * arr.shape[-1]), arr)


def liptak_combine(p, weights=None):
    """Weighted inverse-normal (Liptak / Stouffer) combination."""
    arr = _pmatrix(p)
    L = arr.shape[-1]
    w = np.ones(L) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (L,) or np.any(w <= 0):
        raise ValueError("Liptak weights must be L positive numbers")
    z = std_normal_quantile(arr)
    stat = np.sum(w * z, axis=-1) / math.sqrt(float(np.sum(w * w)))
    return _out(std_normal_cdf(stat), arr)


def cct_combine(p):
    """Cauchy combination: mean of ``tan((1/2 - p) pi)`` against a Cauchy."""
    arr = _pmatrix(p)
    stat = np.mean(np.tan((0.5 - arr) * np.pi), axis=-1)
    return _out(cauchy_sf(stat), arr)


def rueger_combine(p, k: int = 1):
    """Rueger's rule ``(L/k) p_(k)``, capped at 1."""
    arr = _pmatrix(p)
    L = arr.shape[-1]
    if not 1 <= k <= L:
        raise ValueError(f"k must lie in [1, {L}], got {k}")
    kth = np.partition(arr, k - 1, axis=-1)[..., k - 1]
    return _out(np.minimum(1.0, L / k * kth), arr)


def am_calibrator_combine(p):
    """Arithmetic-mean merge for arbitrarily dependent p-values.

    Inverting ``mean(2 - 2 p / a) >= 1`` over ``a`` gives twice the mean,
    capped to [0, 1].
    """
    arr = _pmatrix(p)
    return _out(np.clip(2.0 * np.mean(arr, axis=-1), 0.0, 1.0), arr)


# ---------------------------------------------------------------------------
# generic score rule (Monte Carlo null)
# ---------------------------------------------------------------------------

_SCORES: dict[str, Callable] = {}


def register_score(name: str, fn: Callable, check: bool = True) -> None:
    """Register a decreasing score function ``S: (0, 1) -> R``."""
    if check:
        grid = np.linspace(1e-6, 1 - 1e-6, 2001)
        vals = fn(grid)
        if np.any(np.diff(vals) > 1e-12):
            raise ValueError(f"score {name!r} is not decreasing on (0, 1)")
    _SCORES[name] = fn


def get_score(name: str) -> Callable:
    try:
        return _SCORES[name]
    except KeyError:
        raise UnknownRuleError(f"unknown score function {name!r}") from None


register_score("neg2log", lambda t: -2.0 * np.log(t))
register_score("negphiinv", lambda t: -std_normal_quantile(t))

_NULL_CACHE: dict[tuple, np.ndarray] = {}


def _null_totals(score: str, L: int, draws: int, rng: RngStream) -> np.ndarray:
    key = (score, L, draws, rng.seed, rng.stream_id)
    cached = _NULL_CACHE.get(key)
    if cached is None:
        fresh = rng.reset()
        u = open_unit(fresh, (draws, L))
        cached = np.sort(np.sum(get_score(score)(u), axis=1))
        if len(_NULL_CACHE) > 64:
            _NULL_CACHE.clear()
        _NULL_CACHE[key] = cached
    return cached


def generic_s_combine(p, score: str = "neg2log", draws: int = 100_000, rng: RngStream | None = None):
    """Combine with ``sum S(p_l)`` against a Monte Carlo null.

    Returns ``(1 + #{null totals >= observed}) / (draws + 1)``, which never
    falls below the exact tail probability in expectation. The null table
    depends only on ``rng``'s identity, so repeated calls with the same
    stream reuse it.
    """
    arr = _pmatrix(p)
    if draws < 10_000:
        raise ValueError("generic score combination needs at least 10^4 draws")
    if rng is None:
        rng = substream(0, "generic-s")
    fn = get_score(score)
    null = _null_totals(score, arr.shape[-1], draws, rng)
    obs = np.sum(fn(arr), axis=-1)
    n_ge = null.size - np.searchsorted(null, obs, side="left")
    return _out((1.0 + n_ge) / (draws + 1.0), arr)


# ---------------------------------------------------------------------------
# generic calibrator rule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Calibrator:
    name: str
    fn: Callable
    breakpoints: tuple = ()


_CALIBRATORS: dict[str, Callable[..., Calibrator]] = {}


def _check_calibrator(cal: Calibrator) -> Calibrator:
    grid = np.linspace(1e-6, 1.0, 4001)
    if np.any(np.diff(cal.fn(grid)) > 1e-12):
        raise ValueError(f"calibrator {cal.name!r} is not decreasing")
    pts = [b for b in cal.breakpoints if 0 < b < 1] or None
    norm, _ = integrate.quad(lambda t: float(cal.fn(np.array(t))), 0.0, 1.0, points=pts, limit=200)
    if norm > 1.0 + 1e-6:
        raise ValueError(f"calibrator {cal.name!r} integrates to {norm:.8f} > 1 on [0, 1]")
    return cal


def register_calibrator(name: str, factory: Callable[..., Calibrator]) -> None:
    """Register a calibrator factory; its products are checked when built."""
    _CALIBRATORS[name] = factory


def get_calibrator(name: str, **params) -> Calibrator:
    try:
        factory = _CALIBRATORS[name]
    except KeyError:
        raise UnknownRuleError(f"unknown calibrator {name!r}") from None
    return _check_calibrator(factory(**params))


def _am_calibrator(**_):
    # linear beyond p = 1 so that the inversion reproduces twice the mean
    return Calibrator("am", lambda t: 2.0 - 2.0 * np.asarray(t, dtype=float))


def _rueger_calibrator(k: int = 1, L: int = 1, **_):
    if not 1 <= k <= L:
        raise ValueError(f"Rueger calibrator needs 1 <= k <= L, got k={k}, L={L}")
    cut = k / L

    def fn(t):
        t = np.asarray(t, dtype=float)
        return np.where((t > 0) & (t < cut), L / k, 0.0)

    return Calibrator(f"rueger:{k}", fn, (cut,))


register_calibrator("am", _am_calibrator)
register_calibrator("rueger", _rueger_calibrator)


def generic_calibrator_combine(p, calibrator: str | Calibrator = "am", weights=None,
                               iterations: int = 64, **params):
    """Smallest level ``a`` in (0, 1) with ``sum w_l f(p_l / a) >= 1``.

    The left-hand side is nondecreasing in ``a``, so bisection brackets the
    infimum; rows that never reach 1 return 1. ``params`` are forwarded to
    the calibrator factory (``k`` for Rueger; ``L`` defaults to the number
    of studies).
    """
    arr = _pmatrix(p)
    rows = np.atleast_2d(arr)
    L = rows.shape[-1]
    if isinstance(calibrator, str):
        params.setdefault("L", L)
        cal = get_calibrator(calibrator, **params)
    else:
        cal = _check_calibrator(calibrator)
    w = np.full(L, 1.0 / L) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (L,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("calibrator weights must be L non-negative numbers summing to 1")

    def g(a):
        return np.sum(w * cal.fn(rows / a[:, None]), axis=-1)

    # step calibrators sum to exactly 1 at their jumps only in exact
    # arithmetic (e.g. 5 * (1/6) * (6/5)); allow for the rounding
    one = 1.0 - 1e-12

    n = rows.shape[0]
    hi = np.ones(n)
    lo = np.zeros(n)
    ok = g(hi) >= one
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        good = g(mid) >= one
        hi = np.where(good, mid, hi)
        lo = np.where(good, lo, mid)
    res = np.where(ok, hi, 1.0)
    return float(res[0]) if arr.ndim == 1 else res


# ---------------------------------------------------------------------------
# e-value rules
# ---------------------------------------------------------------------------

def e_merge_uk(e, k: int):
    """U-statistic of order ``k``: mean of all k-fold products.

    Computed through the elementary symmetric polynomial recurrence in
    O(L k). Object arrays (for instance ``Fraction`` entries) are handled
    in exact arithmetic.
    """
    arr = np.asarray(e)
    if arr.ndim not in (1, 2) or arr.shape[-1] == 0:
        raise ValueError("expected a vector of e-values or a 2-D array of rows")
    L = arr.shape[-1]
    if not 1 <= k <= L:
        raise ValueError(f"k must lie in [1, {L}], got {k}")
    if arr.dtype == object:
        rows = arr.reshape(-1, L)
        out = []
        for row in rows:
            if any(v < 0 for v in row):
                raise ValueError("e-values must be non-negative")
            poly = [1] + [0] * k
            for x in row:
                for j in range(k, 0, -1):
                    poly[j] = poly[j] + poly[j - 1] * x
            out.append(poly[k] / math.comb(L, k))
        return out[0] if arr.ndim == 1 else np.array(out, dtype=object)
    arr = arr.astype(float)
    if np.any(arr < 0):
        raise ValueError("e-values must be non-negative")
    rows = np.atleast_2d(arr)
    poly = np.zeros((rows.shape[0], k + 1))
    poly[:, 0] = 1.0
    for col in range(L):
        x = rows[:, col]
        for j in range(k, 0, -1):
            poly[:, j] += poly[:, j - 1] * x
    res = poly[:, k] / math.comb(L, k)
    return float(res[0]) if arr.ndim == 1 else res


def e_mean(e):
    """Arithmetic mean of e-values (valid under arbitrary dependence)."""
    arr = np.asarray(e, dtype=float)
    if np.any(arr < 0):
        raise ValueError("e-values must be non-negative")
    res = np.mean(np.atleast_2d(arr), axis=-1)
    return float(res[0]) if arr.ndim == 1 else res


# ---------------------------------------------------------------------------
# size diagnostics for dependent calibrator merges
# ---------------------------------------------------------------------------

def _check_levels(alpha, alpha_prime):
    if not 0.0 < alpha < alpha_prime < 1.0:
        raise ValueError("need 0 < alpha < alpha_prime < 1")


def gamma_factor(alpha: float, alpha_prime: float, calibrator: str = "am", k: int = 1, L: int = 1) -> float:
    """Slope multiplying ``P(y not in C) - alpha`` in the exclusion index."""
    _check_levels(alpha, alpha_prime)
    if calibrator == "am":
        return ((1 - alpha) - (1 - alpha_prime) ** 2) / (alpha_prime * (1 - alpha))
    if calibrator == "rueger":
        if not 1 <= k <= L:
            raise ValueError("Rueger needs 1 <= k <= L")
        if alpha / alpha_prime < k / L:
            return (L / k - alpha_prime) / (1 - alpha)
        return alpha_prime / alpha
    raise UnknownRuleError(f"no closed form for calibrator {calibrator!r}")


def gamma_threshold(y_miscover: float, alpha: float, alpha_prime: float, calibrator: str = "am",
                    k: int = 1, L: int = 1) -> float:
    """Exclusion index for a candidate with the given miscoverage.

    Candidates with index above 1 are asymptotically excluded by the
    calibrator merge at level ``alpha_prime`` when every study works at
    level ``alpha``.
    """
    if not 0.0 <= y_miscover <= 1.0:
        raise ValueError("miscoverage must lie in [0, 1]")
    return gamma_factor(alpha, alpha_prime, calibrator, k, L) * (y_miscover - alpha) + alpha_prime


def gamma_exclusion_level(alpha: float, alpha_prime: float, calibrator: str = "am", k: int = 1, L: int = 1) -> float:
    """Miscoverage above which :func:`gamma_threshold` exceeds 1."""
    return alpha + (1 - alpha_prime) / gamma_factor(alpha, alpha_prime, calibrator, k, L)


def uk_exclusion_level(alpha: float, alpha_prime: float, k: int, tau: float = 1.0) -> float:
    """Miscoverage above which the U_k e-merge excludes a candidate as L grows.

    Every study works at level ``alpha`` and the merge thresholds at
    ``tau / alpha_prime``. A candidate missed by each study with
    probability ``q`` has ``U_k`` close to ``(q / alpha)^k`` for large L.
    """
    if not 0.0 < alpha < 1.0 or not 0.0 < alpha_prime < 1.0:
        raise ValueError("levels must lie in (0, 1)")
    if k < 1:
        raise ValueError("k must be at least 1")
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    return alpha * (tau / alpha_prime) ** (1.0 / k)


# ---------------------------------------------------------------------------
# tagged aggregator objects
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Aggregator:
    """A named aggregation rule with its validity regime.

    ``kind`` is ``"p"`` or ``"e"``. Use :meth:`combine` on a matrix whose
    rows are per-candidate statistic vectors.
    """

    rule: str
    kind: str
    validity: str
    k: int = 1
    weights: tuple | None = None
    score: str | None = None
    calibrator: str | None = None
    draws: int = 100_000
    label: str = field(default="", compare=False)

    def __post_init__(self):
        if self.kind not in ("p", "e"):
            raise ValueError("aggregator kind must be 'p' or 'e'")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0):
                raise ValueError("weights must be non-negative")

    @property
    def name(self) -> str:
        return self.label or self.rule

    def check_width(self, L: int) -> None:
        if self.rule in ("rueger", "uk-e") and not 1 <= self.k <= L:
            raise ValueError(f"{self.rule} needs 1 <= k <= L={L}, got k={self.k}")
        if self.weights is not None and len(self.weights) != L:
            raise ValueError(f"{self.rule} has {len(self.weights)} weights for {L} studies")

    def combine(self, stats, rng: RngStream | None = None):
        stats = np.asarray(stats, dtype=float)
        self.check_width(stats.shape[-1])
        r = self.rule
        if r == "fisher":
            return fisher_combine(stats)
        if r == "liptak":
            return liptak_combine(stats, self.weights)
        if r == "cct":
            return cct_combine(stats)
        if r == "rueger":
            return rueger_combine(stats, self.k)
        if r == "am":
            return am_calibrator_combine(stats)
        if r == "generic-s":
            return generic_s_combine(stats, self.score, self.draws, rng)
        if r == "calibrator":
            params = {"k": self.k} if self.calibrator == "rueger" else {}
            return generic_calibrator_combine(stats, self.calibrator, self.weights, **params)
        if r == "am-e":
            return e_mean(stats)
        if r == "uk-e":
            return e_merge_uk(stats, self.k)
        raise UnknownRuleError(f"unknown rule {r!r}")


METHOD_IDS = (
    "fisher", "liptak", "cct", "rueger", "rueger:K", "am", "neg2log", "negphiinv",
    "calibrator:am", "calibrator:rueger:K", "am-e", "u2", "uk:K",
)


def get_aggregator(method: str, weights=None, draws: int = 100_000) -> Aggregator:
    """Build an :class:`Aggregator` from a registry id.

    Ids: ``fisher``, ``liptak``, ``cct``, ``rueger`` / ``rueger:K``, ``am``
    (p-value arithmetic-mean calibrator), ``neg2log`` / ``negphiinv``
    (generic score rule), ``calibrator:am`` / ``calibrator:rueger:K``
    (generic calibrator inversion), ``am-e`` (mean of e-values),
    ``u2`` / ``uk:K`` (order-K U-statistic of e-values).
    """
    wt = None if weights is None else tuple(float(x) for x in weights)
    parts = method.strip().lower().split(":")
    head = parts[0]

    def _k(idx, default=1):
        if len(parts) <= idx:
            return default
        try:
            return int(parts[idx])
        except ValueError:
            raise UnknownRuleError(f"bad order in method id {method!r}") from None

    if head == "fisher" and len(parts) == 1:
        return Aggregator("fisher", "p", INDEPENDENT, label="Fisher")
    if head == "liptak" and len(parts) == 1:
        return Aggregator("liptak", "p", INDEPENDENT, weights=wt, label="Liptak")
    if head == "cct" and len(parts) == 1:
        return Aggregator("cct", "p", HEURISTIC, label="CCT")
    if head == "rueger" and len(parts) <= 2:
        k = _k(1)
        return Aggregator("rueger", "p", ARBITRARY, k=k, label="Rueger" if k == 1 else f"Rueger{k}")
    if head == "am" and len(parts) == 1:
        return Aggregator("am", "p", ARBITRARY, label="AMcal")
    if head in _SCORES and len(parts) == 1:
        return Aggregator("generic-s", "p", INDEPENDENT, score=head, draws=draws, label=f"S[{head}]")
    if head == "calibrator" and len(parts) >= 2:
        cal = parts[1]
        if cal not in _CALIBRATORS:
            raise UnknownRuleError(f"unknown calibrator {cal!r}")
        if wt is not None and abs(sum(wt) - 1.0) > 1e-12:
            raise ValueError("calibrator weights must sum to 1")
        k = _k(2)
        return Aggregator("calibrator", "p", ARBITRARY, k=k, weights=wt, calibrator=cal,
                          label=f"Cal[{cal}]" if cal != "rueger" else f"Cal[rueger{k}]")
    if head == "am-e" and len(parts) == 1:
        return Aggregator("am-e", "e", ARBITRARY, label="AM")
    if head == "u2" and len(parts) == 1:
        return Aggregator("uk-e", "e", INDEPENDENT, k=2, label="U2")
    if head == "uk" and len(parts) == 2:
        k = _k(1)
        return Aggregator("uk-e", "e", INDEPENDENT if k >= 2 else ARBITRARY, k=k, label=f"U{k}")
    raise UnknownRuleError(f"unknown method id {method!r}")
