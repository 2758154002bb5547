"""Merging dependent split-conformal intervals.

Data follow a sparse linear model ``Y = X'beta + eps`` with standard normal
noise. Studies share the labelled sample, so their intervals are dependent
through the data and through the common test point. Two designs:

* ``"algorithms"``: one train/calibration split, four regressors
  (least squares, ridge, k-nearest neighbours, constant mean), ``L = 4``.
* ``"splits"``: one regressor (ridge), a fresh random split per study.

Each study reports the split-conformal interval with absolute-residual
scores. Only rules valid under arbitrary dependence are of interest here;
the Cauchy combination is included as a heuristic, as is the oracle
benchmark that merges the conformal p-values themselves with it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..aggregate import cct_combine
from ..merge import evaluate, synthetic_uniforms
from ..numerics import substream
from ..sets import Continuous, IntervalSet, build_partition
from .core import ExperimentResult, Flag, ScenarioConfig, coverage_row, method_label, run_replications, stack
from .normal import _config, _single_rows, am_exception

__all__ = [
    "ConformalDesign",
    "REGRESSORS",
    "fit_predict",
    "conformal_quantile",
    "conformal_pvalue",
    "run_conformal_dependent",
]


@dataclass(frozen=True)
class ConformalDesign:
    """Data-generating settings for the conformal experiment."""

    variant: str = "algorithms"
    dim: int = 20
    active: int = 10
    coef_sd: float = 2.0
    n_train: int = 100
    n_cal: int = 100
    ridge_lambda: float = 1.0
    knn_k: int = 5

    def __post_init__(self):
        if self.variant not in ("algorithms", "splits"):
            raise ValueError("variant must be 'algorithms' or 'splits'")
        if not 0 < self.active <= self.dim:
            raise ValueError("need 0 < active <= dim")
        if self.n_train <= self.dim + 1 or self.n_cal < 2:
            raise ValueError("sample sizes too small for the regressors")


REGRESSORS = ("ols", "ridge", "knn", "mean")


def fit_predict(kind: str, Xtr, ytr, Xnew, ridge_lambda: float = 1.0, knn_k: int = 5):
    """Fit a regressor on ``(Xtr, ytr)`` and predict at the rows of ``Xnew``."""
    if kind == "mean":
        return np.full(Xnew.shape[0], ytr.mean())
    if kind == "knn":
        d = ((Xnew[:, None, :] - Xtr[None, :, :]) ** 2).sum(axis=2)
        idx = np.argsort(d, axis=1, kind="stable")[:, :knn_k]
        return ytr[idx].mean(axis=1)
    xm, ym = Xtr.mean(axis=0), ytr.mean()
    Xc, yc = Xtr - xm, ytr - ym
    if kind == "ols":
        coef = np.linalg.lstsq(Xc, yc, rcond=None)[0]
    elif kind == "ridge":
        p = Xtr.shape[1]
        coef = np.linalg.solve(Xc.T @ Xc + ridge_lambda * np.eye(p), Xc.T @ yc)
    else:
        raise ValueError(f"unknown regressor {kind!r}")
    return ym + (Xnew - xm) @ coef


def conformal_quantile(sorted_scores: np.ndarray, alpha: float) -> float:
    """The ``ceil((1 - alpha)(n + 1))``-th smallest score, or ``inf`` if past ``n``."""
    n = sorted_scores.size
    k = math.ceil((1.0 - alpha) * (n + 1) - 1e-12)
    return float(sorted_scores[k - 1]) if k <= n else math.inf


def conformal_pvalue(sorted_scores: np.ndarray, score) -> np.ndarray:
    """``(1 + #{calibration scores >= score}) / (n + 1)``."""
    n = sorted_scores.size
    ge = n - np.searchsorted(sorted_scores, score, side="left")
    return (1.0 + ge) / (n + 1.0)


def _study_fits(seed: int, r: int, design: ConformalDesign, Lmax: int):
    """Point predictions at the test point and sorted calibration scores."""
    rng = substream(seed, "conformal", r).generator
    p = design.dim
    beta = np.zeros(p)
    beta[:design.active] = design.coef_sd * rng.standard_normal(design.active)
    n = design.n_train + design.n_cal
    X = rng.standard_normal((n, p))
    y = X @ beta + rng.standard_normal(n)
    x0 = rng.standard_normal((1, p))
    y0 = float(x0[0] @ beta + rng.standard_normal())
    preds, scores = [], []
    if design.variant == "algorithms":
        tr, ca = slice(0, design.n_train), slice(design.n_train, n)
        for kind in REGRESSORS[:Lmax]:
            fit = fit_predict(kind, X[tr], y[tr], np.vstack([X[ca], x0]), design.ridge_lambda, design.knn_k)
            scores.append(np.sort(np.abs(y[ca] - fit[:-1])))
            preds.append(fit[-1])
    else:
        for ell in range(Lmax):
            perm = substream(seed, "conformal-split", r, ell).generator.permutation(n)
            tr, ca = perm[:design.n_train], perm[design.n_train:]
            fit = fit_predict("ridge", X[tr], y[tr], np.vstack([X[ca], x0]), design.ridge_lambda)
            scores.append(np.sort(np.abs(y[ca] - fit[:-1])))
            preds.append(fit[-1])
    return np.array(preds), np.array(scores), y0


def _oracle_cct(preds, scores, lo, hi, alpha, y0):
    """Exact size and coverage of ``{y in [lo, hi] : CCT(p_conf(y)) > alpha}``."""
    bp = np.concatenate([(preds[:, None] - scores).ravel(), (preds[:, None] + scores).ravel(), [lo, hi]])
    bp = np.unique(np.clip(bp, lo, hi))
    mids = 0.5 * (bp[:-1] + bp[1:])
    # a conformal p-value of exactly 1 sends the Cauchy transform to -inf;
    # the largest double below 1 gives the same limiting combined value
    top = np.nextafter(1.0, 0.0)
    pv = np.column_stack([conformal_pvalue(s, np.abs(mids - f)) for f, s in zip(preds, scores)])
    kept = np.asarray(cct_combine(np.minimum(pv, top))) > alpha
    size = float(np.sum((bp[1:] - bp[:-1])[kept]))
    p0 = np.array([conformal_pvalue(s, abs(y0 - f)) for f, s in zip(preds, scores)])
    hit = bool(lo <= y0 <= hi and float(cct_combine(np.minimum(p0, top))) > alpha)
    return hit, size


def _conformal_rep(r: int, payload):
    seed, design, points, methods, oracle, Lmax = payload
    preds, scores, y0 = _study_fits(seed, r, design, Lmax)
    G, M = len(points), len(methods)
    hit = np.zeros((G, M + oracle), dtype=bool)
    size = np.zeros((G, M + oracle))
    s_hit = np.full((G, Lmax), np.nan)
    s_size = np.full((G, Lmax), np.nan)
    for g, (L, alphas, target) in enumerate(points):
        q = np.array([conformal_quantile(scores[ell], alphas[ell]) for ell in range(L)])
        lefts, rights = preds[:L] - q, preds[:L] + q
        s_hit[g, :L] = (lefts <= y0) & (y0 <= rights)
        s_size[g, :L] = rights - lefts
        lo, hi = float(lefts.min()) - 1.0, float(rights.max()) + 1.0
        sets = [IntervalSet([a], [b]) for a, b in zip(lefts, rights)]
        cells = build_partition(Continuous(lo, hi), sets)
        mem = np.array([c.signature for c in cells], dtype=bool)
        cl = np.array([c.region.lefts[0] for c in cells])
        cr = np.array([c.region.rights[0] for c in cells])
        at = (cl <= y0) & (y0 <= cr)
        u = synthetic_uniforms(seed, len(cells), L, "conformal", r, g)
        a = np.asarray(alphas, dtype=float)
        for m, (agg_id, tau) in enumerate(methods):
            _, kept = evaluate(mem, a, _config(agg_id, target, tau), u)
            size[g, m] = (cr - cl)[kept].sum()
            hit[g, m] = bool(np.any(kept & at))
        if oracle:
            hit[g, M], size[g, M] = _oracle_cct(preds[:L], scores[:L], lo, hi, target, y0)
    return {"hit": hit, "size": size, "s_hit": s_hit, "s_size": s_size}


DEFAULT_METHODS = ("cct", "rueger", "am-e", "am-e@1", "orp-cct")


def run_conformal_dependent(config: ScenarioConfig, design: ConformalDesign | None = None) -> ExperimentResult:
    """Coverage of the fresh response and mean size, per method and grid point.

    With the ``"algorithms"`` design the number of studies is the number of
    regressors (four), so scenario S2 is not available. Without explicit
    ``config.methods`` the default set is :data:`DEFAULT_METHODS`.
    """
    design = design or ConformalDesign()
    config = config.resolved(DEFAULT_METHODS)
    if design.variant == "algorithms":
        if config.scenario == "S2":
            raise ValueError("scenario S2 needs the 'splits' design")
        if config.L > len(REGRESSORS):
            raise ValueError(f"at most {len(REGRESSORS)} regressors are available")
    sat = [m for m in config.methods if m != "orp-cct"]
    for m in sat:
        if m.startswith("orp"):
            raise ValueError(f"{m!r} is not available in the conformal experiment")
    oracle = "orp-cct" in config.methods
    points = tuple((g.L, g.alphas, g.target) for g in config.grid_points())
    specs = tuple(config.spec(m) for m in sat)
    payload = (config.seed, design, points, specs, int(oracle), config.max_L)
    res = run_replications(_conformal_rep, config.replications, payload, config.workers, config.chunk)
    hit, size = stack(res, "hit"), stack(res, "size")
    s_hit, s_size = stack(res, "s_hit"), stack(res, "s_size")
    rows, flags = [], []
    sc = config.scenario
    for g, pt in enumerate(config.grid_points()):
        for mid in config.methods:
            k = len(sat) if mid == "orp-cct" else sat.index(mid)
            label = method_label(mid)
            rows.append(coverage_row(sc, pt.value, label, hit[:, g, k], size[:, g, k]))
            base, tau = config.spec(mid) if mid != "orp-cct" else (mid, 1.0)
            if base == "am-e" and am_exception(pt.L, pt.alphas, pt.target, tau):
                # the studies are dependent: only the union bound holds for the intersection
                floor = max(0.0, 1.0 - float(np.sum(pt.alphas)))
                flags.append(Flag(sc, pt.value, label, "arithmetic-mean e-merge reduces to the intersection", floor))
        rows.extend(_single_rows(sc, pt.value, pt.L, s_hit[:, g], s_size[:, g]))
    return ExperimentResult(rows, flags)
