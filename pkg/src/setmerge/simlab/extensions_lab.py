"""Monte Carlo checks for risk-controlled merging and rejection-set synthesis.

Risk control: multi-label prediction over ``m`` base labels with a fixed
true label set. Study ``l`` scores every label as ``mu * 1{j in truth} +
N(0, 1)`` and keeps labels scoring above ``mu + Phi^{-1}(beta_l)``, which
misses each true label with probability exactly ``beta_l``; its expected
missing rate is therefore ``beta_l``. Candidates are all non-empty label
subsets, and the merged prediction is the union of the kept candidates.

Multiple testing: ``m`` hypotheses, the first ``m0`` null with uniform
p-values and the rest with one-sided z-test p-values at mean shift
``signal``. Each study runs Benjamini-Hochberg on its own independent data.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from ..extensions import (
    POINT_MASS_ONE,
    UNIF_TAIL,
    MissingRateLoss,
    RejectionSetInput,
    RiskStudyInput,
    bh_procedure,
    merge_risk,
    synth_mt_matrix,
)
from ..numerics import std_normal_quantile, std_normal_sf, substream
from ..sets import Discrete, LabelSet
from .core import fmt, method_label, run_replications

__all__ = [
    "RiskDesign",
    "RiskResult",
    "run_risk_control",
    "MTDesign",
    "MTResult",
    "run_mt_validity",
]


# ---------------------------------------------------------------------------
# risk control
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RiskDesign:
    m: int = 6
    truth: tuple = (0, 1, 2)
    signal: float = 2.5
    betas: tuple = (0.05, 0.1, 0.1, 0.15)
    beta_target: float = 0.1
    methods: tuple = ("am-e", "rueger", "fisher")

    def __post_init__(self):
        if not self.truth or any(not 0 <= j < self.m for j in self.truth):
            raise ValueError("truth must be a non-empty subset of range(m)")
        if not 0.0 < self.beta_target < 1.0:
            raise ValueError("risk level must lie in (0, 1)")

    def candidates(self) -> Discrete:
        labels = [frozenset(c) for k in range(1, self.m + 1)
                  for c in itertools.combinations(range(self.m), k)]
        return Discrete(tuple(labels))


@dataclass
class RiskResult:
    """Mean missing rate of the merged prediction per method (and per study)."""

    rows: list[dict]
    columns: tuple = ("method", "beta", "risk", "risk_se", "size", "reps")

    def get(self, method: str) -> dict:
        for r in self.rows:
            if r["method"] == method:
                return r
        raise KeyError(method)

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


def _risk_rep(r: int, payload):
    seed, design, space = payload
    truth = frozenset(design.truth)
    mask = np.array([j in truth for j in range(design.m)])
    studies = []
    study_loss = []
    for ell, beta in enumerate(design.betas):
        s = design.signal * mask + substream(seed, "risk-data", r, ell).generator.standard_normal(design.m)
        cut = design.signal + float(std_normal_quantile(beta))
        labels = LabelSet(int(j) for j in np.nonzero(s > cut)[0])
        studies.append(RiskStudyInput(labels, beta))
        study_loss.append(MissingRateLoss(labels, truth))
    out = np.zeros((len(design.methods), 2))
    for k, mid in enumerate(design.methods):
        rep = merge_risk(space, studies, MissingRateLoss, design.beta_target, mid,
                         seed=seed, independent=True, keys=("risk", r))
        covered = frozenset().union(*rep.merged.labels) if not rep.merged.is_empty() else frozenset()
        out[k, 0] = MissingRateLoss(covered, truth)
        out[k, 1] = len(covered)
    return {"merged": out, "single": np.array(study_loss)}


def run_risk_control(design: RiskDesign | None = None, replications: int = 2000, seed: int = 0,
                     workers: int | None = None, chunk: int = 250) -> RiskResult:
    """Monte Carlo mean missing rate of each merger and of each study."""
    design = design or RiskDesign()
    payload = (seed, design, design.candidates())
    res = run_replications(_risk_rep, replications, payload, workers, chunk)
    merged = np.stack([x["merged"] for x in res])
    single = np.stack([x["single"] for x in res])
    R = replications
    rows = []
    for k, mid in enumerate(design.methods):
        loss = merged[:, k, 0]
        rows.append({"method": method_label(mid), "beta": design.beta_target, "risk": float(loss.mean()),
                     "risk_se": float(loss.std(ddof=1) / math.sqrt(R)),
                     "size": float(merged[:, k, 1].mean()), "reps": R})
    for ell, beta in enumerate(design.betas):
        loss = single[:, ell]
        rows.append({"method": f"Study{ell + 1}", "beta": beta, "risk": float(loss.mean()),
                     "risk_se": float(loss.std(ddof=1) / math.sqrt(R)), "size": float("nan"), "reps": R})
    return RiskResult(rows)


# ---------------------------------------------------------------------------
# multiple testing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MTDesign:
    m: int = 200
    m0: int = 160
    signal: float = 3.0
    alphas: tuple = (0.05, 0.2)
    t_grid: tuple = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 0.9)

    def __post_init__(self):
        if not 0 < self.m0 <= self.m:
            raise ValueError("need 0 < m0 <= m")


@dataclass
class MTResult:
    """Per-study Monte Carlo estimates for the rejection-set statistics.

    ``null_rate[l][t]``: mean over null hypotheses of ``P(p <= t)`` for the
    uniform-tail variant. ``null_count[l][t]``: expected number of nulls with
    ``p <= t`` for the point-mass variant. ``e_sum[l]``: expected sum of
    generalized e-values over the nulls. Each entry is ``(mean, se)``.
    """

    design: MTDesign
    null_rate: list = field(default_factory=list)
    null_count: list = field(default_factory=list)
    e_sum: list = field(default_factory=list)
    fdp: list = field(default_factory=list)
    reps: int = 0


def _mt_rep(r: int, payload):
    seed, d = payload
    L, T = len(d.alphas), len(d.t_grid)
    studies = []
    for ell, a in enumerate(d.alphas):
        g = substream(seed, "mt-data", r, ell).generator
        p = np.empty(d.m)
        p[:d.m0] = g.random(d.m0)
        p[d.m0:] = std_normal_sf(d.signal + g.standard_normal(d.m - d.m0))
        studies.append(RejectionSetInput(d.m, bh_procedure(p, a), a))
    tail = synth_mt_matrix(studies, "p", UNIF_TAIL, seed=seed, keys=(r,))[:, :d.m0]
    mass = synth_mt_matrix(studies, "p", POINT_MASS_ONE, seed=seed, keys=(r,))[:, :d.m0]
    e = synth_mt_matrix(studies, "e")[:, :d.m0]
    t = np.asarray(d.t_grid)
    rate = (tail[:, :, None] <= t).mean(axis=1)
    count = (mass[:, :, None] <= t).sum(axis=1).astype(float)
    fdp = np.array([len([i for i in s.rejected if i < d.m0]) / max(len(s.rejected), 1) for s in studies])
    return {"rate": rate, "count": count, "e": e.sum(axis=1), "fdp": fdp}


def run_mt_validity(design: MTDesign | None = None, replications: int = 2000, seed: int = 0,
                    workers: int | None = None, chunk: int = 250) -> MTResult:
    """Super-uniformity and generalized e-value checks under BH."""
    d = design or MTDesign()
    res = run_replications(_mt_rep, replications, (seed, d), workers, chunk)
    R = replications

    def summ(arr):
        return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(R))

    rate = np.stack([x["rate"] for x in res])
    count = np.stack([x["count"] for x in res])
    e = np.stack([x["e"] for x in res])
    fdp = np.stack([x["fdp"] for x in res])
    out = MTResult(d, reps=R)
    for ell in range(len(d.alphas)):
        out.null_rate.append({t: summ(rate[:, ell, j]) for j, t in enumerate(d.t_grid)})
        out.null_count.append({t: summ(count[:, ell, j]) for j, t in enumerate(d.t_grid)})
        out.e_sum.append(summ(e[:, ell]))
        out.fdp.append(summ(fdp[:, ell]))
    return out
