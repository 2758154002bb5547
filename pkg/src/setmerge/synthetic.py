"""Synthetic p-values and e-values built from (set, level) pairs.

A candidate outside a study's set gets a p-value drawn from Unif(0, alpha);
inside, from Unif(alpha, 1). The e-value is ``1/alpha`` outside and ``0``
inside. The vectorised helpers take pre-drawn open uniforms so that the
same uniforms can be replayed through different code paths.
"""

from __future__ import annotations

import numpy as np

from .numerics import RngStream, _scale_open, open_unit

__all__ = [
    "synth_p",
    "synth_e",
    "synthetic_p_matrix",
    "synthetic_e_matrix",
    "theoretical_p_cdf_gap",
]


def _check_alpha(alpha):
    a = np.asarray(alpha, dtype=float)
    if np.any(~((a > 0.0) & (a < 1.0))):
        raise ValueError(f"control level must lie in (0, 1), got {alpha}")
    return a


def synth_p(member: bool, alpha: float, rng: RngStream) -> float:
    """One synthetic p-value for a candidate with the given membership."""
    _check_alpha(alpha)
    u = open_unit(rng)
    return float(synthetic_p_matrix(np.array(member), np.array(alpha), np.array(u)))


def synth_e(member: bool, alpha: float) -> float:
    _check_alpha(alpha)
    return 0.0 if member else 1.0 / alpha


def synthetic_p_matrix(membership, alphas, uniforms):
    """Map open uniforms to synthetic p-values.

    Parameters
    ----------
    membership : bool array, shape (..., L)
        ``True`` where the candidate lies in study ``l``'s set.
    alphas : array, shape (L,)
        Study control levels.
    uniforms : array, same shape as ``membership``
        Draws strictly inside (0, 1).
    """
    alphas = _check_alpha(alphas)
    membership = np.asarray(membership, dtype=bool)
    u = np.asarray(uniforms, dtype=float)
    outside = _scale_open(u, 0.0, alphas)
    inside = _scale_open(u, alphas, 1.0)
    return np.where(membership, inside, outside)


def synthetic_e_matrix(membership, alphas):
    alphas = _check_alpha(alphas)
    membership = np.asarray(membership, dtype=bool)
    return np.where(membership, 0.0, 1.0 / alphas)


def theoretical_p_cdf_gap(t, alpha: float, miscover: float):
    """Exact gap ``P(p(Y) <= t) - t`` for a set with the given miscoverage.

    Non-positive everywhere and identically zero when the set's
    miscoverage equals its nominal level.
    """
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if not 0.0 <= miscover <= alpha:
        raise ValueError("miscoverage must lie in [0, alpha]")
    slack = 1.0 - miscover / alpha
    shape = (np.where(t > alpha, t - alpha, 0.0) - (t - t * alpha)) / (1.0 - alpha)
    out = slack * shape
    return float(out) if out.ndim == 0 else out
