"""Special functions and seedable random streams shared by the whole package.

Everything here accepts scalars or numpy arrays. Random streams are
counter-based (Philox), so a stream is fully determined by its
``(seed, stream_id)`` pair and independent substreams can be derived from
any tuple of keys without coordinating state between workers.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
from scipy.special import erfc

__all__ = [
    "RngStream",
    "substream",
    "std_normal_cdf",
    "std_normal_sf",
    "std_normal_pdf",
    "std_normal_quantile",
    "regularized_gamma_p",
    "regularized_gamma_q",
    "chi2_cdf",
    "chi2_sf",
    "cauchy_cdf",
    "cauchy_sf",
    "uniform",
    "open_unit",
]

_MASK64 = (1 << 64) - 1
_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def _hash_keys(keys) -> int:
    h = hashlib.blake2b(digest_size=8)
    for k in keys:
        h.update(repr(k).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    The underlying bit generator is Philox keyed with both 64-bit words, so
    distinct stream ids give independent sequences and the same pair always
    replays the same draws, whichever process or thread consumes it.
    """

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._gen = None

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            key = self.seed | (self.stream_id << 64)
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def child(self, *keys) -> "RngStream":
        """Derive an independent stream from this one and ``keys``."""
        return RngStream(self.seed, _hash_keys((self.stream_id,) + keys))

    def reset(self) -> "RngStream":
        """Return a fresh stream that replays this stream from the start."""
        return RngStream(self.seed, self.stream_id)


def substream(master_seed: int, *keys) -> RngStream:
    """Stream for ``keys`` under ``master_seed``.

    Typical keys are ``(purpose_tag, replication_index, study_index)``.
    """
    return RngStream(master_seed, _hash_keys(keys))


def open_unit(rng: RngStream, size=None):
    """Uniform draws strictly inside (0, 1).

    Each draw is ``(k + 1/2) / 2**52`` for a uniformly chosen 52-bit ``k``,
    so the endpoints are unreachable and the i-th value of a stream does not
    depend on how the stream was chunked.
    """
    r = rng.generator.random(size)
    return (np.floor(r * 4503599627370496.0) + 0.5) / 4503599627370496.0


def uniform(rng: RngStream, lo: float, hi: float, size=None):
    """Draw from the open interval (lo, hi)."""
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
        raise ValueError(f"uniform needs finite lo < hi, got ({lo}, {hi})")
    u = open_unit(rng, size)
    return _scale_open(u, lo, hi)


def _scale_open(u, lo, hi):
    # rounding in lo + (hi - lo) * u can land on an endpoint; pull it back in
    v = lo + (hi - lo) * u
    return np.clip(v, np.nextafter(lo, np.inf), np.nextafter(hi, -np.inf))


# ---------------------------------------------------------------------------
# normal distribution
# ---------------------------------------------------------------------------

def std_normal_cdf(x):
    """Standard normal CDF."""
    return 0.5 * erfc(-np.asarray(x, dtype=float) / _SQRT2)


def std_normal_sf(x):
    """Standard normal upper tail, ``1 - cdf(x)`` without cancellation."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / _SQRT2)


def std_normal_pdf(x):
    x = np.asarray(x, dtype=float)
    return _INV_SQRT2PI * np.exp(-0.5 * x * x)


# Acklam's rational approximation, relative error about 1.2e-9
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p):
    x = np.empty_like(p)
    lo = p < _P_LOW
    hi = p > 1.0 - _P_LOW
    mid = ~(lo | hi)

    q = p[mid] - 0.5
    r = q * q
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    x[mid] = num / den

    for mask, tail, sign in ((lo, p[lo], 1.0), (hi, 1.0 - p[hi], -1.0)):
        if not mask.any():
            continue
        q = np.sqrt(-2.0 * np.log(tail))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        x[mask] = sign * num / den
    return x


def std_normal_quantile(p):
    """Inverse of :func:`std_normal_cdf` on (0, 1).

    Rational approximation followed by one Newton step on the CDF. Values
    of ``p`` outside the open unit interval raise ``ValueError``.
    """
    arr = np.asarray(p, dtype=float)
    if np.any(~((arr > 0.0) & (arr < 1.0))):
        raise ValueError("std_normal_quantile is defined on the open interval (0, 1)")
    flat = np.atleast_1d(arr).ravel()
    x = _acklam(flat)
    # Newton step; work in the lower tail so small probabilities keep precision
    upper = flat > 0.5
    err = np.where(upper, std_normal_sf(x) - (1.0 - flat), -(std_normal_cdf(x) - flat))
    x = x + err / std_normal_pdf(x)
    out = x.reshape(np.shape(arr))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# incomplete gamma / chi-square
# ---------------------------------------------------------------------------

_EPS = 1e-16
_TINY = 1e-300
_MAXIT = 500


def _gamma_series(a, x, log_prefix):
    # P(a, x) = exp(-x) x^a / Gamma(a + 1) * sum_n x^n / ((a+1)...(a+n))
    term = np.full_like(x, 1.0 / a)
    total = term.copy()
    ap = a
    active = np.ones(x.shape, dtype=bool)
    for _ in range(_MAXIT):
        ap += 1.0
        term = np.where(active, term * x / ap, term)
        total = np.where(active, total + term, total)
        active &= np.abs(term) > np.abs(total) * _EPS
        if not active.any():
            break
    return total * np.exp(log_prefix)


def _gamma_contfrac(a, x, log_prefix):
    # Q(a, x) by the modified Lentz algorithm
    b = x + 1.0 - a
    c = np.full_like(x, 1.0 / _TINY)
    d = 1.0 / b
    h = d.copy()
    active = np.ones(x.shape, dtype=bool)
    for i in range(1, _MAXIT):
        an = -i * (i - a)
        b = b + 2.0
        d_new = an * d + b
        d_new = np.where(np.abs(d_new) < _TINY, _TINY, d_new)
        c_new = b + an / c
        c_new = np.where(np.abs(c_new) < _TINY, _TINY, c_new)
        d_new = 1.0 / d_new
        delta = d_new * c_new
        d = np.where(active, d_new, d)
        c = np.where(active, c_new, c)
        h = np.where(active, h * delta, h)
        active &= np.abs(delta - 1.0) > _EPS
        if not active.any():
            break
    return np.exp(log_prefix) * h


def _gamma_pq(a: float, x):
    if not a > 0:
        raise ValueError("shape parameter must be positive")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise ValueError("incomplete gamma needs x >= 0")
    flat = np.atleast_1d(x).ravel()
    p = np.zeros_like(flat)
    q = np.ones_like(flat)
    pos = flat > 0
    inf = np.isinf(flat)
    p[inf], q[inf] = 1.0, 0.0
    work = pos & ~inf
    series = work & (flat < a + 1.0)
    cf = work & ~series
    lg = math.lgamma(a)
    if series.any():
        xs = flat[series]
        val = _gamma_series(a, xs, -xs + a * np.log(xs) - lg)
        p[series] = val
        q[series] = 1.0 - val
    if cf.any():
        xs = flat[cf]
        val = _gamma_contfrac(a, xs, -xs + a * np.log(xs) - lg)
        q[cf] = val
        p[cf] = 1.0 - val
    return p.reshape(x.shape), q.reshape(x.shape)


def _scalar_out(arr):
    return float(arr) if np.ndim(arr) == 0 else arr


def regularized_gamma_p(a: float, x):
    """Regularized lower incomplete gamma function P(a, x)."""
    return _scalar_out(_gamma_pq(a, x)[0])


def regularized_gamma_q(a: float, x):
    """Regularized upper incomplete gamma function Q(a, x) = 1 - P(a, x)."""
    return _scalar_out(_gamma_pq(a, x)[1])


def _check_dof(dof):
    if int(dof) != dof or dof < 1:
        raise ValueError(f"degrees of freedom must be a positive integer, got {dof}")


def chi2_cdf(x, dof: int):
    """CDF of a central chi-square with ``dof`` degrees of freedom."""
    _check_dof(dof)
    return _scalar_out(_gamma_pq(dof / 2.0, np.asarray(x, dtype=float) / 2.0)[0])


def _poisson_tail(n: int, x):
    # Q(n, x) for integer n: P(Poisson(x) < n) = sum_{j<n} exp(-x) x^j / j!
    j = np.arange(n, dtype=float)
    lfact = np.array([math.lgamma(v + 1.0) for v in j])
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = -x[..., None] + j * np.log(x)[..., None] - lfact
    logs[..., 0] = -x  # avoids 0 * log(0) at x = 0
    return np.exp(logs).sum(axis=-1)


def chi2_sf(x, dof: int):
    """Upper tail of the chi-square; accurate far into the tail.

    Even degrees of freedom use the exact finite Poisson sum, which is
    both faster and free of cancellation.
    """
    _check_dof(dof)
    x = np.asarray(x, dtype=float)
    if dof % 2 == 0 and dof <= 200:
        if np.any(x < 0) or np.any(np.isnan(x)):
            raise ValueError("incomplete gamma needs x >= 0")
        out = np.where(np.isinf(x), 0.0, _poisson_tail(dof // 2, np.where(np.isinf(x), 0.0, x / 2.0)))
        return _scalar_out(np.minimum(out, 1.0))
    return _scalar_out(_gamma_pq(dof / 2.0, x / 2.0)[1])


# ---------------------------------------------------------------------------
# Cauchy
# ---------------------------------------------------------------------------

def cauchy_cdf(x):
    x = np.asarray(x, dtype=float)
    return _scalar_out(0.5 + np.arctan(x) / np.pi)


def cauchy_sf(x):
    """``1 - cauchy_cdf(x)``, keeping relative precision for large ``x``."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        big = np.arctan(1.0 / np.where(x > 1.0, x, 1.0)) / np.pi
    out = np.where(x > 1.0, big, 0.5 - np.arctan(x) / np.pi)
    return _scalar_out(out)
