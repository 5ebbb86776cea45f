"""Shared numerical substrate: matrices, seeded streams, softmax, oracles, fits.

Everything here is a pure function of its inputs and safe to call from
multiple threads. All public operations work in 64-bit floats.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

# Dense row-major float64 matrix. Plain 2-D C-contiguous ndarrays are the
# carrier type throughout; `as_matrix` is the validating constructor.
Mat = np.ndarray

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and coerce `a` to a finite float64 2-D C-order array."""
    out = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if out.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D matrix, got ndim={out.ndim}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name}: contains non-finite entries")
    return out


def as_vector(a, name: str = "vector") -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if out.ndim != 1:
        raise ValueError(f"{name}: expected a 1-D vector, got ndim={out.ndim}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name}: contains non-finite entries")
    return out


def _splitmix64(x: int) -> int:
    x = (x + _SPLITMIX_GAMMA) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def stable_mix(*values: int) -> int:
    """Order-sensitive 64-bit hash of integers; stable across platforms."""
    h = 0
    for v in values:
        h = _splitmix64((h ^ (int(v) & _MASK64)) & _MASK64)
    return h


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Equal keys reproduce the identical sample sequence on every platform;
    distinct stream ids give statistically independent streams. Streams are
    value-like: `child` derives an independent substream without touching
    the parent.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        if not (0 <= self.seed < 2**64):
            raise ValueError("seed must fit in 64 unsigned bits")
        if not (0 <= self.stream_id < 2**64):
            raise ValueError("stream_id must fit in 64 unsigned bits")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, stable_mix(self.stream_id, *ids))


@dataclass(frozen=True)
class PowerLawFit:
    """Least-squares power law y = exp(log_prefactor) * x**exponent."""

    exponent: float
    log_prefactor: float
    r_squared: float

    def predict(self, x) -> np.ndarray:
        return np.exp(self.log_prefactor) * np.asarray(x, dtype=np.float64) ** self.exponent


@lru_cache(maxsize=64)
def above_diagonal_mask(n: int) -> np.ndarray:
    """Read-only boolean mask of the strictly-upper triangle (cached)."""
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    mask.setflags(write=False)
    return mask


def row_softmax(scores: Mat, causal: bool = False) -> Mat:
    """Row-wise softmax of an n-by-n score matrix, stabilized per row.

    With `causal` set, entries above the diagonal are treated as minus
    infinity and come out exactly zero; every row sums to one over the
    allowed positions.
    """
    s = as_matrix(scores, "scores")
    n, m = s.shape
    if n != m:
        raise ValueError(f"scores must be square, got {n}x{m}")
    if causal:
        work = np.where(above_diagonal_mask(n), -np.inf, s)
    else:
        work = s
    row_max = np.max(work, axis=1, keepdims=True)
    e = np.exp(work - row_max)  # exp(-inf) is exactly 0 at masked positions
    out = e / np.sum(e, axis=1, keepdims=True)
    return out


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    Default step h=1e-5 assumes unit-scale parameters; pass a custom step
    for badly scaled problems.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x0 = as_vector(x, "x")
    grad = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"function returned non-finite value near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def fit_power_law(xs, ys) -> PowerLawFit:
    """Fit y = A * x**k by least squares on (log x, log y)."""
    x = as_vector(xs, "xs")
    y = as_vector(ys, "ys")
    if x.size != y.size:
        raise ValueError("xs and ys must have equal length")
    if x.size < 2:
        raise ValueError("need at least 2 points for a power-law fit")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("power-law fit requires strictly positive xs and ys")
    lx = np.log(x)
    ly = np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_res = float(np.dot(resid, resid))
    ss_tot = float(np.dot(ly - ly.mean(), ly - ly.mean()))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res < 1e-24 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    r2 = min(max(r2, 0.0), 1.0)
    return PowerLawFit(exponent=float(slope), log_prefactor=float(intercept), r_squared=r2)


def mean_component_variance(samples: Sequence[np.ndarray]) -> float:
    """Unbiased per-component variance (divisor S-1), averaged over components."""
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to estimate a variance")
    arrs = [np.asarray(s, dtype=np.float64) for s in samples]
    shape = arrs[0].shape
    for k, a in enumerate(arrs):
        if a.shape != shape:
            raise ValueError(f"sample {k} has shape {a.shape}, expected {shape}")
    stacked = np.stack(arrs, axis=0)
    return float(np.mean(np.var(stacked, axis=0, ddof=1)))
