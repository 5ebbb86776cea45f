"""Sparse unbiased stochastic backward pass through attention.

Each attention weight is independently kept with probability
q_ij = min(c * W_ij, 1) and upweighted to W_ij / q_ij = max(W_ij, 1/c), so
the gradient estimator built on the surviving entries is unbiased while
touching only O(n c) weights instead of O(n^2). Forward quantities are
never altered; only the backward contraction goes sparse.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from susbp.attention_core import AttnInput, GradTriple
from susbp.numerics import Mat, RngStream, above_diagonal_mask, as_matrix

ENUMERATION_ENTRY_LIMIT = 20

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class MaskedWeights:
    """CSR view of the stochastized, upweighted attention weights.

    Per row the column indices are strictly increasing (and never exceed the
    row index when causal). Every stored value equals max(W_ij, 1/c): kept
    sub-threshold entries are upweighted to exactly 1/c, entries with
    q_ij = 1 store W_ij itself.
    """

    n: int
    c: float
    causal: bool
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.values[lo:hi]


@dataclass(frozen=True)
class RetentionStats:
    """Retained-entry accounting for one sampled mask."""

    nnz: int
    mean_retained_per_row: float
    kappa: float
    xi: float


def _allowed_mask(n: int, causal: bool) -> np.ndarray:
    if causal:
        return ~above_diagonal_mask(n)
    return np.ones((n, n), dtype=bool)


def _validate_weights(w: Mat, causal: bool) -> np.ndarray:
    w = as_matrix(w, "W")
    n, m = w.shape
    if n != m:
        raise ValueError(f"W must be square, got {n}x{m}")
    if np.any(w < 0):
        raise ValueError("W has negative entries")
    if causal and n > 1 and np.any(w[above_diagonal_mask(n)] != 0.0):
        raise ValueError("causal W must be exactly zero above the diagonal")
    row_sums = np.sum(w, axis=1)  # above-diagonal already proven zero when causal
    dev = np.max(np.abs(row_sums - 1.0))
    if dev > ROW_SUM_TOL:
        raise ValueError(
            f"W rows must sum to 1 over allowed positions (max deviation {dev:.3e})"
        )
    return w


def sample_mask(w: Mat, c: float, causal: bool, rng: RngStream) -> MaskedWeights:
    """Sample the retained-entry structure of W with acceptance min(c W, 1).

    One uniform per entry, retained iff u_ij < c * W_ij; the draw grid does
    not depend on c, so retention is monotone in c under a fixed stream.
    Expected retained count per row is at most c.
    """
    if c <= 0:
        raise ValueError("retention parameter c must be positive")
    w = _validate_weights(w, causal)
    n = w.shape[0]
    u = rng.generator().random((n, n))
    retain = _allowed_mask(n, causal) & (u < c * w) & (w > 0.0)
    rows, cols = np.nonzero(retain)
    counts = np.bincount(rows, minlength=n)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    values = np.maximum(w[rows, cols], 1.0 / c)
    return MaskedWeights(
        n=n,
        c=float(c),
        causal=causal,
        indptr=indptr,
        indices=cols.astype(np.int64),
        values=values,
    )


def retention_stats(mask: MaskedWeights) -> RetentionStats:
    per_row = mask.nnz / mask.n
    return RetentionStats(
        nnz=mask.nnz,
        mean_retained_per_row=per_row,
        kappa=per_row / mask.n,
        xi=mask.c / mask.n,
    )


def _scatter_sum(index: np.ndarray, contrib: np.ndarray, n: int) -> np.ndarray:
    """Scatter-add of (nnz, d) contributions into an (n, d) array.

    bincount accumulates sequentially in entry order, so the result is
    bitwise identical to a one-entry-at-a-time scatter and independent of
    any parallel schedule.
    """
    d = contrib.shape[1]
    flat_idx = (index[:, None] * d + np.arange(d)[None, :]).ravel()
    return np.bincount(flat_idx, weights=contrib.ravel(), minlength=n * d).reshape(n, d)


def attn_backward_sparse(
    mask: MaskedWeights, inp: AttnInput, vbar: Mat, d_vbar: Mat
) -> GradTriple:
    """Gradients of the dense backward's form evaluated only at retained entries.

    For each kept (i, j): m_ij = Wtilde_ij * sum_nu (V[j] - Vbar[i]) g[i];
    dQ[i] += tau m_ij K[j], dK[j] += tau m_ij Q[i], dV[j] += Wtilde_ij g[i].
    Work and scratch are Theta(nnz * d) and Theta(nnz).
    """
    if mask.n != inp.n:
        raise ValueError(f"mask is for n={mask.n}, input has n={inp.n}")
    vb = as_matrix(vbar, "vbar")
    g = as_matrix(d_vbar, "d_vbar")
    if vb.shape != inp.v.shape or g.shape != inp.v.shape:
        raise ValueError("vbar and d_vbar must match the V shape")

    n, d = inp.n, inp.d
    counts = np.diff(mask.indptr)
    rows = np.repeat(np.arange(n), counts)
    cols = mask.indices
    vals = mask.values

    row_dot = np.sum(g * vb, axis=1)
    g_rows = np.repeat(g, counts, axis=0)
    m_vals = vals * (
        np.einsum("ed,ed->e", np.take(inp.v, cols, axis=0), g_rows)
        - np.repeat(row_dot, counts)
    )
    tm = (inp.tau * m_vals)[:, None]

    dq = _scatter_sum(rows, tm * np.take(inp.k, cols, axis=0), n)
    dk = _scatter_sum(cols, tm * np.repeat(inp.q, counts, axis=0), n)
    dv = _scatter_sum(cols, vals[:, None] * g_rows, n)
    return GradTriple(dq=dq, dk=dk, dv=dv)


def backward_cost(mask: MaskedWeights, d: int) -> int:
    """Multiply-accumulate count of attn_backward_sparse.

    Per retained entry: d MACs for the value dot, 2 for forming m_ij, and
    3d for the dQ/dK/dV updates; plus n*d for streaming the per-row
    vbar-gradient dots. This is the implementation's own cost model.
    """
    return mask.n * d + mask.nnz * (4 * d + 2)


def dense_cost(n: int, d: int, causal: bool) -> int:
    """Same accounting applied to the dense backward over all allowed entries."""
    allowed = n * (n + 1) // 2 if causal else n * n
    return n * d + allowed * (4 * d + 2)


def _mask_from_entries(
    n: int, c: float, causal: bool, rows: np.ndarray, cols: np.ndarray, values: np.ndarray
) -> MaskedWeights:
    order = np.lexsort((cols, rows))
    rows, cols, values = rows[order], cols[order], values[order]
    counts = np.bincount(rows, minlength=n)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return MaskedWeights(
        n=n, c=float(c), causal=causal,
        indptr=indptr, indices=cols.astype(np.int64), values=np.asarray(values, float),
    )


def expected_sparse_grad(
    w: Mat, inp: AttnInput, vbar: Mat, d_vbar: Mat, c: float, causal: bool
) -> GradTriple:
    """Exact expectation of the sparse gradient over all mask configurations.

    Enumerates every subset of the stochastic entries (those with q < 1)
    weighted by its probability; entries with q = 1 are always present.
    Only feasible for a handful of stochastic entries.
    """
    if c <= 0:
        raise ValueError("retention parameter c must be positive")
    w = _validate_weights(w, causal)
    n = w.shape[0]
    allowed = _allowed_mask(n, causal) & (w > 0.0)
    q = np.minimum(c * w, 1.0)

    det_rows, det_cols = np.nonzero(allowed & (q >= 1.0))
    sto_rows, sto_cols = np.nonzero(allowed & (q < 1.0))
    if sto_rows.size > ENUMERATION_ENTRY_LIMIT:
        raise ValueError(
            f"{sto_rows.size} stochastic entries exceed the enumeration limit "
            f"of {ENUMERATION_ENTRY_LIMIT}"
        )

    exp_dq = np.zeros_like(inp.q)
    exp_dk = np.zeros_like(inp.k)
    exp_dv = np.zeros_like(inp.v)
    for keep in itertools.product((True, False), repeat=sto_rows.size):
        keep = np.array(keep, dtype=bool)
        prob = 1.0
        for qe, kept in zip(q[sto_rows, sto_cols], keep):
            prob *= qe if kept else (1.0 - qe)
        rows = np.concatenate([det_rows, sto_rows[keep]])
        cols = np.concatenate([det_cols, sto_cols[keep]])
        values = np.maximum(w[rows, cols], 1.0 / c)
        mask = _mask_from_entries(n, c, causal, rows, cols, values)
        grads = attn_backward_sparse(mask, inp, vbar, d_vbar)
        exp_dq += prob * grads.dq
        exp_dk += prob * grads.dk
        exp_dv += prob * grads.dv
    return GradTriple(dq=exp_dq, dk=exp_dk, dv=exp_dv)
