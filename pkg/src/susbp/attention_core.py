"""Exact single-head attention: forward pass and dense analytic backward.

The backward here is the unbiased baseline that the sparse stochastic
estimator is compared against. Logits are tau * Q K^T with an explicit
scale field (tau = 1/sqrt(d) by default, tau = 1 for the unscaled variant),
and the tau factor propagates into the Q and K gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from susbp.numerics import Mat, as_matrix, row_softmax

JACOBIAN_MAX_N = 8
JACOBIAN_MAX_D = 4


@dataclass(frozen=True)
class AttnInput:
    """Single-head attention inputs Q, K, V (each n x d) with logit scale tau."""

    q: Mat
    k: Mat
    v: Mat
    tau: float | None = None
    causal: bool = False

    def __post_init__(self) -> None:
        q = as_matrix(self.q, "Q")
        k = as_matrix(self.k, "K")
        v = as_matrix(self.v, "V")
        if not (q.shape == k.shape == v.shape):
            raise ValueError(
                f"Q, K, V must share shape, got {q.shape}, {k.shape}, {v.shape}"
            )
        tau = self.tau
        if tau is None:
            tau = 1.0 / math.sqrt(q.shape[1])
        if tau <= 0:
            raise ValueError("tau must be positive")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "tau", float(tau))

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def d(self) -> int:
        return self.q.shape[1]


@dataclass(frozen=True)
class AttnForwardState:
    """Forward results: logits S, row-stochastic weights W, outputs Vbar = W V."""

    s: Mat
    w: Mat
    vbar: Mat


@dataclass(frozen=True)
class GradTriple:
    """Loss gradients with respect to Q, K, V."""

    dq: Mat
    dk: Mat
    dv: Mat

    def flat(self) -> np.ndarray:
        return np.concatenate([self.dq.ravel(), self.dk.ravel(), self.dv.ravel()])


@dataclass(frozen=True)
class AttnJacobians:
    """Dense per-element Jacobians of Vbar; index order [i, mu, j, nu].

    Entry [i, mu, j, nu] is d(Vbar[j, nu]) / d(X[i, mu]) for X in {Q, K, V}.
    """

    d_q: np.ndarray
    d_k: np.ndarray
    d_v: np.ndarray


def attn_forward(inp: AttnInput) -> AttnForwardState:
    """S = tau Q K^T (causally masked if set), W = row softmax, Vbar = W V."""
    if inp.n < 1 or inp.d < 1:
        raise ValueError("attention needs n >= 1 and d >= 1")
    s = inp.tau * (inp.q @ inp.k.T)
    w = row_softmax(s, causal=inp.causal)
    vbar = w @ inp.v
    return AttnForwardState(s=s, w=w, vbar=vbar)


def kernel_matrix(state: AttnForwardState, inp: AttnInput, d_vbar: Mat) -> Mat:
    """M[i, j] = W[i, j] * sum_nu (V[j, nu] - Vbar[i, nu]) * d_vbar[i, nu].

    M is the kernel of the Q and K gradients. It is invariant under adding
    one constant row vector to all of V, since that shifts Vbar identically.
    """
    g = as_matrix(d_vbar, "d_vbar")
    if g.shape != inp.v.shape:
        raise ValueError(f"d_vbar shape {g.shape} does not match V shape {inp.v.shape}")
    # sum_nu V[j,nu] g[i,nu] is (g V^T)[i,j]; the Vbar term is a per-row dot.
    return state.w * (g @ inp.v.T - np.sum(g * state.vbar, axis=1, keepdims=True))


def attn_backward_dense(
    state: AttnForwardState, inp: AttnInput, d_vbar: Mat
) -> GradTriple:
    """Analytic gradients given the upstream gradient d_vbar on Vbar.

    dQ = tau M K, dK = tau M^T Q, dV = W^T d_vbar, with M from kernel_matrix.
    """
    g = as_matrix(d_vbar, "d_vbar")
    m = kernel_matrix(state, inp, g)
    dq = inp.tau * (m @ inp.k)
    dk = inp.tau * (m.T @ inp.q)
    dv = state.w.T @ g
    return GradTriple(dq=dq, dk=dk, dv=dv)


def attn_jacobians(state: AttnForwardState, inp: AttnInput) -> AttnJacobians:
    """Full dense Jacobians of Vbar w.r.t. Q, K, V (small sizes only).

    d_q[i, mu, j, nu] = delta_ij tau sum_k W[j,k] (V[k,nu] - Vbar[j,nu]) K[k,mu]
    d_k[i, mu, j, nu] = tau W[j,i] (V[i,nu] - Vbar[j,nu]) Q[j,mu]
    d_v[i, mu, j, nu] = W[j,i] delta_mu_nu
    """
    n, d = inp.n, inp.d
    if n > JACOBIAN_MAX_N or d > JACOBIAN_MAX_D:
        raise ValueError(
            f"dense Jacobians limited to n <= {JACOBIAN_MAX_N}, d <= {JACOBIAN_MAX_D}; "
            f"got n={n}, d={d}"
        )
    w, vbar, v = state.w, state.vbar, inp.v
    tau = inp.tau

    d_q = np.zeros((n, d, n, d))
    d_k = np.zeros((n, d, n, d))
    d_v = np.zeros((n, d, n, d))
    for j in range(n):
        # centered values for row j: V[k, nu] - Vbar[j, nu]
        centered = v - vbar[j]
        # d_q: only i == j survives the delta
        d_q[j, :, j, :] = tau * np.einsum("k,kn,km->mn", w[j], centered, inp.k)
        for i in range(n):
            d_k[i, :, j, :] = tau * w[j, i] * np.outer(inp.q[j], centered[i])
            d_v[i, :, j, :] = w[j, i] * np.eye(d)
    return AttnJacobians(d_q=d_q, d_k=d_k, d_v=d_v)


def contract_jacobians(jac: AttnJacobians, d_vbar: Mat) -> GradTriple:
    """Chain d_vbar through the dense Jacobians; must match the analytic backward."""
    g = as_matrix(d_vbar, "d_vbar")
    dq = np.einsum("imjn,jn->im", jac.d_q, g)
    dk = np.einsum("imjn,jn->im", jac.d_k, g)
    dv = np.einsum("imjn,jn->im", jac.d_v, g)
    return GradTriple(dq=dq, dk=dk, dv=dv)
