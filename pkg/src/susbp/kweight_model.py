"""Closed-form sparsity-variance analytics for the k-weight toy model.

A model holds k distinct reduced weights omega_a with multiplicities mu_a
constrained by sum(mu) = sum(mu * omega) = 1. Retention kappa(xi) and
reduced gradient variance Sigma(xi) follow from the acceptance rule
q_a = min(xi * omega_a, 1), and on every smooth piece they obey
d(kappa)/d(xi) = -xi^2 d(Sigma)/d(xi).

Direct summation over the k weights is the primary evaluation path; the
two-weight closed forms are kept as a separately coded special case so the
piecewise algebra can be cross-checked rather than trusted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from susbp.numerics import as_vector

CONSTRAINT_TOL = 1e-12


@dataclass(frozen=True)
class KWeightModel:
    """Reduced weights (ascending) and multiplicities of the toy model."""

    omegas: np.ndarray
    mus: np.ndarray

    def __post_init__(self) -> None:
        om = as_vector(self.omegas, "omegas")
        mu = as_vector(self.mus, "mus")
        if om.size != mu.size or om.size == 0:
            raise ValueError("omegas and mus must be non-empty and equally sized")
        if np.any(om <= 0) or np.any(mu <= 0):
            raise ValueError("omegas and mus must be strictly positive")
        if np.any(np.diff(om) <= 0):
            raise ValueError("omegas must be strictly ascending")
        if abs(float(mu.sum()) - 1.0) > CONSTRAINT_TOL:
            raise ValueError(f"multiplicities must sum to 1, got {mu.sum()!r}")
        if abs(float(mu @ om) - 1.0) > CONSTRAINT_TOL:
            raise ValueError(f"weights must sum to 1, got sum(mu*omega)={mu @ om!r}")
        object.__setattr__(self, "omegas", om)
        object.__setattr__(self, "mus", mu)

    @property
    def k(self) -> int:
        return int(self.omegas.size)

    def kinks(self) -> np.ndarray:
        """Breakpoints 1/omega_a of the piecewise closed forms, ascending."""
        return np.sort(1.0 / self.omegas)


@dataclass(frozen=True)
class TwoWeightParams:
    """Parameters theta of the 2-weight model, omega_pm = exp(+-exp(theta_pm))."""

    theta_minus: float
    theta_plus: float

    @property
    def omega_minus(self) -> float:
        return math.exp(-math.exp(self.theta_minus))

    @property
    def omega_plus(self) -> float:
        return math.exp(math.exp(self.theta_plus))


@dataclass(frozen=True)
class TwoWeightFit:
    """Result of fitting TwoWeightParams to measured (xi, kappa, rho) curves."""

    params: TwoWeightParams
    objective: float
    success: bool
    message: str


def build_two_weight(p: TwoWeightParams) -> KWeightModel:
    """Two-weight model with mu_pm = (1 - omega_mp) / (omega_pm - omega_mp)."""
    om_minus, om_plus = p.omega_minus, p.omega_plus
    span = om_plus - om_minus
    mu_plus = (1.0 - om_minus) / span
    mu_minus = (om_plus - 1.0) / span
    return KWeightModel(
        omegas=np.array([om_minus, om_plus]), mus=np.array([mu_minus, mu_plus])
    )


def _check_xi(xi):
    x = np.asarray(xi, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("xi must be strictly positive")
    return x


def kappa_of_xi(m: KWeightModel, xi):
    """Reduced retention kappa = sum_a mu_a min(xi omega_a, 1)."""
    x = _check_xi(xi)
    q = np.minimum(np.multiply.outer(x, m.omegas), 1.0)
    out = q @ m.mus
    return float(out) if np.isscalar(xi) or np.ndim(xi) == 0 else out


def sigma_of_xi(m: KWeightModel, xi):
    """Reduced variance Sigma = sum_a mu_a omega_a^2 / min(xi omega_a, 1)."""
    x = _check_xi(xi)
    q = np.minimum(np.multiply.outer(x, m.omegas), 1.0)
    out = (m.mus * m.omegas**2 / q).sum(axis=-1) if q.ndim > 1 else float(
        np.sum(m.mus * m.omegas**2 / q)
    )
    return out


def sigma_limit(m: KWeightModel) -> float:
    """Sigma in the xi -> infinity limit (all q = 1): the unmasked variance."""
    return float(np.sum(m.mus * m.omegas**2))


def rho_of_xi(m: KWeightModel, xi):
    """Relative variance increase (Sigma(xi) - Sigma0) / Sigma0."""
    s0 = sigma_limit(m)
    return (sigma_of_xi(m, xi) - s0) / s0


def two_weight_closed(p: TwoWeightParams, xi: float) -> tuple[float, float]:
    """Piecewise closed-form (kappa, Sigma) of the 2-weight model.

    Low range xi <= 1/omega_plus: kappa = xi, Sigma = 1/xi. Middle range:
    kappa = xi (omega_plus - 1) omega_minus / span + (1 - omega_minus)/span,
    Sigma = (1/xi) (omega_plus - 1) omega_minus / span
            + omega_plus^2 (1 - omega_minus) / span.
    High range xi >= 1/omega_minus: kappa = 1, Sigma = Sigma0.
    """
    x = float(_check_xi(xi))
    om, op = p.omega_minus, p.omega_plus
    span = op - om
    if x <= 1.0 / op:
        return x, 1.0 / x
    if x >= 1.0 / om:
        return 1.0, op * (1.0 - om) + om
    a = (op - 1.0) * om / span
    kappa = x * a + (1.0 - om) / span
    sigma = a / x + op**2 * (1.0 - om) / span
    return kappa, sigma


def tradeoff_check(m: KWeightModel, xi: float, h: float = 1e-6) -> float:
    """Residual d(kappa)/d(xi) + xi^2 d(Sigma)/d(xi) by central differences.

    Requires [xi - h, xi + h] to avoid every kink 1/omega_a; the identity
    holds only piecewise.
    """
    x = float(_check_xi(xi))
    if h <= 0:
        raise ValueError("step h must be positive")
    if x - h <= 0:
        raise ValueError("stencil leaves the positive domain")
    kinks = m.kinks()
    if np.any((kinks >= x - h) & (kinks <= x + h)):
        raise ValueError(
            f"kink inside the stencil [{x - h}, {x + h}]; move xi off 1/omega_a"
        )
    dk = (kappa_of_xi(m, x + h) - kappa_of_xi(m, x - h)) / (2.0 * h)
    ds = (sigma_of_xi(m, x + h) - sigma_of_xi(m, x - h)) / (2.0 * h)
    return dk + x * x * ds


def fit_objective(p: TwoWeightParams, xis, kappas, rhos) -> float:
    """Combined relative-error objective for the two-weight fit.

    Linear relative residuals on kappa, log-space residuals on rho (rho
    spans decades). Model rho <= 0 at a point with measured rho > 0 is
    penalized heavily rather than crashing the log.
    """
    x = as_vector(xis, "xis")
    kap = as_vector(kappas, "kappas")
    rho = as_vector(rhos, "rhos")
    m = build_two_weight(p)
    kap_m = np.asarray(kappa_of_xi(m, x))
    rho_m = np.asarray(rho_of_xi(m, x))

    obj = float(np.sum(((kap_m - kap) / np.where(kap != 0, kap, 1.0)) ** 2))
    pos = rho > 0
    good = pos & (rho_m > 0)
    obj += float(np.sum((np.log(rho_m[good]) - np.log(rho[good])) ** 2))
    obj += 1e6 * int(np.count_nonzero(pos & ~good))
    return obj


def fit_two_weight(xis, kappas, rhos) -> TwoWeightFit:
    """Fit theta_pm to measured kappa(xi) and rho(xi) curves.

    Deterministic multi-start: a 21x21 grid over theta in [-2, 3]^2 followed
    by local refinement of the best starts. Degenerate (constant) curves
    yield success=False instead of an exception.
    """
    x = as_vector(xis, "xis")
    kap = as_vector(kappas, "kappas")
    rho = as_vector(rhos, "rhos")
    if not (x.size == kap.size == rho.size):
        raise ValueError("xis, kappas, rhos must have equal length")
    if x.size < 4:
        raise ValueError("need at least 4 data points to fit the two-weight model")
    if np.any(x <= 0):
        raise ValueError("xis must be strictly positive")

    if np.ptp(kap) == 0.0 and np.ptp(rho) == 0.0:
        return TwoWeightFit(
            params=TwoWeightParams(0.0, 0.0),
            objective=float("inf"),
            success=False,
            message="degenerate data: kappa and rho curves are constant",
        )

    grid = np.linspace(-2.0, 3.0, 21)
    starts = sorted(
        ((fit_objective(TwoWeightParams(tm, tp), x, kap, rho), tm, tp)
         for tm in grid for tp in grid),
        key=lambda t: t[0],
    )[:5]

    best_obj = float("inf")
    best = TwoWeightParams(0.0, 0.0)
    for _, tm, tp in starts:
        res = optimize.minimize(
            lambda th: fit_objective(TwoWeightParams(th[0], th[1]), x, kap, rho),
            x0=np.array([tm, tp]),
            method="Nelder-Mead",
            options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000},
        )
        if res.fun < best_obj:
            best_obj = float(res.fun)
            best = TwoWeightParams(float(res.x[0]), float(res.x[1]))
    success = np.isfinite(best_obj) and best_obj < 1e6
    msg = "ok" if success else "no parameter point fits the curves"
    return TwoWeightFit(params=best, objective=best_obj, success=success, message=msg)
