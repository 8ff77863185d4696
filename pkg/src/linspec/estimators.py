"""Finite-dimensional estimators.

The linear estimator is xhat_L = (sqrt(d)/n) A^T T_L(y).  The spectral
estimator is the principal eigenvector of D_n = A^T diag(T_s(y)) A, computed
matrix-free by shifted power iteration.  Combination is either the linear
rule theta * xbar_L + xhat_s or the componentwise Bayes-optimal denoiser of
the rescaled coordinates predicted by the high-dimensional limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .channels import Instance, SignalPrior
from .asymptotics import Preprocessor


class PowerIterationError(RuntimeError):
    """Power iteration did not reach the requested residual."""

    def __init__(self, message: str, report: "SpectralSolveReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class SpectralSolveReport:
    eigvec: np.ndarray
    eigval1: float
    eigval2: Optional[float]
    iterations: int
    residual: float


def linear_estimate(instance: Instance, t_l: Preprocessor) -> np.ndarray:
    """xhat_L = (sqrt(d)/n) * A^T T_L(y), exactly as written."""
    z = np.asarray(t_l.fn(instance.y), dtype=float)
    return (math.sqrt(instance.d) / instance.n) * (instance.A.T @ z)


def spectral_estimate(instance: Instance, t_s: Preprocessor,
                      tol: float = 1e-10, max_iter: int = 5000,
                      compute_second: bool = True,
                      restarts: int = 3) -> SpectralSolveReport:
    """Principal eigenpair of D_n = A^T diag(T_s(y)) A by power iteration.

    The operator is applied matrix-free as v -> A^T (z * (A v)) with a
    nonnegative shift s = max(0, -min_i T_s(y_i)) so the top eigenvalue of
    D_n + s*I dominates in modulus.  The start vector is seeded from the
    instance so runs are reproducible.  Raises PowerIterationError rather
    than returning an unconverged vector.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    A = instance.A
    z = np.asarray(t_s.fn(instance.y), dtype=float)
    shift = max(0.0, -float(np.min(z)))

    def apply(v: np.ndarray) -> np.ndarray:
        return A.T @ (z * (A @ v)) + shift * v

    d = instance.d
    last_residual = math.inf
    iters_done = 0
    lam = 0.0
    v = np.zeros(d)
    for attempt in range(restarts):
        rng = np.random.default_rng((instance.seed, 0x5EC7, attempt))
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        for it in range(1, max_iter + 1):
            w = apply(v)
            lam = float(v @ w)            # Rayleigh quotient of D_n + s*I
            resid = float(np.linalg.norm(w - lam * v))
            last_residual = resid
            if resid <= tol * max(1.0, abs(lam)):
                eig2 = (_deflated_eigenvalue(apply, v, d, instance.seed,
                                             tol, max_iter) - shift
                        if compute_second else None)
                return SpectralSolveReport(
                    eigvec=v, eigval1=lam - shift, eigval2=eig2,
                    iterations=iters_done + it, residual=resid)
            nw = np.linalg.norm(w)
            if nw == 0.0 or not np.isfinite(nw):
                break
            v = w / nw
        iters_done += max_iter
    report = SpectralSolveReport(eigvec=v, eigval1=lam - shift, eigval2=None,
                                 iterations=iters_done, residual=last_residual)
    raise PowerIterationError(
        f"power iteration did not converge after {iters_done} iterations "
        f"({restarts} starts); last residual {last_residual:.3e}", report)


def _deflated_eigenvalue(apply: Callable, v1: np.ndarray, d: int, seed: int,
                         tol: float, max_iter: int) -> float:
    """Second eigenvalue by one power pass on the complement of v1."""
    rng = np.random.default_rng((seed, 0xDEF1))
    v = rng.standard_normal(d)
    v -= (v @ v1) * v1
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = apply(v)
        w -= (w @ v1) * v1
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        lam = float(v @ w)
        resid = float(np.linalg.norm(w - lam * v))
        v = w / nw
        # diagnostics only: a looser residual is fine here
        if resid <= max(tol, 1e-8) * max(1.0, abs(lam)):
            break
    return lam


def resolve_sign(x_l_hat: np.ndarray, x_s_hat: np.ndarray,
                 q_predicted: float) -> np.ndarray:
    """Flip xhat_s if needed so sign(<xhat_L, xhat_s>) matches sign(q)."""
    if np.linalg.norm(x_s_hat) == 0.0:
        raise ValueError("zero spectral estimate")
    if q_predicted == 0.0:
        return x_s_hat
    dot = float(x_l_hat @ x_s_hat)
    if dot * q_predicted < 0:
        return -x_s_hat
    return x_s_hat


def combine_linear(x_l_hat: np.ndarray, x_s_hat: np.ndarray,
                   theta: float) -> np.ndarray:
    """theta * (xhat_L / ||xhat_L||) + xhat_s, with theta = +-inf giving
    +-xbar_L."""
    if math.isinf(theta):
        nl = np.linalg.norm(x_l_hat)
        if nl == 0.0:
            raise ValueError("zero linear estimate with theta = +-inf")
        return math.copysign(1.0, theta) * x_l_hat / nl
    if theta == 0.0:
        return x_s_hat.copy()
    nl = np.linalg.norm(x_l_hat)
    if nl == 0.0:
        raise ValueError("zero linear estimate with finite nonzero theta")
    return theta * (x_l_hat / nl) + x_s_hat


def bayes_scalar_combiner(prior: SignalPrior, rho_l: float, rho_s: float,
                          q: float) -> Callable:
    """Componentwise posterior mean F*(x_L, x_s) = E[X | X_L, X_s] under the
    limiting model X_L = rho_L X + W_L, X_s = rho_s X + W_s.

    Gaussian prior: the linear MMSE rule with coefficients proportional to
    (rho_L - q rho_s, rho_s - q rho_L)/(1 - q^2).  Binary prior: the
    density-ratio rule, which reduces to tanh of a linear statistic plus the
    prior log-odds.  A vanishing rho drops that coordinate; a singular noise
    covariance falls back to the single most informative coordinate.
    """
    use_l, use_s = abs(rho_l) > 0, rho_s > 0
    if use_l and use_s:
        cov = np.array([[1.0 - rho_l**2, q - rho_l * rho_s],
                        [q - rho_l * rho_s, 1.0 - rho_s**2]])
        if np.linalg.eigvalsh(cov)[0] <= 1e-10:
            # degenerate |q| ~ 1: the two observations are redundant
            if abs(rho_l) >= rho_s:
                use_s = False
            else:
                use_l = False
    if prior.kind == "gaussian_sphere":
        if use_l and use_s:
            c = 1.0 / (1.0 - q * q)
            al = c * (rho_l - q * rho_s)
            as_ = c * (rho_s - q * rho_l)
            return lambda xl, xs: al * np.asarray(xl) + as_ * np.asarray(xs)
        if use_l:
            return lambda xl, xs: rho_l * np.asarray(xl)
        if use_s:
            return lambda xl, xs: rho_s * np.asarray(xs)
        return lambda xl, xs: np.zeros_like(np.asarray(xl, dtype=float))

    log_odds = 0.5 * math.log(prior.p / (1.0 - prior.p))
    if use_l and use_s:
        sinv = np.linalg.inv(cov)
        cl = sinv[0, 0] * rho_l + sinv[0, 1] * rho_s
        cs = sinv[1, 0] * rho_l + sinv[1, 1] * rho_s
        return lambda xl, xs: np.tanh(
            cl * np.asarray(xl) + cs * np.asarray(xs) + log_odds)
    if use_l:
        c = rho_l / (1.0 - rho_l**2)
        return lambda xl, xs: np.tanh(c * np.asarray(xl) + log_odds)
    if use_s:
        c = rho_s / (1.0 - rho_s**2)
        return lambda xl, xs: np.tanh(c * np.asarray(xs) + log_odds)
    return lambda xl, xs: np.full_like(np.asarray(xl, dtype=float),
                                       math.tanh(log_odds))


def combine_bayes(x_l_scaled: np.ndarray, x_s_scaled: np.ndarray,
                  prior: SignalPrior,
                  params: Tuple[float, float, float]) -> np.ndarray:
    """Apply F* componentwise.  Inputs are the rescaled coordinates
    x^L = sqrt(d) xhat_L / n_L and x^s = sqrt(d) xhat_s (sign-resolved)."""
    rho_l, rho_s, q = params
    fstar = bayes_scalar_combiner(prior, rho_l, rho_s, q)
    return fstar(np.asarray(x_l_scaled, dtype=float),
                 np.asarray(x_s_scaled, dtype=float))


def normalized_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """|<a, b>| / (||a|| ||b||)."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("normalized correlation of a zero vector")
    return abs(float(a @ b)) / (na * nb)
