"""Optimal preprocessing functions and phase boundaries.

Everything here is a functional of the channel density moments
mu_k(y) = E_G[G^k p(y|G)]:

    T*_L = mu1/mu0                 optimal linear preprocessor
    rho*_L = (1 + 1/(delta I))^(-1/2),  I = int mu1^2/mu0
    T*_s = 1 - mu0/mu2             optimal spectral preprocessor
    delta* = (int (mu2-mu0)^2/mu0)^(-1)   weak-recovery threshold
    rho*_s = (1+beta)^(-1/2) with h(beta) = int (mu2-mu0)^2/(mu0+mu2/beta)
             solved at 1/delta

Continuous channels integrate over a truncated y-grid with composite
Gauss-Legendre panels (geometrically refined at the endpoints, which covers
integrable endpoint singularities of closed-form noiseless moments);
discrete channels replace the integrals by sums over the output alphabet.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .channels import Channel, channel_moments
from .asymptotics import (AsymptoticsError, Preprocessor, f_theta,
                          optimal_theta, rho_linear, rho_spectral,
                          spectral_fixed_point, cross_correlation_q)

GRID_POINTS = 4096
MASS_QUANTILE = 1e-8


class PreoptError(ValueError):
    """Optimality conditions violated (e.g. mu1 = 0 or delta below
    threshold)."""


@dataclass(frozen=True)
class PreprocOptResult:
    rho_l_star: float
    rho_s_star: float
    beta_delta: float
    gamma_delta: float
    delta_star: float
    winner: str                  # linear | spectral | tie


@dataclass(frozen=True)
class YMoments:
    """Tabulated (mu0, mu1, mu2) with integration weights; for a discrete
    channel the 'weights' are 1 and integration degenerates to a sum."""

    y: np.ndarray
    w: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    discrete: bool
    truncation_error: float

    def integrate(self, values: np.ndarray) -> float:
        return float(np.dot(self.w, values))


def _panelize(lo: float, hi: float, width: float, gl_order: int = 16,
              refine_ends: bool = True):
    """Composite GL nodes on [lo, hi]; the two end panels are refined
    geometrically toward the endpoints."""
    t, wt = leggauss(gl_order)
    edges = list(np.linspace(lo, hi, max(2, int(math.ceil((hi - lo) / width)) + 1)))
    if refine_ends and len(edges) >= 2:
        left = [lo + (edges[1] - lo) * 2.0**(-k) for k in range(45, 0, -1)]
        right = [hi - (hi - edges[-2]) * 2.0**(-k) for k in range(1, 46)]
        edges = [lo] + left + edges[1:-1] + right + [hi]
    xs, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        xs.append(0.5 * (b - a) * t + 0.5 * (b + a))
        ws.append(0.5 * (b - a) * wt)
    return np.concatenate(xs), np.concatenate(ws)


def tabulate_moments(channel: Channel, order: int = 80) -> YMoments:
    """Moments of the channel on an integration grid over the output range."""
    if channel.is_discrete:
        yvals = np.array([v for v, _ in channel.discrete_support])
        mu0, mu1, mu2 = channel_moments(channel, yvals, order)
        return YMoments(y=yvals, w=np.ones_like(yvals), mu0=mu0, mu1=mu1,
                        mu2=mu2, discrete=True, truncation_error=0.0)
    if channel.moments_fn is not None:
        lo, hi = channel.y_support
        y, w = _panelize(lo, hi, width=(hi - lo) / 512.0)
        mu0, mu1, mu2 = channel.moments_fn(y)
    elif channel.noise_std > 0:
        sig = channel.noise_std
        from .quadrature import gauss_hermite, piecewise_normal_nodes
        gq, _ = (piecewise_normal_nodes(channel.g_kinks) if channel.g_kinks
                 else gauss_hermite(order))
        fg = channel.link(gq)
        lo = float(np.min(fg)) - 10.0 * sig
        hi = float(np.max(fg)) + 10.0 * sig
        width = min(max(sig / 2.0, (hi - lo) / 2048.0), (hi - lo) / 64.0)
        y, w = _panelize(lo, hi, width=width, refine_ends=False)
        mu0, mu1, mu2 = channel_moments(channel, y, order)
    else:
        raise PreoptError("sigma=0 continuous channel without closed-form "
                          "moments; cannot tabulate")
    mass = float(np.dot(w, mu0))
    return YMoments(y=y, w=w, mu0=mu0, mu1=mu1, mu2=mu2, discrete=False,
                    truncation_error=abs(1.0 - mass))


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num)
    ok = den > 1e-300
    out[ok] = num[ok] / den[ok]
    return out


def _info_linear(m: YMoments) -> float:
    """int mu1^2 / mu0."""
    return m.integrate(_safe_ratio(m.mu1 * m.mu1, m.mu0))


def _tabulated_preprocessor(m: YMoments, values: np.ndarray,
                            name: str) -> Preprocessor:
    """Monotone-cubic interpolation of (y, values) on the 1e-8 mass
    quantiles, clamped outside; discrete channels map support points."""
    if m.discrete:
        sup = float(np.max(values))
        yv = np.asarray(m.y, dtype=float)
        order = np.argsort(yv)
        ys, vs = yv[order], np.asarray(values)[order]

        def fn(y):
            idx = np.argmin(np.abs(np.atleast_1d(np.asarray(y, dtype=float))[:, None]
                                   - ys[None, :]), axis=1)
            out = vs[idx]
            return out if np.ndim(y) else float(out[0])

        return Preprocessor(fn=fn, sup_support=sup, lipschitz=False,
                            bounded=True, name=name)
    cdf = np.cumsum(m.w * m.mu0)
    cdf /= cdf[-1]
    ilo = int(np.searchsorted(cdf, MASS_QUANTILE))
    ihi = int(np.searchsorted(cdf, 1.0 - MASS_QUANTILE))
    ilo, ihi = max(ilo, 0), min(ihi, m.y.size - 1)
    grid = np.linspace(m.y[ilo], m.y[ihi], GRID_POINTS)
    vals = np.interp(grid, m.y, values)
    interp = PchipInterpolator(grid, vals, extrapolate=False)
    lo_v, hi_v = vals[0], vals[-1]

    def fn(y):
        y_arr = np.atleast_1d(np.asarray(y, dtype=float))
        out = interp(np.clip(y_arr, grid[0], grid[-1]))
        out = np.where(y_arr < grid[0], lo_v, out)
        out = np.where(y_arr > grid[-1], hi_v, out)
        return out if np.ndim(y) else float(out[0])

    return Preprocessor(fn=fn, sup_support=float(np.max(vals)),
                        bounded=bool(np.all(np.isfinite(vals))), name=name)


def optimal_tl(channel: Channel, moments: Optional[YMoments] = None
               ) -> Preprocessor:
    """T*_L(y) = mu1(y)/mu0(y), tabulated and interpolated.  Requires
    0 < int mu1^2/mu0 < inf."""
    m = moments or tabulate_moments(channel)
    info = _info_linear(m)
    if not (info > 1e-12 and math.isfinite(info)):
        raise PreoptError(
            f"optimal linear preprocessor undefined: int mu1^2/mu0 = {info}")
    return _tabulated_preprocessor(m, _safe_ratio(m.mu1, m.mu0), "T*_L")


def rho_l_star(channel: Channel, delta: float,
               moments: Optional[YMoments] = None) -> float:
    """(1 + 1/(delta * int mu1^2/mu0))^(-1/2)."""
    m = moments or tabulate_moments(channel)
    info = _info_linear(m)
    if not (info > 1e-12 and math.isfinite(info)):
        raise PreoptError(f"int mu1^2/mu0 = {info}: condition violated")
    return 1.0 / math.sqrt(1.0 + 1.0 / (delta * info))


def optimal_ts(channel: Channel, moments: Optional[YMoments] = None
               ) -> Preprocessor:
    """T*_s(y) = 1 - mu0(y)/mu2(y).  Requires inf_y mu2/mu0 > 0; whether the
    result carries enough mass near its supremum (assumption-(A3)-style) is
    channel-dependent and not decidable here."""
    m = moments or tabulate_moments(channel)
    sig = m.mu0 > 1e-12 * float(np.max(m.mu0))
    ratio = _safe_ratio(m.mu2[sig], m.mu0[sig])
    if ratio.size == 0 or np.min(ratio) <= 0:
        raise PreoptError(
            "inf mu2/mu0 <= 0 on the output range; bounded approximations "
            "of the optimal spectral preprocessor are out of scope")
    values = np.zeros_like(m.mu0)
    values[sig] = 1.0 - _safe_ratio(m.mu0[sig], m.mu2[sig])
    return _tabulated_preprocessor(m, values, "T*_s")


def _h_of_beta(m: YMoments, beta: float) -> float:
    num = (m.mu2 - m.mu0) ** 2
    return m.integrate(_safe_ratio(num, m.mu0 + m.mu2 / beta))


def delta_star(channel: Channel, moments: Optional[YMoments] = None) -> float:
    """Weak-recovery threshold (int (mu2-mu0)^2/mu0)^(-1); +inf when the
    integral vanishes (no second-Hermite energy)."""
    m = moments or tabulate_moments(channel)
    info = m.integrate(_safe_ratio((m.mu2 - m.mu0) ** 2, m.mu0))
    if not math.isfinite(info):
        raise PreoptError("non-finite threshold integral")
    if info <= 1e-14:
        return math.inf
    return 1.0 / info


def rho_s_star(channel: Channel, delta: float,
               moments: Optional[YMoments] = None) -> Tuple[float, float]:
    """Optimal spectral correlation (1+beta)^(-1/2) where h(beta) = 1/delta;
    h is strictly increasing so bisection on [1e-8, 1e8] suffices."""
    m = moments or tabulate_moments(channel)
    ds = delta_star(channel, m)
    if delta < ds * (1.0 - 1e-12):
        raise PreoptError(f"delta = {delta} below threshold delta* = {ds}")
    target = 1.0 / delta
    lo, hi = 1e-8, 1e8
    if _h_of_beta(m, hi) <= target:
        return 0.0, math.inf          # at threshold: beta -> inf, rho -> 0
    if _h_of_beta(m, lo) >= target:
        raise PreoptError("h(1e-8) >= 1/delta: bracket failed")
    beta = brentq(lambda b: _h_of_beta(m, b) - target, lo, hi,
                  xtol=1e-14, rtol=4 * np.finfo(float).eps)
    return 1.0 / math.sqrt(1.0 + beta), float(beta)


def linear_vs_spectral(channel: Channel, delta: float,
                       moments: Optional[YMoments] = None,
                       tie_tol: float = 1e-10) -> PreprocOptResult:
    """Decision rule: spectral beats linear iff delta * h(gamma_delta) > 1
    with gamma_delta = (delta * int mu1^2/mu0)^(-1)."""
    m = moments or tabulate_moments(channel)
    info = _info_linear(m)
    if not (info > 1e-12 and math.isfinite(info)):
        raise PreoptError("linear side degenerate: int mu1^2/mu0 = 0")
    gamma = 1.0 / (delta * info)
    rl = 1.0 / math.sqrt(1.0 + gamma)
    ds = delta_star(channel, m)
    if delta > ds:
        rs, beta = rho_s_star(channel, delta, m)
    else:
        rs, beta = 0.0, math.inf
    crit = delta * _h_of_beta(m, gamma)
    if abs(crit - 1.0) <= tie_tol:
        winner = "tie"
    else:
        winner = "spectral" if crit > 1.0 else "linear"
    return PreprocOptResult(rho_l_star=rl, rho_s_star=rs, beta_delta=beta,
                            gamma_delta=gamma, delta_star=ds, winner=winner)


def combined_objective(channel: Channel, t_l: Preprocessor,
                       t_s: Preprocessor, delta: float,
                       moments: Optional[YMoments] = None,
                       check_tol: float = 1e-6) -> float:
    """F^2(theta*) evaluated through the mu-integral route, cross-checked
    against the direct expectation route."""
    m = moments or tabulate_moments(channel)
    fp = spectral_fixed_point(channel, t_s, delta)
    if not fp.above_threshold:
        raise PreoptError("combined objective needs an above-threshold "
                          "spectral fixed point")
    tl_y = np.asarray(t_l.fn(m.y), dtype=float)
    ts_y = np.asarray(t_s.fn(m.y), dtype=float)
    a1 = m.integrate(tl_y * m.mu1)                  # E{ZL G}
    a0 = m.integrate(tl_y * tl_y * m.mu0)           # E{ZL^2}
    wtil = ts_y / (fp.lambda_star - ts_y)           # Zs/(lambda*-Zs)
    b2 = m.integrate(wtil * wtil * m.mu2)
    b0 = m.integrate(wtil * wtil * m.mu0)
    s = m.integrate(tl_y * m.mu1 / (1.0 - ts_y / fp.lambda_star)) / a1
    rl2 = 1.0 / (1.0 + a0 / (delta * a1 * a1))
    rs2 = 1.0 / (1.0 + b2 / (1.0 / delta - b0))
    f2 = (rs2 + rl2 - 2.0 * rs2 * rl2 * s) / (1.0 - rs2 * rl2 * s * s)

    # independent route through the (G, noise) expectations
    rho_l, _ = rho_linear(channel, t_l, delta)
    rho_s = rho_spectral(fp)
    q = cross_correlation_q(channel, t_l, t_s, delta, fp)
    _, f_star = optimal_theta(rho_l, rho_s, q)
    if abs(f2 - f_star**2) > check_tol:
        raise PreoptError(
            f"mu-route F^2(theta*) = {f2} disagrees with expectation route "
            f"{f_star**2}")
    return f2


def export_preprocessor_csv(pre: Preprocessor, y_grid: np.ndarray,
                            path: str) -> None:
    """Two-column CSV (y, T(y))."""
    vals = np.asarray(pre.fn(y_grid), dtype=float)
    with open(path, "w") as fh:
        fh.write("y,t\n")
        for yi, ti in zip(y_grid, vals):
            fh.write(f"{yi:.17g},{ti:.17g}\n")
