"""High-dimensional predictions: linear and spectral correlations, the
spectral outlier fixed point, cross-correlation q, the optimal combination
coefficient, eigenvalue limits and the Bayes-optimal correlation.

All scalar expectations run through the quadrature engine.  The spectral
fixed point solves zeta(lambda) = phi(lambda) on (tau, inf) where

    phi(lambda)  = lambda * E{Zs G^2 / (lambda - Zs)}          (decreasing)
    psi(lambda)  = lambda * (1/delta + E{Zs / (lambda - Zs)})  (convex)
    zeta(lambda) = psi(max(lambda, bar_lambda))

with bar_lambda the minimizer of psi.  Derivatives are analytic:
psi'(lambda) = 1/delta - E{(Zs/(lambda-Zs))^2} and
phi'(lambda) = -E{Zs^2 G^2/(lambda-Zs)^2}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.optimize import brentq

from .channels import Channel, SignalPrior
from .quadrature import DEFAULT_ORDER, glm_nodes

SINGULAR_GAP = 1e-12   # reject quadrature nodes with lambda - Zs below this


class AsymptoticsError(ValueError):
    """Degenerate preprocessor or unsolvable fixed point."""


@dataclass(frozen=True)
class Preprocessor:
    """Scalar preprocessing map T applied to measurements.

    `sup_support` is the supremum of T(Y)'s support (tau); it must be finite
    and positive for spectral use.  `kinks` lists y-values where T is
    non-smooth so the quadrature can split there.
    """

    fn: Callable
    sup_support: float = math.inf
    lipschitz: bool = True
    bounded: bool = False
    kinks: Tuple[float, ...] = ()
    name: str = ""

    def __call__(self, y):
        return self.fn(y)


def identity_preprocessor() -> Preprocessor:
    return Preprocessor(fn=lambda y: y, sup_support=math.inf, name="identity")


def clip_preprocessor(level: float, scale: float = 1.0) -> Preprocessor:
    """T(y) = scale * min(y, level); point mass at the clip level gives the
    mass-at-tau behaviour the spectral analysis wants."""
    return Preprocessor(
        fn=lambda y: scale * np.minimum(y, level),
        sup_support=scale * level, kinks=(level,),
        name=f"clip({level})" + (f"*{scale}" if scale != 1.0 else ""),
    )


def square_preprocessor() -> Preprocessor:
    return Preprocessor(fn=lambda y: np.asarray(y) ** 2, name="square")


def tanh_preprocessor() -> Preprocessor:
    return Preprocessor(fn=np.tanh, sup_support=1.0, bounded=True, name="tanh")


def saturate_preprocessor() -> Preprocessor:
    """T(y) = y / (1 + |y|), bounded in (-1, 1)."""
    return Preprocessor(fn=lambda y: y / (1.0 + np.abs(y)),
                        sup_support=1.0, bounded=True, kinks=(0.0,),
                        name="saturate")


@dataclass(frozen=True)
class SpectralFixedPoint:
    tau: float
    bar_lambda: float
    lambda_star: float
    psi_prime_at_star: float
    phi_prime_at_star: float
    above_threshold: bool
    zeta_at_star: float
    zeta_at_bar: float
    delta: float
    residual: float = 0.0       # zeta(lambda*) - phi(lambda*)


@dataclass(frozen=True)
class AsymptoticPrediction:
    """The full tuple of high-dimensional limits for one configuration."""

    delta: float
    rho_l: float
    n_l: float
    rho_s: float
    q: float
    theta_star: float            # may be +-inf
    f_theta_star: float
    lambda1_dn: float
    lambda2_dn: float
    lambda_star: float
    bar_lambda: float
    above_threshold: bool
    rho_max: float
    p_ratio: float
    rho_star_bayes: Optional[float] = None
    rho_star_bayes_stderr: Optional[float] = None

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if v is None:
                continue
            out[k] = bool(v) if isinstance(v, (bool, np.bool_)) else float(v)
        return out


class _Moments:
    """Vectorized expectations of shape E{h(ZL, Zs, G)} on cached nodes."""

    def __init__(self, channel: Channel, t_l: Optional[Preprocessor],
                 t_s: Optional[Preprocessor], order: int = DEFAULT_ORDER):
        kinks = tuple(sorted(set(
            (t_l.kinks if t_l else ()) + (t_s.kinks if t_s else ()))))
        self.g, self.y, self.w = glm_nodes(channel, order, kinks)
        self.zl = np.asarray(t_l.fn(self.y), dtype=float) if t_l else None
        self.zs = np.asarray(t_s.fn(self.y), dtype=float) if t_s else None
        self.g2 = self.g * self.g

    def mean(self, values) -> float:
        return float(np.dot(self.w, values))


def _golden_min(f: Callable, lo: float, hi: float, tol: float = 1e-12) -> float:
    """Golden-section minimum of a unimodal f on [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol * max(1.0, abs(a) + abs(b)):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def rho_linear(channel: Channel, t_l: Preprocessor, delta: float,
               order: int = DEFAULT_ORDER) -> Tuple[float, float]:
    """Limiting normalized correlation and norm of the linear estimator:
    rho_L = E{G ZL} / n_L with n_L = sqrt(E{G ZL}^2 + E{ZL^2}/delta)."""
    m = _Moments(channel, t_l, None, order)
    a = m.mean(m.g * m.zl)
    b = m.mean(m.zl * m.zl)
    if not np.isfinite(a) or not np.isfinite(b):
        raise AsymptoticsError("non-finite linear moments")
    if b <= 0:
        raise AsymptoticsError("degenerate preprocessor: E{ZL^2} = 0")
    n_l = math.sqrt(a * a + b / delta)
    return a / n_l, n_l


class _SpectralCurves:
    """psi/phi and their analytic derivatives on a fixed node set."""

    def __init__(self, channel: Channel, t_s: Preprocessor, delta: float,
                 order: int = DEFAULT_ORDER):
        m = _Moments(channel, None, t_s, order)
        self.w, self.zs, self.g2 = m.w, m.zs, m.g2
        self.delta = delta
        self.tau = float(t_s.sup_support)

    def _gap(self, lam: float) -> np.ndarray:
        gap = lam - self.zs
        if np.min(gap) < SINGULAR_GAP:
            raise AsymptoticsError(
                f"quadrature node with lambda - Zs < {SINGULAR_GAP} at "
                f"lambda={lam}; preprocessor mass too close to tau")
        return gap

    def psi(self, lam: float) -> float:
        r = self.zs / self._gap(lam)
        return lam * (1.0 / self.delta + float(np.dot(self.w, r)))

    def phi(self, lam: float) -> float:
        r = self.zs * self.g2 / self._gap(lam)
        return lam * float(np.dot(self.w, r))

    def psi_prime(self, lam: float) -> float:
        r = (self.zs / self._gap(lam)) ** 2
        return 1.0 / self.delta - float(np.dot(self.w, r))

    def phi_prime(self, lam: float) -> float:
        gap = self._gap(lam)
        r = (self.zs / gap) ** 2 * self.g2
        return -float(np.dot(self.w, r))


def spectral_fixed_point(channel: Channel, t_s: Preprocessor, delta: float,
                         order: int = DEFAULT_ORDER) -> SpectralFixedPoint:
    """Solve for bar_lambda (minimizer of psi) and lambda_star (the unique
    solution of zeta = phi) on (tau, inf)."""
    tau = float(t_s.sup_support)
    if not math.isfinite(tau):
        raise AsymptoticsError("spectral preprocessor needs finite sup_support")
    if tau <= 0:
        raise AsymptoticsError(
            "sup of T_s(Y) support must be positive (mass near tau)")
    curves = _SpectralCurves(channel, t_s, delta, order)
    m = _Moments(channel, None, t_s, order)
    if m.mean((np.abs(m.zs) > 0).astype(float)) < 1e-12:
        raise AsymptoticsError("P(Zs = 0) = 1: assumption (A1) violated")

    eps = 1e-9 * max(1.0, abs(tau))
    lo = tau + eps
    # bracket the minimum of convex psi, then golden-section
    hi = tau + max(1.0, tau)
    while curves.psi_prime(hi) < 0:
        hi = tau + 2.0 * (hi - tau)
        if hi > tau * 1e6 + 1e6:
            raise AsymptoticsError("could not bracket the minimum of psi")
    if curves.psi_prime(lo) >= 0:
        bar_lambda = lo    # no interior minimum: (A3)-style mass is missing
    else:
        bar_lambda = _golden_min(curves.psi, lo, hi)

    def crossing(lam: float) -> float:
        return curves.psi(max(lam, bar_lambda)) - curves.phi(lam)

    hi = max(2.0 * tau, 2.0 * bar_lambda)
    cap = max(tau * 1e6, 1e6)
    while crossing(hi) < 0:
        hi *= 2.0
        if hi > cap:
            raise AsymptoticsError(
                f"no sign change of zeta - phi in (tau, {cap:g}]")
    if crossing(lo) >= 0:
        raise AsymptoticsError(
            "zeta - phi has no sign change near tau; check (A1)/(A3)")
    lambda_star = brentq(crossing, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps)

    psi_p = curves.psi_prime(lambda_star)
    phi_p = curves.phi_prime(lambda_star)
    zeta_star = curves.psi(max(lambda_star, bar_lambda))
    return SpectralFixedPoint(
        tau=tau, bar_lambda=bar_lambda, lambda_star=float(lambda_star),
        psi_prime_at_star=psi_p, phi_prime_at_star=phi_p,
        above_threshold=psi_p > 0,
        zeta_at_star=zeta_star, zeta_at_bar=curves.psi(bar_lambda),
        delta=delta,
        residual=zeta_star - curves.phi(lambda_star),
    )


def rho_spectral(fp: SpectralFixedPoint) -> float:
    """Limiting overlap of the spectral estimator: 0 below threshold, else
    sqrt(psi' / (psi' - phi')) at lambda_star."""
    if fp.psi_prime_at_star <= 0:
        return 0.0
    return math.sqrt(fp.psi_prime_at_star
                     / (fp.psi_prime_at_star - fp.phi_prime_at_star))


def cross_correlation_q(channel: Channel, t_l: Preprocessor,
                        t_s: Preprocessor, delta: float,
                        fp: SpectralFixedPoint,
                        order: int = DEFAULT_ORDER) -> float:
    """Limiting cross-correlation q between the normalized linear and
    spectral estimators.  Evaluates the defining expectation form and the
    compact rho_L*rho_s form and asserts they agree."""
    if not fp.above_threshold:
        raise AsymptoticsError("q requires an above-threshold fixed point")
    m = _Moments(channel, t_l, t_s, order)
    e_zl_g = m.mean(m.zl * m.g)
    if abs(e_zl_g) < 1e-14:
        raise AsymptoticsError("E{ZL G} = 0: linear estimator uninformative")
    e_cross = m.mean(m.zl * m.g / (1.0 - m.zs / fp.lambda_star))
    rho_s = rho_spectral(fp)
    rho_l, n_l = rho_linear(channel, t_l, delta, order)
    q_def = rho_s * e_cross / n_l
    q_compact = rho_l * rho_s * e_cross / e_zl_g
    if abs(q_def - q_compact) > 1e-8:
        raise AsymptoticsError(
            f"q forms disagree: {q_def} vs {q_compact}")
    return q_def


def f_theta(rho_l: float, rho_s: float, q: float, theta: float) -> float:
    """Limiting correlation of the combination theta*xbar_L + xhat_s."""
    if math.isinf(theta):
        return math.copysign(rho_l, theta) if theta > 0 else -rho_l
    denom = 1.0 + theta * theta + 2.0 * theta * q
    if denom <= 0:
        raise AsymptoticsError(f"degenerate norm: 1+theta^2+2*theta*q = {denom}")
    return (theta * rho_l + rho_s) / math.sqrt(denom)


def optimal_theta(rho_l: float, rho_s: float,
                  q: float) -> Tuple[float, float]:
    """Maximizer of |F(theta)| and its value.

    theta* = (rho_L - rho_s q)/(rho_s - rho_L q); a vanishing denominator
    gives theta* = sign(rho_L - rho_s q) * inf with F = |rho_L|.
    """
    if abs(q) >= 1.0:
        raise AsymptoticsError(f"|q| must be < 1, got {q}")
    num = rho_l - rho_s * q
    den = rho_s - rho_l * q
    f_star = math.sqrt(max(
        (rho_l**2 + rho_s**2 - 2.0 * q * rho_l * rho_s) / (1.0 - q * q), 0.0))
    if abs(den) < 1e-12:
        return math.copysign(math.inf, num), abs(rho_l)
    return num / den, f_star


def predicted_eigenvalues(fp: SpectralFixedPoint,
                          delta: float) -> Tuple[float, float]:
    """Almost-sure limits of the top two eigenvalues of D_n:
    (delta * zeta(lambda_star), delta * zeta(bar_lambda))."""
    return delta * fp.zeta_at_star, delta * fp.zeta_at_bar


def rho_star_bayes(prior: SignalPrior, rho_l: float, rho_s: float, q: float,
                   samples: int = 1_000_000, seed: int = 0,
                   chunk: int = 250_000) -> Tuple[float, float]:
    """Monte Carlo estimate of the Bayes-optimal correlation
    rho* = |E{X F*(X_L, X_s)}| / sqrt(E{F*^2}) under the limiting joint law,
    together with its standard error.

    Samples are drawn in fixed-size chunks with per-chunk derived seeds, so
    the estimate is deterministic and partitionable across workers.
    """
    from .estimators import bayes_scalar_combiner
    from .harness import mix_seed

    cov = np.array([[1.0 - rho_l**2, q - rho_l * rho_s],
                    [q - rho_l * rho_s, 1.0 - rho_s**2]])
    evals = np.linalg.eigvalsh(cov)
    if evals[0] < -1e-10:
        raise AsymptoticsError(
            f"noise covariance not PSD (eigenvalues {evals}); "
            "inconsistent (rho_l, rho_s, q)")
    fstar = bayes_scalar_combiner(prior, rho_l, rho_s, q)
    chol = np.linalg.cholesky(cov + 1e-15 * np.eye(2))

    sum_xf = 0.0
    sum_f2 = 0.0
    sum_xf2 = 0.0
    total = 0
    i = 0
    while total < samples:
        m = min(chunk, samples - total)
        rng = np.random.default_rng(mix_seed(seed, 0x9E3779B9, i))
        x = prior.sample(m, rng) if prior.kind == "binary" else \
            rng.standard_normal(m)
        wn = rng.standard_normal((m, 2)) @ chol.T
        f = fstar(rho_l * x + wn[:, 0], rho_s * x + wn[:, 1])
        sum_xf += float(np.sum(x * f))
        sum_f2 += float(np.sum(f * f))
        sum_xf2 += float(np.sum((x * f) ** 2))
        total += m
        i += 1
    e_f2 = sum_f2 / total
    if e_f2 < 1e-24:
        return 0.0, 0.0
    e_xf = sum_xf / total
    var_xf = max(sum_xf2 / total - e_xf**2, 0.0)
    rho = abs(e_xf) / math.sqrt(e_f2)
    stderr = math.sqrt(var_xf / total) / math.sqrt(e_f2)
    return rho, stderr


def predict(channel: Channel, t_l: Preprocessor, t_s: Preprocessor,
            delta: float, prior: Optional[SignalPrior] = None,
            bayes_samples: int = 1_000_000, seed: int = 0,
            order: int = DEFAULT_ORDER) -> AsymptoticPrediction:
    """Assemble the full asymptotic prediction for one configuration."""
    rho_l, n_l = rho_linear(channel, t_l, delta, order)
    fp = spectral_fixed_point(channel, t_s, delta, order)
    rho_s = rho_spectral(fp)
    if fp.above_threshold:
        q = cross_correlation_q(channel, t_l, t_s, delta, fp, order)
    else:
        q = 0.0
    theta_star, f_star = optimal_theta(rho_l, rho_s, q)
    lam1, lam2 = predicted_eigenvalues(fp, delta)
    rho_max = max(abs(rho_l), rho_s)
    p_ratio = (rho_s / rho_l if abs(rho_l) >= rho_s
               else (rho_l / rho_s if rho_s > 0 else 0.0))
    rb = rb_se = None
    if prior is not None:
        if prior.kind == "gaussian_sphere":
            # linear-MMSE case: the Bayes combiner is the optimal linear one
            rb, rb_se = f_star, 0.0
        else:
            rb, rb_se = rho_star_bayes(prior, rho_l, rho_s, q,
                                       samples=bayes_samples, seed=seed)
    return AsymptoticPrediction(
        delta=delta, rho_l=rho_l, n_l=n_l, rho_s=rho_s, q=q,
        theta_star=theta_star, f_theta_star=f_star,
        lambda1_dn=lam1, lambda2_dn=lam2,
        lambda_star=fp.lambda_star, bar_lambda=fp.bar_lambda,
        above_threshold=fp.above_threshold,
        rho_max=rho_max, p_ratio=p_ratio,
        rho_star_bayes=rb, rho_star_bayes_stderr=rb_se,
    )
