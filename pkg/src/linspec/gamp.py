"""Generalized approximate message passing: the general two-line iteration,
the power-method specialization that connects the linear estimator to the
spectral one, and the scalar state-evolution recursion with its closed-form
fixed points.

The power-method variant applies the transform Z = T_s(Y)/(lambda* - T_s(Y))
with lambda* from the spectral fixed point; the normalization
E{Z(G^2 - 1)} = 1/delta then holds automatically, the state evolution
converges to beta~^2 = 1/delta, and the iterates align with the principal
eigenvector of A^T diag(T_s(y)) A.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .channels import Channel, Instance
from .quadrature import DEFAULT_ORDER, glm_nodes
from .asymptotics import Preprocessor
from .estimators import linear_estimate


class GampError(RuntimeError):
    """Hypothesis violation or numerical failure in a GAMP run."""


@dataclass(frozen=True)
class SEFixedPoint:
    mu_v: float
    sigma_v: float
    beta: float
    trivial: bool = False     # FP0 marker: hypotheses of the lemma violated


@dataclass(frozen=True)
class StateEvolutionTrace:
    mu_u: np.ndarray
    sigma2_u: np.ndarray
    mu_v: np.ndarray          # mu_v[t-1] = mu_{V,t}
    sigma2_v: np.ndarray
    beta: np.ndarray
    fixed_point: SEFixedPoint
    cross_corr_first_last: float     # E{W_{V,1} W_{V,inf}}


@dataclass(frozen=True)
class GampConfig:
    t_l: Preprocessor
    t_s: Preprocessor
    lambda_star: float
    max_t: int = 200
    delta: float = 1.0

    def __post_init__(self):
        if self.lambda_star <= self.t_s.sup_support:
            raise GampError("lambda_star must exceed sup support of T_s "
                            "so Z = Zs/(lambda*-Zs) is bounded")


@dataclass
class GampRun:
    u: np.ndarray
    v: np.ndarray
    diff_u: list = field(default_factory=list)        # ||u^t - u^{t-1}||^2/n
    diff_v: list = field(default_factory=list)        # ||v^{t+1} - v^t||^2/d
    overlap: list = field(default_factory=list)       # <v^t, x>/d
    norm2_v: list = field(default_factory=list)       # ||v^t||^2/d
    spectral_alignment: list = field(default_factory=list)

    def to_csv_rows(self):
        """Rows (t, diff_u, diff_v, overlap, spectral_alignment)."""
        rows = []
        for t in range(len(self.diff_u)):
            align = (self.spectral_alignment[t]
                     if self.spectral_alignment else float("nan"))
            rows.append((t + 1, self.diff_u[t], self.diff_v[t],
                         self.overlap[t], align))
        return rows


def power_transform(t_s: Preprocessor, lambda_star: float) -> Preprocessor:
    """The preprocessor y -> T_s(y) / (lambda* - T_s(y))."""
    tau = t_s.sup_support
    if lambda_star <= tau:
        raise GampError("lambda_star must exceed tau")
    return Preprocessor(
        fn=lambda y: t_s.fn(y) / (lambda_star - t_s.fn(y)),
        sup_support=tau / (lambda_star - tau),
        bounded=t_s.bounded, kinks=t_s.kinks,
        name=f"{t_s.name}/({lambda_star:.6g}-{t_s.name})",
    )


def _transform_moments(channel: Channel, t: Preprocessor,
                       order: int = DEFAULT_ORDER):
    """(E{Z}, E{Z G^2}, E{Z^2}, E{Z^2 G^2}) for Z = t(Y)."""
    g, y, w = glm_nodes(channel, order, t.kinks)
    z = np.asarray(t.fn(y), dtype=float)
    g2 = g * g
    return (float(w @ z), float(w @ (z * g2)),
            float(w @ (z * z)), float(w @ (z * z * g2)))


def se_fixed_point(channel: Channel, t: Preprocessor, delta: float,
                   order: int = DEFAULT_ORDER) -> SEFixedPoint:
    """Closed-form nontrivial fixed point of the state evolution:
    beta~^2 = delta (E{ZG^2} - E{Z})^2, with mu~ and sigma~ as functions of
    the Z-moments.  Returns the trivial-FP marker when the existence
    hypotheses fail."""
    ez, ezg2, ez2, ez2g2 = _transform_moments(channel, t, order)
    gap = ezg2 - ez
    if gap <= 0 or delta <= ez2 / gap**2:
        return SEFixedPoint(mu_v=0.0, sigma_v=math.sqrt(max(ez2, 0.0)),
                            beta=math.sqrt(max(ez2, 0.0)), trivial=True)
    beta2 = delta * gap * gap
    denom = beta2 + ez2g2 - ez2
    mu_v = math.sqrt(beta2 * (beta2 - ez2) / denom)
    sigma_v = math.sqrt(beta2 * ez2g2 / denom)
    return SEFixedPoint(mu_v=mu_v, sigma_v=sigma_v, beta=math.sqrt(beta2))


def se_run(channel: Channel, t_l: Preprocessor, t: Preprocessor,
           delta: float, steps: int,
           order: int = DEFAULT_ORDER) -> StateEvolutionTrace:
    """Iterate the scalar state evolution from the linear-estimator
    initialization mu_{V,1} = E{T_L(Y) G}, sigma^2_{V,1} = E{T_L(Y)^2}/delta."""
    gl, yl, wl = glm_nodes(channel, order, t_l.kinks)
    zl = np.asarray(t_l.fn(yl), dtype=float)
    mu1 = float(wl @ (zl * gl))
    s21 = float(wl @ (zl * zl)) / delta
    if abs(mu1) <= 0:
        raise GampError("|E{T_L(Y) G}| = 0: state evolution stalls at zero")
    ez, ezg2, ez2, ez2g2 = _transform_moments(channel, t, order)
    gap = ezg2 - ez

    mu_v = np.empty(steps)
    s2_v = np.empty(steps)
    beta = np.empty(steps)
    mu, s2 = mu1, s21
    for i in range(steps):
        mu_v[i], s2_v[i] = mu, s2
        beta[i] = math.sqrt(mu * mu + s2)
        mu_next = math.sqrt(delta) * mu / beta[i] * gap
        s2_next = (mu * mu * ez2g2 + s2 * ez2) / beta[i] ** 2
        mu, s2 = mu_next, s2_next
    mu_u = mu_v / (math.sqrt(delta) * beta)
    s2_u = s2_v / (delta * beta**2)

    fp = se_fixed_point(channel, t, delta, order)
    if fp.trivial:
        cross = 0.0
    else:
        kinks = tuple(sorted(set(t_l.kinks + t.kinks)))
        g, y, w = glm_nodes(channel, order, kinks)
        e_tl_z_g = float(w @ (np.asarray(t_l.fn(y), dtype=float)
                              * np.asarray(t.fn(y), dtype=float) * g))
        e_tl2 = float(wl @ (zl * zl))
        cross = (fp.mu_v * e_tl_z_g
                 / (fp.beta * fp.sigma_v * math.sqrt(e_tl2)))
    return StateEvolutionTrace(mu_u=mu_u, sigma2_u=s2_u, mu_v=mu_v,
                               sigma2_v=s2_v, beta=beta, fixed_point=fp,
                               cross_corr_first_last=cross)


def gamp_power_run(instance: Instance, cfg: GampConfig,
                   channel: Channel,
                   x_s_hat: Optional[np.ndarray] = None,
                   order: int = DEFAULT_ORDER) -> GampRun:
    """Run the power-method GAMP iteration.

    Initialization: u^0 = (1/delta) 1_n and v^1 = sqrt(d) * xhat_L (computed
    with the linear estimator's own arithmetic so the identity is bit-exact).
    The first u-step applies T_L(y) in the memory term; later steps apply
    Z = T_s(y)/(lambda* - T_s(y)).  beta_t comes from the deterministic state
    evolution; the v-step memory coefficient is its limit sqrt(delta) E{Z}.
    """
    delta = cfg.delta
    t_tilde = power_transform(cfg.t_s, cfg.lambda_star)
    trace = se_run(channel, cfg.t_l, t_tilde, delta, max(cfg.max_t, 2), order)
    ez = _transform_moments(channel, t_tilde, order)[0]

    A, y, x = instance.A, instance.y, instance.x
    n, d = instance.n, instance.d
    zl = np.asarray(cfg.t_l.fn(y), dtype=float)
    zt = np.asarray(t_tilde.fn(y), dtype=float)
    sq = math.sqrt(delta)

    u = np.full(n, 1.0 / delta)
    v = math.sqrt(d) * linear_estimate(instance, cfg.t_l)
    run = GampRun(u=u, v=v)
    for t in range(1, cfg.max_t + 1):
        beta_t = trace.beta[t - 1]
        memory = zl * u if t == 1 else zt * u
        u_next = (A @ v - memory) / (sq * beta_t)
        v_next = A.T @ (zt * u_next) - (sq * ez / beta_t) * v
        if not (np.all(np.isfinite(u_next)) and np.all(np.isfinite(v_next))):
            raise GampError(f"non-finite GAMP iterate at t={t}")
        run.diff_u.append(float(np.sum((u_next - u) ** 2)) / n)
        run.diff_v.append(float(np.sum((v_next - v) ** 2)) / d)
        run.overlap.append(float(v_next @ x) / d)
        run.norm2_v.append(float(v_next @ v_next) / d)
        if x_s_hat is not None:
            nv = np.linalg.norm(v_next)
            run.spectral_alignment.append(
                abs(float(v_next @ x_s_hat)) / (nv * np.linalg.norm(x_s_hat))
                if nv > 0 else 0.0)
        u, v = u_next, v_next
    run.u, run.v = u, v
    return run


def gamp_general_run(instance: Instance,
                     f_seq: Tuple[Callable, Callable],
                     g_seq: Tuple[Callable, Callable],
                     init_scalar: float, steps: int,
                     onsager_c: Optional[Sequence[float]] = None) -> GampRun:
    """General GAMP iteration with user-supplied Lipschitz nonlinearities.

    f_seq = (f, f') with f(t, v) applied to v in R^d for t >= 1 (f_0 = 0);
    g_seq = (g, g') with g(t, u, y) applied entrywise for t >= 0.  Onsager
    coefficients are empirical: b_t = (1/n) sum_i f'(t, v_i) and
    c_t = (1/n) sum_i g'(t, u_i; y_i), unless `onsager_c` supplies fixed
    c_t values (index t >= 1), which makes the power-method variant exactly
    reproducible here.
    """
    f, fprime = f_seq
    g, gprime = g_seq
    A, y, x = instance.A, instance.y, instance.x
    n, d = instance.n, instance.d
    delta = instance.delta_n
    sq = math.sqrt(delta)

    u = np.full(n, float(init_scalar))
    v = (A.T @ np.asarray(g(0, u, y), dtype=float)) / sq
    run = GampRun(u=u, v=v)
    for t in range(1, steps + 1):
        fv = np.asarray(f(t, v), dtype=float)
        b_t = float(np.sum(np.asarray(fprime(t, v), dtype=float))) / n
        u_next = (A @ fv) / sq - b_t * np.asarray(g(t - 1, u, y), dtype=float)
        if onsager_c is not None:
            c_t = float(onsager_c[t - 1])
        else:
            c_t = float(np.sum(np.asarray(gprime(t, u_next, y),
                                          dtype=float))) / n
        v_next = (A.T @ np.asarray(g(t, u_next, y), dtype=float)) / sq \
            - c_t * fv
        if not (np.all(np.isfinite(u_next)) and np.all(np.isfinite(v_next))):
            raise GampError(f"non-finite GAMP iterate at t={t}")
        run.diff_u.append(float(np.sum((u_next - u) ** 2)) / n)
        run.diff_v.append(float(np.sum((v_next - v) ** 2)) / d)
        run.overlap.append(float(v_next @ x) / d)
        run.norm2_v.append(float(v_next @ v_next) / d)
        u, v = u_next, v_next
    run.u, run.v = u, v
    return run
