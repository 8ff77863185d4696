"""Signal priors, output channels and instance sampling.

Measurement model: x in R^d with ||x||^2 = d, sensing rows a_i ~ N(0, I/d),
g_i = <a_i, x>, and y_i drawn from the output channel given g_i.  Continuous
channels are of the additive-noise form y = f(g) + sigma*z; discrete channels
carry explicit conditional mass functions on a finite output alphabet.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

PRNG_NAME = "numpy:PCG64:standard_normal:v1"

# Built-in deterministic links: name -> (f, f', kink points of f).
# These are the link functions used throughout the experiments, plus the
# sign/abs examples.  All callables are vectorized.
LINKS: dict[str, tuple[Callable, Callable, tuple[float, ...]]] = {
    "identity": (lambda x: x, lambda x: np.ones_like(x), ()),
    "x^2": (lambda x: x * x, lambda x: 2.0 * x, ()),
    "0.3x+x^2": (lambda x: 0.3 * x + x * x, lambda x: 0.3 + 2.0 * x, ()),
    "0.3x+0.5x^2": (lambda x: 0.3 * x + 0.5 * x * x, lambda x: 0.3 + x, ()),
    "1+0.3x+(x^2-1)": (
        lambda x: 1.0 + 0.3 * x + (x * x - 1.0),
        lambda x: 0.3 + 2.0 * x,
        (),
    ),
    "0.3x+0.5(x^2-1)": (
        lambda x: 0.3 * x + 0.5 * (x * x - 1.0),
        lambda x: 0.3 + x,
        (),
    ),
    "max(x,-0.4x)": (
        lambda x: np.maximum(x, -0.4 * x),
        lambda x: np.where(x > 0, 1.0, -0.4),
        (0.0,),
    ),
    "abs-above-1.5": (
        lambda x: np.where(np.abs(x) >= 1.5, np.abs(x), x),
        lambda x: np.where(np.abs(x) >= 1.5, np.sign(x), 1.0),
        (-1.5, 1.5),
    ),
    "sign": (lambda x: np.sign(x), lambda x: np.zeros_like(x), (0.0,)),
    "abs": (lambda x: np.abs(x), lambda x: np.sign(x), (0.0,)),
}


class ChannelError(ValueError):
    """Invalid channel configuration or unsupported operation."""


@dataclass(frozen=True)
class SignalPrior:
    """Limiting signal distribution: unit-second-moment Gaussian sphere or
    binary entries in {+1, -1} with P(X=1) = p."""

    kind: str = "gaussian_sphere"
    p: float = 0.5

    def __post_init__(self):
        if self.kind not in ("gaussian_sphere", "binary"):
            raise ChannelError(f"unknown prior kind: {self.kind!r}")
        if self.kind == "binary" and not 0.0 < self.p < 1.0:
            raise ChannelError(f"binary prior needs p in (0,1), got {self.p}")

    def sample(self, d: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "gaussian_sphere":
            x = rng.standard_normal(d)
            return x * (math.sqrt(d) / np.linalg.norm(x))
        return np.where(rng.random(d) < self.p, 1.0, -1.0)

    def mean(self) -> float:
        return 0.0 if self.kind == "gaussian_sphere" else 2.0 * self.p - 1.0


@dataclass(frozen=True, eq=False)
class Channel:
    """Stochastic output map y ~ p(y|g).

    Continuous channels: y = link(g) + noise_std * z, z ~ N(0,1).  Discrete
    channels: finite alphabet with conditional masses; `discrete_support`
    holds (value, mass_fn) pairs whose masses must sum to 1 for every g.

    `g_kinks` lists points where link or mass functions are non-smooth in g;
    the quadrature engine splits its g-integral there.  `moments_fn`, when
    set, supplies closed-form density moments (mu0, mu1, mu2)(y) together
    with `y_support`; this is how noiseless deterministic channels (sigma=0)
    expose the moments that no Gaussian-density quadrature can produce.
    """

    link: Callable = LINKS["identity"][0]
    link_derivative: Callable = LINKS["identity"][1]
    noise_std: float = 0.0
    output_kind: str = "continuous"
    discrete_support: Tuple[Tuple[float, Callable], ...] = ()
    g_kinks: Tuple[float, ...] = ()
    moments_fn: Optional[Callable] = None
    y_support: Optional[Tuple[float, float]] = None
    name: str = ""

    def __post_init__(self):
        if self.output_kind not in ("continuous", "discrete"):
            raise ChannelError(f"unknown output_kind: {self.output_kind!r}")
        if self.noise_std < 0:
            raise ChannelError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.output_kind == "discrete" and not self.discrete_support:
            raise ChannelError("discrete channel needs discrete_support")

    @property
    def is_discrete(self) -> bool:
        return self.output_kind == "discrete"

    def sample_y(self, g: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.is_discrete:
            values = np.array([v for v, _ in self.discrete_support])
            masses = np.stack([np.broadcast_to(m(g), g.shape)
                               for _, m in self.discrete_support], axis=-1)
            cum = np.cumsum(masses, axis=-1)
            u = rng.random(g.shape)
            idx = np.sum(u[..., None] >= cum, axis=-1)
            return values[np.minimum(idx, len(values) - 1)]
        y = self.link(g)
        if self.noise_std > 0:
            y = y + self.noise_std * rng.standard_normal(g.shape)
        return y


def make_channel(link: str, noise_std: float = 0.0) -> Channel:
    """Continuous channel y = f(g) + noise_std * z for a registered link."""
    if link not in LINKS:
        raise ChannelError(f"unknown link {link!r}; available: {sorted(LINKS)}")
    f, fp, kinks = LINKS[link]
    moments_fn = None
    y_support = None
    if noise_std == 0.0 and link == "x^2":
        moments_fn = _square_noiseless_moments
        y_support = (0.0, 150.0)
    return Channel(link=f, link_derivative=fp, noise_std=float(noise_std),
                   g_kinks=kinks, moments_fn=moments_fn, y_support=y_support,
                   name=link)


def _square_noiseless_moments(y):
    """Closed-form (mu0, mu1, mu2) for noiseless y = g^2: the chi-square(1)
    density phi(sqrt y)/sqrt y, with mu1 = 0 by symmetry and mu2 = y*mu0."""
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = np.where(y > 0,
                       np.exp(-y / 2.0) / np.sqrt(2.0 * np.pi * np.maximum(y, 1e-300)),
                       0.0)
    return mu0, np.zeros_like(y), y * mu0


def sign_channel() -> Channel:
    """Noiseless one-bit channel y = sign(g), y in {+1, -1}."""
    return Channel(
        link=LINKS["sign"][0], link_derivative=LINKS["sign"][1],
        noise_std=0.0, output_kind="discrete",
        discrete_support=(
            (1.0, lambda g: (np.asarray(g) > 0).astype(float)),
            (-1.0, lambda g: (np.asarray(g) <= 0).astype(float)),
        ),
        g_kinks=(0.0,), name="sign",
    )


def two_point_channel(z0: float = 0.0, z1: float = 1.0,
                      p1: Optional[Callable] = None) -> Channel:
    """Binary-output channel y in {z0, z1} with smooth g-dependent mass
    P(y = z1 | g) = 0.05 + 0.9*(1 - exp(-g^2/2)) unless overridden."""
    if p1 is None:
        p1 = lambda g: 0.05 + 0.9 * (1.0 - np.exp(-np.asarray(g) ** 2 / 2.0))
    return Channel(
        link=LINKS["identity"][0], link_derivative=LINKS["identity"][1],
        noise_std=0.0, output_kind="discrete",
        discrete_support=(
            (z1, p1),
            (z0, lambda g: 1.0 - p1(g)),
        ),
        name=f"two_point({z0},{z1})",
    )


@dataclass(frozen=True)
class Instance:
    """One sampled problem: signal, sensing matrix, latent projections and
    observations.  Immutable; reproducible from (config, seed)."""

    x: np.ndarray
    A: np.ndarray
    g: np.ndarray
    y: np.ndarray
    seed: int
    prng: str = PRNG_NAME

    @property
    def d(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def delta_n(self) -> float:
        return self.n / self.d


def sample_instance(prior: SignalPrior, channel: Channel, d: int,
                    delta: float, seed: int) -> Instance:
    """Draw (x, A, g, y).  Identical seed gives bit-identical output."""
    if d < 2:
        raise ChannelError(f"d must be >= 2, got {d}")
    if delta <= 0:
        raise ChannelError(f"delta must be > 0, got {delta}")
    n = int(round(delta * d))
    if n < 1:
        raise ChannelError(f"round(delta*d) must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    x = prior.sample(d, rng)
    A = rng.standard_normal((n, d)) / math.sqrt(d)
    g = A @ x
    y = channel.sample_y(g, rng)
    return Instance(x=x, A=A, g=g, y=y, seed=seed)


def channel_moments(channel: Channel, y, order: int = 80):
    """Density moments mu_k(y) = E_G[G^k p(y|G)] for k = 0, 1, 2.

    Continuous channels need noise_std > 0 (the conditional density is the
    Gaussian density of y - f(G)) unless the channel registers closed-form
    moments.  Discrete channels evaluate the registered masses; `y` must then
    hit support points exactly.
    """
    y_arr = np.atleast_1d(np.asarray(y, dtype=float))
    if channel.is_discrete:
        mu = _discrete_moments(channel, order)
        out = np.zeros((3, y_arr.size))
        for j, (val, _) in enumerate(channel.discrete_support):
            hit = np.isclose(y_arr, val)
            for k in range(3):
                out[k, hit] = mu[k, j]
        if not np.isclose(y_arr[:, None],
                          [v for v, _ in channel.discrete_support]).any(axis=1).all():
            raise ChannelError("y not in the discrete output support")
    elif channel.moments_fn is not None:
        out = np.stack([np.atleast_1d(m) for m in channel.moments_fn(y_arr)])
    elif channel.noise_std > 0:
        out = _continuous_moments(channel, y_arr, order)
    else:
        raise ChannelError(
            "sigma=0 continuous channel has no density; register moments_fn")
    if not np.all(np.isfinite(out)):
        raise ChannelError("non-finite channel moments")
    if np.isscalar(y) or np.asarray(y).ndim == 0:
        return out[0, 0], out[1, 0], out[2, 0]
    return out[0], out[1], out[2]


def _g_nodes(channel: Channel, order: int):
    """Nodes/weights for E over G ~ N(0,1), split at channel g-kinks."""
    from .quadrature import gauss_hermite, piecewise_normal_nodes

    if channel.g_kinks:
        return piecewise_normal_nodes(channel.g_kinks)
    return gauss_hermite(order)


def _continuous_moments(channel: Channel, y: np.ndarray, order: int):
    gq, wq = _g_nodes(channel, order)
    sig = channel.noise_std
    fg = channel.link(gq)
    # density of y - f(g) under N(0, sigma^2), broadcast (ny, nodes)
    z = (y[:, None] - fg[None, :]) / sig
    dens = np.exp(-0.5 * z * z) / (sig * math.sqrt(2.0 * math.pi))
    out = np.empty((3, y.size))
    for k in range(3):
        out[k] = dens @ (wq * gq**k)
    return out


def _discrete_moments(channel: Channel, order: int):
    gq, wq = _g_nodes(channel, order)
    nsup = len(channel.discrete_support)
    mu = np.empty((3, nsup))
    for j, (_, mass) in enumerate(channel.discrete_support):
        mj = np.asarray(mass(gq), dtype=float)
        for k in range(3):
            mu[k, j] = np.sum(wq * gq**k * mj)
    return mu
