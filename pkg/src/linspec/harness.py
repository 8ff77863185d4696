"""Monte Carlo experiment runner: replicate sweeps over the sampling ratio,
theory-vs-empirical comparison, and gradient-descent refinement.

Per-replicate seeds are derived from (base_seed, delta index, replicate
index) by splitmix64 mixing, so results are reproducible and independent of
execution order or worker count.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .channels import (Channel, ChannelError, Instance, SignalPrior,
                       PRNG_NAME, make_channel, sign_channel, sample_instance)
from .asymptotics import (AsymptoticPrediction, Preprocessor,
                          clip_preprocessor, identity_preprocessor, predict,
                          saturate_preprocessor, square_preprocessor,
                          tanh_preprocessor)
from .estimators import (PowerIterationError, combine_bayes, combine_linear,
                         linear_estimate, normalized_correlation,
                         resolve_sign, spectral_estimate)

ESTIMATOR_NAMES = ("linear", "spectral", "combined_linear", "combined_bayes")
CONFIG_VERSION = 1


def splitmix64(state: int) -> int:
    """One step of the splitmix64 sequence (64-bit)."""
    z = (state + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def mix_seed(*parts: int) -> int:
    """Deterministically mix integers into one 64-bit seed."""
    state = 0x632BE59BD9B4E019
    for p in parts:
        state = splitmix64(state ^ (int(p) & 0xFFFFFFFFFFFFFFFF))
    return state


class ConfigError(ValueError):
    """Malformed experiment configuration (reports the offending key)."""


def _check_keys(section: dict, allowed: set, where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")


def channel_from_spec(spec: dict) -> Channel:
    _check_keys(spec, {"kind", "link", "noise_std", "noise_var"}, "channel")
    kind = spec.get("kind", "continuous")
    if kind == "sign":
        return sign_channel()
    if kind != "continuous":
        raise ConfigError(f"unknown key value {kind!r} for channel.kind")
    if "noise_std" in spec and "noise_var" in spec:
        raise ConfigError("give channel.noise_std or channel.noise_var, not both")
    std = float(spec.get("noise_std", math.sqrt(spec.get("noise_var", 0.0))))
    try:
        return make_channel(spec.get("link", "identity"), noise_std=std)
    except ChannelError as exc:
        raise ConfigError(str(exc)) from exc


def prior_from_spec(spec: dict) -> SignalPrior:
    _check_keys(spec, {"kind", "p"}, "prior")
    kind = spec.get("kind", "gaussian_sphere")
    if kind == "binary":
        return SignalPrior(kind="binary", p=float(spec.get("p", 0.5)))
    if kind != "gaussian_sphere":
        raise ConfigError(f"unknown key value {kind!r} for prior.kind")
    return SignalPrior()


def preprocessor_from_spec(spec: dict, where: str) -> Preprocessor:
    _check_keys(spec, {"kind", "level", "scale"}, where)
    kind = spec.get("kind", "identity")
    scale = float(spec.get("scale", 1.0))
    if kind == "identity":
        pre = identity_preprocessor()
    elif kind == "clip":
        return clip_preprocessor(float(spec.get("level", 3.5)), scale=scale)
    elif kind == "square":
        pre = square_preprocessor()
    elif kind == "tanh":
        pre = tanh_preprocessor()
    elif kind == "saturate":
        pre = saturate_preprocessor()
    else:
        raise ConfigError(f"unknown key value {kind!r} for {where}.kind")
    if scale != 1.0:
        base = pre
        pre = Preprocessor(fn=lambda y: scale * base.fn(y),
                           sup_support=scale * base.sup_support,
                           lipschitz=base.lipschitz, bounded=base.bounded,
                           kinks=base.kinks, name=f"{base.name}*{scale}")
    return pre


@dataclass(frozen=True)
class GdSpec:
    steps: int = 50
    step_size: float = 0.5
    normalized: bool = True      # divide the gradient sum by n


@dataclass(frozen=True)
class ExperimentConfig:
    channel: Channel
    prior: SignalPrior
    t_l: Preprocessor
    t_s: Preprocessor
    d: int
    delta_grid: Sequence[float]
    replicates: int = 10
    base_seed: int = 0
    estimators: Sequence[str] = ESTIMATOR_NAMES[:3]
    gd: Optional[GdSpec] = None
    bayes_samples: int = 200_000
    spectral_tol: float = 1e-10
    spectral_max_iter: int = 5000
    echo: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        grid = list(self.delta_grid)
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("delta_grid must be strictly increasing")
        for est in self.estimators:
            if est not in ESTIMATOR_NAMES:
                raise ConfigError(f"unknown key value {est!r} in estimators")


TOP_LEVEL_KEYS = {
    "schema_version", "channel", "prior", "t_l", "t_s", "d", "delta",
    "delta_grid", "replicates", "base_seed", "estimators", "gd",
    "bayes_samples", "spectral_tol", "spectral_max_iter", "gamp_steps",
}


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a plain config mapping;
    unknown keys are rejected by name."""
    _check_keys(raw, TOP_LEVEL_KEYS, "config")
    version = raw.get("schema_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    if "delta_grid" in raw:
        grid = [float(v) for v in raw["delta_grid"]]
    elif "delta" in raw:
        grid = [float(raw["delta"])]
    else:
        raise ConfigError("config needs delta or delta_grid")
    gd = None
    if "gd" in raw:
        _check_keys(raw["gd"], {"steps", "step_size", "normalized"}, "gd")
        gd = GdSpec(steps=int(raw["gd"].get("steps", 50)),
                    step_size=float(raw["gd"].get("step_size", 0.5)),
                    normalized=bool(raw["gd"].get("normalized", True)))
    return ExperimentConfig(
        channel=channel_from_spec(raw.get("channel", {})),
        prior=prior_from_spec(raw.get("prior", {})),
        t_l=preprocessor_from_spec(raw.get("t_l", {"kind": "identity"}), "t_l"),
        t_s=preprocessor_from_spec(raw.get("t_s", {"kind": "clip"}), "t_s"),
        d=int(raw.get("d", 500)),
        delta_grid=grid,
        replicates=int(raw.get("replicates", 10)),
        base_seed=int(raw.get("base_seed", 0)),
        estimators=tuple(raw.get("estimators", ESTIMATOR_NAMES[:3])),
        gd=gd,
        bayes_samples=int(raw.get("bayes_samples", 200_000)),
        spectral_tol=float(raw.get("spectral_tol", 1e-10)),
        spectral_max_iter=int(raw.get("spectral_max_iter", 5000)),
        echo=dict(raw),
    )


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list                    # tidy (delta, replicate, estimator, ...)
    predictions: dict             # delta -> AsymptoticPrediction
    failures: list
    prng: str = PRNG_NAME

    def mean_correlation(self, delta: float, estimator: str) -> float:
        vals = [r["correlation"] for r in self.rows
                if r["delta"] == delta and r["estimator"] == estimator]
        return float(np.mean(vals)) if vals else math.nan

    def stderr_correlation(self, delta: float, estimator: str) -> float:
        vals = [r["correlation"] for r in self.rows
                if r["delta"] == delta and r["estimator"] == estimator]
        if len(vals) < 2:
            return math.nan
        return float(np.std(vals, ddof=1) / math.sqrt(len(vals)))


def _run_replicate(cfg: ExperimentConfig, delta: float, delta_idx: int,
                   rep: int, pred: AsymptoticPrediction) -> list:
    seed = mix_seed(cfg.base_seed, delta_idx, rep)
    inst = sample_instance(cfg.prior, cfg.channel, cfg.d, delta, seed)
    rows = []
    want = set(cfg.estimators)
    x_l = x_s = None

    def record(name: str, vec: np.ndarray, t0: float) -> None:
        rows.append({"delta": delta, "replicate": rep, "estimator": name,
                     "correlation": normalized_correlation(inst.x, vec),
                     "norm": float(np.linalg.norm(vec)),
                     "seconds": time.perf_counter() - t0})

    t0 = time.perf_counter()
    x_l = linear_estimate(inst, cfg.t_l)
    if "linear" in want:
        record("linear", x_l, t0)
    needs_spectral = want & {"spectral", "combined_linear", "combined_bayes"}
    if needs_spectral and pred.above_threshold:
        t0 = time.perf_counter()
        report = spectral_estimate(inst, cfg.t_s, tol=cfg.spectral_tol,
                                   max_iter=cfg.spectral_max_iter,
                                   compute_second=False)
        x_s = resolve_sign(x_l, report.eigvec, pred.q)
        if "spectral" in want:
            record("spectral", x_s, t0)
    elif "spectral" in want:
        # below threshold the estimator carries no signal; still compute it
        t0 = time.perf_counter()
        report = spectral_estimate(inst, cfg.t_s, tol=max(cfg.spectral_tol, 1e-6),
                                   max_iter=cfg.spectral_max_iter,
                                   compute_second=False)
        x_s = report.eigvec
        record("spectral", x_s, t0)
    if "combined_linear" in want:
        t0 = time.perf_counter()
        if pred.above_threshold and x_s is not None:
            vec = combine_linear(x_l, x_s, pred.theta_star)
        else:
            vec = combine_linear(x_l, np.zeros_like(x_l),
                                 math.copysign(math.inf, pred.theta_star))
        record("combined_linear", vec, t0)
    if "combined_bayes" in want:
        t0 = time.perf_counter()
        sd = math.sqrt(inst.d)
        xl_scaled = sd * x_l / pred.n_l
        xs_scaled = (sd * x_s if (pred.above_threshold and x_s is not None)
                     else np.zeros_like(x_l))
        vec = combine_bayes(xl_scaled, xs_scaled, cfg.prior,
                            (pred.rho_l, pred.rho_s, pred.q))
        record("combined_bayes", vec, t0)

    # GD refinement is driven by run_gd_comparison; the sweep records the
    # raw estimators only.
    return rows


def run_sweep(cfg: ExperimentConfig, workers: int = 1,
              prior_for_theory: bool = True) -> ExperimentResult:
    """Run the replicate sweep over delta, attaching theory predictions.

    Per-replicate failures are recorded; the sweep aborts only if more than
    20% of replicates fail at some delta.
    """
    predictions = {}
    for delta in cfg.delta_grid:
        predictions[delta] = predict(
            cfg.channel, cfg.t_l, cfg.t_s, delta,
            prior=cfg.prior if prior_for_theory else None,
            bayes_samples=cfg.bayes_samples, seed=cfg.base_seed)

    tasks = [(delta_idx, delta, rep)
             for delta_idx, delta in enumerate(cfg.delta_grid)
             for rep in range(cfg.replicates)]

    def run_one(task):
        delta_idx, delta, rep = task
        return _run_replicate(cfg, delta, delta_idx, rep, predictions[delta])

    rows: list = []
    failures: list = []
    if workers > 1:
        # threads: replicate work is BLAS-dominated and the channel and
        # preprocessor callables are not picklable
        from concurrent.futures import ThreadPoolExecutor

        def guarded(task):
            try:
                return run_one(task)
            except Exception as exc:   # noqa: BLE001 - recorded per replicate
                return exc

        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(guarded, tasks))
        for task, out in zip(tasks, outs):
            if isinstance(out, Exception):
                failures.append({"delta": task[1], "replicate": task[2],
                                 "error": str(out)})
            else:
                rows.extend(out)
    else:
        for task in tasks:
            try:
                rows.extend(run_one(task))
            except Exception as exc:   # noqa: BLE001 - recorded per replicate
                failures.append({"delta": task[1], "replicate": task[2],
                                 "error": str(exc)})
    for delta in cfg.delta_grid:
        nfail = sum(1 for f in failures if f["delta"] == delta)
        if nfail > 0.2 * cfg.replicates:
            raise RuntimeError(
                f"{nfail}/{cfg.replicates} replicates failed at delta={delta}: "
                f"{failures[0]['error']}")
    rows.sort(key=lambda r: (r["delta"], r["replicate"], r["estimator"]))
    return ExperimentResult(config=cfg, rows=rows, predictions=predictions,
                            failures=failures)


def _sweep_task(args):
    cfg, task, pred = args
    delta_idx, delta, rep = task
    try:
        return _run_replicate(cfg, delta, delta_idx, rep, pred)
    except Exception as exc:   # noqa: BLE001
        return exc


def gd_refine(instance: Instance, channel: Channel, x0: np.ndarray,
              steps: int, step_size: float = 0.5,
              normalized: bool = True) -> np.ndarray:
    """Gradient descent on the squared-error loss from x0, returning the
    normalized correlation with the true signal at t = 0..steps.

    The update is the standard gradient of (1/2) sum_i (f(<a_i,x>) - y_i)^2,
    x <- x - step * sum_i f'(<a_i,x>) (f(<a_i,x>) - y_i) a_i, optionally
    normalized by n.  Divergence truncates the trace.
    """
    A, y = instance.A, instance.y
    scale = (1.0 / instance.n) if normalized else 1.0
    x = np.asarray(x0, dtype=float).copy()
    trace = np.full(steps + 1, math.nan)
    trace[0] = normalized_correlation(instance.x, x)
    for t in range(1, steps + 1):
        g = A @ x
        fg = channel.link(g)
        grad = A.T @ (channel.link_derivative(g) * (fg - y))
        x = x - step_size * scale * grad
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) == 0.0:
            break
        trace[t] = normalized_correlation(instance.x, x)
    return trace


def run_gd_comparison(cfg: ExperimentConfig, delta: float,
                      init_names: Sequence[str] = ("linear", "spectral",
                                                   "combined_linear",
                                                   "combined_bayes")):
    """GD traces from each initialization (rescaled to norm sqrt(d)), per
    replicate.  Returns {name: array of shape (replicates, steps+1)}."""
    if cfg.gd is None:
        raise ConfigError("config has no gd section")
    pred = predict(cfg.channel, cfg.t_l, cfg.t_s, delta, prior=cfg.prior,
                   bayes_samples=cfg.bayes_samples, seed=cfg.base_seed)
    out = {name: [] for name in init_names}
    for rep in range(cfg.replicates):
        seed = mix_seed(cfg.base_seed, 0, rep)
        inst = sample_instance(cfg.prior, cfg.channel, cfg.d, delta, seed)
        x_l = linear_estimate(inst, cfg.t_l)
        x_s = None
        if pred.above_threshold:
            rep_s = spectral_estimate(inst, cfg.t_s, tol=cfg.spectral_tol,
                                      max_iter=cfg.spectral_max_iter,
                                      compute_second=False)
            x_s = resolve_sign(x_l, rep_s.eigvec, pred.q)
        sd = math.sqrt(inst.d)
        inits = {}
        if "linear" in init_names:
            inits["linear"] = x_l
        if "spectral" in init_names and x_s is not None:
            inits["spectral"] = x_s
        if "combined_linear" in init_names:
            inits["combined_linear"] = (
                combine_linear(x_l, x_s, pred.theta_star)
                if x_s is not None else x_l)
        if "combined_bayes" in init_names:
            xs_scaled = sd * x_s if x_s is not None else np.zeros_like(x_l)
            inits["combined_bayes"] = combine_bayes(
                sd * x_l / pred.n_l, xs_scaled, cfg.prior,
                (pred.rho_l, pred.rho_s, pred.q))
        for name, vec in inits.items():
            x0 = sd * vec / np.linalg.norm(vec)
            out[name].append(gd_refine(inst, cfg.channel, x0, cfg.gd.steps,
                                       cfg.gd.step_size, cfg.gd.normalized))
    return {k: np.array(v) for k, v in out.items() if v}


def percentage_gain(prediction: AsymptoticPrediction) -> float:
    """(rho* - rho_max)/rho_max * 100 where rho* is the combined-estimator
    correlation (Bayes value when present, else the linear-combination one)."""
    rho_star = (prediction.rho_star_bayes
                if prediction.rho_star_bayes is not None
                else prediction.f_theta_star)
    if prediction.rho_max <= 0:
        raise ValueError("rho_max = 0: gain undefined")
    return (rho_star - prediction.rho_max) / prediction.rho_max * 100.0


def result_to_csv(result: ExperimentResult, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("delta,replicate,estimator,correlation,norm,seconds\n")
        for r in result.rows:
            fh.write(f"{r['delta']:.17g},{r['replicate']},{r['estimator']},"
                     f"{r['correlation']:.17g},{r['norm']:.17g},"
                     f"{r['seconds']:.6g}\n")


def result_sidecar(result: ExperimentResult) -> dict:
    return {
        "schema_version": CONFIG_VERSION,
        "prng": result.prng,
        "config": result.config.echo,
        "realized_delta": {str(d): round(result.config.d * d) / result.config.d
                           for d in result.config.delta_grid},
        "predictions": {str(d): p.to_dict()
                        for d, p in result.predictions.items()},
        "failures": result.failures,
    }
