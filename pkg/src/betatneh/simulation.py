"""Data generation for the three simulation settings and the Monte Carlo runner.

Survival times are drawn by inverting the observed cumulative hazard

    H_pop(a, t) + Lambda_exc(t) = -log U,    U ~ Uniform(0, 1)

where ``H_pop(a, t)`` accrues the Weibull background hazard from the age at
diagnosis ``a`` (subjects are alive at diagnosis). Censoring is independent
of the event time and capped at ``max_followup``:

* ``administrative``: every subject is followed to ``max_followup``;
* ``uniform``: ``C ~ U(0, censoring_param * max_followup)``;
* ``exponential`` (default): ``C ~ Exp(rate=censoring_param)`` per year.

The default rate 0.05 gives censoring of about 0.61, 0.18 and 0.48 in the
three built-in settings.

Age enters the model standardized, ``a* = (a - mu) / sigma``, with ``mu`` and
``sigma`` the exact moments of the configured age mixture.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .estimation import Dataset, ModelSpec, default_bounds, draw_feasible_init, fit
from .lifetable import WeibullPopHazard
from .model_core import ParamVector, cum_hazard_from_shapes

__all__ = [
    "AgeMixture",
    "SimulationConfig",
    "StudyReport",
    "StudyAborted",
    "SETTINGS",
    "setting",
    "draw_age",
    "draw_ages",
    "draw_event_time",
    "draw_event_times",
    "simulate_dataset",
    "replication_seed",
    "run_study",
    "initial_value_study",
    "SIM_SPEC",
]

AGE_STD = "age_std"
SIM_SPEC = ModelSpec(alpha_design=(AGE_STD,), tau_design=(AGE_STD,))
MAX_AGE = 120.0
CENSORING = ("administrative", "uniform", "exponential")


class StudyAborted(RuntimeError):
    """Too many replications failed to converge."""

    def __init__(self, msg, diagnostics):
        super().__init__(msg)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class AgeMixture:
    """Mixture of uniforms on ``[lo, hi)`` intervals."""

    intervals: tuple
    weights: tuple

    def __post_init__(self):
        object.__setattr__(self, "intervals", tuple(tuple(map(float, iv)) for iv in self.intervals))
        object.__setattr__(self, "weights", tuple(map(float, self.weights)))
        if len(self.intervals) != len(self.weights) or not self.intervals:
            raise ValueError("need one weight per interval")
        if abs(sum(self.weights) - 1.0) > 1e-9 or min(self.weights) < 0:
            raise ValueError("weights must be non-negative and sum to 1")
        ivs = sorted(self.intervals)
        for lo, hi in ivs:
            if hi < lo:
                raise ValueError(f"bad interval [{lo}, {hi})")
        for (_, h1), (l2, _) in zip(ivs, ivs[1:]):
            if l2 < h1:
                raise ValueError("age intervals overlap")

    @property
    def mean(self) -> float:
        return sum(w * (lo + hi) / 2 for (lo, hi), w in zip(self.intervals, self.weights))

    @property
    def sd(self) -> float:
        m2 = sum(w * (lo * lo + lo * hi + hi * hi) / 3 for (lo, hi), w in zip(self.intervals, self.weights))
        return math.sqrt(max(m2 - self.mean ** 2, 0.0))

    def standardize(self, age):
        sd = self.sd
        return (np.asarray(age, dtype=float) - self.mean) / (sd if sd > 0 else 1.0)

    @property
    def support(self) -> tuple:
        used = [iv for iv, w in zip(self.intervals, self.weights) if w > 0]
        return min(lo for lo, _ in used), max(hi for _, hi in used)


@dataclass(frozen=True)
class SimulationConfig:
    true_theta: ParamVector
    ages: AgeMixture
    pop_hazard: WeibullPopHazard = WeibullPopHazard(75.0, 11.0)
    max_followup: float = 15.0
    n: int = 2000
    seed: int = 0
    name: str = "custom"
    censoring: str = "exponential"
    censoring_param: float = 0.05

    def __post_init__(self):
        if not self.max_followup > 0:
            raise ValueError("max_followup must be > 0")
        if self.censoring not in CENSORING:
            raise ValueError(f"censoring must be one of {CENSORING}")
        if not self.censoring_param > 0:
            raise ValueError("censoring_param must be > 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")

    def with_(self, **kw) -> "SimulationConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return SimulationConfig(**d)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "true_theta": self.true_theta.to_array().tolist(),
            "n_gamma": self.true_theta.n_gamma,
            "age_intervals": [list(iv) for iv in self.ages.intervals],
            "age_weights": list(self.ages.weights),
            "pop_hazard": {"scale": self.pop_hazard.scale, "shape": self.pop_hazard.shape},
            "max_followup": self.max_followup,
            "n": self.n,
            "seed": self.seed,
            "censoring": self.censoring,
            "censoring_param": self.censoring_param,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        theta = ParamVector.from_array(d["true_theta"], int(d.get("n_gamma", 2)))
        pop = d.get("pop_hazard", {"scale": 75.0, "shape": 11.0})
        return cls(
            true_theta=theta,
            ages=AgeMixture(d["age_intervals"], d["age_weights"]),
            pop_hazard=WeibullPopHazard(float(pop["scale"]), float(pop["shape"])),
            max_followup=float(d.get("max_followup", 15.0)),
            n=int(d.get("n", 2000)),
            seed=int(d.get("seed", 0)),
            name=str(d.get("name", "custom")),
            censoring=str(d.get("censoring", "exponential")),
            censoring_param=float(d.get("censoring_param", 0.05)),
        )


_AGES_1 = AgeMixture(((20, 40), (40, 65), (65, 80)), (0.36, 0.29, 0.35))
_AGES_2 = AgeMixture(((20, 50), (50, 70), (70, 80)), (0.15, 0.60, 0.25))

SETTINGS = {
    1: SimulationConfig(ParamVector([2.3, -0.1], 4.8, [5.5, 0.9]), _AGES_1, max_followup=15.0, name="setting1"),
    2: SimulationConfig(ParamVector([1.25, -0.05], 3.5, [9.0, 0.3]), _AGES_2, max_followup=15.0, name="setting2"),
    3: SimulationConfig(ParamVector([3.01, -0.2], 2.98, [18.0, 1.2]), _AGES_1, max_followup=25.0, name="setting3"),
}


def setting(k: int, **kw) -> SimulationConfig:
    """Built-in configuration ``k`` (1, 2 or 3) with optional field overrides."""
    if k not in SETTINGS:
        raise KeyError(f"unknown setting {k!r}; choose 1, 2 or 3")
    return SETTINGS[k].with_(**kw)


# ---------------------------------------------------------------- sampling

def draw_ages(mix: AgeMixture, n: int, rng: np.random.Generator):
    """Ages and their standardized values for ``n`` subjects."""
    comp = rng.choice(len(mix.weights), size=n, p=np.asarray(mix.weights))
    lo = np.array([iv[0] for iv in mix.intervals])[comp]
    hi = np.array([iv[1] for iv in mix.intervals])[comp]
    age = lo + (hi - lo) * rng.random(n)
    return age, mix.standardize(age)


def draw_age(config: SimulationConfig, rng: np.random.Generator) -> tuple[float, float]:
    age, astd = draw_ages(config.ages, 1, rng)
    return float(age[0]), float(astd[0])


def _obs_cum_hazard(t, age, a, b, tau, pop):
    return pop.cum_hazard(age, t) + cum_hazard_from_shapes(t, a, b, tau)


def draw_event_times(age, alpha, beta, tau, pop: WeibullPopHazard, target, rel_tol: float = 1e-10):
    """Solve ``H_pop(age, t) + Lambda_exc(t) = target`` for each subject by bisection.

    ``target`` is ``-log U``. Times beyond the solver horizon ``120 - age``
    are returned as the horizon.
    """
    age = np.asarray(age, dtype=float)
    target = np.asarray(target, dtype=float)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), age.shape).copy()
    tau = np.broadcast_to(np.asarray(tau, dtype=float), age.shape).copy()
    horizon = np.maximum(MAX_AGE - age, 1e-9)
    lo = np.zeros_like(age)
    hi = horizon.copy()
    beyond = _obs_cum_hazard(hi, age, alpha, beta, tau, pop) <= target
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = _obs_cum_hazard(mid, age, alpha, beta, tau, pop) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= rel_tol * np.maximum(hi, 1e-300)):
            break
    t = 0.5 * (lo + hi)
    return np.where(beyond, horizon, t)


def draw_event_time(age: float, z, theta: ParamVector, pop: WeibullPopHazard,
                    rng: np.random.Generator, z_tau=None, u: float | None = None) -> float:
    """One event time by inverse transform; ``u`` forces the uniform draw."""
    z = np.asarray(z, dtype=float)
    z_tau = z if z_tau is None else np.asarray(z_tau, dtype=float)
    if u is None:
        u = rng.random()
    target = -math.log(u) if u > 0 else math.inf
    t = draw_event_times(np.array([age]), z @ theta.gamma, theta.beta_shape, z_tau @ theta.eta, pop,
                         np.array([target]))
    return float(t[0])


def replication_seed(seed: int, b: int) -> np.random.SeedSequence:
    """Independent stream for replication ``b`` of a study with master ``seed``."""
    return np.random.SeedSequence(int(seed), spawn_key=(int(b),))


def simulate_dataset(config: SimulationConfig, rng: np.random.Generator | None = None) -> Dataset:
    """Draw ``config.n`` subjects; reproducible from ``config.seed`` when ``rng`` is None."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    theta = config.true_theta
    age, astd = draw_ages(config.ages, config.n, rng)
    z = np.column_stack([np.ones(config.n), astd])
    alpha = z @ theta.gamma[:2] if theta.n_gamma == 2 else np.full(config.n, theta.gamma[0])
    tau = z @ theta.eta[:2] if theta.n_eta == 2 else np.full(config.n, theta.eta[0])
    if np.any(alpha <= 0) or np.any(tau <= 0):
        raise ValueError("true parameters give alpha <= 0 or tau <= 0 for some sampled age")
    target = -np.log1p(-rng.random(config.n))  # -log U with U in (0, 1]
    x = draw_event_times(age, alpha, theta.beta_shape, tau, config.pop_hazard, target)
    cens = np.full(config.n, config.max_followup)
    if config.censoring == "uniform":
        cens = np.minimum(cens, config.censoring_param * config.max_followup * rng.random(config.n))
    elif config.censoring == "exponential":
        cens = np.minimum(cens, rng.exponential(1.0 / config.censoring_param, config.n))
    status = (x < cens).astype(int)
    time = np.minimum(x, cens)
    return Dataset.from_arrays(time, status, age, {AGE_STD: astd}, config.pop_hazard)


# ---------------------------------------------------------------- Monte Carlo study

@dataclass
class StudyReport:
    setting: str
    n: int
    B: int
    names: list
    true_values: list
    mean: np.ndarray
    sd: np.ndarray
    mean_se: np.ndarray
    coverage: np.ndarray
    censoring_rate: float
    n_failed: int
    estimates: np.ndarray = field(repr=False)
    ses: np.ndarray = field(repr=False)
    boundary_hits: int = 0

    def rows(self):
        for j, name in enumerate(self.names):
            yield {
                "setting": self.setting, "n": self.n, "parameter": name,
                "mean": self.mean[j], "sd": self.sd[j], "mean_se": self.mean_se[j], "cp": self.coverage[j],
            }

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not math.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]

        return {
            "schema_version": 1,
            "setting": self.setting,
            "n": self.n,
            "B": self.B,
            "n_used": int(self.estimates.shape[0]),
            "n_failed": self.n_failed,
            "boundary_hits": self.boundary_hits,
            "censoring_rate": self.censoring_rate,
            "parameters": self.names,
            "true": clean(self.true_values),
            "mean": clean(self.mean),
            "sd": clean(self.sd),
            "mean_se": clean(self.mean_se),
            "cp": clean(self.coverage),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["setting", "n", "parameter", "mean", "sd", "mean_se", "cp"])
            for r in self.rows():
                w.writerow([r["setting"], r["n"], r["parameter"]]
                           + [f"{r[c]:.6g}" for c in ("mean", "sd", "mean_se", "cp")])


def _one_replication(args):
    config, spec, b = args
    rng = np.random.default_rng(replication_seed(config.seed, b))
    data = simulate_dataset(config, rng)
    # a fixed box from the design horizon, so every replication searches the same set
    bounds = default_bounds(spec, max_followup=config.max_followup)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            res = fit(data, spec, bounds=bounds)
        except Exception as exc:
            return b, None, None, False, False, data.censoring_rate, f"{type(exc).__name__}: {exc}"
    return (b, res.estimates, res.se, res.converged, res.boundary_flagged, data.censoring_rate,
            res.message)


def run_study(config: SimulationConfig, B: int, spec: ModelSpec = SIM_SPEC, n_jobs: int = 1,
              max_fail_frac: float = 0.2) -> StudyReport:
    """Simulate-and-fit ``B`` replications; report mean, sd, mean se and coverage.

    Coverage counts Wald intervals ``theta_hat +- 1.96 se`` containing the
    truth. Replications that fail to converge or lack standard errors are
    dropped and counted; above ``max_fail_frac`` the study is aborted.
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    jobs = [(config, spec, b) for b in range(B)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            out = list(ex.map(_one_replication, jobs, chunksize=max(1, B // (4 * n_jobs))))
    else:
        out = [_one_replication(j) for j in jobs]
    out.sort(key=lambda r: r[0])
    good = [r for r in out if r[1] is not None and r[3] and np.all(np.isfinite(r[2]))]
    failed = [{"replication": r[0], "reason": r[6]} for r in out if r not in good]
    if len(failed) > max_fail_frac * B:
        raise StudyAborted(f"{len(failed)} of {B} replications failed", failed)
    est = np.array([r[1] for r in good])
    se = np.array([r[2] for r in good])
    truth = config.true_theta.to_array()
    cover = np.abs(est - truth) <= 1.96 * se
    return StudyReport(
        setting=config.name, n=config.n, B=B, names=spec.param_names, true_values=truth.tolist(),
        mean=est.mean(axis=0), sd=est.std(axis=0, ddof=1), mean_se=se.mean(axis=0),
        coverage=cover.mean(axis=0), censoring_rate=float(np.mean([r[5] for r in out])),
        n_failed=len(failed), estimates=est, ses=se, boundary_hits=sum(bool(r[4]) for r in good),
    )


def _alpha_tau_feasible(spec: ModelSpec, config: SimulationConfig):
    lo, hi = config.ages.support
    zs = config.ages.standardize([lo, hi])
    za = np.column_stack([np.ones(2), zs])
    ng = spec.n_gamma

    def ok(x):
        return bool(x[ng] > 1 and np.all(za @ x[:ng] > 0) and np.all(za @ x[ng + 1:] > 0))
    return ok


def initial_value_study(config: SimulationConfig, K: int, B: int, spec: ModelSpec = SIM_SPEC,
                        init_seed: int = 0, bounds=None) -> dict:
    """Robustness of the estimates to the optimizer's starting point.

    Draws ``K`` starting points uniformly in the box (rejecting those with
    alpha or tau non-positive anywhere on the age support), fits each of ``B``
    simulated datasets from every start, and averages the estimates over
    replications for each start.
    """
    bounds = bounds or default_bounds(spec, max_followup=config.max_followup)
    rng = np.random.default_rng(init_seed)
    feasible = _alpha_tau_feasible(spec, config)
    inits = np.array([draw_feasible_init(rng, bounds, feasible) for _ in range(K)])
    est = np.full((K, B, spec.k), np.nan)
    for b in range(B):
        data = simulate_dataset(config, np.random.default_rng(replication_seed(config.seed, b)))
        for k in range(K):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                try:
                    res = fit(data, spec, init=inits[k], bounds=bounds)
                except ValueError:
                    continue
            if res.converged:
                est[k, b] = res.estimates
    means = np.nanmean(est, axis=1)
    truth = config.true_theta.to_array()
    bias = means - truth
    return {
        "names": spec.param_names,
        "inits": inits,
        "estimates": est,
        "mean_by_init": means,
        "bias_by_init": bias,
        "bias_range": bias.max(axis=0) - bias.min(axis=0),
        "relative_range": (bias.max(axis=0) - bias.min(axis=0)) / np.abs(truth),
        "n_failed": int(np.isnan(est[..., 0]).sum()),
    }


def study_config_dict(report: StudyReport, config: SimulationConfig) -> dict:
    return {"config": config.to_dict(), "report": report.to_dict()}

