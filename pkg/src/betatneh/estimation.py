"""Maximum likelihood fitting of the beta-TNEH excess hazard model.

The log-likelihood drops the population cumulative hazard (it does not depend
on the parameters)::

    l(theta) = sum_i delta_i * log(lambda_pop_i + lambda_exc(t_i)) - Lambda_exc(t_i)

It is maximized over a box with L-BFGS-B. When an estimate ends on a bound the
box is widened and the fit restarted from the previous optimum; bounds still
hit after ``max_expansions`` rounds are reported in ``FitResult.boundary_hits``.
Standard errors come from the counting-process information estimate
``I = n^-1 sum_i delta_i (d lambda_exc / d theta)^{x2} / lambda_obs_i^2``.
"""
from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from .lifetable import LifeTable, WeibullPopHazard
from .model_core import (
    ModelSpec,
    ParamVector,
    cum_hazard_shape_grad,
    hazard_from_shapes,
    hazard_score_from_shapes,
)
from .special_fn import log_beta_array, inc_beta_unreg_array

__all__ = [
    "SCHEMA_VERSION",
    "SurvivalRecord",
    "Dataset",
    "FitResult",
    "DerivedEstimate",
    "IdentifiabilityReport",
    "SweepReport",
    "IdentifiabilityError",
    "default_bounds",
    "default_init",
    "loglik",
    "loglik_gradient",
    "fit",
    "fisher_info",
    "covariance_from_fisher",
    "delta_method_ci",
    "check_identifiability",
    "initial_value_sweep",
    "select_by_aic",
    "draw_feasible_init",
]

SCHEMA_VERSION = 1
ZERO_TIME_FLOOR = 1.0 / 365.25
BOUND_TOL = 1e-6
BETA_MIN = 1.0 + 1e-6
_SHAPE_FLOOR = 1e-6
_PENALTY = 1e6


class IdentifiabilityError(ValueError):
    """Design matrix has no usable columns (e.g. zero rows)."""


@dataclass(frozen=True)
class SurvivalRecord:
    t: float
    delta: int
    a: float
    z: Mapping[str, float] = field(default_factory=dict)


@dataclass
class Dataset:
    """Columnar survival data with the population hazard precomputed per record.

    ``pop_rate[i]`` is the background hazard at attained age ``age[i] + time[i]``.
    """

    time: np.ndarray
    status: np.ndarray
    age: np.ndarray
    covariates: dict
    pop_rate: np.ndarray

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.status = np.asarray(self.status, dtype=int)
        self.age = np.asarray(self.age, dtype=float)
        self.pop_rate = np.asarray(self.pop_rate, dtype=float)
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        n = self.time.shape[0]
        if not (self.status.shape[0] == self.age.shape[0] == self.pop_rate.shape[0] == n):
            raise ValueError("time, status, age and pop_rate must have equal length")
        for k, v in self.covariates.items():
            if v.shape[0] != n:
                raise ValueError(f"covariate {k!r} has length {v.shape[0]}, expected {n}")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"covariate {k!r} has non-finite values")
        if not np.all(np.isfinite(self.time)) or np.any(self.time < 0):
            raise ValueError("times must be finite and >= 0")
        if not np.all(np.isin(self.status, (0, 1))):
            raise ValueError("status must be 0 or 1")
        if np.any(self.pop_rate < 0) or not np.all(np.isfinite(self.pop_rate)):
            raise ValueError("population rates must be finite and >= 0")

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def censoring_rate(self) -> float:
        return float(1.0 - self.status.mean()) if self.n else float("nan")

    @classmethod
    def from_arrays(cls, time, status, age, covariates=None, pop=None, sex=None, year=None,
                    static_year: bool = False) -> "Dataset":
        """Build a dataset, evaluating ``pop`` at each attained age.

        ``pop`` is a :class:`WeibullPopHazard`, a :class:`LifeTable` (then
        ``sex`` and diagnosis ``year`` are per-record sequences), or an array
        of precomputed rates.
        """
        time = np.asarray(time, dtype=float)
        age = np.asarray(age, dtype=float)
        if isinstance(pop, WeibullPopHazard):
            rate = pop.hazard(age + time)
        elif isinstance(pop, LifeTable):
            if sex is None or year is None:
                raise ValueError("a life table needs per-record sex and year")
            sex = np.broadcast_to(np.asarray(sex), time.shape)
            year = np.broadcast_to(np.asarray(year, dtype=float), time.shape)
            rate = np.array([
                pop.hazard(a + t, s, y if static_year else y + t)
                for t, a, s, y in zip(time, age, sex, year)
            ])
        elif pop is None:
            raise ValueError("a population hazard source is required")
        else:
            rate = np.broadcast_to(np.asarray(pop, dtype=float), time.shape).copy()
        return cls(time, status, age, dict(covariates or {}), rate)

    @classmethod
    def from_records(cls, records: Sequence[SurvivalRecord], pop, **kw) -> "Dataset":
        names = sorted({k for r in records for k in r.z})
        cov = {k: [r.z[k] for r in records] for k in names}
        return cls.from_arrays([r.t for r in records], [r.delta for r in records],
                               [r.a for r in records], cov, pop, **kw)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.time[idx], self.status[idx], self.age[idx],
                       {k: v[idx] for k, v in self.covariates.items()}, self.pop_rate[idx])


class _Problem:
    """Arrays of one (dataset, spec) pair laid out for fast likelihood evaluation."""

    def __init__(self, data: Dataset, spec: ModelSpec):
        self.spec = spec
        self.za, self.zt = spec.design_matrices(data.covariates, n=data.n)
        self.t = np.where(data.time > 0, data.time, ZERO_TIME_FLOOR)
        self.d = data.status.astype(float)
        self.ev = data.status == 1
        self.lp = data.pop_rate
        self.n = data.n
        self.ng = spec.n_gamma

    def shapes(self, x):
        x = np.asarray(x, dtype=float)
        a = self.za @ x[: self.ng]
        b = x[self.ng]
        tau = self.zt @ x[self.ng + 1:]
        return a, b, tau

    def feasible(self, x) -> bool:
        a, b, tau = self.shapes(x)
        return bool(b > 1.0 and np.all(a > 0) and np.all(tau > 0))

    def value(self, x) -> float:
        if not self.feasible(x):
            return -math.inf
        a, b, tau = self.shapes(x)
        te, ae, taue = self.t[self.ev], a[self.ev], tau[self.ev]
        obs = self.lp[self.ev] + hazard_from_shapes(te, ae, b, taue)
        if np.any(obs <= 0):
            return -math.inf
        u = np.minimum(self.t / tau, 1.0)
        cum = tau * inc_beta_unreg_array(u, a, b)
        return float(np.sum(np.log(obs)) - np.sum(cum))

    def value_and_grad(self, x):
        if not self.feasible(x):
            return -math.inf, np.full(len(x), np.nan)
        ll, grad, _ = self._extended(x)
        if not math.isfinite(ll):
            return -math.inf, np.full(len(x), np.nan)
        return ll, grad

    def objective(self, x):
        """Negative log-likelihood and gradient, continuously extended off the feasible set.

        Per-record alpha and tau below ``_SHAPE_FLOOR`` are clipped to it and a
        quadratic penalty on the violation is added, so a line search that
        overshoots sees a finite, steep objective pointing back inside.
        """
        ll, grad, pen = self._extended(x)
        return -ll + pen[0], -grad + pen[1]

    def _extended(self, x):
        x = np.asarray(x, dtype=float)
        a_raw, b, tau_raw = self.shapes(x)
        a = np.maximum(a_raw, _SHAPE_FLOOR)
        tau = np.maximum(tau_raw, _SHAPE_FLOOR)
        lam = hazard_from_shapes(self.t, a, b, tau)
        obs = self.lp + lam
        obs_ev = obs[self.ev]
        if np.any(obs_ev <= 0):
            ll_events = -math.inf
        else:
            ll_events = float(np.sum(np.log(obs_ev)))
        cum, dc_a, dc_b, dc_tau = cum_hazard_shape_grad(self.t, a, b, tau)
        dl_a, dl_b, dl_tau = hazard_score_from_shapes(self.t, a, b, tau)
        w = np.where(self.ev & (obs > 0), self.d / np.where(obs > 0, obs, 1.0), 0.0)
        g_a = np.where(a_raw < _SHAPE_FLOOR, 0.0, w * dl_a - dc_a)
        g_b = w * dl_b - dc_b
        g_tau = np.where(tau_raw < _SHAPE_FLOOR, 0.0, w * dl_tau - dc_tau)
        ll = ll_events - float(np.sum(cum))
        grad = np.concatenate([self.za.T @ g_a, [g_b.sum()], self.zt.T @ g_tau])
        va = np.maximum(_SHAPE_FLOOR - a_raw, 0.0)
        vt = np.maximum(_SHAPE_FLOOR - tau_raw, 0.0)
        m = _PENALTY * self.n
        pen = m * float(va @ va + vt @ vt)
        dpen = np.concatenate([self.za.T @ (-2 * m * va), [0.0], self.zt.T @ (-2 * m * vt)])
        return ll, grad, (pen, dpen)

    def scores(self, x) -> np.ndarray:
        """Per-record ``delta_i * (d lambda / d theta) / lambda_obs``, shape (n, k)."""
        a, b, tau = self.shapes(x)
        lam = hazard_from_shapes(self.t, a, b, tau)
        obs = self.lp + lam
        # the gradient is undefined exactly at t = tau; nudge inside
        t = np.where(self.t == tau, tau * (1 - 1e-12), self.t)
        dl_a, dl_b, dl_tau = hazard_score_from_shapes(t, a, b, tau)
        w = np.where(self.ev & (obs > 0), self.d / np.where(obs > 0, obs, 1.0), 0.0)
        return np.column_stack([
            (w * dl_a)[:, None] * self.za,
            (w * dl_b)[:, None],
            (w * dl_tau)[:, None] * self.zt,
        ])


def _as_array(theta) -> np.ndarray:
    return theta.to_array() if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)


def loglik(theta, data: Dataset, spec: ModelSpec) -> float:
    """Log-likelihood; ``-inf`` when alpha or tau is non-positive for some record."""
    return _Problem(data, spec).value(_as_array(theta))


def loglik_gradient(theta, data: Dataset, spec: ModelSpec) -> np.ndarray:
    return _Problem(data, spec).value_and_grad(_as_array(theta))[1]


# ---------------------------------------------------------------- bounds and inits

def _max_followup(data: Dataset) -> float:
    return float(np.max(data.time)) if data.n else 1.0


def default_bounds(spec: ModelSpec, data: Dataset | None = None, max_followup: float | None = None):
    """Box ``[(lo, hi), ...]`` in parameter order, with ``spec.bounds`` overrides applied."""
    if max_followup is None:
        max_followup = _max_followup(data)
    tau_max = max(max_followup, 1e-3) * 1.5
    if spec.tau_upper_cap is not None:
        tau_max = min(tau_max, spec.tau_upper_cap)
    box = {}
    for name in spec.param_names:
        if name.startswith("gamma"):
            box[name] = (-10.0, 10.0)
        elif name == "beta":
            box[name] = (BETA_MIN, 30.0)
        elif name == "eta0":
            box[name] = (0.1, tau_max)
        else:
            box[name] = (-tau_max, tau_max)
    box.update({k: (float(lo), float(hi)) for k, (lo, hi) in spec.bounds.items()})
    return [box[name] for name in spec.param_names]


def default_init(spec: ModelSpec, data: Dataset, bounds=None) -> ParamVector:
    """gamma = (1, 0, ...), beta = 2, eta = (2 * median positive event time, 0, ...), clipped into the box."""
    bounds = bounds or default_bounds(spec, data)
    ev = data.time[(data.status == 1) & (data.time > 0)]
    med = float(np.median(ev)) if ev.size else _max_followup(data) / 2
    x = np.zeros(spec.k)
    x[0] = 1.0
    x[spec.n_gamma] = 2.0
    x[spec.n_gamma + 1] = 2.0 * med
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    width = hi - lo
    x = np.clip(x, lo + 1e-3 * width, hi - 1e-3 * width)
    return ParamVector.from_array(x, spec.n_gamma)


def _screened_starts(prob, spec: ModelSpec, data: Dataset, bounds, n: int) -> list:
    """The ``n`` best points, by log-likelihood, of a coarse intercept-only grid."""
    if n <= 0:
        return []
    ev = data.time[(data.status == 1) & (data.time > 0)]
    med = float(np.median(ev)) if ev.size else _max_followup(data) / 2
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    width = hi - lo
    scored = []
    for g0, b, e0 in itertools.product((1.0, 2.5, 5.0), (2.0, 5.0, 10.0),
                                       (med, 2 * med, 4 * med, _max_followup(data))):
        x = np.zeros(spec.k)
        x[0], x[spec.n_gamma], x[spec.n_gamma + 1] = g0, b, e0
        x = np.clip(x, lo + 1e-3 * width, hi - 1e-3 * width)
        if prob.feasible(x):
            v = prob.value(x)
            if math.isfinite(v):
                scored.append((v, x))
    scored.sort(key=lambda vx: -vx[0])
    return [x for _, x in scored[:n]]


def draw_feasible_init(rng: np.random.Generator, bounds, feasible, max_tries: int = 100_000) -> np.ndarray:
    """Uniform draw from the box, rejecting points where ``feasible`` is false."""
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    for _ in range(max_tries):
        x = rng.uniform(lo, hi)
        if feasible(x):
            return x
    raise RuntimeError("no feasible initial value found in the box")


# ---------------------------------------------------------------- results

@dataclass
class DerivedEstimate:
    target: str
    profile: dict
    estimate: float
    se: float
    lower: float
    upper: float
    level: float = 0.95
    t: float | None = None
    valid: bool = True
    warning: str | None = None

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("target", "profile", "estimate", "se", "lower", "upper", "level", "valid", "warning")}
        if self.t is not None:
            d["t"] = self.t
        return d

    def __str__(self):
        return f"{self.estimate:.2f} [{self.lower:.2f}, {self.upper:.2f}]"


@dataclass
class IdentifiabilityReport:
    ok: bool
    alpha_rank: int
    tau_rank: int
    details: list = field(default_factory=list)


@dataclass
class FitResult:
    spec: ModelSpec
    theta_hat: ParamVector
    covariance: np.ndarray
    se: np.ndarray
    loglik: float
    converged: bool
    boundary_hits: dict
    expansions_performed: int
    bounds: list
    n: int
    n_events: int
    message: str = ""
    n_iter: int = 0
    identifiability: IdentifiabilityReport | None = None
    derived: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.spec.k

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.k

    @property
    def estimates(self) -> np.ndarray:
        return self.theta_hat.to_array()

    @property
    def names(self) -> list[str]:
        return self.spec.param_names

    @property
    def boundary_flagged(self) -> bool:
        return any(v is not None for v in self.boundary_hits.values())

    def to_dict(self) -> dict:
        def clean(v):
            v = float(v)
            return v if math.isfinite(v) else None

        return {
            "schema_version": SCHEMA_VERSION,
            "model": "beta-tneh",
            "alpha_design": list(self.spec.alpha_design),
            "tau_design": list(self.spec.tau_design),
            "parameters": [
                {
                    "name": name,
                    "covariate": col,
                    "estimate": clean(est),
                    "se": clean(se),
                    "lower_bound": lo,
                    "upper_bound": hi,
                    "boundary_hit": self.boundary_hits.get(name),
                }
                for name, col, est, se, (lo, hi) in zip(
                    self.names, self.spec.param_columns, self.estimates, self.se, self.bounds)
            ],
            "covariance": [clean(v) for v in np.asarray(self.covariance).ravel()],
            "loglik": self.loglik,
            "aic": self.aic,
            "k": self.k,
            "n": self.n,
            "n_events": self.n_events,
            "converged": self.converged,
            "expansions_performed": self.expansions_performed,
            "message": self.message,
            "identifiability": None if self.identifiability is None else {
                "ok": self.identifiability.ok,
                "alpha_rank": self.identifiability.alpha_rank,
                "tau_rank": self.identifiability.tau_rank,
                "details": self.identifiability.details,
            },
            "derived": [d.to_dict() for d in self.derived],
            "warnings": list(self.warnings),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitResult":
        """Rebuild a fit from :meth:`to_dict` output (derived blocks are dropped)."""
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema_version {version!r}")
        spec = ModelSpec(alpha_design=tuple(d["alpha_design"]), tau_design=tuple(d["tau_design"]))
        params = d["parameters"]
        if [p["name"] for p in params] != spec.param_names:
            raise ValueError("parameter names do not match the designs")

        def num(v):
            return math.nan if v is None else float(v)

        x = np.array([num(p["estimate"]) for p in params])
        k = spec.k
        cov = np.array([num(v) for v in d["covariance"]]).reshape(k, k)
        return cls(
            spec=spec, theta_hat=ParamVector.from_array(x, spec.n_gamma), covariance=cov,
            se=np.array([num(p["se"]) for p in params]), loglik=float(d["loglik"]),
            converged=bool(d["converged"]),
            boundary_hits={p["name"]: p.get("boundary_hit") for p in params},
            expansions_performed=int(d.get("expansions_performed", 0)),
            bounds=[(float(p["lower_bound"]), float(p["upper_bound"])) for p in params],
            n=int(d.get("n", 0)), n_events=int(d.get("n_events", 0)), message=str(d.get("message", "")),
            warnings=list(d.get("warnings", [])),
        )


# ---------------------------------------------------------------- information and SEs

def fisher_info(theta, data: Dataset, spec: ModelSpec) -> np.ndarray:
    """Information estimate ``n^-1 sum_i s_i s_i^T`` over death records."""
    prob = _Problem(data, spec)
    s = prob.scores(_as_array(theta))
    if prob.n == 0:
        return np.zeros((spec.k, spec.k))
    info = s.T @ s / prob.n
    return 0.5 * (info + info.T)


def covariance_from_fisher(info: np.ndarray, n: int) -> np.ndarray:
    """``n^-1 I^-1``, or an all-NaN matrix when ``I`` is singular."""
    k = info.shape[0]
    eig = np.linalg.eigvalsh(info) if k else np.array([])
    if k == 0 or n == 0 or eig.max() <= 0 or eig.min() <= 1e-12 * eig.max():
        return np.full((k, k), np.nan)
    cov = np.linalg.inv(n * info)
    return 0.5 * (cov + cov.T)


# ---------------------------------------------------------------- fitting

def _bound_hits(x, bounds, tol=BOUND_TOL):
    hits = {}
    for j, (v, (lo, hi)) in enumerate(zip(x, bounds)):
        w = tol * (hi - lo)
        if v <= lo + w:
            hits[j] = "lower"
        elif v >= hi - w:
            hits[j] = "upper"
    return hits


def _expand(name: str, side: str, bound, cap: float | None):
    """New (lo, hi) after widening one side, or None when it cannot move."""
    lo, hi = bound
    width = hi - lo
    if name == "beta" and side == "lower":
        return None  # beta > 1 is a model constraint
    if name == "eta0":
        if side == "lower":
            return (lo / 2.0, hi) if lo > 1e-6 else None
        new_hi = hi * 1.5
        if cap is not None:
            if hi >= cap:
                return None
            new_hi = min(new_hi, cap)
        return (lo, new_hi)
    return (lo - width, hi) if side == "lower" else (lo, hi + width)


def _projected_grad(x, g, bounds):
    pg = np.array(g, dtype=float)
    for j, (lo, hi) in enumerate(bounds):
        if x[j] <= lo and pg[j] > 0:
            pg[j] = 0.0
        elif x[j] >= hi and pg[j] < 0:
            pg[j] = 0.0
    return pg


def fit(data: Dataset, spec: ModelSpec, init=None, bounds=None) -> FitResult:
    """Maximize the log-likelihood over the box, widening bounds that are hit.

    Args:
        data: survival records with precomputed population rates.
        spec: covariate designs and optimizer settings.
        init: starting point (``ParamVector`` or array); must be inside the
            box with alpha(z) > 0 and tau(z) > 0 for every record.
        bounds: explicit box; defaults to :func:`default_bounds`.
    """
    if data.n == 0:
        raise ValueError("cannot fit an empty dataset")
    prob = _Problem(data, spec)
    bounds = [tuple(map(float, b)) for b in (bounds or default_bounds(spec, data))]
    x0 = _as_array(init) if init is not None else default_init(spec, data, bounds).to_array()
    if x0.shape[0] != spec.k:
        raise ValueError(f"init has {x0.shape[0]} parameters, spec needs {spec.k}")
    for j, (v, (lo, hi)) in enumerate(zip(x0, bounds)):
        if not lo <= v <= hi:
            raise ValueError(f"init {spec.param_names[j]}={v} outside [{lo}, {hi}]")
    if not prob.feasible(x0):
        raise ValueError("init gives alpha(z) <= 0 or tau(z) <= 0 for some record")
    ident = check_identifiability(spec, data)

    # per-record scale keeps the first quasi-Newton step O(1)
    scale = float(max(prob.n, 1))

    def scaled(x):
        f, g = prob.objective(x)
        return f / scale, g / scale

    def run(start, box):
        return minimize(scaled, start, jac=True, method="L-BFGS-B", bounds=box,
                        options={"ftol": spec.ftol, "gtol": spec.gtol / scale, "maxiter": spec.maxiter,
                                 "maxcor": 20})

    # the likelihood can be multimodal: polish the best of several starts
    res = run(x0, bounds)
    total_iter = res.nit
    for start in _screened_starts(prob, spec, data, bounds, spec.n_starts):
        alt = run(start, bounds)
        total_iter += alt.nit
        if alt.fun < res.fun - 1e-12:
            res = alt

    expansions = 0
    names = spec.param_names
    while True:
        x = np.clip(res.x, [b[0] for b in bounds], [b[1] for b in bounds])
        hits = _bound_hits(x, bounds)
        moved = False
        if expansions < spec.max_expansions:
            for j, side in hits.items():
                nb = _expand(names[j], side, bounds[j], spec.tau_upper_cap)
                if nb is not None:
                    bounds[j] = nb
                    moved = True
        if not moved:
            break
        expansions += 1
        res = run(x, bounds)
        total_iter += res.nit

    ll, g = prob.value_and_grad(x)
    pg = _projected_grad(x, g, bounds)
    # L-BFGS-B may stop on a failed line search right at the optimum; accept
    # that when the projected gradient is small on the per-record scale.
    converged = bool(math.isfinite(ll) and (
        res.success or np.max(np.abs(pg)) <= 1e-4 * max(prob.n, 1)))
    boundary_hits = {name: None for name in names}
    for j, side in hits.items():
        boundary_hits[names[j]] = side
    theta = ParamVector.from_array(x, spec.n_gamma)
    info = fisher_info(theta, data, spec)
    cov = covariance_from_fisher(info, data.n)
    se = np.sqrt(np.clip(np.diag(cov), 0, None)) if np.all(np.isfinite(cov)) else np.full(spec.k, np.nan)
    notes = []
    if not ident.ok:
        notes.extend(ident.details)
    for name, side in boundary_hits.items():
        if side is not None:
            notes.append(f"{name} estimate equals its {side} bound after {expansions} expansion(s); "
                         "standard errors and derived intervals should be interpreted with caution")
    if not np.all(np.isfinite(se)):
        notes.append("information matrix is singular; standard errors not available")
    return FitResult(
        spec=spec, theta_hat=theta, covariance=cov, se=se, loglik=ll, converged=converged,
        boundary_hits=boundary_hits, expansions_performed=expansions, bounds=bounds,
        n=data.n, n_events=int(data.status.sum()), message=str(res.message), n_iter=total_iter,
        identifiability=ident, warnings=notes,
    )


def select_by_aic(fits: Sequence[FitResult]) -> int:
    """Index of the fit with the smallest AIC."""
    return int(np.argmin([f.aic for f in fits]))


# ---------------------------------------------------------------- delta method

def _target_fn(target: str, spec: ModelSpec, profile: Mapping[str, float], t: float | None):
    za, zt = spec.profile_vectors(profile)
    ng = spec.n_gamma

    def parts(x):
        return za @ x[:ng], x[ng], zt @ x[ng + 1:]

    if target == "tneh":
        return (lambda x: float(parts(x)[2])), True
    if target == "cure_fraction":
        def g(x):
            a, b, tau = parts(x)
            return float(np.exp(-tau * np.exp(log_beta_array(a, b))))
        return g, False
    if target == "net_survival":
        if t is None:
            raise ValueError("net_survival target needs a time t")

        def g(x):
            a, b, tau = parts(x)
            u = min(t / tau, 1.0)
            return float(np.exp(-tau * inc_beta_unreg_array(u, a, b)))
        return g, False
    raise ValueError(f"unknown target {target!r}; use cure_fraction, tneh or net_survival")


def _fd_gradient(g, x, rel=1e-5):
    grad = np.empty_like(x)
    for j in range(x.shape[0]):
        h = rel * max(abs(x[j]), 1.0)
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        grad[j] = (g(xp) - g(xm)) / (2 * h)
    return grad


def delta_method_ci(fit_result: FitResult, target: str, profile: Mapping[str, float] | None = None,
                    t: float | None = None, level: float = 0.95) -> DerivedEstimate:
    """Wald interval for a smooth function of the estimates.

    ``target`` is ``"cure_fraction"``, ``"tneh"`` or ``"net_survival"`` (needs
    ``t``). The gradient is exact for the TNEH, which is linear in eta, and a
    central difference (step ``1e-5 * max(|theta_j|, 1)``) otherwise.
    Probabilities have their intervals clipped to [0, 1].
    """
    profile = dict(profile or {})
    spec = fit_result.spec
    x = fit_result.estimates
    g, linear = _target_fn(target, spec, profile, t)
    est = g(x)
    if linear:
        _, zt = spec.profile_vectors(profile)
        grad = np.zeros(spec.k)
        grad[spec.n_gamma + 1:] = zt
    else:
        grad = _fd_gradient(g, x)
    cov = fit_result.covariance
    var = float(grad @ cov @ grad)
    se = math.sqrt(max(var, 0.0)) if math.isfinite(var) else math.nan
    zq = float(norm.ppf(0.5 + level / 2))
    lo, hi = est - zq * se, est + zq * se
    if target != "tneh":
        lo, hi = max(lo, 0.0), min(hi, 1.0)
    warning = None
    if fit_result.boundary_flagged:
        hit = [k for k, v in fit_result.boundary_hits.items() if v]
        warning = f"estimate(s) at a bound ({', '.join(hit)}); interval may be unreliable"
    elif not math.isfinite(se):
        warning = "standard error not available"
    return DerivedEstimate(target, profile, est, se, lo, hi, level, t, warning is None, warning)


# ---------------------------------------------------------------- identifiability

def _rank(m: np.ndarray, rel_tol: float = 1e-10) -> int:
    if m.size == 0:
        return 0
    s = np.linalg.svd(m, compute_uv=False)
    return int(np.sum(s > rel_tol * s[0])) if s[0] > 0 else 0


def check_identifiability(spec: ModelSpec, data: Dataset) -> IdentifiabilityReport:
    """Column-rank check of the alpha and tau designs over the observed covariates.

    Full column rank of both linear designs makes ``z -> alpha(z)`` and
    ``z -> tau(z)`` identifiable, which is sufficient for the whole model.
    Never raises for rank deficiency; returns ``ok=False`` with details.
    """
    za, zt = spec.design_matrices(data.covariates, n=data.n)
    ra, rt = _rank(za), _rank(zt)
    details = []
    if ra < za.shape[1]:
        details.append(f"alpha design is rank deficient: rank {ra} < {za.shape[1]} columns "
                       f"({', '.join(['intercept', *spec.alpha_design])})")
    if rt < zt.shape[1]:
        details.append(f"tau design is rank deficient: rank {rt} < {zt.shape[1]} columns "
                       f"({', '.join(['intercept', *spec.tau_design])})")
    return IdentifiabilityReport(not details, ra, rt, details)


# ---------------------------------------------------------------- initial-value sweep

@dataclass
class SweepReport:
    names: list
    inits: np.ndarray
    estimates: np.ndarray
    logliks: np.ndarray
    failures: list

    @property
    def ranges(self) -> np.ndarray:
        ok = np.all(np.isfinite(self.estimates), axis=1)
        if not ok.any():
            return np.full(len(self.names), np.nan)
        e = self.estimates[ok]
        return e.max(axis=0) - e.min(axis=0)

    @property
    def max_loglik_gap(self) -> float:
        ll = self.logliks[np.isfinite(self.logliks)]
        return float(ll.max() - ll.min()) if ll.size else math.nan

    def to_dict(self) -> dict:
        def clean(a):
            return [[None if not math.isfinite(v) else float(v) for v in row] for row in a]

        return {
            "schema_version": SCHEMA_VERSION,
            "parameters": self.names,
            "K": int(self.inits.shape[0]),
            "inits": clean(self.inits),
            "estimates": clean(self.estimates),
            "logliks": [None if not math.isfinite(v) else float(v) for v in self.logliks],
            "ranges": {n: (None if not math.isfinite(r) else float(r))
                       for n, r in zip(self.names, self.ranges)},
            "max_loglik_gap": self.max_loglik_gap,
            "failures": self.failures,
        }


def initial_value_sweep(data: Dataset, spec: ModelSpec, K: int, seed, bounds=None) -> SweepReport:
    """Fit from K initial values drawn uniformly in the box.

    ``seed`` is an int (init k uses the k-th child of its seed sequence) or a
    sequence of K per-init seeds. Failed fits are recorded and skipped.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    prob = _Problem(data, spec)
    bounds = bounds or default_bounds(spec, data)
    if isinstance(seed, (list, tuple, np.ndarray)):
        if len(seed) != K:
            raise ValueError("need one seed per initial value")
        rngs = [np.random.default_rng(int(s)) for s in seed]
    else:
        rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(K)]
    inits = np.full((K, spec.k), np.nan)
    est = np.full((K, spec.k), np.nan)
    lls = np.full(K, np.nan)
    failures = []
    for k, rng in enumerate(rngs):
        try:
            x0 = draw_feasible_init(rng, bounds, prob.feasible)
            inits[k] = x0
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = fit(data, spec, init=x0, bounds=bounds)
            if not res.converged:
                failures.append({"index": k, "reason": f"not converged: {res.message}"})
            est[k] = res.estimates
            lls[k] = res.loglik
        except Exception as exc:  # keep sweeping
            failures.append({"index": k, "reason": f"{type(exc).__name__}: {exc}"})
    return SweepReport(spec.param_names, inits, est, lls, failures)
