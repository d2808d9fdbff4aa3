"""Beta-TNEH excess hazard: hazard, cumulative hazard, net survival, cure fraction.

The excess hazard of a subject with covariates ``z`` is

    lambda(t) = (t / tau)^(alpha - 1) * (1 - t / tau)^(beta - 1)   for 0 <= t <= tau
    lambda(t) = 0                                                  for t > tau

with ``alpha = gamma . z_alpha`` and ``tau = eta . z_tau`` (identity links) and
a scalar shape ``beta > 1``. ``tau`` is the time-to-null-excess-hazard (TNEH).
Integrating gives ``Lambda(t) = tau * B(alpha, beta) * I_{min(t, tau)/tau}(alpha, beta)``
and a cure fraction ``exp(-tau * B(alpha, beta))``.

Design vectors always start with the intercept slot (value 1).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .special_fn import inc_beta_reg_array, inc_beta_unreg_array, log_beta_array

__all__ = [
    "INTERCEPT",
    "ShapeError",
    "InvalidParameterError",
    "BoundaryGradientError",
    "ParamVector",
    "ModelSpec",
    "alpha_of",
    "tau_of",
    "excess_hazard",
    "cum_excess_hazard",
    "net_survival",
    "cure_fraction",
    "hazard_gradient",
    "nmcm_form",
    "hazard_from_shapes",
    "cum_hazard_from_shapes",
    "cum_hazard_shape_grad",
    "hazard_score_from_shapes",
]

INTERCEPT = "intercept"

# relative step for central differences of B_x(a, b) in its shape arguments
_SHAPE_STEP = 1e-5


class ShapeError(ValueError):
    """Covariate vector and coefficient vector lengths disagree."""


class InvalidParameterError(ValueError):
    """alpha(z) <= 0 or tau(z) <= 0 at the requested covariates."""


class BoundaryGradientError(ValueError):
    """Hazard gradient requested at t = 0 or t = tau, where it is undefined."""


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Full parameter vector ``theta = (gamma, beta, eta)``."""

    gamma: np.ndarray
    beta_shape: float
    eta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gamma", np.atleast_1d(np.asarray(self.gamma, dtype=float)))
        object.__setattr__(self, "eta", np.atleast_1d(np.asarray(self.eta, dtype=float)))
        object.__setattr__(self, "beta_shape", float(self.beta_shape))

    @property
    def n_gamma(self) -> int:
        return self.gamma.shape[0]

    @property
    def n_eta(self) -> int:
        return self.eta.shape[0]

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.gamma, [self.beta_shape], self.eta])

    @classmethod
    def from_array(cls, x, n_gamma: int) -> "ParamVector":
        x = np.asarray(x, dtype=float)
        return cls(x[:n_gamma], x[n_gamma], x[n_gamma + 1:])

    def __len__(self):
        return self.n_gamma + 1 + self.n_eta

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.n_gamma == other.n_gamma and np.array_equal(self.to_array(), other.to_array())

    __hash__ = None


@dataclass(frozen=True)
class ModelSpec:
    """Covariate designs for alpha and tau plus optimizer settings.

    ``alpha_design`` and ``tau_design`` list covariate columns in addition to
    the intercept, which is always present. ``bounds`` overrides the default
    box for any parameter by name (``gamma0``, ``gamma1``, ..., ``beta``,
    ``eta0``, ...). ``n_starts`` is the number of extra data-driven starting
    points the optimizer tries besides the caller's; 0 disables multi-start.
    """

    alpha_design: tuple = ()
    tau_design: tuple = ()
    bounds: Mapping[str, tuple] = field(default_factory=dict)
    max_expansions: int = 5
    tau_upper_cap: float | None = None
    ftol: float = 1e-12
    gtol: float = 1e-6
    maxiter: int = 2000
    n_starts: int = 3

    def __post_init__(self):
        object.__setattr__(self, "alpha_design", tuple(self.alpha_design))
        object.__setattr__(self, "tau_design", tuple(self.tau_design))
        object.__setattr__(self, "bounds", dict(self.bounds))
        for name, (lo, hi) in self.bounds.items():
            if name not in self.param_names:
                raise ValueError(f"unknown parameter in bounds: {name!r}")
            if not lo < hi:
                raise ValueError(f"empty interval for {name}: [{lo}, {hi}]")
        if self.n_starts < 0:
            raise ValueError("n_starts must be >= 0")
        if "beta" in self.bounds and self.bounds["beta"][0] < 1.0 + 1e-6:
            raise ValueError("beta lower bound must be >= 1 + 1e-6")
        if "eta0" in self.bounds and self.bounds["eta0"][0] <= 0:
            raise ValueError("eta0 (tau intercept) lower bound must be > 0")

    @property
    def n_gamma(self) -> int:
        return 1 + len(self.alpha_design)

    @property
    def n_eta(self) -> int:
        return 1 + len(self.tau_design)

    @property
    def k(self) -> int:
        return self.n_gamma + 1 + self.n_eta

    @property
    def param_names(self) -> list[str]:
        return ([f"gamma{j}" for j in range(self.n_gamma)] + ["beta"]
                + [f"eta{j}" for j in range(self.n_eta)])

    @property
    def param_columns(self) -> list[str]:
        """Covariate attached to each parameter (``intercept`` / ``-`` for beta)."""
        return ([INTERCEPT, *self.alpha_design] + ["-"] + [INTERCEPT, *self.tau_design])

    @property
    def covariates(self) -> list[str]:
        seen = dict.fromkeys(self.alpha_design + self.tau_design)
        return list(seen)

    def design_matrices(self, covariates: Mapping[str, Sequence[float]], n: int | None = None):
        """Build ``(Z_alpha, Z_tau)`` from named covariate columns."""
        if n is None:
            n = len(next(iter(covariates.values()))) if covariates else 1
        ones = np.ones(n)

        def build(cols):
            missing = [c for c in cols if c not in covariates]
            if missing:
                raise KeyError(f"missing covariate column(s): {missing}")
            return np.column_stack([ones] + [np.asarray(covariates[c], dtype=float) for c in cols])

        return build(self.alpha_design), build(self.tau_design)

    def profile_vectors(self, profile: Mapping[str, float]):
        """Design rows ``(z_alpha, z_tau)`` for one covariate profile."""
        za, zt = self.design_matrices({k: [v] for k, v in profile.items()}, n=1)
        return za[0], zt[0]


def _linear(z, coef, what):
    z = np.asarray(z, dtype=float)
    coef = np.asarray(coef, dtype=float)
    if z.shape[-1] != coef.shape[0]:
        raise ShapeError(f"{what}: covariate length {z.shape[-1]} != coefficient length {coef.shape[0]}")
    return z @ coef


def alpha_of(z, gamma):
    """Shape ``alpha(z; gamma) = gamma . z``."""
    return _linear(z, gamma, "alpha")


def tau_of(z, eta):
    """TNEH ``tau(z; eta) = eta . z``."""
    return _linear(z, eta, "tau")


def _shapes(z, theta: ParamVector, z_tau=None):
    z_tau = z if z_tau is None else z_tau
    a = alpha_of(z, theta.gamma)
    tau = tau_of(z_tau, theta.eta)
    if np.any(~(np.asarray(a) > 0)):
        raise InvalidParameterError(f"alpha(z) must be > 0, got {a}")
    if np.any(~(np.asarray(tau) > 0)):
        raise InvalidParameterError(f"tau(z) must be > 0, got {tau}")
    return a, theta.beta_shape, tau


# ---------------------------------------------------------------- vectorized kernels

def hazard_from_shapes(t, a, b, tau):
    """Excess hazard for arrays of times and shapes (broadcast).

    Returns ``inf`` at ``t = 0`` when ``alpha < 1``.
    """
    t, a, b, tau = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (t, a, b, tau)))
    u = t / tau
    inside = u <= 1.0
    uc = np.where(inside, u, 0.5)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.power(uc, a - 1.0) * np.power(1.0 - uc, b - 1.0)
    return np.where(inside, h, 0.0)


def cum_hazard_from_shapes(t, a, b, tau):
    """``tau * B_{min(t, tau)/tau}(alpha, beta)`` elementwise."""
    t, a, b, tau = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (t, a, b, tau)))
    u = np.minimum(t / tau, 1.0)
    return tau * inc_beta_unreg_array(u, a, b)


def cum_hazard_shape_grad(t, a, b, tau):
    """Cumulative hazard and its partials with respect to ``(alpha, beta, tau)``.

    The tau partial is exact; the alpha and beta partials are central
    differences of the incomplete beta integral in its shape arguments.
    """
    t, a, b, tau = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (t, a, b, tau)))
    u = np.minimum(t / tau, 1.0)
    bu = inc_beta_unreg_array(u, a, b)
    ha = _SHAPE_STEP * a
    hb = _SHAPE_STEP * b
    d_a = (inc_beta_unreg_array(u, a + ha, b) - inc_beta_unreg_array(u, a - ha, b)) / (2 * ha)
    d_b = (inc_beta_unreg_array(u, a, b + hb) - inc_beta_unreg_array(u, a, b - hb)) / (2 * hb)
    lam = hazard_from_shapes(t, a, b, tau)
    with np.errstate(invalid="ignore"):
        d_tau = bu - np.where(u < 1.0, u * lam, 0.0)
    return tau * bu, tau * d_a, tau * d_b, d_tau


def hazard_score_from_shapes(t, a, b, tau):
    """Partials of the hazard with respect to ``(alpha, beta, tau)``; zero for t > tau."""
    t, a, b, tau = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (t, a, b, tau)))
    lam = hazard_from_shapes(t, a, b, tau)
    u = t / tau
    inside = (u > 0.0) & (u < 1.0)
    uc = np.where(inside, u, 0.5)
    d_a = np.where(inside, lam * np.log(uc), 0.0)
    d_b = np.where(inside, lam * np.log1p(-uc), 0.0)
    d_tau = np.where(inside, lam * (-(a - 1.0) / tau + (b - 1.0) * uc / (tau * (1.0 - uc))), 0.0)
    return d_a, d_b, d_tau


# ---------------------------------------------------------------- public per-profile API

def excess_hazard(t, z, theta: ParamVector, z_tau=None):
    """Excess hazard at time(s) ``t`` for one covariate profile.

    ``z`` is the alpha design row; ``z_tau`` defaults to ``z``.
    """
    a, b, tau = _shapes(z, theta, z_tau)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be >= 0")
    out = hazard_from_shapes(t, a, b, tau)
    return float(out) if out.ndim == 0 else out


def cum_excess_hazard(t, z, theta: ParamVector, z_tau=None):
    a, b, tau = _shapes(z, theta, z_tau)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be >= 0")
    out = cum_hazard_from_shapes(t, a, b, tau)
    return float(out) if out.ndim == 0 else out


def net_survival(t, z, theta: ParamVector, z_tau=None):
    """``exp(-Lambda(t))``; 1 at t = 0, equal to the cure fraction from tau on."""
    return np.exp(-cum_excess_hazard(t, z, theta, z_tau))


def cure_fraction(z, theta: ParamVector, z_tau=None) -> float:
    a, b, tau = _shapes(z, theta, z_tau)
    return float(np.exp(-tau * np.exp(log_beta_array(a, b))))


def nmcm_form(t, z, theta: ParamVector, z_tau=None):
    """Net survival written as ``pi ** F(t / tau)`` (non-mixture cure form)."""
    a, b, tau = _shapes(z, theta, z_tau)
    t = np.asarray(t, dtype=float)
    pi = cure_fraction(z, theta, z_tau)
    out = pi ** inc_beta_reg_array(np.minimum(t / tau, 1.0), a, b)
    return float(out) if out.ndim == 0 else out


def hazard_gradient(t: float, z, theta: ParamVector, z_tau=None) -> np.ndarray:
    """Gradient of the excess hazard with respect to ``(gamma, beta, eta)``.

    Raises:
        BoundaryGradientError: at ``t == 0`` or ``t == tau`` exactly; callers
            should nudge ``t`` by ``1e-12 * tau``.
    """
    z = np.asarray(z, dtype=float)
    z_tau = z if z_tau is None else np.asarray(z_tau, dtype=float)
    a, b, tau = _shapes(z, theta, z_tau)
    t = float(t)
    if t == 0.0 or t == tau:
        raise BoundaryGradientError(f"hazard gradient undefined at t={t} (tau={tau})")
    d_a, d_b, d_tau = hazard_score_from_shapes(t, a, b, tau)
    return np.concatenate([float(d_a) * z, [float(d_b)], float(d_tau) * z_tau])
