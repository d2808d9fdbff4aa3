"""Log-gamma, beta function and regularized incomplete beta.

Scalar kernels are compiled with numba so the likelihood can call them in a
tight loop over records. The public functions validate their arguments and
raise :class:`DomainError`; the ``*_array`` variants skip validation and
return NaN for invalid input.

Accuracy: ``log_gamma`` has relative error below 1e-12 on [0.1, 200], and the
regularized incomplete beta is accurate to ~1e-14 absolute for shape
parameters in [0.05, 1e3]. For a shape parameter below 0.05 the continued
fraction still converges but B(a, b) ~ 1/a grows, so the *unregularized*
incomplete beta loses about ``-log10(a)`` digits of relative accuracy; shapes
down to 1e-3 remain usable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "DomainError",
    "BetaParams",
    "log_gamma",
    "log_beta",
    "beta_fn",
    "inc_beta_reg",
    "inc_beta_reg_array",
    "inc_beta_unreg_array",
    "log_beta_array",
]

EULER_GAMMA = 0.5772156649015329
HALF_LOG_2PI = 0.9189385332046728

# zeta(k) - 1 for k = 2..31, for the Taylor series of lgamma around 1 and 2.
_ZETA_M1 = np.array([
    0.6449340668482264, 0.2020569031595943, 0.08232323371113819,
    0.03692775514336993, 0.01734306198444914, 0.008349277381922827,
    0.00407735619794434, 0.0020083928260822143, 0.0009945751278180853,
    0.0004941886041194645, 0.0002460865533080483, 0.00012271334757848915,
    6.124813505870483e-05, 3.058823630702049e-05, 1.528225940865187e-05,
    7.637197637899763e-06, 3.81729326499984e-06, 1.908212716553939e-06,
    9.539620338727962e-07, 4.769329867878064e-07, 2.38450502727733e-07,
    1.1921992596531106e-07, 5.960818905125948e-08, 2.980350351465228e-08,
    1.4901554828365043e-08, 7.45071178983543e-09, 3.725334024788457e-09,
    1.862659723513049e-09, 9.313274324196682e-10, 4.656629065033784e-10,
])

_CF_EPS = 1e-16
_CF_MAXIT = 20000
_FPMIN = 1e-300


class DomainError(ValueError):
    """Argument outside the domain of a special function."""


@njit(cache=True)
def _zeta_series(z):
    # sum_{k>=2} (-1)^k (zeta(k) - 1) z^k / k, valid for |z| <= 0.5
    s = 0.0
    zk = z
    for i in range(_ZETA_M1.shape[0]):
        k = i + 2
        zk *= z
        term = _ZETA_M1[i] * zk / k
        if k % 2 == 0:
            s += term
        else:
            s -= term
    return s


@njit(cache=True)
def _lgamma1p(z):
    # ln Gamma(1 + z), |z| <= 0.5
    return -math.log1p(z) + z * (1.0 - EULER_GAMMA) + _zeta_series(z)


@njit(cache=True)
def _lgamma2p(z):
    # ln Gamma(2 + z), |z| <= 0.5; the log1p terms cancel exactly
    return z * (1.0 - EULER_GAMMA) + _zeta_series(z)


@njit(cache=True)
def _stirling(x):
    r = 1.0 / x
    r2 = r * r
    series = r * (1.0 / 12.0 + r2 * (-1.0 / 360.0 + r2 * (1.0 / 1260.0 + r2 * (
        -1.0 / 1680.0 + r2 * (1.0 / 1188.0 + r2 * (-691.0 / 360360.0 + r2 / 156.0))))))
    return (x - 0.5) * math.log(x) - x + HALF_LOG_2PI + series


@njit(cache=True)
def _lgamma(x):
    if not (x > 0.0) or math.isinf(x):
        return math.nan
    if x < 0.5:
        return _lgamma1p(x) - math.log(x)
    if x <= 1.5:
        return _lgamma1p(x - 1.0)
    if x <= 2.5:
        return _lgamma2p(x - 2.0)
    if x >= 10.0:
        return _stirling(x)
    prod = 1.0
    while x > 2.5:
        x -= 1.0
        prod *= x
    return math.log(prod) + _lgamma2p(x - 2.0)


@njit(cache=True)
def _lbeta(a, b):
    return _lgamma(a) + _lgamma(b) - _lgamma(a + b)


@njit(cache=True)
def _betacf(a, b, x):
    """Continued fraction for I_x(a, b) (modified Lentz). NaN if no convergence."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    return math.nan


@njit(cache=True)
def _betainc_reg(x, a, b):
    if not (a > 0.0 and b > 0.0) or not (0.0 <= x <= 1.0):
        return math.nan
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    lfront = a * math.log(x) + b * math.log1p(-x) - _lbeta(a, b)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(lfront) * _betacf(a, b, x) / a
    return 1.0 - math.exp(lfront) * _betacf(b, a, 1.0 - x) / b


@njit(cache=True)
def _betainc_unreg(x, a, b):
    """B(a, b) * I_x(a, b) without forming B(a, b) on the lower branch."""
    if not (a > 0.0 and b > 0.0) or not (0.0 <= x <= 1.0):
        return math.nan
    if x == 0.0:
        return 0.0
    lfull = _lbeta(a, b)
    if x == 1.0:
        return math.exp(lfull)
    lpow = a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(lpow) * _betacf(a, b, x) / a
    return math.exp(lfull) - math.exp(lpow) * _betacf(b, a, 1.0 - x) / b


@njit(cache=True)
def _betainc_reg_vec(x, a, b):
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        out[i] = _betainc_reg(x[i], a[i], b[i])
    return out


@njit(cache=True)
def _betainc_unreg_vec(x, a, b):
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        out[i] = _betainc_unreg(x[i], a[i], b[i])
    return out


@njit(cache=True)
def _lbeta_vec(a, b):
    out = np.empty(a.shape[0])
    for i in range(a.shape[0]):
        out[i] = _lbeta(a[i], b[i])
    return out


def _flat3(x, a, b):
    x, a, b = np.broadcast_arrays(
        np.asarray(x, dtype=float), np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    )
    return x.shape, np.ascontiguousarray(x).ravel(), np.ascontiguousarray(a).ravel(), \
        np.ascontiguousarray(b).ravel()


def inc_beta_reg_array(x, a, b) -> np.ndarray:
    """Elementwise regularized incomplete beta with numpy broadcasting."""
    shape, xf, af, bf = _flat3(x, a, b)
    return _betainc_reg_vec(xf, af, bf).reshape(shape)


def inc_beta_unreg_array(x, a, b) -> np.ndarray:
    """Elementwise ``B(a, b) * I_x(a, b)`` with numpy broadcasting."""
    shape, xf, af, bf = _flat3(x, a, b)
    return _betainc_unreg_vec(xf, af, bf).reshape(shape)


def log_beta_array(a, b) -> np.ndarray:
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    shape = a.shape
    return _lbeta_vec(np.ascontiguousarray(a).ravel(), np.ascontiguousarray(b).ravel()).reshape(shape)


def _check_shape(name, v):
    v = float(v)
    if not math.isfinite(v) or v <= 0.0:
        raise DomainError(f"{name} must be finite and > 0, got {v!r}")
    return v


@dataclass(frozen=True)
class BetaParams:
    """Shape pair ``(alpha, beta)`` of a beta distribution."""

    alpha: float
    beta: float

    def __post_init__(self):
        _check_shape("alpha", self.alpha)
        _check_shape("beta", self.beta)


def log_gamma(x: float) -> float:
    """Natural log of the gamma function for ``x > 0``."""
    return float(_lgamma(_check_shape("x", x)))


def log_beta(a: float, b: float) -> float:
    return float(_lbeta(_check_shape("alpha", a), _check_shape("beta", b)))


def beta_fn(a: float, b: float) -> float:
    """Complete beta function ``B(a, b)``."""
    return math.exp(log_beta(a, b))


def inc_beta_reg(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``, the Beta(a, b) CDF at ``x``.

    Uses the continued fraction on whichever of ``x`` or ``1 - x`` lies below
    the mean-ish split point ``(a + 1) / (a + b + 2)``, where it converges fast.

    Raises:
        DomainError: if ``x`` is outside [0, 1] or a shape is not positive.
    """
    a = _check_shape("alpha", a)
    b = _check_shape("beta", b)
    x = float(x)
    if not (0.0 <= x <= 1.0):
        raise DomainError(f"x must lie in [0, 1], got {x!r}")
    val = float(_betainc_reg(x, a, b))
    if math.isnan(val):
        raise DomainError(f"continued fraction did not converge for a={a}, b={b}, x={x}")
    return val
