"""Special functions for the variance-gamma likelihood.

Everything here works in the log domain where it can. The Bessel function
K_v(z) spans hundreds of orders of magnitude over the arguments the E-step and
the density visit (z near 0 next to the location parameter, z in the hundreds
in the far tails), so callers get log K and ratios built from differences of
logs rather than raw values.

All functions accept scalars or numpy arrays. A scalar input returns a Python
float; an array input returns an array of the broadcast shape.
"""

import math

import numpy as np
from scipy import special

# Step used for the central difference in the Bessel order.
ORDER_STEP = 1e-5

_LN2 = math.log(2.0)


class SpecialFunctionDomainError(ValueError):
    """Raised when a special function is evaluated outside its domain."""


def _unwrap(values: np.ndarray):
    if np.ndim(values) == 0:
        return float(values)
    return values


def _check_positive(name: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise SpecialFunctionDomainError(f"{name} must be finite")
    if np.any(values <= 0):
        raise SpecialFunctionDomainError(f"{name} must be > 0")


def _check_bessel_args(order: np.ndarray, z: np.ndarray) -> None:
    if not np.all(np.isfinite(order)):
        raise SpecialFunctionDomainError("Bessel order must be finite")
    _check_positive("Bessel argument", z)


def log_bessel_k_small(order, z):
    """Small-argument form of log K_order(z), accurate as z -> 0.

    Uses the leading terms of the series around z = 0:

    * order 0:            K ~ -log(z/2) - euler_gamma
    * 0 < |order| < 1:    K ~ (Gamma(v) (z/2)^-v + Gamma(-v) (z/2)^v) / 2
    * |order| >= 1:       K ~ Gamma(v) (2/z)^v / 2

    The two-term form is rewritten with Gamma(1 +/- v) and ``expm1`` so that it
    stays accurate as v -> 0, where it tends to the order-0 form.
    """
    order_arr = np.abs(np.asarray(order, dtype=float))
    z_arr = np.asarray(z, dtype=float)
    _check_bessel_args(order_arr, z_arr)
    v, x = np.broadcast_arrays(order_arr, z_arr)
    v = v.astype(float)
    x = x.astype(float)

    out = np.empty(v.shape, dtype=float)
    log_two_over_z = _LN2 - np.log(x)

    zero = v == 0
    fractional = (v > 0) & (v < 1)
    power = v >= 1

    out[zero] = np.log(log_two_over_z[zero] - np.euler_gamma)

    if np.any(fractional):
        vf = v[fractional]
        lf = log_two_over_z[fractional]
        a = special.gammaln(1.0 + vf)
        b = special.gammaln(1.0 - vf)
        out[fractional] = (
            -np.log(2.0 * vf) + b - vf * lf + np.log(np.expm1(a - b + 2.0 * vf * lf))
        )

    vp = v[power]
    out[power] = special.gammaln(vp) - _LN2 + vp * log_two_over_z[power]
    return _unwrap(out)


def log_bessel_k(order, z):
    """Natural log of the modified Bessel function of the second kind.

    K_{-v} = K_v, so only |order| is used. Evaluation goes through the
    exponentially scaled routine ``scipy.special.kve`` (Temme series for small
    arguments, continued fractions and uniform asymptotics elsewhere), giving
    log K = log kve - z with no overflow in the tails. Where even the scaled
    value overflows (large order, tiny argument) the small-argument form takes
    over.

    Raises:
        SpecialFunctionDomainError: If z <= 0 or any input is not finite.
    """
    order_arr = np.abs(np.asarray(order, dtype=float))
    z_arr = np.asarray(z, dtype=float)
    _check_bessel_args(order_arr, z_arr)
    v, x = np.broadcast_arrays(order_arr, z_arr)

    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        out = np.log(special.kve(v, x)) - x

    bad = ~np.isfinite(out)
    if np.any(bad):
        out = np.array(out, dtype=float)
        out[bad] = log_bessel_k_small(v[bad], x[bad])
    return _unwrap(out)


def _log_difference_ratio(log_plus: np.ndarray, log_minus: np.ndarray, log_ref):
    """(exp(log_plus - log_ref) - exp(log_minus - log_ref)) / (2 h)."""
    return (np.expm1(log_plus - log_ref) - np.expm1(log_minus - log_ref)) / (
        2.0 * ORDER_STEP
    )


def bessel_k_dorder(order, z):
    """Derivative of K_a(z) with respect to the order a, at a = order.

    Central difference (K_{a+h} - K_{a-h}) / 2h with h = ORDER_STEP. The two
    values are rescaled by the larger of them before subtracting, so the
    difference is taken on a linear scale of order one. K is even in its
    order, so the derivative is exactly zero at order 0.
    """
    order_arr = np.asarray(order, dtype=float)
    z_arr = np.asarray(z, dtype=float)
    _check_bessel_args(order_arr, z_arr)
    a, x = np.broadcast_arrays(order_arr, z_arr)

    log_plus = np.asarray(log_bessel_k(a + ORDER_STEP, x))
    log_minus = np.asarray(log_bessel_k(a - ORDER_STEP, x))
    log_max = np.maximum(log_plus, log_minus)
    out = _log_difference_ratio(log_plus, log_minus, log_max) * np.exp(log_max)
    out = np.where(a == 0, 0.0, out)
    return _unwrap(out)


def dlog_bessel_k_dorder(order, z, log_k=log_bessel_k):
    """K^{(1,0)}_order(z) / K_order(z), the order derivative of log K.

    Same central difference as ``bessel_k_dorder`` but rescaled by K_order(z)
    itself, which is the ratio the E-step needs. ``log_k`` selects the log-K
    evaluator (the small-argument form is passed in near the singularity).
    """
    order_arr = np.asarray(order, dtype=float)
    z_arr = np.asarray(z, dtype=float)
    _check_bessel_args(order_arr, z_arr)
    a, x = np.broadcast_arrays(order_arr, z_arr)

    log_centre = np.asarray(log_k(a, x))
    log_plus = np.asarray(log_k(a + ORDER_STEP, x))
    log_minus = np.asarray(log_k(a - ORDER_STEP, x))
    out = _log_difference_ratio(log_plus, log_minus, log_centre)
    out = np.where(a == 0, 0.0, out)
    return _unwrap(out)


def log_gamma(x):
    """log Gamma(x) for x > 0."""
    x_arr = np.asarray(x, dtype=float)
    _check_positive("log_gamma argument", x_arr)
    return _unwrap(special.gammaln(x_arr))


def digamma(x):
    """psi(x) = d/dx log Gamma(x) for x > 0."""
    x_arr = np.asarray(x, dtype=float)
    _check_positive("digamma argument", x_arr)
    return _unwrap(special.digamma(x_arr))


def trigamma(x):
    """psi'(x) for x > 0."""
    x_arr = np.asarray(x, dtype=float)
    _check_positive("trigamma argument", x_arr)
    return _unwrap(special.polygamma(1, x_arr))
