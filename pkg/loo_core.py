"""Leave-one-out likelihood machinery.

The LOO likelihood drops the single observation nearest (in Mahalanobis
distance) to the location parameter, which is the only term that can make the
MSVG likelihood unbounded. This module holds the LOO index, the observed LOO
log-likelihood, the GIG posterior moments of the mixing variable (the E-step)
and the leave-one-out sufficient statistics the CM-steps consume.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from special_fn import (
    dlog_bessel_k_dorder,
    log_bessel_k,
    log_bessel_k_small,
    log_gamma,
)
from vg_model import (
    Dataset,
    DatasetError,
    VgParams,
    cholesky_factor,
    full_loglik,
    log_density_from_distance,
    mahalanobis_from_factor,
)

logger = logging.getLogger(__name__)

# Distances below this are treated as this value before any Bessel evaluation.
Z_FLOOR = 1e-12

# Below this Bessel argument the E-step switches to the small-argument forms.
SMALL_ARGUMENT = 1e-6


@dataclass(frozen=True, eq=False)
class LatentMoments:
    """Conditional moments of the mixing variable, one entry per observation.

    ``clamped`` counts observations whose distance to mu was below Z_FLOOR.
    """

    lambda_hat: np.ndarray
    inv_lambda_hat: np.ndarray
    log_lambda_hat: np.ndarray
    clamped: int = 0

    @property
    def n(self) -> int:
        return int(self.lambda_hat.shape[0])


@dataclass(frozen=True, eq=False)
class SuffStats:
    """Sufficient statistics summed over every index except ``excluded``."""

    s_y: np.ndarray
    s_y_over_lambda: np.ndarray
    s_lambda: float
    s_inv_lambda: float
    s_log_lambda: float
    excluded: int
    count: int


def _nearest(dist_sq: np.ndarray) -> int:
    # np.argmin returns the first occurrence of the minimum.
    return int(np.argmin(dist_sq))


def loo_index(data: Dataset, mu, sigma) -> int:
    """Index of the observation nearest to mu; ties go to the smallest index."""
    chol = cholesky_factor(sigma)
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    return _nearest(mahalanobis_from_factor(chol, mu, data.observations))


def _require_two(data: Dataset) -> None:
    if data.n < 2:
        raise DatasetError(
            f"the leave-one-out likelihood needs at least 2 observations, got {data.n}"
        )


def loo_loglik(params: VgParams, data: Dataset) -> float:
    """Log-likelihood of every observation except the one nearest to mu.

    A retained observation sitting on mu (a duplicate of the excluded one) has
    its distance raised to Z_FLOOR**2, so the value stays finite.

    Raises:
        DatasetError: If the dataset has fewer than 2 observations.
    """
    _require_two(data)
    obs = data.observations
    dist = mahalanobis_from_factor(params.chol, params.mu, obs)
    k = _nearest(dist)
    keep = np.ones(data.n, dtype=bool)
    keep[k] = False

    retained = dist[keep]
    floor_sq = Z_FLOOR * Z_FLOOR
    low = retained < floor_sq
    if np.any(low):
        logger.warning(
            "%d retained observation(s) coincide with mu; distance clamped to %g",
            int(np.sum(low)),
            Z_FLOOR,
        )
        retained = np.maximum(retained, floor_sq)

    lin = (obs[keep] - params.mu) @ params.sigma_inv_gamma
    return float(np.sum(log_density_from_distance(params, retained, lin)))


def loo_loglik_profile(params: VgParams, data: Dataset, mu_grid):
    """LOO and full log-likelihoods as functions of a univariate mu.

    Every other parameter stays at ``params``. Returns ``(loo, full)`` arrays
    over ``mu_grid``; ``full`` is +inf wherever the grid hits an observation
    and nu <= 1/2.
    """
    if params.d != 1:
        raise DatasetError("the likelihood profile is only defined for d = 1")
    grid = np.asarray(mu_grid, dtype=float).ravel()
    loo = np.empty(grid.shape)
    full = np.empty(grid.shape)
    for j, m in enumerate(grid):
        shifted = params.replace(mu=[m])
        loo[j] = loo_loglik(shifted, data)
        full[j] = full_loglik(shifted, data)
    return loo, full


def latent_moments(params: VgParams, data: Dataset) -> LatentMoments:
    """E-step: GIG posterior moments of lambda for every observation.

    With eta = nu - d/2, c = sqrt(2 nu + gamma' Sigma^{-1} gamma) and z the
    Mahalanobis distance to mu:

        E[lam]     = (z / c) K_{eta+1}(cz) / K_eta(cz)
        E[1/lam]   = (c / z) K_{eta-1}(cz) / K_eta(cz)
        E[log lam] = log(z / c) + K'_eta(cz) / K_eta(cz)

    Ratios are formed as exp of log-K differences. Moments are computed for all
    n points; the leave-one-out exclusion happens in ``suff_stats``.
    """
    dist = mahalanobis_from_factor(params.chol, params.mu, data.observations)
    z = np.sqrt(dist)
    low = z < Z_FLOOR
    clamped = int(np.sum(low))
    if clamped > 1:
        logger.warning(
            "%d observations coincide with mu; distance clamped to %g", clamped, Z_FLOOR
        )
    z = np.maximum(z, Z_FLOOR)

    eta = params.nu - params.d / 2
    c = params.c
    x = c * z

    log_k0 = np.empty(x.shape)
    log_kp = np.empty(x.shape)
    log_km = np.empty(x.shape)
    dlog = np.empty(x.shape)

    small = x < SMALL_ARGUMENT
    for mask, log_k in ((~small, log_bessel_k), (small, log_bessel_k_small)):
        if not np.any(mask):
            continue
        xm = x[mask]
        log_k0[mask] = log_k(np.full(xm.shape, eta), xm)
        log_kp[mask] = log_k(np.full(xm.shape, eta + 1), xm)
        log_km[mask] = log_k(np.full(xm.shape, eta - 1), xm)
        dlog[mask] = dlog_bessel_k_dorder(np.full(xm.shape, eta), xm, log_k=log_k)

    log_ratio = np.log(z) - math.log(c)
    lambda_hat = np.exp(log_ratio + log_kp - log_k0)
    inv_lambda_hat = np.exp(-log_ratio + log_km - log_k0)
    log_lambda_hat = log_ratio + dlog
    return LatentMoments(
        lambda_hat=lambda_hat,
        inv_lambda_hat=inv_lambda_hat,
        log_lambda_hat=log_lambda_hat,
        clamped=clamped,
    )


def suff_stats(data: Dataset, moments: LatentMoments, excluded: int) -> SuffStats:
    """Sums of y, y/lam, lam, 1/lam and log lam over i != excluded.

    Sums accumulate in index order so results do not depend on scheduling.
    """
    n = data.n
    if not 0 <= excluded < n:
        raise DatasetError(f"excluded index {excluded} out of range for n = {n}")
    if moments.n != n:
        raise DatasetError(
            f"moments cover {moments.n} observations but the dataset has {n}"
        )
    keep = np.ones(n, dtype=bool)
    keep[excluded] = False
    y = data.observations[keep]
    inv = moments.inv_lambda_hat[keep]
    return SuffStats(
        s_y=y.sum(axis=0),
        s_y_over_lambda=(inv[:, None] * y).sum(axis=0),
        s_lambda=float(np.sum(moments.lambda_hat[keep])),
        s_inv_lambda=float(np.sum(inv)),
        s_log_lambda=float(np.sum(moments.log_lambda_hat[keep])),
        excluded=int(excluded),
        count=n - 1,
    )


def complete_loglik_components(
    params: VgParams, data: Dataset, moments: LatentMoments, excluded: int
) -> tuple[float, float]:
    """Expected complete-data LOO log-likelihood, split into its normal and
    gamma parts, with the latent moments substituted for lam, 1/lam, log lam.
    """
    stats = suff_stats(data, moments, excluded)
    keep = np.ones(data.n, dtype=bool)
    keep[excluded] = False
    d = params.d
    m = stats.count

    r = data.observations[keep] - params.mu
    rq = mahalanobis_from_factor(params.chol, np.zeros(d), r)
    cross = r @ params.sigma_inv_gamma
    quad = (
        moments.inv_lambda_hat[keep] * rq
        - 2.0 * cross
        + moments.lambda_hat[keep] * params.gamma_quad
    )
    ell_n = (
        -0.5 * m * params.log_det_sigma
        - 0.5 * float(np.sum(quad))
        - 0.5 * m * d * math.log(math.pi)
    )

    nu = params.nu
    ell_g = (
        m * (nu * math.log(nu) - log_gamma(nu))
        + (nu - 1.0) * stats.s_log_lambda
        - nu * stats.s_lambda
    )
    return ell_n, ell_g
