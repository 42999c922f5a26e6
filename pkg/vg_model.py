"""The multivariate skewed variance-gamma (MSVG) distribution.

Parameters theta = (mu, Sigma, gamma, nu): location, positive definite scale
matrix, skewness and shape. The distribution is the normal mean-variance
mixture

    y | lam ~ N(mu + gamma * lam, lam * Sigma),    lam ~ Gamma(nu, rate=nu)

and its density is unbounded at mu whenever nu <= d/2.
"""

import dataclasses
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from special_fn import log_bessel_k, log_gamma

logger = logging.getLogger(__name__)

_LN2 = math.log(2.0)
_LN_PI = math.log(math.pi)


class ParameterError(ValueError):
    """Raised when a parameter tuple is not a valid MSVG parameter."""


class DatasetError(ValueError):
    """Raised when observations are malformed or too few for an operation."""


def cholesky_factor(sigma) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises:
        ParameterError: If sigma is not square, symmetric and positive definite.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ParameterError(f"sigma must be a square matrix, got shape {sigma.shape}")
    if not np.all(np.isfinite(sigma)):
        raise ParameterError("sigma must be finite")
    scale = max(float(np.max(np.abs(sigma))), 1e-300)
    if not np.allclose(sigma, sigma.T, rtol=1e-10, atol=1e-12 * scale):
        raise ParameterError("sigma must be symmetric")
    try:
        return linalg.cholesky(0.5 * (sigma + sigma.T), lower=True)
    except linalg.LinAlgError as e:
        raise ParameterError("sigma must be positive definite") from e


def mahalanobis_from_factor(chol: np.ndarray, mu: np.ndarray, y: np.ndarray):
    """(y - mu)' Sigma^{-1} (y - mu) for each row of y, given Sigma = L L'."""
    diff = np.atleast_2d(y) - mu
    w = linalg.solve_triangular(chol, diff.T, lower=True)
    return np.sum(w * w, axis=0)


def _as_vector(value, name: str) -> np.ndarray:
    vec = np.atleast_1d(np.asarray(value, dtype=float)).copy()
    if vec.ndim != 1:
        raise ParameterError(f"{name} must be a vector")
    if not np.all(np.isfinite(vec)):
        raise ParameterError(f"{name} must be finite")
    return vec


@dataclass(frozen=True, eq=False)
class VgParams:
    """An MSVG parameter tuple with its Sigma factorisation cached.

    Arrays are copied and made read-only on construction. Use ``replace`` to
    derive a modified tuple; the factorisation is recomputed only then.
    """

    mu: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    nu: float

    def __post_init__(self):
        mu = _as_vector(self.mu, "mu")
        gamma = _as_vector(self.gamma, "gamma")
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        d = mu.shape[0]
        if d < 1:
            raise ParameterError("dimension must be at least 1")
        if gamma.shape[0] != d or sigma.shape != (d, d):
            raise ParameterError(
                f"dimension mismatch: mu has {d} entries, gamma {gamma.shape[0]}, "
                f"sigma shape {sigma.shape}"
            )
        nu = float(self.nu)
        if not math.isfinite(nu) or nu <= 0:
            raise ParameterError(f"nu must be a positive finite number, got {nu}")

        chol = cholesky_factor(sigma)
        sigma = 0.5 * (sigma + sigma.T)
        sigma_inv_gamma = linalg.cho_solve((chol, True), gamma)
        gamma_quad = float(gamma @ sigma_inv_gamma)

        for arr in (mu, gamma, sigma, chol, sigma_inv_gamma):
            arr.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "sigma_inv_gamma", sigma_inv_gamma)
        object.__setattr__(self, "gamma_quad", gamma_quad)
        object.__setattr__(
            self, "log_det_sigma", float(2.0 * np.sum(np.log(np.diag(chol))))
        )

    @classmethod
    def univariate(
        cls, mu: float = 0.0, sigma2: float = 1.0, gamma: float = 0.0, nu: float = 1.0
    ) -> "VgParams":
        return cls(mu=[mu], sigma=[[sigma2]], gamma=[gamma], nu=nu)

    @property
    def d(self) -> int:
        return int(self.mu.shape[0])

    @property
    def c(self) -> float:
        """sqrt(2 nu + gamma' Sigma^{-1} gamma)."""
        return math.sqrt(2.0 * self.nu + self.gamma_quad)

    def replace(self, **changes) -> "VgParams":
        return dataclasses.replace(self, **changes)

    def __repr__(self) -> str:
        return (
            f"VgParams(mu={self.mu.tolist()}, sigma={self.sigma.tolist()}, "
            f"gamma={self.gamma.tolist()}, nu={self.nu!r})"
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """n observations of dimension d, one per row."""

    observations: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs.reshape(-1, 1)
        if obs.ndim != 2:
            raise DatasetError(f"observations must be 2-D, got {obs.ndim} dimensions")
        if obs.shape[0] < 1 or obs.shape[1] < 1:
            raise DatasetError("dataset must hold at least one observation")
        if not np.all(np.isfinite(obs)):
            bad_row = int(np.flatnonzero(~np.all(np.isfinite(obs), axis=1))[0])
            raise DatasetError(f"observation {bad_row} is not finite")
        obs = obs.copy()
        obs.setflags(write=False)
        object.__setattr__(self, "observations", obs)

    @property
    def n(self) -> int:
        return int(self.observations.shape[0])

    @property
    def d(self) -> int:
        return int(self.observations.shape[1])

    def shifted(self, offset) -> "Dataset":
        return Dataset(self.observations + np.asarray(offset, dtype=float))


def _as_points(params: VgParams, y) -> tuple[np.ndarray, bool]:
    arr = np.asarray(y, dtype=float)
    single = arr.ndim <= 1
    points = arr.reshape(1, -1) if single else arr
    if points.shape[1] != params.d:
        raise ParameterError(
            f"observation dimension {points.shape[1]} does not match parameter "
            f"dimension {params.d}"
        )
    return points, single


def mahalanobis_sq(params: VgParams, y):
    """(y - mu)' Sigma^{-1} (y - mu); a float for one point, an array for rows."""
    points, single = _as_points(params, y)
    dist = mahalanobis_from_factor(params.chol, params.mu, points)
    return float(dist[0]) if single else dist


def skew_term(params: VgParams, y):
    """The linear term (y - mu)' Sigma^{-1} gamma of the log-density."""
    points, single = _as_points(params, y)
    lin = (points - params.mu) @ params.sigma_inv_gamma
    return float(lin[0]) if single else lin


def log_density_at_mode(params: VgParams) -> float:
    """Limit of the log-density as y -> mu.

    Finite when nu > d/2; the density is unbounded at mu otherwise and +inf is
    returned.
    """
    d = params.d
    nu = params.nu
    if nu <= d / 2:
        return math.inf
    return (
        (nu - d) * _LN2
        - 0.5 * d * _LN_PI
        - 0.5 * params.log_det_sigma
        + log_gamma(nu - d / 2)
        - log_gamma(nu)
        + nu * math.log(nu)
        - (nu - d / 2) * math.log(params.c**2)
    )


def near_mode_log_density(params: VgParams, z):
    """Leading asymptotic log-density at Mahalanobis distance z -> 0.

    Three regimes: a finite constant when nu > d/2, growth like -log z when
    nu = d/2, and the power law z^(2 nu - d) when nu < d/2.
    """
    z = np.asarray(z, dtype=float)
    d = params.d
    nu = params.nu
    base = -0.5 * d * _LN_PI - 0.5 * params.log_det_sigma
    if nu > d / 2:
        out = np.full(z.shape, log_density_at_mode(params))
    elif nu == d / 2:
        out = (
            base
            + (1 - d) * _LN2
            + 0.5 * d * math.log(d)
            - log_gamma(d / 2)
            + np.log(-np.log(z))
        )
    else:
        out = (
            base
            - nu * _LN2
            + log_gamma(d / 2 - nu)
            - log_gamma(nu)
            + nu * math.log(nu)
            + (2 * nu - d) * np.log(z)
        )
    return float(out) if out.ndim == 0 else out


def log_density_from_distance(params: VgParams, dist_sq, linear):
    """Log-density given squared Mahalanobis distances and skew terms.

    Assembled entirely in the log domain. Points at distance exactly zero get
    ``log_density_at_mode``, which is +inf when nu <= d/2.
    """
    dist_sq = np.asarray(dist_sq, dtype=float)
    linear = np.asarray(linear, dtype=float)
    d = params.d
    nu = params.nu
    eta = nu - d / 2
    c = params.c
    const = (
        (1 - d / 2) * _LN2
        + nu * math.log(nu)
        - 0.5 * params.log_det_sigma
        - 0.5 * d * _LN_PI
        - log_gamma(nu)
    )

    out = np.empty(dist_sq.shape, dtype=float)
    positive = dist_sq > 0
    if np.any(positive):
        z = np.sqrt(dist_sq[positive])
        out[positive] = (
            const
            + np.asarray(log_bessel_k(eta, c * z))
            + linear[positive]
            + eta * (np.log(z) - math.log(c))
        )
    if not np.all(positive):
        out[~positive] = log_density_at_mode(params)
    return out


def log_pdf(params: VgParams, y):
    """log f_VG(y) for one point (float) or each row of an (n, d) array.

    Returns +inf at y = mu when nu <= d/2; callers outside the LOO machinery
    must guard against it.
    """
    points, single = _as_points(params, y)
    dist = mahalanobis_from_factor(params.chol, params.mu, points)
    lin = (points - params.mu) @ params.sigma_inv_gamma
    out = log_density_from_distance(params, dist, lin)
    return float(out[0]) if single else out


def full_loglik(params: VgParams, data: Dataset) -> float:
    """Ordinary log-likelihood over all observations; +inf if any sits at mu
    while nu <= d/2."""
    return float(np.sum(log_pdf(params, data.observations)))


def sample(params: VgParams, n: int, rng: np.random.Generator) -> Dataset:
    """Draw n observations through the normal mean-variance mixture.

    lam_i ~ Gamma(shape nu, rate nu), then y_i ~ N(mu + gamma lam_i, lam_i Sigma).
    numpy's gamma generator uses Marsaglia-Tsang rejection with the shape
    boost for shape < 1, so small nu is sampled exactly.
    """
    if n < 1:
        raise DatasetError(f"sample size must be at least 1, got {n}")
    lam = rng.gamma(shape=params.nu, scale=1.0 / params.nu, size=n)
    normals = rng.standard_normal((n, params.d))
    y = (
        params.mu
        + lam[:, None] * params.gamma
        + np.sqrt(lam)[:, None] * (normals @ params.chol.T)
    )
    return Dataset(y)


def population_moments(params: VgParams) -> tuple[np.ndarray, np.ndarray]:
    """Mean mu + gamma and covariance Sigma + gamma gamma' / nu."""
    mean = params.mu + params.gamma
    cov = params.sigma + np.outer(params.gamma, params.gamma) / params.nu
    return mean, cov


def write_dataset(dataset: Dataset, path: str, header: list[str] | None = None) -> None:
    """Write observations as CSV, one row per observation, '.' decimal.

    Values are written with 17 significant digits so a re-read reproduces
    them exactly.
    """
    lines = []
    if header:
        lines.append(",".join(header))
    for row in dataset.observations:
        lines.append(",".join(format(float(v), ".17g") for v in row))
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("\n".join(lines) + "\n")
