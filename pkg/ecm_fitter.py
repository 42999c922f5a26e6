"""ECM fitting of the MSVG distribution by maximum leave-one-out likelihood.

One iteration runs

    local point search
    E-step 1 -> CM-step 1 (mu, gamma)  -> line search
    E-step 2 -> CM-step 2 (Sigma)      -> line search
    E-step 3 -> CM-step 3 (nu)         -> line search

and iterations stop once the relative increase of the LOO log-likelihood falls
below ``EcmConfig.tol`` (and, when ``EcmConfig.param_tol`` is set, the
parameters moved less than that in the metric of Sigma). Every accepted step
keeps or raises the LOO log-likelihood, so the trace never decreases.

With ``EcmConfig.search_fraction`` the first iteration opens with a point
search over that share of the observations nearest to mu, repeated until it
stops relocating.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import linalg, optimize

from loo_core import (
    LatentMoments,
    SuffStats,
    latent_moments,
    loo_loglik,
    suff_stats,
)
from special_fn import digamma, trigamma
from vg_model import (
    Dataset,
    ParameterError,
    VgParams,
    cholesky_factor,
    mahalanobis_from_factor,
)

logger = logging.getLogger(__name__)

Block = Literal["mu", "sigma", "gamma", "nu"]
BLOCKS: tuple[str, ...] = ("mu", "sigma", "gamma", "nu")

# Scale factor turning a median absolute deviation into a normal sd.
MAD_SCALE = 1.4826

# Consecutive iterations in which the local point search relocates mu before
# an oscillation warning is recorded.
OSCILLATION_LIMIT = 10

_NR_STEP_TOL = 1e-10
_INFEASIBLE = 1e300
_SINGULAR_RATIO = 1e-12


class InitializationError(ValueError):
    """Raised when starting values cannot be formed from the data."""


class DegenerateStepError(ArithmeticError):
    """Raised when a CM-step has no well-defined solution."""


class EcmConfig(BaseModel):
    """Tuning for the ECM iterations. Field defaults are the CLI defaults."""

    model_config = ConfigDict(frozen=True)

    tol: float = Field(1e-8, gt=0, description="relative LOO log-likelihood increment")
    max_iter: int = Field(2000, ge=1, description="maximum ECM iterations")
    m_search: int = Field(20, ge=1, description="neighbours in the local point search")
    nu_min: float = Field(1e-3, gt=0, description="lower clamp for nu")
    nu_max: float = Field(200.0, gt=0, description="upper clamp for nu")
    nr_max_iter: int = Field(50, ge=1, description="Newton-Raphson steps for nu")
    line_search_evals: int = Field(
        30, ge=1, description="function evaluations per line search"
    )
    param_tol: float | None = Field(
        None,
        gt=0,
        description="largest parameter change allowed at convergence (off if unset)",
    )
    search_fraction: float = Field(
        0.0,
        ge=0,
        le=1,
        description="share of the observations scanned by the opening point search",
    )
    fixed_mask: frozenset[Block] = Field(
        frozenset(), description="parameter blocks held fixed"
    )
    robust_init: bool = Field(False, description="median/MAD starting values")

    @model_validator(mode="after")
    def _check_nu_bounds(self) -> "EcmConfig":
        if self.nu_min >= self.nu_max:
            raise ValueError(
                f"nu_min ({self.nu_min}) must be below nu_max ({self.nu_max})"
            )
        return self

    def is_free(self, block: str) -> bool:
        return block not in self.fixed_mask

    def opening_search_size(self, n: int) -> int:
        """Candidates in the opening point search; 0 when it adds nothing
        over the per-iteration search."""
        m = math.ceil(self.search_fraction * n)
        return m if m > self.m_search else 0


class Termination(str, Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"


@dataclass
class FitResult:
    """Outcome of an ECM run.

    ``loglik_trace`` holds the LOO log-likelihood after each completed
    iteration; the value at the starting point is ``initial_loglik``.
    """

    params: VgParams
    loglik_trace: np.ndarray
    iterations: int
    termination: Termination
    initial_loglik: float
    warnings: list[str] = field(default_factory=list)

    @property
    def final_loglik(self) -> float:
        if len(self.loglik_trace) == 0:
            return self.initial_loglik
        return float(self.loglik_trace[-1])

    @property
    def converged(self) -> bool:
        return self.termination is Termination.CONVERGED

    def to_report(self) -> str:
        p = self.params
        lines = [
            f"termination: {self.termination.value}",
            f"iterations: {self.iterations}",
            f"trace_length: {len(self.loglik_trace)}",
            f"initial_loo_loglik: {self.initial_loglik:.10g}",
            f"final_loo_loglik: {self.final_loglik:.10g}",
            f"d: {p.d}",
            "mu: " + _format_vector(p.mu),
            "sigma:",
        ]
        lines.extend("  " + _format_vector(row) for row in p.sigma)
        lines.append("gamma: " + _format_vector(p.gamma))
        lines.append(f"nu: {p.nu:.10g}")
        if self.warnings:
            lines.append("warnings:")
            lines.extend(f"  - {w}" for w in self.warnings)
        else:
            lines.append("warnings: none")
        return "\n".join(lines) + "\n"


def _format_vector(values) -> str:
    return "[" + ", ".join(f"{float(v):.10g}" for v in values) + "]"


def initialize(data: Dataset, robust: bool = False) -> VgParams:
    """Starting values (mean, covariance, 0, 4d).

    With ``robust`` the location is the coordinatewise median and the scale is
    diagonal with (1.4826 * MAD)**2 per coordinate, which heavy tails and
    outliers barely move.

    Raises:
        InitializationError: If n < d + 2 or the scale estimate is degenerate.
    """
    n, d = data.n, data.d
    if n < d + 2:
        raise InitializationError(
            f"need at least d + 2 = {d + 2} observations to fit, got {n}"
        )
    obs = data.observations
    if robust:
        mu = np.median(obs, axis=0)
        mad = MAD_SCALE * np.median(np.abs(obs - mu), axis=0)
        if np.any(mad <= 0):
            raise InitializationError("median absolute deviation is zero")
        sigma = np.diag(mad**2)
    else:
        mu = obs.mean(axis=0)
        sigma = np.atleast_2d(np.cov(obs, rowvar=False))
    try:
        return VgParams(mu=mu, sigma=sigma, gamma=np.zeros(d), nu=4.0 * d)
    except ParameterError as e:
        raise InitializationError(f"degenerate sample scale: {e}") from e


def _local_point_search(
    params: VgParams, data: Dataset, m: int, current_ll: float
) -> tuple[VgParams, float, bool]:
    obs = data.observations
    dist = mahalanobis_from_factor(params.chol, params.mu, obs)
    nearest = np.sort(np.argsort(dist, kind="stable")[:m])

    best, best_ll, moved = params, current_ll, False
    for idx in nearest:
        candidate = params.replace(mu=obs[idx])
        ll = loo_loglik(candidate, data)
        if ll > best_ll:
            best, best_ll, moved = candidate, ll, True
    return best, best_ll, moved


def _opening_search(state: "_Progress", data: Dataset, m: int) -> None:
    # Repeated until the best candidate is the centre of its own window.
    passes, moved = 0, True
    while moved:
        state.params, state.ll, moved = _local_point_search(
            state.params, data, m, state.ll
        )
        passes += 1
    logger.debug(
        "opening point search over %d candidates: %d pass(es), mu=%s",
        m,
        passes,
        state.params.mu,
    )


def local_point_search(params: VgParams, data: Dataset, m: int) -> VgParams:
    """Move mu to whichever of the m observations nearest to it, or mu itself,
    gives the highest LOO log-likelihood.

    Ties keep the current mu, then the candidate with the smallest index.
    """
    if m < 1:
        raise ValueError(f"m must be at least 1, got {m}")
    best, _, _ = _local_point_search(params, data, m, loo_loglik(params, data))
    return best


def cm_step_mu_gamma(stats: SuffStats, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Joint stationary point in (mu, gamma) of the fixed-index expected
    normal log-likelihood.

    Raises:
        DegenerateStepError: If S_{1/lam} S_lam - (n-1)**2 vanishes, as it
            does when every latent moment equals one.
    """
    m = n - 1
    product = stats.s_inv_lambda * stats.s_lambda
    denom = product - m * m
    if abs(denom) <= 1e-12 * max(product, m * m):
        raise DegenerateStepError(
            "S_inv_lambda * S_lambda equals (n-1)^2; mu and gamma are not identified"
        )
    mu = (stats.s_y_over_lambda * stats.s_lambda - m * stats.s_y) / denom
    gamma = (stats.s_y - m * mu) / stats.s_lambda
    return mu, gamma


def cm_step_mu(stats: SuffStats, gamma, n: int) -> np.ndarray:
    """Stationary point in mu alone, gamma held fixed."""
    m = n - 1
    return (stats.s_y_over_lambda - m * np.asarray(gamma, dtype=float)) / (
        stats.s_inv_lambda
    )


def cm_step_gamma(stats: SuffStats, mu, n: int) -> np.ndarray:
    """Stationary point in gamma alone, mu held fixed."""
    m = n - 1
    return (stats.s_y - m * np.asarray(mu, dtype=float)) / stats.s_lambda


def cm_step_sigma(
    data: Dataset,
    mu,
    gamma,
    moments: LatentMoments,
    excluded: int,
    n: int,
) -> np.ndarray:
    """Stationary point in Sigma of the fixed-index expected normal
    log-likelihood, at the given (mu, gamma):

        (1/(n-1)) sum_{i != k} [ r r' E[1/lam] - r gamma' - gamma r' + gamma gamma' E[lam] ]

    with r = y_i - mu. When gamma solves CM-step 1 this reduces to
    (1/(n-1)) sum r r' E[1/lam] - gamma gamma' S_lam / (n-1).

    Raises:
        DegenerateStepError: If the result is not positive definite.
    """
    m = n - 1
    mu = np.asarray(mu, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    keep = np.ones(data.n, dtype=bool)
    keep[excluded] = False
    r = data.observations[keep] - mu
    inv = moments.inv_lambda_hat[keep]
    s_r = r.sum(axis=0)
    s_lambda = float(np.sum(moments.lambda_hat[keep]))

    sigma = (
        (inv[:, None] * r).T @ r
        - np.outer(s_r, gamma)
        - np.outer(gamma, s_r)
        + s_lambda * np.outer(gamma, gamma)
    ) / m
    sigma = 0.5 * (sigma + sigma.T)
    try:
        cholesky_factor(sigma)
    except ParameterError as e:
        raise DegenerateStepError(f"Sigma update is not positive definite: {e}") from e
    eig = np.linalg.eigvalsh(sigma)
    if eig[0] <= _SINGULAR_RATIO * eig[-1]:
        raise DegenerateStepError(
            f"Sigma update is numerically singular (eigenvalues {eig[0]:.3g} .. {eig[-1]:.3g})"
        )
    return sigma


def nu_score(nu: float, stats: SuffStats, n: int) -> float:
    """d/dnu of the expected gamma log-likelihood."""
    m = n - 1
    return m * (1.0 + math.log(nu) - digamma(nu)) + stats.s_log_lambda - stats.s_lambda


def _solve_nu(
    stats: SuffStats, n: int, nu_start: float, cfg: EcmConfig
) -> tuple[float, str | None]:
    """Newton-Raphson for the root of ``nu_score`` in u = log nu.

    The score is strictly decreasing in nu, so a root bracket in u is kept and
    any Newton step that leaves it is replaced by bisection. Returns the new
    nu and a clamp message when the root lies outside [nu_min, nu_max].
    """
    m = n - 1
    lo, hi = math.log(cfg.nu_min), math.log(cfg.nu_max)
    if nu_score(cfg.nu_max, stats, n) > 0:
        return cfg.nu_max, f"nu clamped at upper bound {cfg.nu_max:g}"
    if nu_score(cfg.nu_min, stats, n) < 0:
        return cfg.nu_min, f"nu clamped at lower bound {cfg.nu_min:g}"

    u = math.log(min(max(nu_start, cfg.nu_min), cfg.nu_max))
    for _ in range(cfg.nr_max_iter):
        nu = math.exp(u)
        g = nu_score(nu, stats, n)
        if g > 0:
            lo = u
        else:
            hi = u
        slope = m * (1.0 - nu * trigamma(nu))
        step = -g / slope if slope != 0 else 0.0
        u_next = u + step
        if not lo < u_next < hi:
            u_next = 0.5 * (lo + hi)
        if abs(u_next - u) < _NR_STEP_TOL:
            u = u_next
            break
        u = u_next
    return math.exp(u), None


def cm_step_nu(stats: SuffStats, n: int, nu_start: float, cfg: EcmConfig) -> float:
    """Maximise the expected gamma log-likelihood in nu.

    Newton-Raphson in log nu from ``nu_start``, clamped to
    [cfg.nu_min, cfg.nu_max]; a clamp is logged as a warning.
    """
    nu, note = _solve_nu(stats, n, nu_start, cfg)
    if note:
        logger.warning("%s", note)
    return nu


def _interpolate(old: VgParams, new: VgParams, alpha: float) -> VgParams:
    return VgParams(
        mu=old.mu + alpha * (new.mu - old.mu),
        sigma=old.sigma + alpha * (new.sigma - old.sigma),
        gamma=old.gamma + alpha * (new.gamma - old.gamma),
        nu=old.nu + alpha * (new.nu - old.nu),
    )


def _line_search(
    old: VgParams, new: VgParams, data: Dataset, cfg: EcmConfig, old_ll: float
) -> tuple[VgParams, float, float]:
    tried: dict[float, tuple[float, VgParams | None]] = {}

    def evaluate(alpha: float) -> float:
        alpha = float(alpha)
        if alpha not in tried:
            try:
                theta = _interpolate(old, new, alpha)
                tried[alpha] = (loo_loglik(theta, data), theta)
            except ParameterError:
                tried[alpha] = (-math.inf, None)
        ll = tried[alpha][0]
        return -ll if math.isfinite(ll) else _INFEASIBLE

    evaluate(1.0)
    optimize.minimize_scalar(
        evaluate,
        bounds=(0.0, 1.0),
        method="bounded",
        options={"xatol": 1e-8, "maxiter": cfg.line_search_evals},
    )

    best_alpha = max(tried, key=lambda a: (tried[a][0], a))
    best_ll, best_theta = tried[best_alpha]
    if best_theta is None or not best_ll > old_ll:
        return old, old_ll, 0.0
    logger.debug("line search accepted alpha=%.6g (%d points)", best_alpha, len(tried))
    return best_theta, best_ll, best_alpha


def line_search(
    theta_old: VgParams, theta_new: VgParams, data: Dataset, cfg: EcmConfig
) -> VgParams:
    """Best point on theta_old + alpha (theta_new - theta_old), alpha in [0, 1].

    alpha = 1 is always tried, then bounded Brent search proposes further
    points up to ``cfg.line_search_evals`` evaluations. Points with a non
    positive-definite Sigma are skipped. If no trial point improves on theta_old,
    theta_old is returned.
    """
    theta, _, _ = _line_search(
        theta_old, theta_new, data, cfg, loo_loglik(theta_old, data)
    )
    return theta


@dataclass
class _Progress:
    params: VgParams
    ll: float
    n: int
    warnings: list[str] = field(default_factory=list)

    def note(self, message: str) -> None:
        logger.warning("%s", message)
        if message not in self.warnings:
            self.warnings.append(message)

    def e_step(self, data: Dataset) -> tuple[LatentMoments, int]:
        moments = latent_moments(self.params, data)
        if moments.clamped > 1:
            self.note(
                f"{moments.clamped} observations coincide with mu; "
                "distances clamped in the E-step"
            )
        dist = mahalanobis_from_factor(
            self.params.chol, self.params.mu, data.observations
        )
        return moments, int(np.argmin(dist))

    def accept(self, candidate: VgParams, data: Dataset, cfg: EcmConfig) -> None:
        self.params, self.ll, _ = _line_search(
            self.params, candidate, data, cfg, self.ll
        )


def _update_location(
    state: _Progress, data: Dataset, cfg: EcmConfig, free_gamma: bool
) -> None:
    moments, k = state.e_step(data)
    stats = suff_stats(data, moments, k)
    p = state.params
    try:
        if free_gamma and cfg.is_free("mu"):
            mu, gamma = cm_step_mu_gamma(stats, state.n)
        elif cfg.is_free("mu"):
            mu, gamma = cm_step_mu(stats, p.gamma, state.n), p.gamma
        else:
            mu, gamma = p.mu, cm_step_gamma(stats, p.mu, state.n)
    except DegenerateStepError as e:
        state.note(f"CM-step 1 skipped: {e}")
        return
    state.accept(p.replace(mu=mu, gamma=gamma), data, cfg)


def _update_sigma(state: _Progress, data: Dataset, cfg: EcmConfig) -> None:
    moments, k = state.e_step(data)
    p = state.params
    try:
        sigma = cm_step_sigma(data, p.mu, p.gamma, moments, k, state.n)
    except DegenerateStepError as e:
        state.note(f"CM-step 2 skipped: {e}")
        return
    state.accept(p.replace(sigma=sigma), data, cfg)


def _update_nu(state: _Progress, data: Dataset, cfg: EcmConfig) -> None:
    moments, k = state.e_step(data)
    stats = suff_stats(data, moments, k)
    nu, clamp = _solve_nu(stats, state.n, state.params.nu, cfg)
    if clamp:
        state.note(clamp)
    state.accept(state.params.replace(nu=nu), data, cfg)


def _relative_change(ll: float, ll_prev: float) -> float:
    if ll == ll_prev:
        return 0.0
    return abs(ll - ll_prev) / (abs(ll_prev) + 1.0)


def parameter_change(old: VgParams, new: VgParams) -> float:
    """Largest change between two parameter sets in the metric of new.sigma.

    mu and gamma changes are Mahalanobis lengths, the Sigma change is the
    largest entry of L^{-1} (Sigma_new - Sigma_old) L^{-T} and the nu change is
    relative, so the value does not change under affine maps of the data.
    """
    chol = new.chol
    origin = np.zeros(new.d)
    steps = mahalanobis_from_factor(
        chol, origin, np.vstack([new.mu - old.mu, new.gamma - old.gamma])
    )
    w = linalg.solve_triangular(chol, new.sigma - old.sigma, lower=True)
    w = linalg.solve_triangular(chol, w.T, lower=True)
    return max(
        math.sqrt(float(steps[0])),
        math.sqrt(float(steps[1])),
        float(np.max(np.abs(w))),
        abs(new.nu - old.nu) / new.nu,
    )


def _converged(
    state: "_Progress", ll_prev: float, params_prev: VgParams, cfg: EcmConfig
) -> bool:
    if _relative_change(state.ll, ll_prev) >= cfg.tol:
        return False
    if cfg.param_tol is None:
        return True
    return parameter_change(params_prev, state.params) < cfg.param_tol


def _run(
    state: _Progress, data: Dataset, cfg: EcmConfig, location_only: bool
) -> FitResult:
    initial_ll = state.ll
    trace: list[float] = []
    termination = Termination.MAX_ITER
    relocations = 0
    free_gamma = cfg.is_free("gamma") and not location_only
    opening = cfg.opening_search_size(data.n) if cfg.is_free("mu") else 0

    iteration = 0
    for iteration in range(1, cfg.max_iter + 1):
        ll_prev, params_prev = state.ll, state.params

        if iteration == 1 and opening:
            _opening_search(state, data, opening)
        if cfg.is_free("mu"):
            state.params, state.ll, moved = _local_point_search(
                state.params, data, cfg.m_search, state.ll
            )
            relocations = relocations + 1 if moved else 0
            if relocations == OSCILLATION_LIMIT:
                state.note(
                    f"local point search relocated mu in {OSCILLATION_LIMIT} "
                    "consecutive iterations"
                )

        if cfg.is_free("mu") or free_gamma:
            _update_location(state, data, cfg, free_gamma)
        if not location_only:
            if cfg.is_free("sigma"):
                _update_sigma(state, data, cfg)
            if cfg.is_free("nu"):
                _update_nu(state, data, cfg)

        trace.append(state.ll)
        logger.debug("iteration %d: LOO log-likelihood %.12g", iteration, state.ll)
        if _converged(state, ll_prev, params_prev, cfg):
            termination = Termination.CONVERGED
            break

    logger.info(
        "ECM stopped after %d iterations (%s), LOO log-likelihood %.10g",
        iteration,
        termination.value,
        state.ll,
    )
    return FitResult(
        params=state.params,
        loglik_trace=np.asarray(trace, dtype=float),
        iterations=iteration,
        termination=termination,
        initial_loglik=initial_ll,
        warnings=state.warnings,
    )


def fit(
    data: Dataset, cfg: EcmConfig | None = None, init: VgParams | None = None
) -> FitResult:
    """Fit all four parameter blocks by maximum LOO likelihood.

    Blocks named in ``cfg.fixed_mask`` keep their starting values.

    Raises:
        InitializationError: If n < d + 2 or no starting values can be formed.
    """
    cfg = cfg or EcmConfig()
    if data.n < data.d + 2:
        raise InitializationError(
            f"need at least d + 2 = {data.d + 2} observations to fit, got {data.n}"
        )
    params = init if init is not None else initialize(data, cfg.robust_init)
    if params.d != data.d:
        raise ParameterError(
            f"starting values have dimension {params.d}, data has {data.d}"
        )
    logger.info("fitting n=%d d=%d from %r", data.n, data.d, params)
    state = _Progress(params=params, ll=loo_loglik(params, data), n=data.n)
    return _run(state, data, cfg, location_only=False)


def fit_location(
    data: Dataset, fixed: VgParams, cfg: EcmConfig | None = None, init_mu=None
) -> FitResult:
    """Maximise the LOO likelihood over mu with (Sigma, gamma, nu) held at
    ``fixed``. Each iteration is a local point search, E-step 1 and the
    mu-only CM-step with its line search.
    """
    cfg = cfg or EcmConfig()
    if init_mu is None:
        init_mu = np.median(data.observations, axis=0)
    params = fixed.replace(mu=np.atleast_1d(np.asarray(init_mu, dtype=float)))
    if params.d != data.d:
        raise ParameterError(
            f"fixed parameters have dimension {params.d}, data has {data.d}"
        )
    cfg = cfg.model_copy(update={"fixed_mask": frozenset({"sigma", "gamma", "nu"})})
    state = _Progress(params=params, ll=loo_loglik(params, data), n=data.n)
    return _run(state, data, cfg, location_only=True)


def fit_location_only(
    data: Dataset, fixed: VgParams, cfg: EcmConfig | None = None, init_mu=None
) -> np.ndarray:
    """mu-hat from ``fit_location``."""
    return fit_location(data, fixed, cfg, init_mu).params.mu
