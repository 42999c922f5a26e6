"""Monte Carlo study of the convergence rate of the LOO location estimator.

For each shape nu and sample size n the study draws standardized symmetric VG
samples (mu = 0, sigma2 = 1, gamma = 0), estimates mu with the location-only
ECM fit while the other parameters stay at their true values, and summarises
the spread of mu-hat by its interquartile range. Regressing log IQR on log n
gives the empirical rate beta-hat, which is compared against 1 / (1 + 2 nu - d).
A symmetric VG is then fitted to the scaled estimates n**beta-hat * mu-hat,
and KDE and Q-Q data of those estimates are written for plotting.
"""

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import stats

from ecm_fitter import (
    DegenerateStepError,
    EcmConfig,
    InitializationError,
    fit,
    fit_location_only,
    initialize,
)
from special_fn import SpecialFunctionDomainError
from vg_model import Dataset, DatasetError, ParameterError, VgParams, sample

logger = logging.getLogger(__name__)

# First spawn-key entry separating the replicate streams from the Q-Q streams.
STREAM_REPLICATE = 0
STREAM_QQ = 1

# Cap on nu when fitting a VG to the scaled estimates.
NU_CAP = 30.0

# Share of each replicate scanned by the opening point search of the location
# fit. The LOO likelihood in mu has a local maximum near every observation, so
# a fixed-size window stalls once n is large.
STUDY_SEARCH_FRACTION = 0.1

STUDY_FILE = "study.csv"
MANIFEST_FILE = "manifest.json"
STUDY_COLUMNS = [
    "nu",
    "n",
    "replicates_ok",
    "iqr",
    "beta_hat",
    "beta_proposed",
    "rel_error",
    "sigma_mu_hat",
    "nu_mu_hat",
]


class DegenerateSampleError(ValueError):
    """Raised when a set of estimates has no spread to measure."""


class StudySpec(BaseModel):
    """Grid, replicate count and seed of a rate study."""

    model_config = ConfigDict(frozen=True)

    nu_grid: tuple[float, ...] = Field(min_length=1)
    n_grid: tuple[int, ...] = Field(min_length=1)
    replicates: int = Field(ge=2)
    seed: int = Field(ge=0, lt=2**64)
    d: int = Field(1, ge=1, le=1)
    qq_mc_size: int = Field(20000, ge=2)
    kde_limit: float = Field(6.0, gt=0)
    kde_points: int = Field(241, ge=2)
    search_fraction: float = Field(STUDY_SEARCH_FRACTION, ge=0, le=1)

    @field_validator("nu_grid")
    @classmethod
    def _positive_nu(cls, values: tuple[float, ...]) -> tuple[float, ...]:
        for nu in values:
            if not math.isfinite(nu) or nu <= 0:
                raise ValueError(f"every nu must be a positive number, got {nu}")
        if len(set(values)) != len(values):
            raise ValueError("nu grid contains duplicates")
        return values

    @field_validator("n_grid")
    @classmethod
    def _valid_n(cls, values: tuple[int, ...]) -> tuple[int, ...]:
        for n in values:
            if n < 2:
                raise ValueError(f"every n must be at least 2, got {n}")
        if len(set(values)) != len(values):
            raise ValueError("n grid contains duplicates")
        return values


@dataclass
class StudyCell:
    """Location estimates for one (nu, n) pair."""

    nu: float
    n: int
    mu_hats: np.ndarray
    failures: int
    iqr: float
    sigma_mu_hat: float = math.nan
    nu_mu_hat: float = math.nan

    @property
    def replicates_ok(self) -> int:
        return int(self.mu_hats.shape[0])


@dataclass
class RateFit:
    """Power-law fit of IQR against n for one nu."""

    nu: float
    log_a: float
    b: float
    beta_hat: float
    beta_proposed: float
    rel_error: float


@dataclass
class RateStudyResult:
    spec: StudySpec
    cells: list[StudyCell]
    rates: list[RateFit]
    warnings: list[str]

    def cell(self, nu: float, n: int) -> StudyCell:
        for c in self.cells:
            if c.nu == nu and c.n == n:
                return c
        raise KeyError((nu, n))

    def rate(self, nu: float) -> RateFit:
        for r in self.rates:
            if r.nu == nu:
                return r
        raise KeyError(nu)

    @property
    def total_failures(self) -> int:
        return sum(c.failures for c in self.cells)

    @property
    def all_failed(self) -> bool:
        return all(c.replicates_ok == 0 for c in self.cells)


def iqr(values) -> float:
    """Interquartile range with linear interpolation between order statistics
    (the type 7 quantile rule)."""
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size < 2:
        raise DegenerateSampleError("an IQR needs at least two values")
    q1, q3 = np.quantile(arr, [0.25, 0.75], method="linear")
    return float(q3 - q1)


def nu_stream_key(nu: float) -> int:
    """Integer identifying nu in a spawn key, stable to 1e-9."""
    return int(round(nu * 1e9))


def replicate_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the substream identified by ``key``.

    Streams come from ``SeedSequence`` spawn keys, so the draws for a key do
    not depend on which other keys exist or the order they are used in.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def proposed_rate(nu: float, d: int = 1) -> float:
    """1 / (1 + 2 nu - d); equals 1 / (2 nu) for d = 1.

    Raises:
        ParameterError: If 1 + 2 nu - d <= 0.
    """
    denom = 1.0 + 2.0 * nu - d
    if denom <= 0:
        raise ParameterError(f"1 + 2 nu - d must be positive, got {denom:g}")
    if nu >= d / 2:
        logger.info("nu=%g is outside the unbounded-density regime nu < d/2", nu)
    return 1.0 / denom


def fit_power_law(n_values, iqr_values) -> tuple[float, float, float]:
    """Least squares fit of log IQR = log a + b log n.

    Returns (log_a, b, beta_hat) with beta_hat = -b.

    Raises:
        DegenerateSampleError: If fewer than two distinct n are given or an
            IQR is not positive.
    """
    n_arr = np.asarray(n_values, dtype=float).ravel()
    iqr_arr = np.asarray(iqr_values, dtype=float).ravel()
    if n_arr.shape != iqr_arr.shape:
        raise DegenerateSampleError("n and IQR values must have the same length")
    if np.unique(n_arr).size < 2:
        raise DegenerateSampleError("need at least two distinct sample sizes")
    if not np.all(iqr_arr > 0):
        raise DegenerateSampleError("every IQR must be positive")
    reg = stats.linregress(np.log(n_arr), np.log(iqr_arr))
    b = float(reg.slope)
    return float(reg.intercept), b, -b


def fit_scaled_estimates(
    mu_hats, beta_hat: float, n: int, cfg: EcmConfig | None = None
) -> tuple[float, float]:
    """Fit a symmetric VG with location and skewness 0 to n**beta_hat * mu_hat.

    Returns (sigma, nu): the scale as a standard deviation and the shape, with
    nu capped at ``cfg.nu_max`` (NU_CAP unless a config is given).

    Raises:
        DegenerateSampleError: If the estimates have no spread.
    """
    values = np.asarray(mu_hats, dtype=float).ravel()
    if values.size < 3 or iqr(values) <= 0:
        raise DegenerateSampleError("scaled estimates have zero spread")
    cfg = cfg or EcmConfig(nu_max=NU_CAP)
    cfg = cfg.model_copy(
        update={"fixed_mask": frozenset(cfg.fixed_mask | {"mu", "gamma"})}
    )
    data = Dataset(values * float(n) ** beta_hat)
    start = initialize(data, robust=True)
    start = start.replace(
        mu=np.zeros(1),
        nu=min(max(start.nu, cfg.nu_min), cfg.nu_max),
    )
    result = fit(data, cfg, init=start)
    return math.sqrt(float(result.params.sigma[0, 0])), result.params.nu


def kde_curve(samples, grid) -> np.ndarray:
    """Gaussian kernel density of the samples after dividing them by their IQR.

    The bandwidth follows Silverman's rule on the standardized values.

    Raises:
        DegenerateSampleError: If the IQR is zero.
    """
    values = np.asarray(samples, dtype=float).ravel()
    spread = iqr(values)
    if spread <= 0:
        raise DegenerateSampleError("samples have zero IQR")
    kde = stats.gaussian_kde(values / spread, bw_method="silverman")
    return kde(np.asarray(grid, dtype=float))


def emit_qq(
    samples, fitted: tuple[float, float], mc_size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Q-Q pairs of the samples against a symmetric VG(0, sigma**2, 0, nu).

    Draws ``mc_size`` variates from the fitted law and sorts both sets. When
    the sizes differ, the larger set is interpolated at the plotting positions
    (i - 0.5) / m of the smaller one. Returns (theoretical, empirical).
    """
    if mc_size < 2:
        raise DegenerateSampleError(f"mc_size must be at least 2, got {mc_size}")
    sigma, nu = fitted
    law = VgParams.univariate(0.0, sigma * sigma, 0.0, nu)
    theoretical = np.sort(sample(law, mc_size, rng).observations[:, 0])
    empirical = np.sort(np.asarray(samples, dtype=float).ravel())

    m = min(theoretical.size, empirical.size)
    positions = (np.arange(1, m + 1) - 0.5) / m
    if theoretical.size > m:
        theoretical = np.quantile(theoretical, positions, method="hazen")
    elif empirical.size > m:
        empirical = np.quantile(empirical, positions, method="hazen")
    return theoretical, empirical


def _replicate(task: tuple) -> tuple[float | None, str | None]:
    seed, nu, n, r, cfg = task
    rng = replicate_rng(seed, STREAM_REPLICATE, nu_stream_key(nu), n, r)
    truth = VgParams.univariate(0.0, 1.0, 0.0, nu)
    try:
        data = sample(truth, n, rng)
        init_mu = np.median(data.observations, axis=0)
        mu_hat = fit_location_only(data, truth, cfg, init_mu)
    except (
        DatasetError,
        ParameterError,
        InitializationError,
        DegenerateStepError,
        SpecialFunctionDomainError,
        FloatingPointError,
    ) as e:
        return None, f"nu={nu:g} n={n} replicate {r}: {e}"
    return float(mu_hat[0]), None


def _run_tasks(tasks: list[tuple], workers: int) -> list[tuple]:
    if workers <= 1:
        return [_replicate(t) for t in tasks]
    chunk = max(1, len(tasks) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_replicate, tasks, chunksize=chunk))


def run_rate_study(
    spec: StudySpec, cfg: EcmConfig | None = None, workers: int = 1
) -> RateStudyResult:
    """Run every replicate of the study and aggregate per (nu, n) and per nu.

    Each replicate uses its own substream keyed by (nu, n, replicate), and
    results are gathered in grid order, so the output does not depend on the
    number of workers. A replicate whose fit fails is excluded and counted.
    The location fits open with a point search over ``spec.search_fraction``
    of each replicate, overriding the value in ``cfg``.
    """
    cfg = (cfg or EcmConfig()).model_copy(
        update={"search_fraction": spec.search_fraction}
    )
    tasks = [
        (spec.seed, nu, n, r, cfg)
        for nu in spec.nu_grid
        for n in spec.n_grid
        for r in range(spec.replicates)
    ]
    logger.info(
        "rate study: %d cells x %d replicates on %d worker(s)",
        len(spec.nu_grid) * len(spec.n_grid),
        spec.replicates,
        workers,
    )
    outcomes = _run_tasks(tasks, workers)

    warnings: list[str] = []
    cells: list[StudyCell] = []
    pos = 0
    for nu in spec.nu_grid:
        for n in spec.n_grid:
            block = outcomes[pos : pos + spec.replicates]
            pos += spec.replicates
            mu_hats = np.array([v for v, _ in block if v is not None], dtype=float)
            for _, err in block:
                if err:
                    logger.warning("replicate failed: %s", err)
                    warnings.append(err)
            spread = iqr(mu_hats) if mu_hats.size >= 2 else math.nan
            cells.append(
                StudyCell(
                    nu=nu,
                    n=n,
                    mu_hats=mu_hats,
                    failures=spec.replicates - mu_hats.size,
                    iqr=spread,
                )
            )
            logger.info("nu=%g n=%d: IQR %.6g over %d fits", nu, n, spread, mu_hats.size)

    rates = [_fit_rate(nu, cells, spec, warnings) for nu in spec.nu_grid]
    for cell in cells:
        beta_hat = next(r.beta_hat for r in rates if r.nu == cell.nu)
        if not math.isfinite(beta_hat):
            continue
        try:
            cell.sigma_mu_hat, cell.nu_mu_hat = fit_scaled_estimates(
                cell.mu_hats, beta_hat, cell.n
            )
        except (
            DegenerateSampleError,
            InitializationError,
            DegenerateStepError,
            ParameterError,
            DatasetError,
            SpecialFunctionDomainError,
            FloatingPointError,
        ) as e:
            msg = f"nu={cell.nu:g} n={cell.n}: scaled VG fit failed: {e}"
            logger.warning("%s", msg)
            warnings.append(msg)

    return RateStudyResult(spec=spec, cells=cells, rates=rates, warnings=warnings)


def _fit_rate(
    nu: float, cells: list[StudyCell], spec: StudySpec, warnings: list[str]
) -> RateFit:
    usable = [c for c in cells if c.nu == nu and c.iqr > 0]
    beta_proposed = proposed_rate(nu, spec.d)
    try:
        log_a, b, beta_hat = fit_power_law(
            [c.n for c in usable], [c.iqr for c in usable]
        )
    except DegenerateSampleError as e:
        msg = f"nu={nu:g}: no power-law fit: {e}"
        logger.warning("%s", msg)
        warnings.append(msg)
        log_a = b = beta_hat = math.nan
    return RateFit(
        nu=nu,
        log_a=log_a,
        b=b,
        beta_hat=beta_hat,
        beta_proposed=beta_proposed,
        rel_error=(beta_hat - beta_proposed) / beta_proposed,
    )


def _cell_suffix(cell: StudyCell) -> str:
    return f"nu{cell.nu:g}_n{cell.n}"


def _write_rows(path: str, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])


def _format_cell(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    return "nan" if math.isnan(value) else format(value, ".12g")


def write_study_outputs(result: RateStudyResult, out_dir: str) -> list[str]:
    """Write the study table, per-cell KDE and Q-Q tables, and a manifest.

    Returns the file names written, relative to ``out_dir``.
    """
    os.makedirs(out_dir, exist_ok=True)
    spec = result.spec
    written = [STUDY_FILE]

    rows = []
    for cell in result.cells:
        rate = result.rate(cell.nu)
        rows.append(
            [
                cell.nu,
                cell.n,
                cell.replicates_ok,
                cell.iqr,
                rate.beta_hat,
                rate.beta_proposed,
                rate.rel_error,
                cell.sigma_mu_hat,
                cell.nu_mu_hat,
            ]
        )
    _write_rows(os.path.join(out_dir, STUDY_FILE), STUDY_COLUMNS, rows)

    grid = np.linspace(-spec.kde_limit, spec.kde_limit, spec.kde_points)
    for cell in result.cells:
        if cell.replicates_ok < 2 or not cell.iqr > 0:
            continue
        name = f"kde_{_cell_suffix(cell)}.csv"
        _write_rows(
            os.path.join(out_dir, name),
            ["x", "density"],
            zip(grid, kde_curve(cell.mu_hats, grid)),
        )
        written.append(name)

        beta_hat = result.rate(cell.nu).beta_hat
        if not (math.isfinite(cell.sigma_mu_hat) and math.isfinite(beta_hat)):
            continue
        rng = replicate_rng(spec.seed, STREAM_QQ, nu_stream_key(cell.nu), cell.n)
        theoretical, empirical = emit_qq(
            cell.mu_hats * float(cell.n) ** beta_hat,
            (cell.sigma_mu_hat, cell.nu_mu_hat),
            spec.qq_mc_size,
            rng,
        )
        name = f"qq_{_cell_suffix(cell)}.csv"
        _write_rows(
            os.path.join(out_dir, name),
            ["theoretical", "empirical"],
            zip(theoretical, empirical),
        )
        written.append(name)

    manifest = {
        "spec": spec.model_dump(mode="json"),
        "seed": spec.seed,
        "failures": {
            _cell_suffix(c): c.failures for c in result.cells if c.failures
        },
        "total_failures": result.total_failures,
        "warnings": result.warnings,
        "files": written,
    }
    with open(os.path.join(out_dir, MANIFEST_FILE), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return written + [MANIFEST_FILE]
