"""loovg -- fit the skewed variance-gamma distribution by maximum leave-one-out
likelihood, and study the convergence rate of the location estimator."""

import argparse
import logging
import os
import sys

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

from ecm_fitter import (
    DegenerateStepError,
    EcmConfig,
    InitializationError,
    Termination,
    fit,
)
from sim_harness import (
    DegenerateSampleError,
    STUDY_SEARCH_FRACTION,
    StudySpec,
    emit_qq,
    replicate_rng,
    run_rate_study,
    write_study_outputs,
)
from special_fn import SpecialFunctionDomainError
from validation import (
    CsvFormatError,
    FlagError,
    parse_count_grid,
    parse_fixed_blocks,
    parse_matrix,
    parse_positive_grid,
    parse_vector,
    read_dataset,
)
from vg_model import (
    DatasetError,
    ParameterError,
    VgParams,
    sample,
    write_dataset,
)

logger = logging.getLogger(__name__)

# Exit codes
EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_NOT_CONVERGED = 3
EXIT_DEGENERATE = 4

# Environment settings
THREADS_ENV = "LOOVG_THREADS"
LOG_LEVEL_ENV = "LOOVG_LOG_LEVEL"

INPUT_ERRORS = (
    CsvFormatError,
    FlagError,
    ParameterError,
    DatasetError,
    InitializationError,
    ValidationError,
    SpecialFunctionDomainError,
    OSError,
)
DEGENERATE_ERRORS = (DegenerateStepError, DegenerateSampleError)

_ECM_DEFAULTS = {name: f.default for name, f in EcmConfig.model_fields.items()}


class InputError(ValueError):
    """Raised when a command-line argument fails validation before compute."""


def _env_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError:
        raise InputError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if threads < 1:
        raise InputError(f"{THREADS_ENV} must be at least 1, got {threads}")
    return threads


def _configure_logging() -> None:
    level_name = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        print(f"Unknown {LOG_LEVEL_ENV} {level_name!r}; using WARNING.", file=sys.stderr)
        level = logging.WARNING
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )


def _check_readable(path: str) -> None:
    if not os.path.isfile(path):
        raise InputError(f"input file not found: {path}")
    if not os.access(path, os.R_OK):
        raise InputError(f"input file is not readable: {path}")


def _check_writable(path: str | None) -> None:
    if path is None:
        return
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise InputError(f"output directory does not exist: {parent}")


def _write_text(text: str, path: str | None) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    print(f"Report written to {path}")


def cmd_fit(args: argparse.Namespace) -> int:
    """Fit all parameters to an observation file and report the estimates."""
    _check_readable(args.input)
    _check_writable(args.out)
    cfg = EcmConfig(
        tol=args.tol,
        max_iter=args.max_iter,
        m_search=args.m,
        nu_min=args.nu_min,
        nu_max=args.nu_max,
        nr_max_iter=args.nr_max_iter,
        line_search_evals=args.line_search_evals,
        param_tol=args.param_tol,
        search_fraction=args.search_fraction,
        fixed_mask=parse_fixed_blocks(args.fix),
        robust_init=args.robust_init,
    )
    data = read_dataset(args.input, skip_header=args.skip_header)
    result = fit(data, cfg)
    _write_text(result.to_report(), args.out)
    if result.termination is Termination.MAX_ITER:
        print(
            f"Not converged after {result.iterations} iterations.", file=sys.stderr
        )
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _sample_params(args: argparse.Namespace) -> VgParams:
    mu = parse_vector(args.mu, "--mu")
    d = mu.shape[0]
    sigma = parse_matrix(args.sigma, "--sigma") if args.sigma else np.eye(d)
    gamma = parse_vector(args.gamma, "--gamma") if args.gamma else np.zeros(d)
    return VgParams(mu=mu, sigma=sigma, gamma=gamma, nu=args.nu)


def cmd_sample(args: argparse.Namespace) -> int:
    """Draw observations from an MSVG distribution and write them as CSV."""
    if args.n < 0:
        raise InputError(f"--n must be non-negative, got {args.n}")
    _check_writable(args.out)
    params = _sample_params(args)
    if args.n == 0:
        with open(args.out, "w", encoding="utf-8"):
            pass
    else:
        rng = np.random.default_rng(args.seed)
        write_dataset(sample(params, args.n, rng), args.out)
    print(f"Wrote {args.n} observation(s) to {args.out}")
    return EXIT_OK


def cmd_rate_study(args: argparse.Namespace) -> int:
    """Run the convergence-rate study and write its tables to a directory."""
    threads = args.threads if args.threads is not None else _env_threads()
    if threads < 1:
        raise InputError(f"--threads must be at least 1, got {threads}")
    spec = StudySpec(
        nu_grid=parse_positive_grid(args.nu_grid, "--nu-grid"),
        n_grid=parse_count_grid(args.n_grid, "--n-grid", minimum=2),
        replicates=args.replicates,
        seed=args.seed,
        qq_mc_size=args.qq_mc_size,
        search_fraction=args.search_fraction,
    )
    os.makedirs(args.out_dir, exist_ok=True)

    result = run_rate_study(spec, workers=threads)
    written = write_study_outputs(result, args.out_dir)

    print(f"Wrote {len(written)} file(s) to {args.out_dir}")
    for rate in result.rates:
        print(
            f"  nu={rate.nu:g}: beta_hat={rate.beta_hat:.4f} "
            f"proposed={rate.beta_proposed:.4f} rel_error={rate.rel_error:+.4f}"
        )
    if result.total_failures:
        print(
            f"  {result.total_failures} replicate(s) failed; see manifest.json",
            file=sys.stderr,
        )
    if result.all_failed:
        print("Every replicate failed.", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_qq(args: argparse.Namespace) -> int:
    """Pair sorted samples with Monte Carlo quantiles of a fitted symmetric VG."""
    _check_readable(args.samples_csv)
    _check_writable(args.out)
    if args.sigma <= 0 or args.nu <= 0:
        raise InputError("--sigma and --nu must be positive")
    if args.mc_size < 2:
        raise InputError(f"--mc-size must be at least 2, got {args.mc_size}")
    data = read_dataset(args.samples_csv, skip_header=args.skip_header)
    if data.d != 1:
        raise InputError(f"Q-Q samples must have one column, got {data.d}")

    rng = np.random.default_rng(args.seed)
    theoretical, empirical = emit_qq(
        data.observations[:, 0], (args.sigma, args.nu), args.mc_size, rng
    )
    lines = ["theoretical,empirical"]
    lines.extend(f"{t:.17g},{e:.17g}" for t, e in zip(theoretical, empirical))
    _write_text("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def _exit_code_for(exc: Exception) -> int:
    if isinstance(exc, DEGENERATE_ERRORS):
        return EXIT_DEGENERATE
    return EXIT_INPUT_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loovg",
        description="Maximum leave-one-out likelihood fitting of the "
        "multivariate skewed variance-gamma distribution.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser(
        "fit",
        help="Fit all parameters to a CSV of observations.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_fit.add_argument("input", help="CSV file, one observation per row.")
    p_fit.add_argument(
        "--skip-header", action="store_true", help="Skip the first row of the CSV."
    )
    p_fit.add_argument(
        "--robust-init",
        action="store_true",
        help="Start from the median and a MAD-based scale.",
    )
    p_fit.add_argument("--tol", type=float, default=_ECM_DEFAULTS["tol"],
                       help="Relative LOO log-likelihood increment to stop at.")
    p_fit.add_argument("--max-iter", type=int, default=_ECM_DEFAULTS["max_iter"],
                       help="Maximum number of ECM iterations.")
    p_fit.add_argument("--m", type=int, default=_ECM_DEFAULTS["m_search"],
                       help="Neighbours tried by the local point search.")
    p_fit.add_argument("--nu-min", type=float, default=_ECM_DEFAULTS["nu_min"],
                       help="Lower bound for nu.")
    p_fit.add_argument("--nu-max", type=float, default=_ECM_DEFAULTS["nu_max"],
                       help="Upper bound for nu.")
    p_fit.add_argument("--nr-max-iter", type=int, default=_ECM_DEFAULTS["nr_max_iter"],
                       help="Newton-Raphson steps per nu update.")
    p_fit.add_argument("--line-search-evals", type=int,
                       default=_ECM_DEFAULTS["line_search_evals"],
                       help="Function evaluations per line search.")
    p_fit.add_argument("--param-tol", type=float, default=_ECM_DEFAULTS["param_tol"],
                       help="Also require parameter changes below this to stop.")
    p_fit.add_argument("--search-fraction", type=float,
                       default=_ECM_DEFAULTS["search_fraction"],
                       help="Share of observations in the opening point search.")
    p_fit.add_argument(
        "--fix",
        default="",
        help="Comma list of parameter blocks to hold at their starting "
        "values (mu, sigma, gamma, nu).",
    )
    p_fit.add_argument("--out", help="Report file (standard output if omitted).")
    p_fit.set_defaults(handler=cmd_fit)

    p_sample = sub.add_parser(
        "sample",
        help="Draw observations from an MSVG distribution.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_sample.add_argument("--mu", default="0", help="Location, comma list.")
    p_sample.add_argument(
        "--sigma", default=None, help="Scale matrix, rows separated by ';' "
        "(identity if omitted)."
    )
    p_sample.add_argument(
        "--gamma", default=None, help="Skewness, comma list (zero if omitted)."
    )
    p_sample.add_argument("--nu", type=float, default=1.0, help="Shape.")
    p_sample.add_argument("--n", type=int, required=True, help="Number of draws.")
    p_sample.add_argument("--seed", type=int, default=0, help="Random seed.")
    p_sample.add_argument("--out", required=True, help="Output CSV file.")
    p_sample.set_defaults(handler=cmd_sample)

    p_study = sub.add_parser(
        "rate-study",
        help="Estimate the convergence rate of the LOO location estimator.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_study.add_argument("--nu-grid", default="0.2,0.5,1", help="Comma list of nu.")
    p_study.add_argument(
        "--n-grid", default="500,1000,2000,4000", help="Comma list of sample sizes."
    )
    p_study.add_argument("--replicates", type=int, default=500,
                         help="Replicates per (nu, n).")
    p_study.add_argument("--seed", type=int, default=0, help="Study seed.")
    p_study.add_argument("--qq-mc-size", type=int, default=20000,
                         help="Monte Carlo draws for each Q-Q table.")
    p_study.add_argument("--search-fraction", type=float,
                         default=STUDY_SEARCH_FRACTION,
                         help="Share of each replicate in the opening point search.")
    p_study.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"Worker processes (default: ${THREADS_ENV} or 1).",
    )
    p_study.add_argument("--out-dir", required=True, help="Output directory.")
    p_study.set_defaults(handler=cmd_rate_study)

    p_qq = sub.add_parser(
        "qq",
        help="Q-Q pairs of samples against a fitted symmetric VG.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_qq.add_argument("--samples-csv", required=True, help="One-column CSV.")
    p_qq.add_argument(
        "--skip-header", action="store_true", help="Skip the first row of the CSV."
    )
    p_qq.add_argument("--sigma", type=float, required=True, help="Fitted scale.")
    p_qq.add_argument("--nu", type=float, required=True, help="Fitted shape.")
    p_qq.add_argument("--mc-size", type=int, default=20000,
                      help="Monte Carlo sample size.")
    p_qq.add_argument("--seed", type=int, default=0, help="Random seed.")
    p_qq.add_argument("--out", help="Output CSV (standard output if omitted).")
    p_qq.set_defaults(handler=cmd_qq)

    return parser


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (*INPUT_ERRORS, *DEGENERATE_ERRORS, InputError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return _exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
