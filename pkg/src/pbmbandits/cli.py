import argparse
import logging
import sys
from typing import List, Optional

import numpy as np
import pandas as pd

from pbmbandits.core.bound import admissible_eta, regret_lower_bound
from pbmbandits.core.emfit import EmFitOptions, IngestOptions, em_fit, em_fit_queries, ingest
from pbmbandits.core.envs.pbm_env_vars import PBM_BANDITS_LOG_LEVEL, PBM_BANDITS_NUM_WORKERS
from pbmbandits.core.harness import (
    ExperimentConfig,
    checkpoint_grid,
    export,
    reference_curve,
    run_experiment,
)
from pbmbandits.core.indices import phi
from pbmbandits.core.utils.config import (
    DEFAULT_CHECKPOINTS,
    DEFAULT_EPSILON,
    DEFAULT_HORIZON,
    EM_MAX_ITERS,
    EM_TOL,
    MIN_ARMS,
    MIN_IMPRESSIONS,
)
from pbmbandits.core.utils.io_utils import (
    CSV_FLOAT_FORMAT,
    dumps_json,
    ensure_directory,
    load_counters,
    load_model,
    load_structured_file,
    write_csv,
    write_json,
)
from pbmbandits.core.version import VERSION

_logger = logging.getLogger(__name__)


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"expecting a positive integer, got {value}")
    return number


def _kappa_list(value: str) -> List[float]:
    try:
        return [float(item) for item in value.split(",")]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expecting comma-separated floats, got {value}") from e


def parse_args(args: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="pbm-bandits",
        description="Multiple-play bandit experiments under the position-based click model",
    )
    parser.add_argument(
        "--log-level",
        default=None,
        help="Logging level, defaults to the PBM_BANDITS_LOG_LEVEL environment variable",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    simulate = subparsers.add_parser("simulate", help="Run a seeded regret experiment")
    simulate.add_argument("--config", required=True, help="Experiment config (YAML or JSON)")
    simulate.add_argument("--out", default=None, help="Output directory, overrides output_dir")
    simulate.add_argument(
        "--threads",
        type=_positive_int,
        default=None,
        help="Worker processes, defaults to the PBM_BANDITS_NUM_WORKERS environment variable",
    )

    bound = subparsers.add_parser("bound", help="Print the asymptotic regret lower bound")
    bound.add_argument("--model", required=True, help="Model file or preset name")
    bound.add_argument("--horizon", type=_positive_int, default=DEFAULT_HORIZON)
    bound.add_argument("--checkpoints", type=_positive_int, default=DEFAULT_CHECKPOINTS)
    bound.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    bound.add_argument(
        "--eta",
        type=float,
        default=None,
        help="Margin of the PBM-PIE leading term, defaults to 0.01 or half the admissible bound",
    )

    fit = subparsers.add_parser("fit", help="Fit PBM parameters to a click log by EM")
    fit.add_argument("--input", required=True, help="Raw or pre-aggregated click log CSV")
    fit.add_argument("--positions", type=_positive_int, required=True)
    fit.add_argument("--min-impressions", type=int, default=MIN_IMPRESSIONS)
    fit.add_argument("--min-arms", type=_positive_int, default=MIN_ARMS)
    fit.add_argument("--max-iters", type=_positive_int, default=EM_MAX_ITERS)
    fit.add_argument("--tol", type=float, default=EM_TOL)
    fit.add_argument(
        "--per-query",
        action="store_true",
        help="Fit every query with its own kappa; the output feeds the model_pool mode",
    )
    fit.add_argument("--out", default=None, help="Output directory for fit.json and theta.csv")
    fit.add_argument("--threads", type=_positive_int, default=None)

    index = subparsers.add_parser("index", help="Print the KL index profile q,phi of an arm")
    index.add_argument("--counters", required=True, help="CSV arm,position,plays,clicks")
    index.add_argument("--arm", type=_positive_int, required=True, help="1-based arm")
    index.add_argument("--kappa", type=_kappa_list, required=True, help="e.g. 0.9,0.6,0.3")
    index.add_argument("--grid", type=_positive_int, default=101, help="Number of q values")

    subparsers.add_parser("version", help="Print the package version")
    return parser.parse_args(args)


def _simulate(args: argparse.Namespace) -> None:
    config = ExperimentConfig.model_validate(load_structured_file(args.config))
    output_dir = args.out or config.output_dir
    if output_dir is None:
        raise ValueError("No output directory: pass --out or set output_dir in the config.")
    ensure_directory(output_dir)
    workers = args.threads or PBM_BANDITS_NUM_WORKERS.get_int()
    result = run_experiment(config, workers=workers)
    export(result, output_dir)
    for label, curve in result.curves.items():
        sys.stdout.write(f"{label}\t{curve.final_mean:.4f}\n")


def _bound(args: argparse.Namespace) -> None:
    model = load_model(args.model)
    report = regret_lower_bound(model)
    summary = report.to_dict()
    summary["ucb_leading_term"] = report.ucb_leading(args.epsilon)
    upper = admissible_eta(model)
    eta = args.eta if args.eta is not None else min(upper / 2, 0.01)
    if 0 < eta < upper:
        summary["pie_leading_term"] = {
            "epsilon": args.epsilon,
            "eta": eta,
            "value": report.pie_leading(args.epsilon, eta),
        }
    sys.stdout.write(dumps_json(summary))
    curve = reference_curve(
        report.f_theta, checkpoint_grid(args.horizon, args.checkpoints), column="bound"
    )
    sys.stdout.write(curve.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n"))


def _fit(args: argparse.Namespace) -> None:
    counts = ingest(
        args.input,
        IngestOptions(
            num_positions=args.positions,
            min_impressions=args.min_impressions,
            min_arms=args.min_arms,
        ),
    )
    options = EmFitOptions(max_iters=args.max_iters, tol=args.tol)
    if args.per_query:
        fits = em_fit_queries(counts, options, workers=args.threads)
        payload = {"queries": {query: fit.to_dict() for query, fit in fits.items()}}
        theta = pd.concat([fit.theta for fit in fits.values()], ignore_index=True)
        summary = pd.concat([fit.summary_table() for fit in fits.values()], ignore_index=True)
    else:
        fit = em_fit(counts, options)
        payload = fit.to_dict()
        theta = fit.theta
        summary = fit.summary_table()

    if args.out is None:
        sys.stdout.write(dumps_json(payload))
    else:
        directory = ensure_directory(args.out)
        write_json(directory / "fit.json", payload)
        write_csv(directory / "theta.csv", theta)
        write_csv(directory / "summary.csv", summary)
    sys.stderr.write(summary.to_string(index=False) + "\n")


def _index(args: argparse.Namespace) -> None:
    counters = load_counters(args.counters, args.kappa)
    arm = args.arm - 1
    qs = np.linspace(0.0, 1.0, args.grid)
    profile = pd.DataFrame({"q": qs, "phi": [phi(counters, arm, q) for q in qs]})
    sys.stdout.write(
        profile.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    )


_COMMANDS = {
    "simulate": _simulate,
    "bound": _bound,
    "fit": _fit,
    "index": _index,
    "version": lambda _: sys.stdout.write(f"{VERSION}\n"),
}


def main(args: Optional[List[str]] = None) -> int:
    parsed = parse_args(args)
    level = (parsed.log_level or PBM_BANDITS_LOG_LEVEL.get()).upper()
    try:
        logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        _COMMANDS[parsed.command](parsed)
    except (ValueError, RuntimeError, OSError) as e:
        sys.stderr.write(f"Error: {e}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
