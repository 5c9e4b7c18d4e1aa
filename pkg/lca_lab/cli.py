"""
lca-lab command line
Runs experiments, exact RIP constants of a matrix file and single-instance solves.

Exit codes: 0 success, 2 configuration or argument error, 3 numeric failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from lca_lab import __version__
from lca_lab.analysis import DEFAULT_ENUMERATION_CAP, active_set_stats, rip_bruteforce
from lca_lab.config import EXPERIMENTS, load_config
from lca_lab.dynamics import (
    BACKEND_FIXED,
    BACKEND_SWITCHED,
    DEFAULT_DT,
    DEFAULT_SAMPLE_EVERY,
    DEFAULT_T_MAX,
    default_output_times,
    simulate,
)
from lca_lab.ensemble import load_instance, load_matrix_csv
from lca_lab.errors import InvalidArgumentError, NumericFailureError
from lca_lab.experiments import run_experiment
from lca_lab.oracle import check_optimality
from lca_lab.records import export_trajectory, to_jsonable, write_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='lca-lab',
        description='Locally competitive algorithm simulator and experiment harness',
    )
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    parser.add_argument('--log-level', default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    commands = parser.add_subparsers(dest='command', required=True)

    for experiment in EXPERIMENTS:
        sub = commands.add_parser(experiment, help=f"Run the {experiment} experiment")
        sub.add_argument('--config', help='JSON config file (falls back to $LCA_LAB_CONFIG)')
        sub.add_argument('--override', action='append', default=[], metavar='KEY=VALUE',
                         help='Override one config key; lists are comma-separated')
        sub.add_argument('--trials', type=int)
        sub.add_argument('--seed', type=int)
        sub.add_argument('--workers', type=int)
        sub.add_argument('--out', dest='output_dir', help='Parent output directory')

    rip = commands.add_parser('rip', help='Exact RIP constant of a matrix file')
    rip.add_argument('--matrix', required=True, help='CSV matrix with unit-norm columns')
    rip.add_argument('--order', type=int, required=True)
    rip.add_argument('--cap', type=int, default=DEFAULT_ENUMERATION_CAP)
    rip.add_argument('--workers', type=int, default=1)
    rip.add_argument('--normalize', action='store_true', help='Rescale columns to unit norm')
    rip.add_argument('--out', help='Write the report to this JSON file')

    solve = commands.add_parser('solve', help='Simulate one saved instance')
    solve.add_argument('--instance', required=True, help='Instance JSON file')
    solve.add_argument('--backend', choices=[BACKEND_FIXED, BACKEND_SWITCHED], default=BACKEND_FIXED)
    solve.add_argument('--t-max', type=float, default=DEFAULT_T_MAX)
    solve.add_argument('--dt', type=float, default=DEFAULT_DT)
    solve.add_argument('--sample-every', type=float, default=DEFAULT_SAMPLE_EVERY)
    solve.add_argument('--out', default='solve-output', help='Output directory')
    solve.add_argument('--full-state', action='store_true', help='Also dump sampled internal states')
    return parser


def _run_experiment(args: argparse.Namespace) -> int:
    config = load_config(
        args.command,
        path=args.config,
        overrides=args.override,
        flags={'trials': args.trials, 'seed': args.seed, 'workers': args.workers,
               'output_dir': args.output_dir},
    )
    result = run_experiment(config)
    print(json.dumps(to_jsonable(result.summary()), sort_keys=True, indent=2))
    return EXIT_OK


def _run_rip(args: argparse.Namespace) -> int:
    matrix = load_matrix_csv(args.matrix, normalize=args.normalize)
    report = rip_bruteforce(matrix, args.order, cap=args.cap, workers=args.workers)
    if args.out:
        write_json(Path(args.out), report.to_dict())
    print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    return EXIT_OK


def _run_solve(args: argparse.Namespace) -> int:
    instance = load_instance(args.instance)
    trajectory = simulate(
        instance,
        backend=args.backend,
        t_max=args.t_max,
        dt=args.dt,
        output_times=default_output_times(args.t_max, args.sample_every),
    )
    final = trajectory.final_state
    kkt = check_optimality(final.a, instance.matrix, instance.measurement, instance.lam)
    stats = active_set_stats(trajectory, instance.signal.support)
    out = Path(args.out)
    export_trajectory(trajectory, instance, out, full_state=args.full_state)
    summary = {
        'backend': trajectory.backend,
        'converged': trajectory.converged,
        'converged_time': trajectory.converged_time,
        'switch_events': len(trajectory.switch_events),
        'q_obs': stats.q_obs,
        'contained': stats.contained,
        'kkt_residual': kkt.max_violation,
        'kkt_holds': kkt.holds,
        'solution': final.a,
    }
    write_json(out / 'solution.json', summary)
    summary.pop('solution')
    print(json.dumps(to_jsonable(summary), sort_keys=True, indent=2))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point of the lca-lab script.

    Args:
        argv: Arguments without the program name, sys.argv[1:] when omitted

    Returns:
        Process exit code
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        if args.command == 'rip':
            return _run_rip(args)
        if args.command == 'solve':
            return _run_solve(args)
        return _run_experiment(args)
    except (InvalidArgumentError, FileNotFoundError) as exc:
        logger.error(f"{args.command}: {exc}")
        return EXIT_CONFIG
    except NumericFailureError as exc:
        logger.error(f"{args.command}: numeric failure: {exc}")
        return EXIT_NUMERIC


if __name__ == '__main__':
    sys.exit(main())
