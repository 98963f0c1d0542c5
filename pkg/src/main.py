#!/usr/bin/env python3
import argparse
import signal
import sys
from pathlib import Path

from config.experiment_config import load_experiment_config, parse_experiment_config
from config.project_config import Config
from core.errors import SchemaError, SpectralMoeError, TrainingDiverged
from harness.commands import COMMANDS, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_OK, EXIT_CHECK_FAILED
from utils.console import configure_logging, status
from utils.reporting import RunWriter, check_run_directory


def banner():
    print("Spectral MoE - SVD-structured LoRA mixture-of-experts toolkit")
    print("==============================================================")


def build_parser():
    parser = argparse.ArgumentParser(description="Spectral MoE experiment runner")
    parser.add_argument("command", nargs="?", choices=sorted(COMMANDS), help="Experiment to run")
    parser.add_argument("--config", type=Path, help="Experiment config (JSON)")
    parser.add_argument("--out", type=Path, help="Run directory (default: config output_dir or $SPECTRAL_MOE_OUTPUT_DIR/<command>)")
    parser.add_argument("--seed", type=int, help="Override the config seed")
    parser.add_argument("--jobs", type=int, default=1, help="Worker count for sweeps and Monte Carlo shards")
    parser.add_argument("--check-schemas", type=Path, metavar="RUN_DIR", help="Validate an existing run directory and exit")
    parser.add_argument("--log-level", choices=Config.LOG_LEVELS, default=Config.LOG_LEVEL, help="Logging level")
    return parser


def check_schemas(run_dir):
    problems = check_run_directory(run_dir, parse_config=parse_experiment_config)
    for problem in problems:
        status("Schema", problem)
    if problems:
        status("Schema", f"{len(problems)} problem(s) in {run_dir}")
        return EXIT_CHECK_FAILED
    status("Schema", f"{run_dir} conforms")
    return EXIT_OK


def run(args):
    if args.check_schemas is not None:
        return check_schemas(args.check_schemas)
    if args.command is None or args.config is None:
        status("Error", "a command and --config are required (or use --check-schemas RUN_DIR)")
        return EXIT_CONFIG
    if not 1 <= args.jobs <= max(Config.MAX_JOBS, 1):
        status("Error", f"--jobs must lie in [1, {Config.MAX_JOBS}] (SPECTRAL_MOE_MAX_JOBS)")
        return EXIT_CONFIG

    try:
        config = load_experiment_config(args.config, command=args.command, seed=args.seed)
    except SchemaError as e:
        status("Config Error", str(e))
        return EXIT_CONFIG
    except OSError as e:
        status("I/O Error", f"{args.config}: {e.strerror or e}")
        return EXIT_IO

    out_dir = args.out or Path(config.output_dir or Path(Config.OUTPUT_DIR) / args.command)
    print(f"Command: {args.command}")
    print(f"Seed: {config.seed}")
    print(f"Output: {out_dir}")
    print()

    writer = RunWriter(out_dir)
    try:
        writer.prepare(config)
        return COMMANDS[args.command](config, writer, jobs=args.jobs)
    except TrainingDiverged as e:
        status("Diverged", f"{e} (step {e.step})")
        return EXIT_DIVERGED
    except OSError as e:
        status("I/O Error", f"{e.filename or out_dir}: {e.strerror or e}")
        return EXIT_IO
    except SpectralMoeError as e:
        status("Config Error", str(e))
        return EXIT_CONFIG


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    banner()
    return run(args)


if __name__ == "__main__":
    # Graceful shutdown
    def shutdown(signum, frame):
        print("\nStopped by user.")
        sys.exit(130)

    signal.signal(signal.SIGINT, shutdown)
    signal.signal(signal.SIGTERM, shutdown)

    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\nStopped by user.")
        sys.exit(130)
    except Exception as e:
        print(f"[Fatal Error] {e}")
        sys.exit(1)
