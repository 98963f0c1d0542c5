import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent / "src"))

from config.experiment_config import parse_experiment_config  # noqa: E402
from utils.reporting import check_run_directory  # noqa: E402


def check_runs(run_dirs):
    """
    Validates the config copy, CSV tables and summary of each run directory.
    Nothing is recomputed.
    """
    failed = 0
    for run_dir in run_dirs:
        print("-" * 30)
        print(f"Run: {run_dir}")
        problems = check_run_directory(run_dir, parse_config=parse_experiment_config)
        if problems:
            failed += 1
            for problem in problems:
                print(f"  - {problem}")
        else:
            print("  - OK")
    return failed


if __name__ == '__main__':
    if len(sys.argv) < 2:
        print("usage: python check.py RUN_DIR [RUN_DIR ...]")
        sys.exit(2)
    sys.exit(1 if check_runs(sys.argv[1:]) else 0)
