import argparse
import json
import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import harness  # noqa: E402
from errors import DVQNError  # noqa: E402


def main_cli() -> None:
    parser = argparse.ArgumentParser(description="Run several DVQN experiment configs as one trial matrix")
    parser.add_argument("configs", nargs="+", help="YAML experiment configs")
    parser.add_argument(
        "--parallelism",
        type=int,
        default=harness.DVQN_MAX_PARALLELISM,
        help="Worker processes shared by every (config, trial) unit",
    )
    parser.add_argument("--seed", type=int, default=None, help="Override every config's base seed")
    args = parser.parse_args()

    logging.basicConfig(level=getattr(logging, harness.DVQN_LOG_LEVEL, logging.INFO))

    try:
        configs = [harness.load_experiment_config(path, seed=args.seed) for path in args.configs]
        summaries = harness.run_matrix(configs, args.parallelism)
    except DVQNError as exc:
        print(f"error: {exc.detail}", file=sys.stderr)
        raise SystemExit(exc.exit_code) from exc

    print(json.dumps([summary.to_dict() for summary in summaries], indent=2, sort_keys=True))


if __name__ == "__main__":
    main_cli()
