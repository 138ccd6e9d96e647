"""
Command-line entry point for DVQN experiments.
- train: run a YAML-configured experiment (trials x episodes) into an output dir
- eval: greedy evaluation of a checkpoint
- options: collect latents -> cluster -> derive/export options -> scatter plot
- plot: re-render learning curves or latent scatters from saved artifacts
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from dotenv import load_dotenv

# .env defaults must be in os.environ before the harness reads its knobs.
load_dotenv()

from pydantic import ValidationError  # noqa: E402

from agents import load_checkpoint  # noqa: E402
from errors import EXIT_CONFIG, EXIT_OK, DVQNError, UsageError  # noqa: E402
from harness import (  # noqa: E402
    DVQN_LOG_LEVEL,
    emit_latent_scatter,
    emit_learning_curve,
    evaluate,
    load_experiment_config,
    run_training,
)
from nnkit import Rng  # noqa: E402
from options import (  # noqa: E402
    choose_k,
    collect_embeddings,
    derive_options,
    export_options,
    kmeans,
    label_purity,
    load_dataset,
    save_dataset,
    silhouette,
    terminal_cluster_coverage,
)

EXIT_UNEXPECTED = 1

logger = logging.getLogger("dvqn")


def _k_argument(raw: str) -> int | str:
    if raw == "auto":
        return raw
    try:
        value = int(raw)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("--k must be a positive integer or 'auto'") from exc
    if value <= 0:
        raise argparse.ArgumentTypeError("--k must be a positive integer or 'auto'")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvqn", description="Deep Variational Q-Network experiments")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Run a configured training experiment")
    train.add_argument("--config", required=True, help="YAML experiment config")
    train.add_argument("--seed", type=int, default=None, help="Override the config's base seed")
    train.add_argument("--out", default=None, help="Override the output directory")
    train.add_argument("--parallelism", type=int, default=None, help="Worker processes for trials")

    evaluate_cmd = commands.add_parser("eval", help="Greedy evaluation of a checkpoint")
    evaluate_cmd.add_argument("--checkpoint", required=True)
    evaluate_cmd.add_argument("--env", default=None, help="Defaults to the checkpoint's env")
    evaluate_cmd.add_argument("--episodes", type=int, default=100)
    evaluate_cmd.add_argument("--seed", type=int, default=0)

    options_cmd = commands.add_parser("options", help="Discover options from a DVQN checkpoint")
    options_cmd.add_argument("--checkpoint", required=True)
    options_cmd.add_argument("--env", default=None, help="Defaults to the checkpoint's env")
    options_cmd.add_argument("--episodes", type=int, default=50)
    options_cmd.add_argument("--k", type=_k_argument, default="auto")
    options_cmd.add_argument("--out", required=True, help="Directory for options.yaml, latents.npz and plots")
    options_cmd.add_argument("--seed", type=int, default=0)

    plot = commands.add_parser("plot", help="Render saved artifacts")
    plot.add_argument("kind", choices=["curve", "scatter"])
    plot.add_argument("--in", dest="inputs", nargs="+", required=True, help="metrics.csv files or one latents.npz")
    plot.add_argument("--out", required=True, help="SVG output path")
    plot.add_argument("--metric", choices=["return", "steps"], default=None)
    plot.add_argument("--color-by", choices=["cluster", "label", "none"], default="cluster")
    return parser


def _emit(payload: dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _cmd_train(args: argparse.Namespace) -> int:
    config = load_experiment_config(
        args.config, seed=args.seed, output_dir=args.out, parallelism=args.parallelism
    )
    _emit(run_training(config).to_dict())
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    summary = evaluate(args.checkpoint, args.env, args.episodes, Rng(args.seed).split("eval"))
    _emit(summary.to_dict())
    return EXIT_OK


def _cmd_options(args: argparse.Namespace) -> int:
    loaded = load_checkpoint(args.checkpoint)
    env_id = args.env or loaded.env_id
    rng = Rng(args.seed)
    dataset = collect_embeddings(loaded, env_id, args.episodes, rng.split("collect"))

    cluster_rng = rng.split("cluster")
    k = choose_k(dataset, rng=cluster_rng) if args.k == "auto" else args.k
    model = kmeans(dataset, k, cluster_rng.split(f"k-{k}"))
    specs = derive_options(model, dataset)

    report: dict[str, Any] = {
        "env": dataset.metadata["env"],
        "k": k,
        "records": len(dataset),
        "inertia": model.inertia,
        "silhouette": silhouette(dataset, model) if k >= 2 else None,
        "label_purity": label_purity(dataset, model) if dataset.has_labels() else None,
        "terminal_cluster_coverage": None,
        "projection": "raw" if dataset.latent_dim == 2 else "pca",
    }
    if (dataset.rewards() < 0).any():
        report["terminal_cluster_coverage"] = terminal_cluster_coverage(dataset, model)
    else:
        logger.warning("options_coverage_skipped env=%s reason=no_negative_rewards", env_id)

    out = Path(args.out)
    export_options(specs, out / "options.yaml", {**dataset.metadata, **report})
    save_dataset(dataset, out / "latents.npz", model)
    emit_latent_scatter(dataset, model, out / "latent_clusters.svg", color_by="cluster")
    if dataset.has_labels():
        emit_latent_scatter(dataset, model, out / "latent_labels.svg", color_by="label")
    _emit(report)
    return EXIT_OK


def _cmd_plot(args: argparse.Namespace) -> int:
    if args.kind == "curve":
        emit_learning_curve(args.inputs, args.out, metric=args.metric)
        return EXIT_OK
    if len(args.inputs) != 1:
        raise UsageError("plot scatter takes exactly one latents.npz file.")
    dataset, model = load_dataset(args.inputs[0])
    emit_latent_scatter(dataset, model, args.out, color_by=args.color_by)
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "options": _cmd_options,
    "plot": _cmd_plot,
}


def cli(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=getattr(logging, DVQN_LOG_LEVEL, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage; --help exits with 0
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except DVQNError as exc:
        logger.error(
            "cli_failed command=%s error_type=%s detail=%s", args.command, type(exc).__name__, exc.detail
        )
        print(f"error: {exc.detail}", file=sys.stderr)
        return exc.exit_code
    except ValidationError as exc:
        logger.error("cli_failed command=%s error_type=%s detail=%s", args.command, type(exc).__name__, exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        logger.exception("cli_failed command=%s error_type=%s", args.command, type(exc).__name__)
        return EXIT_UNEXPECTED


def main_cli() -> None:
    raise SystemExit(cli())


if __name__ == "__main__":
    main_cli()
