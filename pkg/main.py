"""CLI entry point for the uncertainty-routing harness.

Subcommands:
    python main.py gen-data          # Synthetic BT dataset + alignment prompt set
    python main.py train             # Train the head, then the covariance pass
    python main.py calibrate-cov     # Recompute the covariance of a checkpoint
    python main.py eval              # PM-only accuracy per split
    python main.py route-eval        # Routed accuracy at one threshold
    python main.py sweep             # Threshold x mode grid
    python main.py quantile-report   # Accuracy per uncertainty decile
    python main.py uncertainty-gap   # ID vs OOD uncertainty
    python main.py align             # Toy RLOO alignment loop
    python main.py mock-judge-server # Serve the judge wire protocol

Exit codes: 0 success, 2 usage, 3 data error, 4 divergence,
5 judge unavailable, 1 anything else.
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Any, Callable, Optional

from pydantic import ValidationError

from uqroute.utils.config import ExperimentConfig, get_config, load_config, save_resolved_config
from uqroute.utils.errors import UqrouteError, UsageError

logger = logging.getLogger("uqroute")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTERNAL = 1


def _setup_logging(verbose: bool = False) -> None:
    """Configure root logging with a timestamped format."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )


def _run_step(name: str, func: Callable[[], Any]) -> Any:
    """Execute one command step with timing; errors propagate to ``main``."""
    logger.info("Starting step: %s", name)
    start = time.monotonic()
    try:
        result = func()
    except Exception:
        logger.error("Step failed: %s (%.1fs)", name, time.monotonic() - start)
        raise
    logger.info("Completed step: %s (%.1fs)", name, time.monotonic() - start)
    return result


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def _load(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(Path(args.config)) if args.config else get_config()
    return apply_overrides(config, args)


def apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """Fold global CLI flags into a copy of the config."""
    update: dict[str, Any] = {}
    if getattr(args, "out_dir", None):
        update["output_dir"] = args.out_dir
    if getattr(args, "threads", None):
        update["threads"] = args.threads
    seed = getattr(args, "seed", None)
    if seed is not None:
        update["seed"] = seed
        for section in ("data", "encoder", "feature_map", "head", "sim_judge", "router", "align"):
            update[section] = getattr(config, section).model_copy(update={"seed": seed})
        update["align"] = update["align"].model_copy(
            update={"router": config.align.router.model_copy(update={"seed": seed})}
        )
    return config.model_copy(update=update)


def _out_dir(config: ExperimentConfig) -> Path:
    path = Path(config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: Optional[str], flag: str) -> Path:
    if not path:
        raise UsageError(f"missing required input {flag}")
    resolved = Path(path)
    if not resolved.exists():
        raise UsageError(f"{flag}: file not found: {resolved}")
    return resolved


def _build_judge(kind: str, config: ExperimentConfig, truth, preset: Optional[str] = None):
    from uqroute.judge import RemoteJudge, SimJudge, sim_judge_preset

    if kind == "none":
        return None
    if kind == "remote":
        return RemoteJudge(config.remote_judge)
    sim_config = sim_judge_preset(config.sim_judge, preset) if preset else config.sim_judge
    return SimJudge(sim_config, truth)


def _router_config(config: ExperimentConfig, args: argparse.Namespace, base=None):
    from uqroute.utils.models import RoutingMode

    base = base or config.router
    update: dict[str, Any] = {}
    if getattr(args, "threshold", None) is not None:
        update["threshold"] = args.threshold
    if getattr(args, "mode", None):
        update["mode"] = RoutingMode(args.mode)
    if getattr(args, "epsilon", None) is not None:
        update["epsilon"] = args.epsilon
    if getattr(args, "budget", None) is not None:
        update["call_budget"] = args.budget
    if getattr(args, "judge_reward", None) is not None:
        update["judge_reward"] = args.judge_reward
    return base.model_validate({**base.model_dump(), **update})


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def run_gen_data(args: argparse.Namespace) -> None:
    """Generate the preference dataset and the alignment prompt set."""
    from uqroute.pref_data import apply_preset, generate_from_config, prompts_from_config
    from uqroute.utils.dataset_io import save_dataset, save_prompts

    config = _load(args)
    update = {
        k: v for k, v in {
            "n_prompts": args.n_prompts,
            "responses_per_prompt": args.k,
            "ood_fraction": args.ood_fraction,
            "ood_shift": args.ood_shift,
        }.items() if v is not None
    }
    # Explicit flags win over the preset.
    data_config = apply_preset(config.data, args.preset) if args.preset else config.data
    data_config = data_config.model_validate({**data_config.model_dump(), **update})
    config = config.model_copy(update={"data": data_config})
    out_dir = _out_dir(config)

    generated = _run_step("Generate preference data", lambda: generate_from_config(data_config))
    generated.dataset.manifest.preset = args.preset
    save_dataset(generated.dataset, Path(args.out) if args.out else out_dir / "data.jsonl")
    prompts = _run_step("Generate alignment prompts",
                        lambda: prompts_from_config(data_config, truth_seed=generated.truth.seed))
    save_prompts(prompts, Path(args.prompts_out) if args.prompts_out else out_dir / "prompts.jsonl")
    save_resolved_config(config, out_dir)


def run_train(args: argparse.Namespace) -> None:
    """Train on the id_train split, then run the covariance pass."""
    from uqroute.pref_data import augment_swap, redact
    from uqroute.sngp_head import GpHead, compute_covariance, train
    from uqroute.utils.checkpoint import save_checkpoint
    from uqroute.utils.dataset_io import load_dataset
    from uqroute.utils.models import Split

    config = _load(args)
    dataset = load_dataset(_require(args.dataset, "--dataset"))
    head_update: dict[str, Any] = {}
    if args.epochs is not None:
        head_update["epochs"] = args.epochs
    if args.lr is not None:
        head_update["learning_rate"] = args.lr
    config = config.model_copy(update={
        "encoder": config.encoder.model_copy(update={"input_dim": dataset.manifest.input_dim}),
        "head": config.head.model_validate({**config.head.model_dump(), **head_update}),
    })
    out_dir = _out_dir(config)

    train_set = augment_swap(redact(dataset.split(Split.ID_TRAIN)))
    head = GpHead.initialize(config.encoder, config.feature_map, config.head)
    _run_step("Train preference head", lambda: train(head, train_set.records))
    if not args.skip_covariance:
        head.covariance = _run_step("Posterior covariance pass",
                                    lambda: compute_covariance(head, train_set.records))
    save_checkpoint(head, Path(args.out) if args.out else out_dir / "model.uqrt")
    save_resolved_config(config, out_dir)


def run_calibrate_cov(args: argparse.Namespace) -> None:
    """Recompute the covariance of an existing checkpoint."""
    from uqroute.pref_data import augment_swap, redact
    from uqroute.sngp_head import compute_covariance
    from uqroute.utils.checkpoint import load_checkpoint, save_checkpoint
    from uqroute.utils.dataset_io import load_dataset
    from uqroute.utils.models import Split

    config = _load(args)
    checkpoint = _require(args.checkpoint, "--checkpoint")
    head = load_checkpoint(checkpoint)
    dataset = load_dataset(_require(args.dataset, "--dataset"))
    train_set = augment_swap(redact(dataset.split(Split.ID_TRAIN)))
    head.covariance = _run_step("Posterior covariance pass", lambda: compute_covariance(head, train_set.records))
    save_checkpoint(head, Path(args.out) if args.out else checkpoint)
    save_resolved_config(config, _out_dir(config))


def _load_eval_inputs(args: argparse.Namespace):
    from uqroute.utils.checkpoint import load_checkpoint
    from uqroute.utils.dataset_io import load_dataset
    from uqroute.utils.errors import StateError
    from uqroute.utils.models import Split

    head = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    if head.covariance is None:
        raise StateError("checkpoint has no covariance; run calibrate-cov first")
    dataset = load_dataset(_require(args.dataset, "--dataset"))
    if getattr(args, "split", None):
        dataset = dataset.split(*(Split(s) for s in args.split))
    return head, dataset


def run_eval(args: argparse.Namespace) -> None:
    """PM-only accuracy per split (the no-routing baseline)."""
    from uqroute.reports import EVAL_HEADER, evaluate_pm
    from uqroute.utils.csv_io import write_csv

    config = _load(args)
    head, dataset = _load_eval_inputs(args)
    rows = _run_step("Evaluate preference model", lambda: evaluate_pm(head, dataset, config.threads))
    out_dir = _out_dir(config)
    write_csv(Path(args.out) if args.out else out_dir / "eval.csv", EVAL_HEADER, rows)
    save_resolved_config(config, out_dir)


def run_route_eval(args: argparse.Namespace) -> None:
    """Routed accuracy at one threshold and mode."""
    from uqroute.reports import SWEEP_HEADER, sweep_cell
    from uqroute.utils.csv_io import write_csv

    config = _load(args)
    head, dataset = _load_eval_inputs(args)
    router_config = _router_config(config, args)
    config = config.model_copy(update={"router": router_config})
    judge = _build_judge(args.judge, config, dataset.truth(), args.judge_preset)
    rows = _run_step("Routed evaluation",
                     lambda: sweep_cell(head, router_config, dataset, judge, config.threads))
    out_dir = _out_dir(config)
    write_csv(Path(args.out) if args.out else out_dir / "route_eval.csv", SWEEP_HEADER,
              (r.as_row() for r in rows))
    save_resolved_config(config, out_dir)


def run_sweep(args: argparse.Namespace) -> None:
    """Evaluate every threshold preset in both routing modes."""
    from uqroute.reports import cmd_sweep

    config = _load(args)
    head, dataset = _load_eval_inputs(args)
    sweep = config.sweep
    if args.thresholds:
        sweep = sweep.model_copy(update={"thresholds": args.thresholds})
    config = config.model_copy(update={"sweep": sweep, "router": _router_config(config, args)})
    truth = dataset.truth()
    out_dir = _out_dir(config)
    _run_step("Threshold sweep", lambda: cmd_sweep(
        head, dataset, config.router, sweep,
        lambda: _build_judge(args.judge, config, truth, args.judge_preset),
        out_path=Path(args.out) if args.out else out_dir / "sweep.csv",
        threads=config.threads,
    ))
    save_resolved_config(config, out_dir)


def run_quantile_report(args: argparse.Namespace) -> None:
    """Accuracy per uncertainty decile and the Spearman correlation."""
    from uqroute.reports import quantile_report, write_quantile_report

    config = _load(args)
    head, dataset = _load_eval_inputs(args)
    report = _run_step("Quantile report", lambda: quantile_report(head, dataset, config.threads))
    out_dir = _out_dir(config)
    write_quantile_report(report, Path(args.out) if args.out else out_dir / "quantile_report.csv")
    save_resolved_config(config, out_dir)


def run_uncertainty_gap(args: argparse.Namespace) -> None:
    """ID vs OOD uncertainty, per split and per |p| bin."""
    from uqroute.reports import uncertainty_gap, write_gap_report
    from uqroute.utils.checkpoint import load_checkpoint
    from uqroute.utils.dataset_io import load_dataset
    from uqroute.utils.models import Split

    config = _load(args)
    head = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    id_path = _require(args.id_dataset, "--id-dataset")
    ood_path = Path(args.ood_dataset) if args.ood_dataset else id_path
    id_set = load_dataset(id_path).split(Split.ID_VAL)
    ood_set = load_dataset(_require(str(ood_path), "--ood-dataset")).split(Split.OOD)
    report = _run_step("Uncertainty gap", lambda: uncertainty_gap(head, id_set, ood_set, config.threads))
    out_dir = _out_dir(config)
    write_gap_report(report, Path(args.out) if args.out else out_dir / "uncertainty_gap.csv")
    save_resolved_config(config, out_dir)


def run_align(args: argparse.Namespace) -> None:
    """Toy RLOO alignment with routed advantages."""
    from uqroute.reports import write_curve
    from uqroute.rloo import align
    from uqroute.utils.checkpoint import load_checkpoint
    from uqroute.utils.dataset_io import load_prompts

    config = _load(args)
    head = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    prompts = load_prompts(_require(args.prompts, "--prompts"))
    update: dict[str, Any] = {"router": _router_config(config, args, base=config.align.router)}
    for flag, key in (("k", "K"), ("kl_beta", "kl_beta"), ("epochs", "epochs"), ("lr", "learning_rate")):
        if getattr(args, flag) is not None:
            update[key] = getattr(args, flag)
    align_config = config.align.model_validate({**config.align.model_dump(), **update})
    config = config.model_copy(update={"align": align_config})
    truth = prompts.truth()
    judge = _build_judge(args.judge, config, truth, args.judge_preset)
    result = _run_step("RLOO alignment", lambda: align(align_config, prompts, head, judge, truth,
                                                      threads=config.threads))
    out_dir = _out_dir(config)
    write_curve(result.curve, Path(args.out) if args.out else out_dir / "align_curve.csv")
    save_resolved_config(config, out_dir)


def run_mock_judge_server(args: argparse.Namespace) -> None:
    """Serve the judge protocol backed by a dataset's ground truth."""
    from uqroute.mock_judge_server import create_app, serve
    from uqroute.utils.dataset_io import load_dataset

    config = _load(args)
    truth = None
    if args.dataset:
        truth = load_dataset(_require(args.dataset, "--dataset")).truth()
    elif args.fixed_label is None:
        raise UsageError("mock-judge-server needs --dataset or --fixed-label")
    app = create_app(truth, config.sim_judge, fixed_label=args.fixed_label, fail_first=args.fail_first)
    serve(app, args.host, args.port)


COMMANDS: dict[str, Callable[[argparse.Namespace], None]] = {
    "gen-data": run_gen_data,
    "train": run_train,
    "calibrate-cov": run_calibrate_cov,
    "eval": run_eval,
    "route-eval": run_route_eval,
    "sweep": run_sweep,
    "quantile-report": run_quantile_report,
    "uncertainty-gap": run_uncertainty_gap,
    "align": run_align,
    "mock-judge-server": run_mock_judge_server,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_global_flags(parser: argparse.ArgumentParser, default: Any = None) -> None:
    parser.add_argument("--config", default=default, help="Experiment config YAML (default: config.yaml)")
    parser.add_argument("--seed", type=int, default=default, help="Override every module seed")
    parser.add_argument("--out-dir", default=default, help="Output directory")
    parser.add_argument("--threads", type=int, default=default, help="Worker threads for scoring")
    parser.add_argument(
        "--verbose", action="store_true", default=False if default is None else default, help="Debug logging",
    )


def _add_routing_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--threshold", type=float, help="Routing threshold on u")
    parser.add_argument("--mode", choices=["uncertainty", "random", "adaptive"], help="Routing mode")
    parser.add_argument("--judge", choices=["sim", "remote", "none"], default="sim", help="Judge backend")
    parser.add_argument("--judge-preset", choices=["r1-hard", "perfect"], help="Simulated judge preset")
    parser.add_argument("--epsilon", type=float, help="Verdict confidence epsilon in (0, 0.5)")
    parser.add_argument("--judge-reward", type=float, help="Fixed reward magnitude for judge verdicts")
    parser.add_argument("--budget", type=float, help="Call budget for adaptive mode")


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse command-line arguments.

    Args:
        argv: Argument list (defaults to sys.argv[1:]).

    Returns:
        Parsed namespace with ``command`` set to the chosen subcommand.
    """
    # Subcommand copies use SUPPRESS so they never overwrite values given before the subcommand.
    common = argparse.ArgumentParser(add_help=False)
    _add_global_flags(common, default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(description="Uncertainty-based routing harness")
    _add_global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Generate synthetic preference data")
    p.add_argument("--n-prompts", type=int)
    p.add_argument("--k", type=int, help="Responses per prompt")
    p.add_argument("--ood-fraction", type=float)
    p.add_argument("--ood-shift", type=float)
    p.add_argument("--preset", choices=["helpsteer2-scale", "desk"])
    p.add_argument("--out", help="Dataset path (default: <out-dir>/data.jsonl)")
    p.add_argument("--prompts-out", help="Prompt set path (default: <out-dir>/prompts.jsonl)")

    p = sub.add_parser("train", parents=[common], help="Train the preference head")
    p.add_argument("--dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--skip-covariance", action="store_true")
    p.add_argument("--out", help="Checkpoint path (default: <out-dir>/model.uqrt)")

    p = sub.add_parser("calibrate-cov", parents=[common], help="Recompute the posterior covariance")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--out", help="Checkpoint path (default: overwrite --checkpoint)")

    for name, helptext in (("eval", "PM-only accuracy"), ("quantile-report", "Accuracy per u decile")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint")
        p.add_argument("--dataset")
        p.add_argument("--split", nargs="+", choices=["id_train", "id_val", "ood"])
        p.add_argument("--out")

    p = sub.add_parser("route-eval", parents=[common], help="Routed accuracy at one threshold")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--split", nargs="+", choices=["id_train", "id_val", "ood"])
    p.add_argument("--out")
    _add_routing_flags(p)

    p = sub.add_parser("sweep", parents=[common], help="Threshold x mode sweep")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--split", nargs="+", choices=["id_train", "id_val", "ood"])
    p.add_argument("--thresholds", type=float, nargs="+")
    p.add_argument("--out")
    _add_routing_flags(p)

    p = sub.add_parser("uncertainty-gap", parents=[common], help="ID vs OOD uncertainty")
    p.add_argument("--checkpoint")
    p.add_argument("--id-dataset")
    p.add_argument("--ood-dataset")
    p.add_argument("--out")

    p = sub.add_parser("align", parents=[common], help="Toy RLOO alignment")
    p.add_argument("--checkpoint")
    p.add_argument("--prompts")
    p.add_argument("--k", type=int)
    p.add_argument("--kl-beta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out")
    _add_routing_flags(p)

    p = sub.add_parser("mock-judge-server", parents=[common], help="Serve the judge wire protocol")
    p.add_argument("--dataset", help="Dataset whose ground truth backs the labels")
    p.add_argument("--fixed-label", type=int, choices=[0, 1, 2])
    p.add_argument("--fail-first", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8089)

    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    """Dispatch to the selected subcommand and map errors to exit codes.

    Args:
        argv: Argument list (defaults to sys.argv[1:]).

    Returns:
        Process exit code.
    """
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    _setup_logging(args.verbose)

    try:
        COMMANDS[args.command](args)
    except UqrouteError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except ValidationError as exc:
        logger.error("Invalid configuration or input: %s", exc)
        return EXIT_DATA
    except FileNotFoundError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except Exception:
        logger.exception("Unexpected failure in %s", args.command)
        return EXIT_INTERNAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
