"""Main entry point for bottlecheck."""

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any

from bottlecheck import __version__
from bottlecheck.config import PipelineConfig, load_config, save_config
from bottlecheck.dataset import load_dataset, save_dataset
from bottlecheck.ensemble import (
    EnsembleBuildError,
    build_ensemble_with_diagnostics,
    load_model,
    precision_curve,
    save_model,
    simulate_precision,
    write_curve_csv,
)
from bottlecheck.imaging import mean_background
from bottlecheck.logging_config import setup_logging
from bottlecheck.pipeline import (
    evaluate,
    evaluate_trigger,
    run_inspection,
    sweep_feature_params,
    sweep_label_noise,
    sweep_t,
    write_events,
    write_rows_csv,
)
from bottlecheck.seeds import derive_seed
from bottlecheck.synthgen import conveyor_schedule, gen_dataset, gen_stream, read_stream, write_stream

logger = logging.getLogger("bottlecheck.main")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILURE = 2


def _csv_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _csv_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _summary(command: str, **fields: Any) -> None:
    """Print the one-line machine-readable result of a command."""
    print(json.dumps({"command": command, "status": "ok", **fields}, sort_keys=True))


def _dataset_path(args: argparse.Namespace, cfg: PipelineConfig) -> Path:
    return Path(args.dataset) if args.dataset else args.out / cfg.paths.dataset


def _model_path(args: argparse.Namespace, cfg: PipelineConfig) -> Path:
    return Path(args.model) if args.model else args.out / cfg.paths.model


def _reports_dir(args: argparse.Namespace, cfg: PipelineConfig) -> Path:
    return args.out / cfg.paths.reports


def run_gen(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    seed = cfg.ensemble.seed
    if args.what == "dataset":
        d = gen_dataset(
            cfg.scene,
            args.n,
            args.defective_fraction,
            derive_seed(seed, "gen-dataset"),
            lambda_avg=cfg.lambda_avg,
            workers=cfg.workers,
        )
        manifest = save_dataset(d, _dataset_path(args, cfg))
        counts = d.class_counts()
        _summary("gen", what="dataset", manifest=str(manifest), n=len(d),
                 n_defective=counts[-1], seed=seed)
    else:
        stream_seed = derive_seed(seed, "gen-stream")
        schedule = conveyor_schedule(
            args.frames,
            args.bottles,
            stream_seed,
            leading_background=cfg.trigger.n_background_frames,
        )
        stream = gen_stream(cfg.scene, args.frames, schedule, stream_seed)
        directory = Path(args.stream) if args.stream else args.out / "stream"
        write_stream(stream, directory)
        _summary("gen", what="stream", directory=str(directory), frames=args.frames,
                 bottles=len(stream.bottle_labels), seed=seed)


def run_train(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    d = load_dataset(_dataset_path(args, cfg), cfg.lambda_avg, cfg.workers)
    model, diag = build_ensemble_with_diagnostics(d, cfg.pool, cfg.ensemble)
    path = save_model(model, _model_path(args, cfg))
    save_config(cfg, path.with_suffix(".config.json"))
    info = diag.to_dict()
    _summary(
        "train",
        model=str(path),
        members=info["accepted"],
        draws=info["draws"],
        rejections=info["rejections"],
        it_checks=info["it_checks"],
        seed=cfg.ensemble.seed,
    )


def run_eval(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    model = load_model(_model_path(args, cfg))
    d = load_dataset(_dataset_path(args, cfg), model.lambda_avg, cfg.workers)
    metrics = evaluate(model, d)
    report = _reports_dir(args, cfg) / "metrics.json"
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(json.dumps(metrics.to_dict(), indent=2, sort_keys=True))
    _summary("eval", report=str(report), **metrics.to_dict())


def run_inspect(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    model = load_model(_model_path(args, cfg))
    directory = Path(args.stream) if args.stream else args.out / "stream"
    stream = read_stream(directory)
    n_bg = cfg.trigger.n_background_frames
    bg = mean_background(stream.frames[:n_bg])
    events = run_inspection(stream.frames, bg, model, cfg)
    log_path = _reports_dir(args, cfg) / "events.jsonl"
    write_events(log_path, events)
    fires = [e.frame_index for e in events]
    trig = evaluate_trigger(fires, stream.presence)
    verdicts = [e.verdict for e in events if e.kind == "verdict"]
    _summary("inspect", events=str(log_path), verdicts=len(verdicts),
             rejected=sum(1 for v in verdicts if v == -1), trigger=asdict(trig))


def run_curve(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    rows = precision_curve(_csv_floats(args.epsilons), _csv_ints(args.Ts))
    simulated = None
    if args.monte_carlo:
        seed = cfg.ensemble.seed
        simulated = [simulate_precision(e, T, args.monte_carlo, seed) for e, T, _ in rows]
    path = _reports_dir(args, cfg) / "precision_curve.csv"
    write_curve_csv(path, rows, simulated)
    _summary("curve", report=str(path), rows=len(rows))


def run_sweep_features(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    d = load_dataset(_dataset_path(args, cfg), cfg.lambda_avg, cfg.workers)
    classifiers = [cfg.hyperparameters[f] for f in cfg.families]
    rows = sweep_feature_params(d, cfg.feature_grid, classifiers, cfg.ensemble)
    path = _reports_dir(args, cfg) / "sweep_features.csv"
    write_rows_csv(path, rows)
    _summary("sweep-features", report=str(path), rows=len(rows), seed=cfg.ensemble.seed)


def run_sweep_t(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    d = load_dataset(_dataset_path(args, cfg), cfg.lambda_avg, cfg.workers)
    rows, timings = sweep_t(d, _csv_ints(args.Ts), cfg.pool, cfg.ensemble)
    path = _reports_dir(args, cfg) / "sweep_t.csv"
    write_rows_csv(path, rows)
    write_rows_csv(path.with_name("sweep_t_timing.csv"), timings)
    _summary("sweep-t", report=str(path), rows=len(rows), seed=cfg.ensemble.seed)


def run_sweep_noise(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    d = load_dataset(_dataset_path(args, cfg), cfg.lambda_avg, cfg.workers)
    rows = sweep_label_noise(d, _csv_floats(args.ratios), cfg.pool, cfg.ensemble)
    path = _reports_dir(args, cfg) / "sweep_noise.csv"
    write_rows_csv(path, rows)
    _summary("sweep-noise", report=str(path), rows=len(rows), seed=cfg.ensemble.seed)


COMMANDS = {
    "gen": run_gen,
    "train": run_train,
    "eval": run_eval,
    "inspect": run_inspect,
    "curve": run_curve,
    "sweep-features": run_sweep_features,
    "sweep-t": run_sweep_t,
    "sweep-noise": run_sweep_noise,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bottlecheck",
        description="Visual inspection of backlit medicine bottles with a voting ensemble.",
    )
    parser.add_argument("--version", action="version", version=f"bottlecheck {__version__}")
    parser.add_argument("--config", type=Path, help="JSON config file (default: built-in)")
    parser.add_argument("--seed", type=int, help="Master seed (overrides ensemble.seed)")
    parser.add_argument(
        "--out", type=Path, default=Path("."), help="Output directory (default: .)"
    )
    parser.add_argument("--debug", action="store_true", help="Verbose logging")

    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("gen", help="Synthesize a dataset or a conveyor stream")
    gen.add_argument("what", choices=["dataset", "stream"])
    gen.add_argument("--n", type=int, default=1000, help="Dataset size (default: 1000)")
    gen.add_argument(
        "--defective-fraction", type=float, default=0.5, help="Defective share (default: 0.5)"
    )
    gen.add_argument("--frames", type=int, default=60, help="Stream length (default: 60)")
    gen.add_argument("--bottles", type=int, default=3, help="Bottles in the stream (default: 3)")
    gen.add_argument("--dataset", help="Dataset directory (default: <out>/paths.dataset)")
    gen.add_argument("--stream", help="Stream directory (default: <out>/stream)")

    for name, help_text in [
        ("train", "Build an ensemble and save the model artifact"),
        ("eval", "Evaluate a model on a dataset"),
        ("sweep-features", "Held-out precision over feature parameter grids"),
        ("sweep-t", "Error rate and training time per ensemble size"),
        ("sweep-noise", "Precision under training label noise"),
    ]:
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--dataset", help="Dataset directory or manifest")
        sub.add_argument("--model", help="Model artifact (default: <out>/paths.model)")
        if name == "sweep-t":
            sub.add_argument("--Ts", default="1,3,5,7,9", help="Odd ensemble sizes")
        if name == "sweep-noise":
            sub.add_argument(
                "--ratios", default="0,0.04,0.08,0.12,0.16,0.24,0.32,0.4,0.48",
                help="Label noise ratios",
            )

    inspect = subparsers.add_parser("inspect", help="Run the trigger and ensemble over a stream")
    inspect.add_argument("--stream", help="Stream directory (default: <out>/stream)")
    inspect.add_argument("--model", help="Model artifact (default: <out>/paths.model)")

    curve = subparsers.add_parser("curve", help="Analytic ensemble precision grid")
    curve.add_argument("--epsilons", default="0.1,0.2,0.3,0.4,0.5", help="Member error rates")
    curve.add_argument("--Ts", default="1,3,5,7,9,11", help="Odd ensemble sizes")
    curve.add_argument(
        "--monte-carlo", type=int, default=0, metavar="TRIALS",
        help="Add a simulated column with this many trials",
    )
    return parser


def main(argv: list[str] | None = None) -> None:
    """Main entry point for CLI."""
    parser = build_parser()
    args = parser.parse_args(argv)

    args.out.mkdir(parents=True, exist_ok=True)
    setup_logging(debug=args.debug, log_file=args.out / "bottlecheck.log")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if cfg.debug and not args.debug:
            setup_logging(debug=True, log_file=args.out / "bottlecheck.log")
        COMMANDS[args.command](args, cfg)
    except EnsembleBuildError as e:
        logger.exception(f"Ensemble build failed: {e}")
        failure = {
            "command": args.command,
            "status": "failed",
            "error": str(e),
            "members": len(e.members),
            "rejections": {str(k): v for k, v in e.rejections.items()},
        }
        print(json.dumps(failure, sort_keys=True))
        sys.exit(EXIT_FAILURE)
    except ValueError as e:
        logger.exception(f"Invalid input: {e}")
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_INVALID)
    except Exception as e:
        logger.exception(f"Fatal error: {e}")
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_FAILURE)
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
