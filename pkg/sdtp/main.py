"""Command-line entry point."""

import argparse
import logging
import sys
import typing as t
from pathlib import Path

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ValidationError

from sdtp.core.config import SETTINGS
from sdtp.core.errors import ConfigError, SdtpError
from sdtp.core.globals import (
    BASE_CHECKPOINT_FILE,
    CHECKPOINT_FILE,
    DEFAULT_FLOPS_LENGTHS,
    DEFAULT_GEN_LEN,
    METRICS_FILE,
    RESOLVED_CONFIG_FILE,
)
from sdtp.core.kv_cache import BudgetTooSmallError, KVCachePolicy
from sdtp.core.models import MissingScorerError, ModelParams, init_model
from sdtp.core.pruning import RandomScorer, ScheduleRangeError
from sdtp.schemas.config import ReportFormat, RunConfig
from sdtp.schemas.profile import ArchProfile
from sdtp.schemas.reports import TrainingMetadata
from sdtp.schemas.schedule import PruneSchedule
from sdtp.services import (
    CorpusTooSmallError,
    EvalMode,
    SaliencyService,
    TrainerService,
    UnknownProfileError,
    bench_toy,
    compose_sdtp_h2o,
    evaluate,
    flops_table,
    get_profile,
    pretrain_base,
    run_sweeps,
)
from sdtp.services.saliency_service import (
    IMPORTANCE_THRESHOLD,
    SaliencyMap,
    attribute,
    sparsity_profile,
    sparsity_stats,
)
from sdtp.utils.checkpoints import (
    Checkpoint,
    CheckpointFormatError,
    load_checkpoint,
    save_checkpoint,
)
from sdtp.utils.configs import load_arch_profile, load_run_config, override
from sdtp.utils.corpus import (
    EmptyCorpusError,
    load_corpus,
    make_windows,
    split_holdout,
)
from sdtp.utils.outputs import OutputDirectory, OutputExistsError
from sdtp.utils.reports import render_report

logging.basicConfig(
    level=logging.DEBUG if SETTINGS.debug else logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    stream=sys.stderr,
)
LOGGER: logging.Logger = logging.getLogger(__name__)

EXIT_OK: int = 0
EXIT_FAILURE: int = 1
EXIT_USAGE: int = 2

# Errors the caller can fix by changing inputs or flags
USAGE_ERRORS: t.Tuple[t.Type[Exception], ...] = (
    BudgetTooSmallError,
    CheckpointFormatError,
    ConfigError,
    CorpusTooSmallError,
    EmptyCorpusError,
    MissingScorerError,
    OSError,
    OutputExistsError,
    ScheduleRangeError,
    UnknownProfileError,
)

Handler = t.Callable[[argparse.Namespace], int]


def _config(
    args: argparse.Namespace, updates: t.Mapping[str, t.Any] | None = None
) -> RunConfig:
    merged: t.Dict[str, t.Any] = {"seed": args.seed}
    if getattr(args, "checkpoint", None) is not None:
        merged["model.checkpoint"] = str(args.checkpoint)
    if getattr(args, "corpus", None) is not None:
        merged["io.corpus"] = str(args.corpus)
    if args.output is not None:
        merged["io.output_dir"] = str(args.output)
    merged.update(updates or {})
    return override(load_run_config(args.config), merged)


def _output(config: RunConfig, args: argparse.Namespace) -> OutputDirectory:
    path = config.io.output_dir or SETTINGS.output_root / args.command
    return OutputDirectory(path, force=args.force)


def _write_report(
    out: OutputDirectory,
    config: RunConfig,
    name: str,
    report: BaseModel,
) -> str:
    text = render_report(f"{name}.txt", report)
    if ReportFormat.JSON in config.io.report_formats:
        out.write_json(f"{name}.json", report)
    if ReportFormat.TEXT in config.io.report_formats:
        out.write_text(f"{name}.txt", text)
    return text


def _checkpoint(config: RunConfig, required: bool) -> Checkpoint:
    path = config.model.checkpoint
    if path is not None:
        return load_checkpoint(path)
    if required:
        raise ConfigError("model.checkpoint", "a checkpoint is required")
    LOGGER.warning("No checkpoint given, using a freshly initialized model")
    return Checkpoint(params=init_model(config.model.to_model_config()))


def _schedule(config: RunConfig, checkpoint: Checkpoint) -> PruneSchedule:
    if checkpoint.schedule is not None:
        return checkpoint.schedule
    return config.schedule.resolve(checkpoint.params.config.n_layers)


def _windows(config: RunConfig, max_seq_len: int) -> npt.NDArray[np.int64]:
    if config.io.corpus is None:
        raise ConfigError("io.corpus", "a corpus file is required")
    length: int = config.train.window_length
    if length > max_seq_len:
        raise ConfigError(
            "train.window_length",
            f"{length} exceeds the model's max_seq_len {max_seq_len}",
        )
    windows = make_windows(load_corpus(config.io.corpus), length)
    if windows.shape[0] == 0:
        raise ConfigError(
            "io.corpus", f"shorter than one {length}-token window"
        )
    return windows


def _held_out(
    config: RunConfig, params: ModelParams
) -> npt.NDArray[np.int64]:
    _, held = split_holdout(
        _windows(config, params.config.max_seq_len),
        config.train.holdout_fraction,
    )
    if held.shape[0] == 0:
        raise ConfigError(
            "train.holdout_fraction", "no held-out windows to evaluate on"
        )
    return held[: config.train.eval_windows]


def _pretrain(
    config: RunConfig, windows: npt.NDArray[np.int64]
) -> ModelParams:
    params = init_model(config.model.to_model_config())
    if config.train.pretrain_epochs == 0:
        return params
    return pretrain_base(
        params,
        windows,
        config.train,
        on_step=lambda step, loss: LOGGER.debug(
            "pretrain step %d: %.4f", step, loss
        ),
    )


def cmd_train(args: argparse.Namespace) -> int:
    """Train the scorers (pretraining the base model when needed)."""
    config = _config(
        args,
        {
            "train.baseline": True if args.baseline else None,
            "train.epochs": args.epochs,
            "train.max_steps": args.max_steps,
            "train.workers": args.workers,
        },
    )
    windows = _windows(config, config.model.max_seq_len)
    train_windows, _ = split_holdout(windows, config.train.holdout_fraction)
    with _output(config, args) as out:
        out.write_json(RESOLVED_CONFIG_FILE, config)
        if config.model.checkpoint is not None:
            params = load_checkpoint(config.model.checkpoint).params
        else:
            params = _pretrain(config, train_windows)
            save_checkpoint(
                out.file(BASE_CHECKPOINT_FILE), Checkpoint(params=params)
            )
        schedule = config.schedule.resolve(params.config.n_layers)
        trainer = TrainerService(params, schedule, config.train)
        result = trainer.train(train_windows)
        out.write_jsonl(METRICS_FILE, result.metrics)
        save_checkpoint(out.file(CHECKPOINT_FILE), result.checkpoint)
        metadata = t.cast(TrainingMetadata, result.checkpoint.metadata)
        _write_report(out, config, "train", metadata)
    print(
        f"trained {metadata.steps} steps, "
        f"scorer checksum {metadata.scorer_checksum}"
    )
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    """Next-token training of the base model alone."""
    config = _config(args, {"train.epochs": args.epochs})
    windows = _windows(config, config.model.max_seq_len)
    train_windows, _ = split_holdout(windows, config.train.holdout_fraction)
    with _output(config, args) as out:
        out.write_json(RESOLVED_CONFIG_FILE, config)
        params = _pretrain(config, train_windows)
        path = save_checkpoint(
            out.file(BASE_CHECKPOINT_FILE), Checkpoint(params=params)
        )
    print(f"base model checksum {params.checksum()} written to {path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    """Held-out perplexity in full, pruned or random-pruned mode."""
    config = _config(args)
    checkpoint = _checkpoint(config, required=False)
    mode = EvalMode(args.mode)
    if mode == EvalMode.PRUNED and checkpoint.scorers is None:
        raise ConfigError(
            "model.checkpoint", "pruned evaluation needs trained scorers"
        )
    policy = (
        _policy(config, args.kv_policy) if args.kv_policy is not None else None
    )
    windows = _held_out(config, checkpoint.params)
    with _output(config, args) as out:
        out.write_json(RESOLVED_CONFIG_FILE, config)
        report = evaluate(
            checkpoint.params,
            checkpoint.scorers,
            _schedule(config, checkpoint),
            windows,
            mode,
            config.seed,
            policy,
        )
        _write_report(out, config, "eval", report)
    print(
        f"{report.mode}: perplexity {report.perplexity:.4f} over "
        f"{report.windows} windows"
        + (
            f", mean spearman {report.mean_spearman:.4f}"
            if report.mean_spearman is not None
            else ""
        )
        + (
            f", cache {report.kv_policy} peak {report.max_cache_entries}"
            if report.kv_policy is not None
            else ""
        )
    )
    return EXIT_OK


def _saliency_rows(
    maps: t.Sequence[SaliencyMap],
) -> t.List[t.List[t.Union[int, str]]]:
    length: int = maps[0].scores.shape[0]
    return [
        [position]
        + [f"{float(saliency.scores[position]):.9g}" for saliency in maps]
        for position in range(length)
    ]


def cmd_attribute(args: argparse.Namespace) -> int:
    """Saliency of every token at every stage, plus sparsity statistics."""
    config = _config(args)
    checkpoint = _checkpoint(config, required=False)
    params = checkpoint.params
    schedule = _schedule(config, checkpoint)
    if not schedule.stages:
        raise ConfigError("schedule", "attribution needs at least one stage")
    tokens = load_corpus(args.input)
    mode = config.train.saliency_mode
    with _output(config, args) as out:
        out.write_json(RESOLVED_CONFIG_FILE, config)
        if tokens.shape[0] <= params.config.max_seq_len:
            maps = attribute(params, tokens, tokens[1:], schedule, mode)
        else:
            windows = make_windows(tokens, config.train.window_length)
            service = SaliencyService(
                params, schedule, mode, config.train.workers
            )
            batch = service.attribute_batch(
                windows[: config.train.eval_windows]
            )
            maps = batch[0]
            profile = sparsity_profile(
                [sparsity_stats(item, args.threshold) for item in batch]
            )
            out.write_json("sparsity_profile.json", profile)
            out.write_text(
                "sparsity.txt", render_report("sparsity.txt", profile)
            )
        out.write_csv(
            "saliency.csv",
            ["position"] + [f"layer_{layer}" for layer in schedule.layers],
            _saliency_rows(maps),
        )
        stats = sparsity_stats(maps, args.threshold)
        out.write_json("sparsity.json", stats)
    print(
        "important tokens per stage: "
        + ", ".join(str(count) for count in stats.important)
    )
    return EXIT_OK


def _profile(name: str, config: RunConfig) -> ArchProfile:
    if name == "toy":
        return ArchProfile.from_model_config(config.model.to_model_config())
    if name.endswith(".json"):
        return load_arch_profile(Path(name))
    return get_profile(name)


def _lengths(text: str | None) -> t.Tuple[int, ...]:
    if text is None:
        return DEFAULT_FLOPS_LENGTHS
    try:
        lengths = tuple(int(part) for part in text.split(",") if part)
    except ValueError as exc:
        raise ConfigError("--lengths", f"not a length list: {text}") from exc
    if not lengths or min(lengths) < 1:
        raise ConfigError("--lengths", "lengths must be positive")
    return lengths


def cmd_flops(args: argparse.Namespace) -> int:
    """Analytic FLOPs and memory table with and without pruning."""
    config = _config(args)
    profile = _profile(args.profile, config)
    schedule = (
        config.schedule.resolve(profile.n_layers)
        if args.schedule == "on"
        else None
    )
    table = flops_table(
        profile, _lengths(args.lengths), schedule, args.gen_len
    )
    with _output(config, args) as out:
        out.write_json(RESOLVED_CONFIG_FILE, config)
        text = _write_report(out, config, "flops_table", table)
    print(text, end="")
    return EXIT_OK


def _policy(config: RunConfig, text: str | None) -> KVCachePolicy:
    if text is None:
        return config.kv
    try:
        return KVCachePolicy.parse(text)
    except (ValueError, ValidationError) as exc:
        raise ConfigError("--kv-policy", str(exc)) from exc


def cmd_generate(args: argparse.Namespace) -> int:
    """Pruned prefill plus budgeted decoding from a prompt file."""
    config = _config(args)
    prune: bool = args.prune == "on"
    checkpoint = _checkpoint(config, required=prune)
    if prune and checkpoint.scorers is None:
        raise ConfigError("model.checkpoint", "checkpoint has no scorers")
    policy = _policy(config, args.kv_policy)
    schedule = _schedule(config, checkpoint) if prune else None
    prompt = load_corpus(args.prompt)
    with _output(config, args) as out:
        out.write_json(RESOLVED_CONFIG_FILE, config)
        outcome = compose_sdtp_h2o(
            checkpoint.params,
            prompt,
            schedule,
            checkpoint.scorers if prune else None,
            policy,
            args.gen_len,
            args.temperature,
            config.seed,
        )
        _write_report(out, config, "generation", outcome.report)
        out.write_text("generated.txt", outcome.report.text)
        out.write_json(
            "masks.json",
            {
                "stage_layers": list(schedule.layers) if schedule else [],
                "kept": outcome.report.stage_kept,
            },
        )
        out.write_csv(
            "cache_trace.csv",
            ["step", "layer", "entries"],
            ([row.step, row.layer, row.entries] for row in outcome.trace),
        )
    print(outcome.report.text)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    """Wall-clock timings of the toy model and a cache-size trace."""
    config = _config(args)
    checkpoint = _checkpoint(config, required=False)
    schedule = _schedule(config, checkpoint)
    with _output(config, args) as out:
        out.write_json(RESOLVED_CONFIG_FILE, config)
        report = bench_toy(
            checkpoint.params,
            checkpoint.scorers,
            schedule,
            args.length,
            args.gen_len,
            args.repeats,
            config.seed,
        )
        text = _write_report(out, config, "bench", report)
        prompt = np.random.default_rng([config.seed, 0xBE]).integers(
            0, checkpoint.params.config.vocab_size, size=args.length
        )
        outcome = compose_sdtp_h2o(
            checkpoint.params,
            prompt,
            schedule,
            checkpoint.scorers or RandomScorer(config.seed),
            config.kv,
            args.gen_len,
            seed=config.seed,
        )
        out.write_csv(
            "cache_trace.csv",
            ["step", "layer", "entries"],
            ([row.step, row.layer, row.entries] for row in outcome.trace),
        )
    print(text, end="")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    """Placement and stage-count studies under oracle selection."""
    config = _config(args)
    checkpoint = _checkpoint(config, required=False)
    windows = _held_out(config, checkpoint.params)
    with _output(config, args) as out:
        out.write_json(RESOLVED_CONFIG_FILE, config)
        report = run_sweeps(
            checkpoint.params,
            windows,
            start_layer=args.start_layer,
            layer_step=args.layer_step,
            sink_count=config.schedule.sink_count,
            local_fraction=config.schedule.local_fraction,
            mode=config.train.saliency_mode,
        )
        text = _write_report(out, config, "sweep", report)
        out.write_csv(
            "sweep.csv",
            list(report.rows[0].model_fields) if report.rows else [],
            (list(row.model_dump().values()) for row in report.rows),
        )
    print(text, end="")
    return EXIT_OK


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON run config")
    parser.add_argument("--output", type=Path, help="Output directory")
    parser.add_argument(
        "--force", action="store_true", help="Overwrite a non-empty output"
    )
    parser.add_argument("--seed", type=int, help="Run seed")


def build_parser() -> argparse.ArgumentParser:
    """Parser with one subcommand per operation."""
    parser = argparse.ArgumentParser(
        prog="sdtp", description="Saliency-driven dynamic token pruning"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def command(
        name: str, handler: Handler, text: str
    ) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=text, description=text)
        _common(sub)
        sub.set_defaults(handler=handler)
        return sub

    train = command("train", cmd_train, "Train the token scorers")
    train.add_argument("--corpus", type=Path, help="Training text")
    train.add_argument("--checkpoint", type=Path, help="Base model")
    train.add_argument(
        "--baseline",
        action="store_true",
        help="Keep-ratio loss only, no saliency supervision",
    )
    train.add_argument("--epochs", type=int)
    train.add_argument("--max-steps", type=int)
    train.add_argument("--workers", type=int)

    pretrain = command("pretrain", cmd_pretrain, "Train the base model")
    pretrain.add_argument("--corpus", type=Path, help="Training text")
    pretrain.add_argument("--epochs", type=int)

    evaluation = command("eval", cmd_eval, "Held-out perplexity")
    evaluation.add_argument("--checkpoint", type=Path)
    evaluation.add_argument("--corpus", type=Path)
    evaluation.add_argument(
        "--mode",
        choices=[mode.value for mode in EvalMode],
        default=EvalMode.PRUNED.value,
    )
    evaluation.add_argument(
        "--kv-policy", help="Decode the tail under none, local[:f] or h2o[:f]"
    )

    attribution = command("attribute", cmd_attribute, "Token saliency")
    attribution.add_argument("--checkpoint", type=Path)
    attribution.add_argument("--input", type=Path, required=True)
    attribution.add_argument(
        "--threshold", type=float, default=IMPORTANCE_THRESHOLD
    )

    flops = command("flops", cmd_flops, "Analytic cost table")
    flops.add_argument(
        "--profile",
        default="mistral-7b",
        help="Built-in name, 'toy' or a JSON profile file",
    )
    flops.add_argument("--lengths", help="Comma-separated prompt lengths")
    flops.add_argument("--schedule", choices=["on", "off"], default="on")
    flops.add_argument("--gen-len", type=int, default=DEFAULT_GEN_LEN)

    generate = command("generate", cmd_generate, "Generate from a prompt")
    generate.add_argument("--checkpoint", type=Path)
    generate.add_argument("--prompt", type=Path, required=True)
    generate.add_argument("--prune", choices=["on", "off"], default="on")
    generate.add_argument("--kv-policy", help="none, local[:f] or h2o[:f]")
    generate.add_argument("--gen-len", type=int, default=DEFAULT_GEN_LEN)
    generate.add_argument("--temperature", type=float, default=0.0)

    bench = command("bench", cmd_bench, "Toy wall-clock benchmark")
    bench.add_argument("--checkpoint", type=Path)
    bench.add_argument("--length", type=int, default=384)
    bench.add_argument("--gen-len", type=int, default=16)
    bench.add_argument("--repeats", type=int, default=3)

    sweep = command("sweep", cmd_sweep, "Pruning placement studies")
    sweep.add_argument("--checkpoint", type=Path)
    sweep.add_argument("--corpus", type=Path)
    sweep.add_argument("--start-layer", type=int, default=1)
    sweep.add_argument("--layer-step", type=int, default=1)
    return parser


def main(argv: t.Sequence[str] | None = None) -> int:
    """Run one subcommand.

    Args:
        argv (Sequence[str] | None): Arguments; `sys.argv[1:]` if None.

    Returns:
        int: 0 on success, 2 for usage errors, 1 for other failures.
    """
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except USAGE_ERRORS as exc:
        LOGGER.error("%s", exc)
        return EXIT_USAGE
    except SdtpError as exc:
        LOGGER.error("%s failed: %s", args.command, exc)
        return EXIT_FAILURE
    except ValueError as exc:
        LOGGER.exception("%s failed: %s", args.command, exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
