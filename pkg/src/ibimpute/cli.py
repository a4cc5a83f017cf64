"""Command-line entry point for reproducible imputation experiments.

Subcommands: ``synth`` (generate a dataset), ``train``, ``eval``,
``ablate``, ``impute`` (fill a CSV's missing cells), ``export-latents``.
Commands that take ``--config`` echo the fully resolved configuration into
the output directory so every artifact records how it was produced.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .autodiff import DomainError, ShapeMismatchError, TapeError
from .config import ConfigError, RunConfig
from .data import (
    CsvFormatError,
    Dataset,
    MaskError,
    MaskSpec,
    SplitError,
    TimeSeriesWindow,
    Window,
    apply_mask,
    chrono_split,
    load_csv,
    make_windows,
    normalize_window,
    write_csv,
)
from .evaluation import (
    EvalEntry,
    alignment_score,
    average_entry,
    export_latents,
    masked_error_sums,
    run_ablation,
    write_ablation_csv,
    write_sweep_csv,
)
from .model import CheckpointError, ImputationModel, NumericError, load_checkpoint
from .rng import STREAM_EVAL_MASK, derive
from .training import TrainingError, fit, write_training_log


class UsageError(Exception):
    """Bad flags or bad configuration; exits with code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse would exit(2) on usage problems; route them to exit code 1
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="ibimpute", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--threads",
        type=int,
        default=1,
        help="worker cap; 1 (the default) guarantees bit-reproducible runs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    config_parent = _Parser(add_help=False)
    config_parent.add_argument("--config", required=True, help="run config file")
    config_parent.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    config_parent.add_argument(
        "--quiet", action="store_true", help="suppress progress lines on stderr"
    )

    p = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    p.add_argument("--vars", type=int, required=True, help="number of variables")
    p.add_argument("--steps", type=int, required=True, help="number of timesteps")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", parents=[config_parent], help="train a model")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", parents=[config_parent], help="score a checkpoint")
    p.add_argument("--checkpoint", help="defaults to <output_dir>/checkpoint.bin")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", parents=[config_parent], help="four-way ablation")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("impute", help="fill missing cells of a CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="CSV with empty cells to fill")
    p.add_argument("--output", required=True, help="completed CSV path")
    p.set_defaults(func=_cmd_impute)

    p = sub.add_parser(
        "export-latents", parents=[config_parent], help="latent projections + alignment"
    )
    p.add_argument("--checkpoint", help="defaults to <output_dir>/checkpoint.bin")
    p.set_defaults(func=_cmd_export_latents)

    return parser


def _load_run_config(args) -> RunConfig:
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    try:
        return RunConfig.from_sources(text, args.override, source=args.config)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _configs_for_run(cfg: RunConfig):
    try:
        train_cfg = cfg.train_config()
        train_cfg.validate()
    except (ValueError, MaskError) as exc:
        raise UsageError(str(exc)) from None
    return train_cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.txt").write_text(cfg.resolved_text())
    return out


def _test_windows(cfg: RunConfig, dataset: Dataset) -> list[Window]:
    window_len = cfg["window.length"]
    split = cfg["train.split"]
    _, _, test_seg = chrono_split(dataset, window_len, (split[0], split[1], split[2]))
    stride = cfg["window.val_stride"]
    return make_windows(test_seg, window_len, stride if stride is not None else window_len)


def _checkpoint_model(cfg: RunConfig, args, dataset: Dataset) -> ImputationModel:
    path = args.checkpoint or str(Path(cfg["output_dir"]) / "checkpoint.bin")
    model = load_checkpoint(path)
    expected = cfg.model_config(dataset.n_vars)
    if model.config != expected:
        raise CheckpointError(
            f"checkpoint {path} was trained with {model.config}, "
            f"but the run config implies {expected}"
        )
    if model.normalizer is None:
        raise CheckpointError(f"checkpoint {path} carries no normalizer")
    return model


def _masked_test_windows(
    model: ImputationModel, windows: list[Window], spec: MaskSpec
) -> list[TimeSeriesWindow]:
    return [apply_mask(normalize_window(w, model.normalizer), spec) for w in windows]


def _cmd_synth(args) -> None:
    if args.vars < 1:
        raise UsageError("--vars must be >= 1")
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    if args.noise_std < 0:
        raise UsageError("--noise-std must be >= 0")
    from .data import make_synthetic

    ds = make_synthetic(args.vars, args.steps, args.seed, args.noise_std)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(str(out), ds)
    meta = (
        f"generator = synthetic\nvars = {args.vars}\nsteps = {args.steps}\n"
        f"seed = {args.seed}\nnoise_std = {args.noise_std!r}\n"
    )
    Path(str(out) + ".meta").write_text(meta)
    print(f"wrote {out} ({args.steps} rows, {args.vars} variables)")


def _cmd_train(args) -> None:
    cfg = _load_run_config(args)
    train_cfg = _configs_for_run(cfg)
    dataset = cfg.load_dataset()
    model_cfg = cfg.model_config(dataset.n_vars)
    out = _out_dir(cfg)
    result = fit(
        dataset,
        model_cfg,
        train_cfg,
        checkpoint_path=str(out / "checkpoint.bin"),
        progress=not args.quiet,
    )
    write_training_log(str(out / "training_log.csv"), result.log_rows)
    print(f"best_epoch = {result.best_epoch}")
    print(f"best_val_mae = {result.best_val_mae!r}")


def _score_cell(model, windows, spec, normalized):
    masked = _masked_test_windows(model, windows, spec)
    scale = None if normalized else model.normalizer.std
    abs_sum, sq_sum, count = masked_error_sums(model, masked, var_scale=scale)
    if count == 0:
        raise TrainingError(
            f"mask pattern={spec.pattern} rate={spec.rate} hid no observed values"
        )
    entry = EvalEntry(
        pattern=spec.pattern,
        rate=spec.rate,
        mae=abs_sum / count,
        mse=sq_sum / count,
        n_eval_points=count,
    )
    return entry, alignment_score(model, masked)


def _cmd_eval(args) -> None:
    cfg = _load_run_config(args)
    _configs_for_run(cfg)
    dataset = cfg.load_dataset()
    model = _checkpoint_model(cfg, args, dataset)
    windows = _test_windows(cfg, dataset)
    out = _out_dir(cfg)
    eval_seed = derive(cfg["eval.seed"], STREAM_EVAL_MASK)
    rows: list[EvalEntry] = []
    align_rows: list[tuple[str, float, float]] = []
    for pattern in cfg["eval.patterns"]:
        per_rate = []
        for rate in cfg["eval.rates"]:
            spec = MaskSpec(
                pattern=pattern,
                rate=rate,
                block_len=cfg["mask.block_len"],
                seed=eval_seed,
            )
            entry, align = _score_cell(model, windows, spec, cfg["eval.normalized"])
            per_rate.append(entry)
            align_rows.append((pattern, rate, align))
        rows.extend(per_rate)
        rows.append(average_entry(pattern, per_rate))
    write_sweep_csv(str(out / "report.csv"), rows)
    with open(out / "alignment.csv", "w", newline="") as fh:
        fh.write("pattern,rate,alignment\n")
        for pattern, rate, align in align_rows:
            fh.write(f"{pattern},{rate!r},{align!r}\n")
    for e in rows:
        print(f"{e.pattern} rate={e.rate_label} mae={e.mae!r} mse={e.mse!r}")


def _cmd_ablate(args) -> None:
    cfg = _load_run_config(args)
    train_cfg = _configs_for_run(cfg)
    if train_cfg.weights.loc <= 0.0:
        raise UsageError("ablation needs train.weights.loc > 0")
    dataset = cfg.load_dataset()
    model_cfg = cfg.model_config(dataset.n_vars)
    out = _out_dir(cfg)
    grid = run_ablation(
        dataset,
        model_cfg,
        train_cfg,
        rates=cfg["eval.rates"],
        eval_seed=cfg["eval.seed"],
        normalized=cfg["eval.normalized"],
        progress=not args.quiet,
    )
    write_ablation_csv(str(out / "ablation.csv"), grid)
    for i, rate in enumerate(cfg["eval.rates"]):
        ranked = sorted(grid.entries, key=lambda name: grid.entries[name][i].mae)
        parts = " ".join(f"{name}={grid.entries[name][i].mae!r}" for name in ranked)
        print(f"rate {rate!r}: {parts}")


def _read_raw_rows(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


def _cmd_impute(args) -> None:
    model = load_checkpoint(args.checkpoint)
    if model.normalizer is None:
        raise CheckpointError(f"checkpoint {args.checkpoint} carries no normalizer")
    ds = load_csv(args.input)
    t_len = model.config.window_len
    if ds.n_vars != model.config.n_vars:
        raise CheckpointError(
            f"{args.input} has {ds.n_vars} variables, checkpoint expects "
            f"{model.config.n_vars}"
        )
    if ds.length < t_len:
        raise TrainingError(
            f"{args.input} has {ds.length} rows, need at least {t_len}"
        )
    starts = list(range(0, ds.length - t_len + 1, t_len))
    if starts[-1] + t_len < ds.length:
        starts.append(ds.length - t_len)  # overlapping tail window
    filled = ds.values.copy()
    done = ds.native_mask.copy()  # 1 where the value is already final
    for s in starts:
        window = TimeSeriesWindow(
            x=ds.values[s : s + t_len],
            m_obs=ds.native_mask[s : s + t_len],
            m_art=np.ones((t_len, ds.n_vars)),
            x_masked=ds.values[s : s + t_len] * ds.native_mask[s : s + t_len],
            realized_rate=0.0,
        )
        out_win = model.impute(window)
        span = slice(s, s + t_len)
        todo = done[span] == 0.0
        filled[span][todo] = out_win[todo]
        done[span][todo] = 1.0
    header, raw_rows = _read_raw_rows(args.input)
    out = Path(args.output)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t, raw in enumerate(raw_rows):
            row = [
                raw[i] if ds.native_mask[t, i] == 1.0 else repr(float(filled[t, i]))
                for i in range(ds.n_vars)
            ]
            writer.writerow(row)
    Path(str(out) + ".meta").write_text(
        f"checkpoint = {args.checkpoint}\ninput = {args.input}\n"
    )
    n_filled = int((1.0 - ds.native_mask).sum())
    print(f"wrote {out} ({n_filled} cells filled)")


def _cmd_export_latents(args) -> None:
    cfg = _load_run_config(args)
    _configs_for_run(cfg)
    dataset = cfg.load_dataset()
    model = _checkpoint_model(cfg, args, dataset)
    windows = _test_windows(cfg, dataset)
    out = _out_dir(cfg)
    spec = MaskSpec(
        pattern=cfg["mask.pattern"],
        rate=cfg["mask.rate"],
        block_len=cfg["mask.block_len"],
        seed=derive(cfg["eval.seed"], STREAM_EVAL_MASK),
    )
    export_latents(model, windows, spec, str(out / "latents.csv"))
    masked = _masked_test_windows(model, windows, spec)
    score = alignment_score(model, masked)
    (out / "alignment.txt").write_text(f"{score!r}\n")
    print(f"alignment = {score!r}")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        args.func(args)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (
        CsvFormatError,
        SplitError,
        MaskError,
        CheckpointError,
        TrainingError,
        NumericError,
        DomainError,
        ShapeMismatchError,
        TapeError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
