"""Command-line entry point: ``case-lab <command> [flags]``.

Settings are merged as defaults <- ``--config`` file <- flags. The config
file holds ``key = value`` lines (``#`` starts a comment); keys are flag
names with or without the leading dashes. Every command writes the
resolved settings to ``<out>/run_config.txt``, which can be passed back
with ``--config`` to reproduce the run.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .compose import Variant, parse_variant
from .craftworld import TaskKind
from .datagen import (
    DatasetError,
    GenConfig,
    GenerationError,
    HoldoutSpec,
    all_multisets,
    atomic_write_text,
    derive_seed,
    generate_pairs,
    read_dataset,
    split_tasks,
    write_dataset,
)
from .evaluate import (
    RUN_HEADER,
    SUMMARY_HEADER,
    SWEEP_HEADER,
    RunRow,
    ablate_k,
    compare_variants,
    csv_text,
    success_rate,
    summary_rows,
    sweep_sequence_length,
)
from .nn import CheckpointError, fingerprint
from .train import TrainConfig, TrainingError, load_models, train_loop

log = logging.getLogger("case_lab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# Named sub-streams of the user seed.
STREAM_GEN, STREAM_SPLIT = 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ config files


def read_config_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key.lstrip("-").replace("-", "_")] = value
    return out


def _format_value(v) -> str:
    if isinstance(v, Variant):
        return v.value
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):  # grid
        return "x".join(str(x) for x in v)
    if isinstance(v, list):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def _config_text(command: str, args: argparse.Namespace) -> str:
    skip = ("command", "config", "func", "verbose")
    items = {k: _format_value(v) for k, v in sorted(vars(args).items()) if k not in skip and v is not None}
    # Where the files go and how many processes ran do not change them.
    result_keys = {k: v for k, v in items.items() if k not in ("out", "workers")}
    lines = [f"# case-lab {__version__} {command}", f"# fingerprint {fingerprint(result_keys)}"]
    lines += [f"{k} = {v}" for k, v in items.items()]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ parsing helpers


def _int_list(text: str) -> list[int]:
    """``"1,2,5"`` or a range ``"1-8"``."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty list {text!r}")
    return out


def _grid(text: str) -> tuple[int, int]:
    parts = str(text).lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 8 or 8x8, got {text!r}") from None
    if len(dims) == 1:
        dims *= 2
    if len(dims) != 2 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}")
    return dims[0], dims[1]


def _variants(text: str) -> list[Variant]:
    try:
        return [parse_variant(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--config", type=Path)
    p.add_argument("--workers", type=int, default=1)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--variant", type=parse_variant, default=d.variant)
    p.add_argument("--k", type=int, default=d.k)
    p.add_argument("--lambda-h", type=float, default=d.lambda_h)
    p.add_argument("--lambda-p", type=float, default=d.lambda_p)
    p.add_argument("--margin", type=float, default=d.margin)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--samples-per-pair", type=int, default=d.samples_per_pair)
    p.add_argument("--batch", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--latent-dim", type=int, default=d.latent_dim)
    p.add_argument("--hidden", type=int, default=d.hidden)
    p.add_argument("--augment", type=_bool, default=d.augment)
    p.add_argument("--budget-mult", type=float, default=2.0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="case-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate train/test datasets and the task split")
    _add_shared(g)
    g.add_argument("--pairs", type=int, default=2000)
    g.add_argument("--test-pairs", type=int, default=300)
    g.add_argument("--grid", type=_grid, default=(8, 8))
    g.add_argument("--tasks-min", type=int, default=2)
    g.add_argument("--tasks-max", type=int, default=8)
    g.add_argument("--holdout-mode", choices=("composition", "kind"), default="composition")
    g.add_argument("--holdout-fraction", type=float, default=0.25)
    g.add_argument("--holdout-kind", choices=[t.name for t in TaskKind])
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one variant")
    _add_shared(t)
    _add_train_flags(t)
    t.add_argument("--dataset", type=Path, help="default: <out>/train.jsonl")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint one-shot on a test dataset")
    _add_shared(e)
    e.add_argument("--checkpoint", type=Path, help="default: <out>/checkpoint.json")
    e.add_argument("--dataset", type=Path, help="default: <out>/test.jsonl")
    e.add_argument("--k", type=int, help="default: the checkpoint's k")
    e.add_argument("--budget-mult", type=float, default=2.0)
    e.set_defaults(func=cmd_eval)

    for name, func, helptext in (
        ("compare", cmd_compare, "train and evaluate several variants over seeds"),
        ("ablate-k", cmd_ablate_k, "train and evaluate over a list of k"),
        ("sweep-len", cmd_sweep_len, "evaluate variants per task-sequence length"),
    ):
        x = sub.add_parser(name, help=helptext)
        _add_shared(x)
        _add_train_flags(x)
        x.add_argument("--train", type=Path, help="default: <out>/train.jsonl")
        x.add_argument("--seeds", type=_int_list, default=[0], help="e.g. 0-7 or 0,1,2")
        if name != "sweep-len":
            x.add_argument("--test", type=Path, help="default: <out>/test.jsonl")
        if name == "ablate-k":
            x.add_argument("--ks", type=_int_list, default=list(range(1, 9)))
        else:
            default = "CASE,CASE_CI,CASE_CI_L,GOAL_GUIDANCE,CPV_FULL"
            x.add_argument("--variants", type=_variants, default=_variants(default))
        if name == "sweep-len":
            x.add_argument("--lengths", type=_int_list, default=[2, 3, 4, 5])
            x.add_argument("--episodes", type=int, default=50, help="test pairs per length")
        x.set_defaults(func=func)

    pl = sub.add_parser("plot", help="render a sweep CSV as an SVG line chart")
    pl.add_argument("csv", type=Path)
    pl.add_argument("--out", type=Path, help="default: the CSV path with .svg")
    pl.add_argument("--config", type=Path)
    pl.set_defaults(func=cmd_plot)
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    try:
        values = read_config_file(args.config)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    sub = _subparser(parser, args.command)
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(values) - known - {"command"})
    if unknown:
        raise UsageError(f"unknown keys in {args.config}: {', '.join(unknown)}")
    values.pop("command", None)
    # Config values become string defaults, which argparse converts with the flag's type.
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


# ------------------------------------------------------------------ commands


def _train_config(args: argparse.Namespace, **extra) -> TrainConfig:
    return TrainConfig(
        variant=args.variant,
        k=args.k,
        lambda_h=args.lambda_h,
        lambda_p=args.lambda_p,
        margin=args.margin,
        lr=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        samples_per_pair=args.samples_per_pair,
        seed=args.seed,
        latent_dim=args.latent_dim,
        hidden=args.hidden,
        augment=args.augment,
        **extra,
    )


def _write_run_config(args: argparse.Namespace) -> None:
    atomic_write_text(Path(args.out) / "run_config.txt", _config_text(args.command, args))


def _dataset(path: Optional[Path], out: Path, default: str) -> list:
    path = Path(path) if path is not None else Path(out) / default
    if not path.exists():
        raise UsageError(f"dataset {path} does not exist")
    return read_dataset(path)


def cmd_gen(args: argparse.Namespace) -> int:
    if args.tasks_min > args.tasks_max:
        raise UsageError(f"--tasks-min {args.tasks_min} is greater than --tasks-max {args.tasks_max}")
    if args.pairs < 0 or args.test_pairs < 0:
        raise UsageError("pair counts must be >= 0")
    if args.holdout_mode == "kind" and args.holdout_kind is None:
        raise UsageError("--holdout-mode kind needs --holdout-kind")
    width, height = args.grid
    config = GenConfig(width=width, height=height, tasks_min=args.tasks_min, tasks_max=args.tasks_max)
    holdout = HoldoutSpec(
        args.holdout_mode,
        args.holdout_fraction,
        TaskKind[args.holdout_kind] if args.holdout_kind else None,
    )
    split = split_tasks(config, holdout, rng_seed=derive_seed(args.seed, STREAM_SPLIT))
    gen_seed = derive_seed(args.seed, STREAM_GEN)
    train = generate_pairs(args.pairs, split.train_sequences, config, rng_seed=derive_seed(gen_seed, 1))
    test = generate_pairs(args.test_pairs, split.test_sequences, config, rng_seed=derive_seed(gen_seed, 2))
    out = Path(args.out)
    write_dataset(train, out / "train.jsonl")
    write_dataset(test, out / "test.jsonl")
    manifest = {
        "grid": [width, height],
        "holdout": {"mode": holdout.mode, "fraction": holdout.fraction, "kind": args.holdout_kind},
        "train_sequences": sorted([t.name for t in m] for m in split.train_sequences),
        "test_sequences": sorted([t.name for t in m] for m in split.test_sequences),
    }
    atomic_write_text(out / "split.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    _write_run_config(args)
    lengths = Counter(len(p.train.tasks) for p in train + test)
    print(
        f"wrote {len(train)} train / {len(test)} test pairs to {out} "
        f"({len(split.train_sequences)} train / {len(split.test_sequences)} test multisets; "
        f"lengths {dict(sorted(lengths.items()))})"
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    out = Path(args.out)
    dataset = args.dataset if args.dataset is not None else out / "train.jsonl"
    if not Path(dataset).exists():
        raise UsageError(f"dataset {dataset} does not exist")
    config = _train_config(
        args, dataset=str(dataset), checkpoint=str(out / "checkpoint.json"), metrics=str(out / "metrics.csv")
    )
    result = train_loop(config)
    _write_run_config(args)
    last = result.history[-1] if result.history else {"loss_total": float("nan"), "loss_policy": float("nan"), "loss_H": float("nan"), "loss_P": float("nan")}
    print(
        f"trained {config.variant.value} for {result.models.store.step} steps: "
        f"loss {last['loss_total']:.4f} (policy {last['loss_policy']:.4f}, H {last['loss_H']:.4f}, P {last['loss_P']:.4f})"
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    out = Path(args.out)
    ckpt = args.checkpoint if args.checkpoint is not None else out / "checkpoint.json"
    if not Path(ckpt).exists():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    pairs = _dataset(args.dataset, out, "test.jsonl")
    if not pairs:
        raise UsageError("the test dataset has no episodes")
    models, cfg = load_models(ckpt)
    k = args.k if args.k is not None else int(cfg["train"]["k"])
    summary = success_rate(models, pairs, k, args.budget_mult)
    row = RunRow(models.config.variant.value, k, int(cfg["train"]["seed"]), summary)
    atomic_write_text(out / "eval.csv", csv_text(RUN_HEADER, [row.cells()]))
    _write_run_config(args)
    print(
        f"{row.variant}: success {summary.successes}/{summary.n_episodes} = {summary.rate:.3f} "
        f"(+/- {summary.half_width:.3f}), mean steps {summary.mean_steps:.1f}"
    )
    return EXIT_OK


def _train_test(args: argparse.Namespace) -> tuple[list, list]:
    train = _dataset(args.train, args.out, "train.jsonl")
    test = _dataset(args.test, args.out, "test.jsonl")
    if not train:
        raise UsageError("the training dataset is empty")
    if not test:
        raise UsageError("the test dataset has no episodes")
    return train, test


def cmd_compare(args: argparse.Namespace) -> int:
    train, test = _train_test(args)
    rows = compare_variants(args.variants, train, test, args.seeds, _train_config(args), args.budget_mult, args.workers)
    out = Path(args.out)
    atomic_write_text(out / "compare.csv", csv_text(RUN_HEADER, [r.cells() for r in rows]))
    atomic_write_text(out / "compare_summary.csv", csv_text(SUMMARY_HEADER, summary_rows(rows)))
    _write_run_config(args)
    print(csv_text(SUMMARY_HEADER, summary_rows(rows)), end="")
    return EXIT_OK


def cmd_ablate_k(args: argparse.Namespace) -> int:
    train, test = _train_test(args)
    rows = ablate_k(args.ks, train, test, args.seeds, _train_config(args), args.budget_mult, args.workers)
    out = Path(args.out)
    atomic_write_text(out / "ablate_k.csv", csv_text(RUN_HEADER, [r.cells() for r in rows]))
    _write_run_config(args)
    print(csv_text(SUMMARY_HEADER, summary_rows(rows)), end="")
    return EXIT_OK


def cmd_sweep_len(args: argparse.Namespace) -> int:
    train = _dataset(args.train, args.out, "train.jsonl")
    if not train:
        raise UsageError("the training dataset is empty")
    world = train[0].train.world
    seen = {tuple(sorted(p.train.tasks)) for p in train}
    config = GenConfig(width=world.width, height=world.height, tasks_min=min(args.lengths), tasks_max=max(args.lengths))
    pools = {}
    for length in args.lengths:
        pools[length] = [m for m in all_multisets(config) if len(m) == length and m not in seen]
    rows = sweep_sequence_length(
        args.lengths,
        args.variants,
        train,
        pools,
        args.seeds,
        config,
        args.episodes,
        _train_config(args),
        args.budget_mult,
        gen_seed=derive_seed(args.seed, STREAM_GEN),
    )
    out = Path(args.out)
    atomic_write_text(out / "sweep_len.csv", csv_text(SWEEP_HEADER, [[length] + r.cells() for length, r in rows]))
    _write_run_config(args)
    for length, r in rows:
        print(f"length {length} {r.variant:14s} seed {r.seed} success {r.summary.rate:.3f}")
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    from .plotting import read_sweep_csv, render_svg

    series, xlabel = read_sweep_csv(args.csv)
    out = args.out if args.out is not None else Path(args.csv).with_suffix(".svg")
    atomic_write_text(out, render_svg(series, xlabel))
    print(f"wrote {out}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"case-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse usage errors and --help/--version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"case-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GenerationError, DatasetError, TrainingError, CheckpointError, ValueError, OSError) as exc:
        print(f"case-lab: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
