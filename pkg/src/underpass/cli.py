"""Command-line front end: ``underpass <subcommand> [options]``.

Every subcommand resolves a :class:`RunConfig` (defaults < ``--config`` file
< flags), writes it to ``out_dir/run.cfg`` and puts its artifacts beside it.
Failures print a single ``error kind=<kind> code=<n> msg=<text>`` line to
stderr and exit with 2 (config), 3 (data) or 4 (numeric).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

from . import checkpoint
from .arch import ArchitectureError, ArchitectureSpec, count_parameters, desk_analog, generate_family
from .config import ConfigError, RunConfig, load
from .cyclegan import CycleGANBundle, GANConfig, NonFiniteLossError, train_cyclegan, transform_dataset
from .data import (
    ALLOWED_FRACTIONS,
    ClassLabel,
    DataError,
    Dataset,
    SplitSpec,
    downscale,
    load_corpus,
    read_manifest,
    stratified_split,
    write_corpus,
    write_manifest,
)
from .evaluation import DEFAULT_TEST_SETS, build_experiment_b_sets, evaluate, per_class_report, run_experiment_b
from .synth import build_corpus
from .training import (
    Classifier,
    HyperParams,
    TrainConfig,
    TrainingDivergedError,
    default_grid,
    grid_search_ofat,
    run_experiment_a,
    train_classifier,
    write_experiment_a,
    write_history,
    write_tuning_trace,
)

log = logging.getLogger("underpass")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
MODEL_FILE = "model.evl"
BUNDLE_FILE = "bundle.evl"


class CliError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _classify(exc: BaseException) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, (ConfigError, ArchitectureError)):
        return CliError("config", EXIT_CONFIG, str(exc))
    if isinstance(exc, (TrainingDivergedError, NonFiniteLossError, FloatingPointError)):
        return CliError("numeric", EXIT_NUMERIC, str(exc))
    if isinstance(exc, (DataError, checkpoint.CheckpointError, FileNotFoundError)):
        return CliError("data", EXIT_DATA, str(exc))
    raise exc


# -- helpers --------------------------------------------------------------


def _counts(text: str) -> dict[ClassLabel, int]:
    parts = text.split(",")
    if len(parts) != len(ClassLabel):
        raise ConfigError(f"--counts needs {len(ClassLabel)} comma-separated integers (empty,pedestrian,dog_walker,bicyclist)")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"--counts {text!r} is not a list of integers") from None
    if min(values) < 0:
        raise ConfigError("--counts must be non-negative")
    return dict(zip(ClassLabel, values))


def _arch(name: str, cfg: RunConfig, desk: bool = True) -> ArchitectureSpec:
    family = generate_family()
    try:
        spec = family.by_name(name)
    except KeyError:
        raise ConfigError(f"unknown architecture {name!r}; choose Arch1..Arch{len(family)}") from None
    return desk_analog(spec, cfg.image_shape) if desk else spec.with_resolution(cfg.image_shape)


def _at_resolution(ds: Dataset, cfg: RunConfig) -> Dataset:
    target = (cfg.resolution, cfg.resolution)
    if all(i.resolution == target for i in ds):
        return ds
    return Dataset(downscale(i, target) for i in ds)


def _split(cfg: RunConfig, name: str, domain: str = "day") -> Dataset:
    ds = load_corpus(Path(cfg.data_root), domain=domain, split=name)
    if len(ds) == 0:
        raise DataError(f"no {domain} images in split {name!r} under {cfg.data_root}; run split first")
    return _at_resolution(ds, cfg)


def _train_config(cfg: RunConfig) -> TrainConfig:
    if cfg.patience >= cfg.max_epochs:
        raise ConfigError("patience must be smaller than max_epochs")
    return TrainConfig(cfg.batch_size, cfg.max_epochs, cfg.patience, cfg.seed, cfg.image_shape)


def _hparams(cfg: RunConfig) -> HyperParams:
    return HyperParams(cfg.learning_rate, cfg.dropout_rate, cfg.l2_rate)


def _load_kind(path: str, kind: type):
    obj = checkpoint.load(Path(path))
    if not isinstance(obj, kind):
        raise DataError(f"{path} holds a {type(obj).__name__}, expected {kind.__name__}")
    return obj


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ----------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> None:
    day = _counts(args.counts) if args.counts else None
    night = _counts(args.night_counts)
    corpus = build_corpus(day, night, seed=cfg.seed, size=cfg.resolution)
    path = write_corpus(corpus, Path(cfg.data_root))
    print(f"wrote {len(corpus)} images, manifest {path}")


def cmd_split(args, cfg: RunConfig) -> None:
    root = Path(cfg.data_root)
    rows = read_manifest(root)
    corpus = load_corpus(root)
    assigned: dict[str, str] = {}
    for domain in sorted({r["domain"] for r in rows}):
        part = corpus.filter(domain=domain)
        train, val, test = stratified_split(part, SplitSpec(args.train, args.val, round(1 - args.train - args.val, 10), cfg.seed))
        for name, ds in (("train", train), ("val", val), ("test", test)):
            assigned.update({sid: name for sid in ds.source_ids()})
    write_manifest(root, [(r["source_id"], r["class"], r["domain"], assigned[r["source_id"]]) for r in rows])
    with open(_out(cfg) / "split_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "split", "class", "n"])
        tally: dict[tuple[str, str, str], int] = {}
        for r in rows:
            key = (r["domain"], assigned[r["source_id"]], r["class"])
            tally[key] = tally.get(key, 0) + 1
        for key in sorted(tally):
            w.writerow([*key, tally[key]])
    print(f"split {len(rows)} images")


def cmd_train(args, cfg: RunConfig) -> None:
    spec = _arch(args.arch, cfg)
    result = train_classifier(spec, _split(cfg, "train"), _split(cfg, "val"), _hparams(cfg), _train_config(cfg))
    out = _out(cfg)
    checkpoint.save(result.model, out / MODEL_FILE, cfg.dump())
    write_history(result, out / "history.csv")
    print(f"{spec.name}: best epoch {result.best_epoch} val_acc {result.best.val_acc:.4f} wall {result.wall_seconds:.1f}s")


def cmd_tune(args, cfg: RunConfig) -> None:
    spec = _arch(args.arch, cfg)
    grid = default_grid()
    if args.quick:
        grid = {k: v[:: max(1, len(v) // 3)] for k, v in grid.items()}
    result = grid_search_ofat(spec, (_split(cfg, "train"), _split(cfg, "val")), grid, _train_config(cfg), _hparams(cfg))
    out = _out(cfg)
    write_tuning_trace(result, out / "tuning_trace.csv")
    best = cfg.updated({k: getattr(result.best, k) for k in ("learning_rate", "dropout_rate", "l2_rate")})
    best.write(out, "best.cfg")
    print(f"best {result.best} val_acc {result.best_accuracy:.4f} after {result.trainings} trainings")


def cmd_family(args, cfg: RunConfig) -> None:
    family = [desk_analog(s, cfg.image_shape) for s in generate_family()]
    if args.archs:
        wanted = set(args.archs.split(","))
        family = [s for s in family if s.name.split("-")[0] in wanted]
        if not family:
            raise ConfigError(f"--archs {args.archs!r} matches no architecture")
    fractions = tuple(float(f) for f in args.fractions.split(","))
    if any(f not in ALLOWED_FRACTIONS for f in fractions):
        raise ConfigError(f"fractions must come from {ALLOWED_FRACTIONS}")
    seeds = tuple(cfg.seed + k for k in range(args.seeds))
    day = load_corpus(Path(cfg.data_root), domain="day")
    rows = run_experiment_a(family, _at_resolution(day, cfg), fractions, seeds, _hparams(cfg), _train_config(cfg), args.jobs)
    write_experiment_a(rows, _out(cfg) / "experiment_a.csv")
    failed = [r for r in rows if r.error]
    print(f"{len(rows)} cells, {len(failed)} failed")


def cmd_gan_train(args, cfg: RunConfig) -> None:
    day = _at_resolution(load_corpus(Path(cfg.data_root), domain="day", split=args.day_split or None), cfg)
    night = _at_resolution(load_corpus(Path(cfg.data_root), domain="night"), cfg)
    if args.images:
        day, night = day[: args.images], night[: args.images]
    gcfg = GANConfig(
        resolution=cfg.image_shape,
        lambda_cycle=cfg.lambda_cycle,
        lambda_identity=cfg.lambda_identity,
        epochs=cfg.max_epochs,
        seed=cfg.seed,
        gen_filters=args.gen_filters,
        disc_filters=args.disc_filters,
    )
    bundle, history = train_cyclegan(CycleGANBundle.create(gcfg), day, night)
    out = _out(cfg)
    checkpoint.save(bundle, out / BUNDLE_FILE, cfg.dump())
    history.write_csv(out / "cyclegan_history.csv")
    print(f"trained {gcfg.epochs} epochs on {len(day)} day / {len(night)} night images")


def cmd_transform(args, cfg: RunConfig) -> None:
    bundle = _load_kind(args.bundle, CycleGANBundle)
    source = "night" if args.direction == "night2day" else "day"
    images = _at_resolution(load_corpus(Path(cfg.data_root), domain=source), cfg)
    result = transform_dataset(bundle, images, args.direction)
    path = write_corpus(result, _out(cfg) / "transformed")
    print(f"transformed {len(result)} images, manifest {path}")


def cmd_eval_a(args, cfg: RunConfig) -> None:
    model = _load_kind(args.model, Classifier)
    result = evaluate(model, _split(cfg, args.split))
    out = _out(cfg)
    with open(out / "eval_a.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "accuracy"])
        for name, acc in per_class_report(result):
            w.writerow([name, f"{acc:.6f}"])
    result.confusion.write_csv(out / f"confusion_{args.split}.csv")
    print(f"accuracy {result.accuracy:.4f} on {result.confusion.total} images")


def cmd_eval_b(args, cfg: RunConfig) -> None:
    model = _load_kind(args.model, Classifier)
    bundle = _load_kind(args.bundle, CycleGANBundle)
    day_pool = _split(cfg, args.day_split)
    night_pool = _at_resolution(load_corpus(Path(cfg.data_root), domain="night"), cfg)
    sets = build_experiment_b_sets(day_pool, night_pool, bundle, DEFAULT_TEST_SETS, cfg.seed)
    report = run_experiment_b(model, sets)
    report.write(_out(cfg))
    for cell in report.rows():
        print(f"{cell.test_set},{cell.domain},{cell.n},{cell.accuracy:.4f}")


def cmd_count_params(args, cfg: RunConfig) -> None:
    spec = _arch(args.arch, cfg, desk=args.desk)
    print(f"{spec.name} {count_parameters(spec)}")


# -- parser ---------------------------------------------------------------

_CONFIG_FLAGS = (
    ("--seed", int),
    ("--resolution", str),
    ("--batch-size", int),
    ("--max-epochs", int),
    ("--patience", int),
    ("--learning-rate", float),
    ("--dropout-rate", float),
    ("--l2-rate", float),
    ("--lambda-cycle", float),
    ("--lambda-identity", float),
    ("--data-root", str),
    ("--out-dir", str),
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one-line, exit code 2
        raise CliError("config", EXIT_CONFIG, message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run.cfg file (key = value lines)")
    common.add_argument("-v", "--verbose", action="store_true")
    for flag, kind in _CONFIG_FLAGS:
        common.add_argument(flag, type=kind, default=None)

    parser = _Parser(prog="underpass", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    commands: dict[str, tuple[Callable, str]] = {
        "gen-data": (cmd_gen_data, "render the synthetic corpus into data_root"),
        "split": (cmd_split, "assign stratified train/val/test splits per domain"),
        "train": (cmd_train, "train one classifier"),
        "tune": (cmd_tune, "one-factor-at-a-time hyperparameter search"),
        "family": (cmd_family, "architecture x data-fraction grid (experiment_a.csv)"),
        "gan-train": (cmd_gan_train, "train the night/day CycleGAN"),
        "transform": (cmd_transform, "translate images with a trained bundle"),
        "eval-a": (cmd_eval_a, "accuracy, per-class report, confusion matrix"),
        "eval-b": (cmd_eval_b, "day/night/night2day grid on the three test sets"),
        "count-params": (cmd_count_params, "print an architecture's parameter count"),
    }
    subs = {}
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=fn)
        subs[name] = p
    subs["gen-data"].add_argument("--counts", help="day images per class: empty,pedestrian,dog_walker,bicyclist")
    subs["gen-data"].add_argument("--night-counts", default="0,0,0,0", help="night images per class")
    subs["split"].add_argument("--train", type=float, default=0.64)
    subs["split"].add_argument("--val", type=float, default=0.16)
    for name in ("train", "tune", "count-params"):
        subs[name].add_argument("--arch", required=True, help="Arch1 .. Arch11")
    subs["tune"].add_argument("--quick", action="store_true", help="every third grid value only")
    subs["count-params"].add_argument("--desk", action="store_true", help="count the width-reduced desk analog")
    subs["family"].add_argument("--archs", help="comma-separated subset, default all")
    subs["family"].add_argument("--fractions", default="0.25,0.5,0.75,1.0")
    subs["family"].add_argument("--seeds", type=int, default=1, help="number of seeds starting at seed")
    subs["family"].add_argument("--jobs", type=int, default=1, help="worker processes")
    subs["gan-train"].add_argument("--images", type=int, default=0, help="cap per domain (0 = all)")
    subs["gan-train"].add_argument("--day-split", default="train", help="day split to train on ('' = all)")
    subs["gan-train"].add_argument("--gen-filters", type=int, default=GANConfig.gen_filters, help="generator base width")
    subs["gan-train"].add_argument("--disc-filters", type=int, default=GANConfig.disc_filters, help="discriminator base width")
    subs["transform"].add_argument("--bundle", required=True)
    subs["transform"].add_argument("--direction", choices=("night2day", "day2night"), default="night2day")
    subs["eval-a"].add_argument("--model", required=True)
    subs["eval-a"].add_argument("--split", default="test")
    subs["eval-b"].add_argument("--model", required=True)
    subs["eval-b"].add_argument("--bundle", required=True)
    subs["eval-b"].add_argument("--day-split", default="test")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {flag[2:].replace("-", "_"): getattr(args, flag[2:].replace("-", "_")) for flag, _ in _CONFIG_FLAGS}
    if args.command == "count-params" and overrides["resolution"] is None and not args.desk:
        overrides["resolution"] = "224"
    return load(Path(args.config) if args.config else None, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s %(message)s")
        cfg = resolve_config(args)
        if args.command != "count-params":
            cfg.write(_out(cfg))
        args.func(args, cfg)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        err = _classify(exc)
        msg = " ".join(str(err).split())
        print(f"error kind={err.kind} code={err.code} msg={msg}", file=sys.stderr)
        return err.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
