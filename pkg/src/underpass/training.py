"""Classifier training with early stopping, the architecture x data-fraction
factorial, and one-factor-at-a-time hyperparameter search."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .arch import ArchitectureSpec, count_parameters
from .data import Dataset, SplitSpec, stratified_split, subsample_stratified
from .engine import Adam, Sequential, Tensor, cross_entropy, no_grad
from .engine.functional import softmax

log = logging.getLogger(__name__)

EVAL_BATCH = 64

# value lists of the published tuning grid; the dropout ellipses are expanded at 0.05 steps
LEARNING_RATES = (5e-5, 1e-4, 5e-4, 0.001, 0.005, 0.01)
DROPOUT_RATES = tuple(round(0.05 * k, 2) for k in range(14))
L2_RATES = (0.0, 1e-4, 5e-4, 0.001, 0.005, 0.01, 0.1)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 0.001
    dropout_rate: float = 0.5
    l2_rate: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.l2_rate < 0:
            raise ValueError("l2_rate must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 150
    patience: int = 10
    seed: int = 0
    input_resolution: tuple[int, int, int] = (64, 64, 3)

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainResult:
    model: Classifier
    history: list[EpochStats]
    best_epoch: int  # 1-based
    wall_seconds: float

    @property
    def best(self) -> EpochStats:
        return self.history[self.best_epoch - 1]


class EarlyStopping:
    """Track validation loss; signal a stop after ``patience`` epochs without
    strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


class Classifier:
    """An :class:`ArchitectureSpec` instantiated on the tensor engine.

    Inputs are pixel batches (N, H, W, 3) in [0, 1], centred before the
    first layer.
    """

    def __init__(self, spec: ArchitectureSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.seed = seed
        self.net = Sequential(spec.layers(), spec.input_resolution, seed=seed, dtype=dtype)

    def logits(self, pixels: np.ndarray, mode: str = "eval", rng=None) -> Tensor:
        x = Tensor(np.asarray(pixels, dtype=self.net.dtype) - self.net.dtype.type(0.5))
        return self.net(x, mode, rng)

    def predict_proba(self, pixels: np.ndarray, batch_size: int = EVAL_BATCH) -> np.ndarray:
        out = []
        with no_grad():
            for start in range(0, len(pixels), batch_size):
                out.append(softmax(self.logits(pixels[start : start + batch_size])).data)
        return np.concatenate(out) if out else np.zeros((0, self.spec.num_classes), self.net.dtype)

    def predict(self, pixels: np.ndarray) -> np.ndarray:
        # np.argmax returns the lowest index among ties
        return np.argmax(self.predict_proba(pixels), axis=1)

    def loss_and_accuracy(self, x: np.ndarray, y: np.ndarray, batch_size: int = EVAL_BATCH) -> tuple[float, float]:
        total_loss = 0.0
        correct = 0
        with no_grad():
            for start in range(0, len(x), batch_size):
                xb, yb = x[start : start + batch_size], y[start : start + batch_size]
                logits = self.logits(xb)
                total_loss += float(cross_entropy(logits, yb).data) * len(xb)
                correct += int((np.argmax(softmax(logits).data, axis=1) == yb).sum())
        return total_loss / len(x), correct / len(x)


def _check_resolution(name: str, dataset: Dataset, cfg: TrainConfig) -> None:
    if len(dataset) == 0:
        raise ValueError(f"{name} set is empty")
    h, w, _ = cfg.input_resolution
    bad = {i.pixels.shape for i in dataset if i.pixels.shape != (h, w, 3)}
    if bad:
        raise ValueError(f"{name} set has image shapes {sorted(bad)}; expected {(h, w, 3)}")


def train_classifier(
    spec: ArchitectureSpec,
    train_set: Dataset,
    val_set: Dataset,
    hp: HyperParams = HyperParams(),
    cfg: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Mini-batch training with restore-best early stopping on val loss."""
    _check_resolution("train", train_set, cfg)
    _check_resolution("val", val_set, cfg)
    spec = replace(spec, input_resolution=cfg.input_resolution, dropout_rate=hp.dropout_rate, l2_rate=hp.l2_rate)
    start = time.perf_counter()
    model = Classifier(spec, seed=cfg.seed)
    net = model.net
    opt = Adam(net.params, lr=hp.learning_rate, l2_rate=hp.l2_rate, decay=net.decay_flags)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, 7]))
    x_train, y_train = train_set.arrays()
    x_val, y_val = val_set.arrays()
    stopper = EarlyStopping(cfg.patience)
    history: list[EpochStats] = []
    best_state = net.state()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(x_train))
        loss_sum = 0.0
        correct = 0
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            logits = model.logits(x_train[idx], "train", rng)
            loss = cross_entropy(logits, y_train[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += value * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == y_train[idx]).sum())
        val_loss, val_acc = model.loss_and_accuracy(x_val, y_val)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(epoch, "validation loss")
        history.append(EpochStats(epoch, loss_sum / len(order), correct / len(order), val_loss, val_acc))
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_state = net.state()
        log.debug("%s epoch %d loss %.4f val_loss %.4f val_acc %.4f", spec.name, epoch, history[-1].train_loss, val_loss, val_acc)
        if stop:
            break
    net.load_state(best_state)
    return TrainResult(model, history, stopper.best_epoch, time.perf_counter() - start)


def write_history(result: TrainResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "is_best"])
        for h in result.history:
            w.writerow([h.epoch, repr(h.train_loss), repr(h.train_acc), repr(h.val_loss), repr(h.val_acc), int(h.epoch == result.best_epoch)])


# -- experiment A ---------------------------------------------------------


@dataclass(frozen=True)
class CellResult:
    arch_id: str
    params: int
    data_fraction: float
    seed: int
    val_accuracy: float
    epochs: int
    wall_seconds: float
    error: str | None = None


def _run_cell(args) -> CellResult:
    spec, dataset, fraction, seed, hp, cfg = args
    params = 0
    try:
        params = count_parameters(spec.with_resolution(cfg.input_resolution))
        subset = subsample_stratified(dataset, fraction, seed)
        train, val, _ = stratified_split(subset, SplitSpec(seed=seed))
        result = train_classifier(spec, train, val, hp, replace(cfg, seed=seed))
    except Exception as exc:  # a failed cell must not stop the grid
        log.warning("cell %s/%s/%s failed: %s", spec.name, fraction, seed, exc)
        return CellResult(spec.name, params, fraction, seed, math.nan, 0, math.nan, f"{type(exc).__name__}: {exc}")
    return CellResult(spec.name, params, fraction, seed, result.best.val_acc, len(result.history), result.wall_seconds)


def run_experiment_a(
    family: Sequence[ArchitectureSpec],
    dataset: Dataset,
    fractions: Sequence[float] = (0.25, 0.5, 0.75, 1.0),
    seeds: Sequence[int] = (0,),
    hp: HyperParams = HyperParams(),
    cfg: TrainConfig = TrainConfig(),
    jobs: int = 1,
) -> list[CellResult]:
    """Train every (architecture, fraction, seed) cell; rows come back in
    that nesting order regardless of ``jobs``."""
    smallest = min(fractions)
    # fail fast on a dataset that cannot be split at the smallest fraction
    stratified_split(subsample_stratified(dataset, smallest, seeds[0]), SplitSpec(seed=seeds[0]))
    cells = [(spec, dataset, f, s, hp, cfg) for spec in family for f in fractions for s in seeds]
    if jobs <= 1:
        return [_run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, cells))


def write_experiment_a(rows: Sequence[CellResult], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arch_id", "params", "data_fraction", "seed", "val_accuracy", "epochs", "wall_seconds"])
        for r in rows:
            w.writerow([r.arch_id, r.params, r.data_fraction, r.seed, repr(r.val_accuracy), r.epochs, f"{r.wall_seconds:.3f}"])


# -- one-factor-at-a-time search -----------------------------------------


@dataclass
class TuningResult:
    best: HyperParams
    best_accuracy: float
    trace: list[tuple[str, float, float, bool]] = field(default_factory=list)  # axis, value, val_acc, is_best

    @property
    def trainings(self) -> int:
        return len(self.trace)


AXES = ("learning_rate", "dropout_rate", "l2_rate")


def default_grid() -> dict[str, tuple[float, ...]]:
    return {"learning_rate": LEARNING_RATES, "dropout_rate": DROPOUT_RATES, "l2_rate": L2_RATES}


def grid_search_ofat(
    spec: ArchitectureSpec,
    datasets: tuple[Dataset, Dataset],
    grid: dict[str, Sequence[float]] | None = None,
    cfg: TrainConfig = TrainConfig(),
    start: HyperParams = HyperParams(),
) -> TuningResult:
    """Scan learning rate, then dropout, then L2, each with the other two
    held at their current best. Ties go to the smaller value."""
    grid = default_grid() if grid is None else grid
    train, val = datasets
    for axis in AXES:
        if not grid.get(axis):
            raise ValueError(f"grid axis {axis} is empty")
    current = {a: (getattr(start, a) if getattr(start, a) in grid[a] else grid[a][0]) for a in AXES}
    trace: list[tuple[str, float, float, bool]] = []
    best_acc = -1.0
    for axis in AXES:
        scores = []
        for value in grid[axis]:
            hp = HyperParams(**{**current, axis: value})
            acc = train_classifier(spec, train, val, hp, cfg).best.val_acc
            scores.append((value, acc))
        winner, best_acc = max(scores, key=lambda va: (va[1], -va[0]))
        current[axis] = winner
        trace += [(axis, v, a, v == winner) for v, a in scores]
    return TuningResult(HyperParams(**current), best_acc, trace)


def write_tuning_trace(result: TuningResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "value", "val_accuracy", "is_best"])
        for axis, value, acc, is_best in result.trace:
            w.writerow([axis, repr(value), repr(acc), int(is_best)])
