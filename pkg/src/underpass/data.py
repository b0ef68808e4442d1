"""Labeled images, datasets, stratified splitting, downscaling, corpus IO."""

from __future__ import annotations

import csv
import enum
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

DOMAINS = ("day", "night", "night2day")
ALLOWED_FRACTIONS = (0.25, 0.5, 0.75, 1.0)
MIN_PER_CLASS = 5


class DataError(ValueError):
    pass


class ClassLabel(enum.IntEnum):
    EMPTY = 0
    PEDESTRIAN = 1
    DOG_WALKER = 2
    BICYCLIST = 3

    @property
    def slug(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str | int | ClassLabel) -> ClassLabel:
        if isinstance(text, (int, ClassLabel)):
            return cls(int(text))
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise DataError(f"unknown class {text!r}; expected one of {[c.slug for c in cls]}") from None


CLASS_NAMES = tuple(c.slug for c in ClassLabel)


@dataclass(frozen=True, eq=False)
class LabeledImage:
    pixels: np.ndarray  # H x W x 3, float32 in [0, 1]
    label: ClassLabel
    domain: str
    source_id: str
    seed: int | None = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or min(self.pixels.shape[:2]) < 1:
            raise DataError(f"{self.source_id}: pixels must be HxWx3 with H, W > 0, got {self.pixels.shape}")
        if self.domain not in DOMAINS:
            raise DataError(f"{self.source_id}: unknown domain {self.domain!r}")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


class Dataset(Sequence[LabeledImage]):
    """An immutable ordered collection of :class:`LabeledImage`."""

    def __init__(self, items: Iterable[LabeledImage] = ()):
        self._items = tuple(items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return Dataset(self._items[index])
        return self._items[index]

    def __iter__(self) -> Iterator[LabeledImage]:
        return iter(self._items)

    def __add__(self, other: Dataset) -> Dataset:
        return Dataset(self._items + tuple(other))

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, classes={self.class_counts()})"

    def class_counts(self) -> dict[ClassLabel, int]:
        counts = {c: 0 for c in ClassLabel}
        for item in self._items:
            counts[item.label] += 1
        return counts

    def by_class(self) -> dict[ClassLabel, list[LabeledImage]]:
        groups: dict[ClassLabel, list[LabeledImage]] = defaultdict(list)
        for item in self._items:
            groups[item.label].append(item)
        return dict(groups)

    def filter(self, *, label: ClassLabel | None = None, domain: str | None = None) -> Dataset:
        return Dataset(
            i for i in self._items if (label is None or i.label == label) and (domain is None or i.domain == domain)
        )

    def source_ids(self) -> list[str]:
        return [i.source_id for i in self._items]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked pixels (N, H, W, 3) float32 and labels (N,) int64."""
        if not self._items:
            raise DataError("empty dataset")
        shapes = {i.pixels.shape for i in self._items}
        if len(shapes) != 1:
            raise DataError(f"images have mixed shapes {sorted(shapes)}")
        x = np.stack([i.pixels for i in self._items]).astype(np.float32, copy=False)
        y = np.array([int(i.label) for i in self._items], dtype=np.int64)
        return x, y


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.64
    val_fraction: float = 0.16
    test_fraction: float = 0.20
    seed: int = 0

    def __post_init__(self):
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9 or min(self.train_fraction, self.val_fraction, self.test_fraction) < 0:
            raise DataError(f"split fractions must be non-negative and sum to 1, got {total}")


def _class_rng(seed: int, label: ClassLabel, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, salt, int(label)]))


def _canonical(members: list[LabeledImage]) -> list[LabeledImage]:
    # sorting first makes selection independent of input order
    return sorted(members, key=lambda i: i.source_id)


def _floor(n: int, fraction: float) -> int:
    return int(math.floor(n * fraction + 1e-9))


def stratified_split(dataset: Dataset, split: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Per-class train/val/test partition; floors go to train and val, the
    remainder to test."""
    groups = dataset.by_class()
    for label in ClassLabel:
        n = len(groups.get(label, ()))
        if 0 < n < MIN_PER_CLASS:
            raise DataError(f"class {label.slug} has {n} images; stratified split needs at least {MIN_PER_CLASS}")
    train: list[LabeledImage] = []
    val: list[LabeledImage] = []
    test: list[LabeledImage] = []
    for label in ClassLabel:
        members = _canonical(groups.get(label, []))
        if not members:
            continue
        order = _class_rng(split.seed, label, 1).permutation(len(members))
        shuffled = [members[k] for k in order]
        n_train = _floor(len(members), split.train_fraction)
        n_val = _floor(len(members), split.val_fraction)
        train += shuffled[:n_train]
        val += shuffled[n_train : n_train + n_val]
        test += shuffled[n_train + n_val :]
    rng = np.random.default_rng(np.random.SeedSequence([split.seed & 0xFFFFFFFF, 2]))
    return tuple(Dataset(part[k] for k in rng.permutation(len(part))) for part in (train, val, test))  # type: ignore[return-value]


def subsample_stratified(dataset: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Keep round-half-up(fraction * n) images of every class."""
    if fraction not in ALLOWED_FRACTIONS:
        raise DataError(f"fraction must be one of {ALLOWED_FRACTIONS}, got {fraction}")
    if fraction == 1.0:
        return dataset
    kept: list[LabeledImage] = []
    for label, members in sorted(dataset.by_class().items()):
        members = _canonical(members)
        k = int(math.floor(fraction * len(members) + 0.5))
        order = _class_rng(seed, label, 3).permutation(len(members))
        kept += [members[i] for i in sorted(order[:k])]
    return Dataset(kept)


# -- resampling -----------------------------------------------------------


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages the input interval [i*s, (i+1)*s) with s = n_in / n_out."""
    scale = n_in / n_out
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                mat[i, j] = overlap / scale
    return mat


def downscale_array(pixels: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    h, w = pixels.shape[:2]
    th, tw = target
    if th > h or tw > w or th < 1 or tw < 1:
        raise DataError(f"downscale target {th}x{tw} must be within source size {h}x{w}")
    if (th, tw) == (h, w):
        return pixels.astype(np.float32, copy=True)
    rows = _area_matrix(h, th)
    cols = _area_matrix(w, tw)
    out = np.einsum("ih,hwc,jw->ijc", rows, pixels.astype(np.float64), cols, optimize=True)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def downscale(image: LabeledImage, target: tuple[int, int]) -> LabeledImage:
    """Area-averaging resample to ``target`` (H, W); upscaling is rejected."""
    return replace(image, pixels=downscale_array(image.pixels, target))


# -- on-disk corpus -------------------------------------------------------

MANIFEST_FIELDS = ("source_id", "class", "domain", "split")


def image_path(root: Path, item: LabeledImage) -> Path:
    return Path(root) / item.domain / item.label.slug / f"{item.source_id}.png"


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)


def save_png(pixels: np.ndarray, path: Path) -> None:
    from PIL import Image

    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def write_corpus(dataset: Dataset, root: Path, splits: dict[str, str] | None = None) -> Path:
    """Write PNGs under ``root/<domain>/<class>/`` plus ``manifest.csv``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for item in dataset:
        save_png(item.pixels, image_path(root, item))
    return write_manifest(root, [(i.source_id, i.label.slug, i.domain, (splits or {}).get(i.source_id, "")) for i in dataset])


def write_manifest(root: Path, rows: Iterable[tuple[str, str, str, str]]) -> Path:
    path = Path(root) / "manifest.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        writer.writerows(rows)
    return path


def read_manifest(root: Path) -> list[dict[str, str]]:
    path = Path(root) / "manifest.csv"
    if not path.exists():
        raise DataError(f"no manifest at {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise DataError(f"{path}: expected columns {','.join(MANIFEST_FIELDS)}")
        return list(reader)


def load_corpus(root: Path, *, domain: str | None = None, split: str | None = None) -> Dataset:
    root = Path(root)
    items = []
    for row in read_manifest(root):
        if domain is not None and row["domain"] != domain:
            continue
        if split is not None and row["split"] != split:
            continue
        label = ClassLabel.parse(row["class"])
        path = root / row["domain"] / label.slug / f"{row['source_id']}.png"
        if not path.exists():
            raise DataError(f"manifest entry {row['source_id']} has no image at {path}")
        items.append(LabeledImage(load_png(path), label, row["domain"], row["source_id"], _seed_from_id(row["source_id"])))
    return Dataset(items)


def _seed_from_id(source_id: str) -> int | None:
    tail = source_id.rsplit("-", 1)[-1]
    return int(tail) if tail.isdigit() else None
