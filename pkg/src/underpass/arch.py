"""The Arch1..Arch11 family: specs, exact parameter counts, halving steps.

Arch11 is VGG16. Each smaller member is derived from the next larger one by
:func:`reduce_step`, which follows the conv-layer counts and dense widths of
the published family table and fits VGG-style doubling filter widths so the
parameter count lands on the next target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator

from .engine.layers import Conv2d, Dense, Dropout, LayerKind, MaxPool2x2, ReLU

DEFAULT_RESOLUTION = (224, 224, 3)
DESK_RESOLUTION = (64, 64, 3)
# forward multiply-accumulates per image allowed for a desk-scale analog
DESK_MAC_BUDGET = 16_000_000

# published family table: target count, conv layers, dense hidden widths
TARGET_COUNTS = (100_000, 200_000, 400_000, 800_000, 1_500_000, 3_000_000, 6_000_000,
                 13_000_000, 35_000_000, 67_000_000, 134_000_000)  # fmt: skip
CONV_LAYERS = (2, 3, 3, 4, 4, 4, 4, 8, 10, 11, 13)
DENSE_HIDDEN = ((8,), (16,), (32,), (128,), (128,), (256,), (256,), (512,), (1024,), (2048, 2048), (4096, 4096))
RATIO_BAND = (0.36, 0.59)
MOVES = ("remove_conv", "reduce_filters", "shrink_dense")

VGG16_BLOCKS = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))


class ArchitectureError(ValueError):
    pass


class ReductionError(ArchitectureError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    """A VGG-style classifier: conv blocks each closed by a 2x2 max-pool,
    then dense hidden layers (ReLU + dropout) and a linear output layer."""

    name: str
    conv_blocks: tuple[tuple[int, int], ...]
    dense_hidden: tuple[int, ...]
    num_classes: int = 4
    input_resolution: tuple[int, int, int] = DEFAULT_RESOLUTION
    dropout_rate: float = 0.5
    l2_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks", tuple((int(f), int(n)) for f, n in self.conv_blocks))
        object.__setattr__(self, "dense_hidden", tuple(int(w) for w in self.dense_hidden))
        object.__setattr__(self, "input_resolution", tuple(int(v) for v in self.input_resolution))
        for f, n in self.conv_blocks:
            if f < 1 or n < 1:
                raise ArchitectureError(f"{self.name}: conv block ({f}, {n}) needs filters >= 1 and layers >= 1")
        if any(w < 1 for w in self.dense_hidden):
            raise ArchitectureError(f"{self.name}: dense widths must be >= 1, got {self.dense_hidden}")
        if self.num_classes < 1:
            raise ArchitectureError(f"{self.name}: num_classes must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ArchitectureError(f"{self.name}: dropout rate {self.dropout_rate} outside [0, 1)")
        if self.l2_rate < 0:
            raise ArchitectureError(f"{self.name}: negative l2 rate")

    @property
    def conv_layer_count(self) -> int:
        return sum(n for _, n in self.conv_blocks)

    def layers(self) -> list[LayerKind]:
        out: list[LayerKind] = []
        for filters, count in self.conv_blocks:
            for _ in range(count):
                out += [Conv2d(filters), ReLU()]
            out.append(MaxPool2x2())
        for width in self.dense_hidden:
            out += [Dense(width), ReLU(), Dropout(self.dropout_rate)]
        out.append(Dense(self.num_classes))
        return out

    def with_resolution(self, resolution: tuple[int, int, int]) -> ArchitectureSpec:
        return replace(self, input_resolution=tuple(resolution))

    def to_text(self) -> str:
        h, w, c = self.input_resolution
        lines = [
            f"name {self.name}",
            f"input {h}x{w}x{c}",
            f"classes {self.num_classes}",
            f"dropout {self.dropout_rate!r}",
            f"l2 {self.l2_rate!r}",
        ]
        for filters, count in self.conv_blocks:
            lines += [f"conv {filters}"] * count
            lines.append("pool")
        lines += [f"dense {width}" for width in self.dense_hidden]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> ArchitectureSpec:
        fields: dict = {}
        blocks: list[tuple[int, int]] = []
        dense: list[int] = []
        pending: list[int] = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(" ")
            value = value.strip()
            try:
                if key == "name":
                    fields["name"] = value
                elif key == "input":
                    fields["input_resolution"] = tuple(int(v) for v in value.split("x"))
                elif key == "classes":
                    fields["num_classes"] = int(value)
                elif key == "dropout":
                    fields["dropout_rate"] = float(value)
                elif key == "l2":
                    fields["l2_rate"] = float(value)
                elif key == "conv":
                    if dense:
                        raise ArchitectureError("conv layer after dense layers")
                    pending.append(int(value))
                elif key == "pool":
                    if not pending or len(set(pending)) != 1:
                        raise ArchitectureError("pool must close a block of equal-width conv layers")
                    blocks.append((pending[0], len(pending)))
                    pending = []
                elif key == "dense":
                    dense.append(int(value))
                else:
                    raise ArchitectureError(f"unknown key {key!r}")
            except (ArchitectureError, ValueError) as exc:
                raise ArchitectureError(f"architecture text line {lineno}: {exc}") from None
        if pending:
            raise ArchitectureError("conv block not closed by a pool line")
        if "name" not in fields:
            raise ArchitectureError("architecture text has no name line")
        return cls(conv_blocks=tuple(blocks), dense_hidden=tuple(dense), **fields)


def _feature_shape(spec: ArchitectureSpec) -> tuple[int, int, int]:
    h, w, c = spec.input_resolution
    for filters, _ in spec.conv_blocks:
        h, w, c = h // 2, w // 2, filters
        if h < 1 or w < 1:
            raise ArchitectureError(f"{spec.name}: pooling underflows input {spec.input_resolution}")
    return h, w, c


def count_parameters(spec: ArchitectureSpec) -> int:
    """Exact number of trainable parameters, output layer included."""
    total = 0
    c_in = spec.input_resolution[2]
    for filters, count in spec.conv_blocks:
        for _ in range(count):
            total += 9 * c_in * filters + filters
            c_in = filters
    h, w, c = _feature_shape(spec)
    fan_in = h * w * c
    for width in (*spec.dense_hidden, spec.num_classes):
        total += (fan_in + 1) * width
        fan_in = width
    return total


def count_macs(spec: ArchitectureSpec) -> int:
    """Forward multiply-accumulates per image (conv and dense layers)."""
    h, w, c_in = spec.input_resolution
    macs = 0
    for filters, count in spec.conv_blocks:
        for _ in range(count):
            macs += h * w * 9 * c_in * filters
            c_in = filters
        h, w = h // 2, w // 2
    fan_in = h * w * c_in
    for width in (*spec.dense_hidden, spec.num_classes):
        macs += fan_in * width
        fan_in = width
    return macs


def vgg16(num_classes: int = 4, resolution=DEFAULT_RESOLUTION) -> ArchitectureSpec:
    return ArchitectureSpec("Arch11", VGG16_BLOCKS, (4096, 4096), num_classes, tuple(resolution))


# -- reduction ------------------------------------------------------------


@dataclass
class ReductionCursor:
    """Rotation state for generic (off-table) reductions.

    ``position`` selects the move tried first; ``applied`` logs the moves of
    every step taken through this cursor.
    """

    position: int = 0
    applied: list[tuple[str, ...]] = field(default_factory=list)

    def rotation(self) -> Iterator[str]:
        for k in range(len(MOVES)):
            yield MOVES[(self.position + k) % len(MOVES)]

    def advance(self, moves: tuple[str, ...]) -> None:
        self.applied.append(moves)
        self.position = (MOVES.index(moves[-1]) + 1) % len(MOVES)


def block_layout(conv_layers: int) -> list[int]:
    """Split conv layers over at most five blocks, later blocks deeper."""
    blocks = min(5, conv_layers)
    base, extra = divmod(conv_layers, blocks)
    return [base + (1 if b >= blocks - extra else 0) for b in range(blocks)]


def table_row(spec: ArchitectureSpec) -> int | None:
    """Family index (0-based) whose structure ``spec`` follows, if any."""
    rows = [
        i for i in range(len(TARGET_COUNTS))
        if CONV_LAYERS[i] == spec.conv_layer_count and DENSE_HIDDEN[i] == spec.dense_hidden
    ]  # fmt: skip
    if not rows:
        return None
    if spec.name.startswith("Arch") and spec.name[4:].isdigit() and int(spec.name[4:]) - 1 in rows:
        return int(spec.name[4:]) - 1
    at_224 = count_parameters(spec.with_resolution(DEFAULT_RESOLUTION))
    return min(rows, key=lambda i: abs(math.log(at_224 / TARGET_COUNTS[i])))


def _doubling(f0: int, cap: int, layout: list[int]) -> tuple[tuple[int, int], ...]:
    return tuple((min(f0 * 2**b, cap), n) for b, n in enumerate(layout))


def _in_band(ratio: float) -> bool:
    return RATIO_BAND[0] <= ratio <= RATIO_BAND[1]


def reduce_step(spec: ArchitectureSpec, cursor: ReductionCursor | None = None) -> ArchitectureSpec:
    """Derive a spec with roughly half the parameters of ``spec``.

    Specs on the family table step to the previous row's conv-layer count and
    dense widths, with the first-block width and the width cap re-fitted
    (never widened) so the count ratio matches the table. Other specs get the
    first move of the cursor's rotation that lands in the ratio band.
    """
    cursor = cursor if cursor is not None else ReductionCursor()
    before = count_parameters(spec)
    row = table_row(spec)
    if row is not None and row > 0:
        new, moves = _table_step(spec, row, before)
    else:
        new, moves = _generic_step(spec, cursor, before)
    cursor.advance(moves)
    return new


def _table_step(spec: ArchitectureSpec, row: int, before: int) -> tuple[ArchitectureSpec, tuple[str, ...]]:
    target = before * TARGET_COUNTS[row - 1] / TARGET_COUNTS[row]
    layout = block_layout(CONV_LAYERS[row - 1])
    dense = DENSE_HIDDEN[row - 1]
    f0_max = spec.conv_blocks[0][0]
    cap_max = max(f for f, _ in spec.conv_blocks)
    best: tuple[float, ArchitectureSpec] | None = None
    for f0 in range(1, f0_max + 1):
        cap = f0
        while cap <= cap_max:
            cand = replace(spec, name=f"Arch{row}", conv_blocks=_doubling(f0, cap, layout), dense_hidden=dense)
            try:
                count = count_parameters(cand)
            except ArchitectureError:
                break
            err = abs(math.log(count / target))
            if _in_band(count / before) and (best is None or err < best[0] - 1e-12):
                best = (err, cand)
            cap *= 2
    if best is None:
        raise ReductionError(f"{spec.name}: no filter fit for Arch{row} structure reaches ratio band {RATIO_BAND}")
    new = best[1]
    moves = []
    if new.conv_layer_count != spec.conv_layer_count:
        moves.append("remove_conv")
    if [f for f, _ in new.conv_blocks] != [f for f, _ in spec.conv_blocks][: len(new.conv_blocks)]:
        moves.append("reduce_filters")
    if new.dense_hidden != spec.dense_hidden:
        moves.append("shrink_dense")
    return new, tuple(moves or ["reduce_filters"])


def _generic_step(spec, cursor, before) -> tuple[ArchitectureSpec, tuple[str, ...]]:
    diagnostics = []
    for move in cursor.rotation():
        cands = list(_move_candidates(spec, move))
        scored = []
        for cand in cands:
            try:
                scored.append((count_parameters(cand) / before, cand))
            except ArchitectureError:
                continue
        inside = [(abs(math.log(r / 0.5)), i, c) for i, (r, c) in enumerate(scored) if _in_band(r)]
        if inside:
            return min(inside)[2], (move,)
        closest = min((r for r, _ in scored), key=lambda r: abs(r - 0.5), default=None)
        diagnostics.append(f"{move}: best ratio {closest if closest is None else round(closest, 3)}")
    raise ReductionError(f"{spec.name}: no move reaches ratio band {RATIO_BAND} ({'; '.join(diagnostics)})")


def _move_candidates(spec: ArchitectureSpec, move: str) -> Iterator[ArchitectureSpec]:
    name = f"{spec.name}-r"
    if move == "remove_conv":
        blocks = [list(b) for b in spec.conv_blocks]
        while sum(n for _, n in blocks) > 1:
            deepest = max(range(len(blocks)), key=lambda i: (blocks[i][1], i))
            blocks[deepest][1] -= 1
            blocks = [b for b in blocks if b[1] > 0]
            yield replace(spec, name=name, conv_blocks=tuple(map(tuple, blocks)))
    elif move == "reduce_filters":
        for pct in range(95, 0, -1):
            scale = pct / 100
            yield replace(
                spec,
                name=name,
                conv_blocks=tuple((max(1, round(f * scale)), n) for f, n in spec.conv_blocks),
            )
    elif move == "shrink_dense" and spec.dense_hidden:
        for div in (2, 4, 8, 16, 32):
            yield replace(spec, name=name, dense_hidden=tuple(max(1, w // div) for w in spec.dense_hidden))


# -- the family -----------------------------------------------------------


@dataclass(frozen=True)
class FamilyTable:
    specs: tuple[ArchitectureSpec, ...]
    targets: tuple[int, ...] = TARGET_COUNTS

    def __len__(self) -> int:
        return len(self.specs)

    def __getitem__(self, index: int) -> ArchitectureSpec:
        return self.specs[index]

    def __iter__(self) -> Iterator[ArchitectureSpec]:
        return iter(self.specs)

    def counts(self) -> list[int]:
        return [count_parameters(s) for s in self.specs]

    def by_name(self, name: str) -> ArchitectureSpec:
        for spec in self.specs:
            if spec.name == name:
                return spec
        raise KeyError(name)


def generate_family(num_classes: int = 4, resolution=DEFAULT_RESOLUTION) -> FamilyTable:
    """Arch1..Arch11, derived by ten halving steps from VGG16.

    Filters are fitted at 224x224x3 (where the published counts apply) and
    the resulting specs are then re-targeted to ``resolution``.
    """
    spec = vgg16(num_classes, DEFAULT_RESOLUTION)
    cursor = ReductionCursor()
    specs = [spec]
    for _ in range(len(TARGET_COUNTS) - 1):
        spec = reduce_step(spec, cursor)
        specs.append(spec)
    specs.reverse()
    return FamilyTable(tuple(s.with_resolution(tuple(resolution)) for s in specs))


def desk_analog(
    spec: ArchitectureSpec, resolution=DESK_RESOLUTION, mac_budget: int = DESK_MAC_BUDGET
) -> ArchitectureSpec:
    """Same topology at ``resolution``, widths divided by the smallest power
    of two that brings forward MACs per image under ``mac_budget``.

    Members already under budget keep their exact widths.
    """
    base = spec.with_resolution(tuple(resolution))
    divisor = 1
    cand = base
    while count_macs(cand) > mac_budget:
        divisor *= 2
        cand = replace(
            base,
            conv_blocks=tuple((max(1, math.ceil(f / divisor)), n) for f, n in base.conv_blocks),
            dense_hidden=tuple(max(1, math.ceil(w / divisor)) for w in base.dense_hidden),
        )
        if divisor > 4096:
            raise ArchitectureError(f"{spec.name}: cannot meet MAC budget {mac_budget}")
    if divisor == 1:
        return base
    return replace(cand, name=f"{spec.name}-div{divisor}")


def desk_family(num_classes: int = 4, resolution=DESK_RESOLUTION, mac_budget: int = DESK_MAC_BUDGET) -> list[ArchitectureSpec]:
    """The generated family with each member replaced by its desk analog."""
    return [desk_analog(s, resolution, mac_budget) for s in generate_family(num_classes)]
