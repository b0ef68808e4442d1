"""CycleGAN for unpaired night <-> day translation.

Domain A is night and domain B is day, so ``gen_ab`` is the night-to-day
generator. Networks operate on images scaled to [-1, 1]; :func:`transform`
handles the mapping to and from [0, 1] pixels.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import DataError, Dataset, LabeledImage
from .engine import (
    Adam,
    Conv2d,
    InstanceNorm,
    ReLU,
    ResidualBlock,
    Sequential,
    ShapeError,
    Tanh,
    Tensor,
    TransposeConv2d,
    concat,
    l1,
    mse,
    no_grad,
)

log = logging.getLogger(__name__)

DIRECTIONS = ("night2day", "day2night")
HISTORY_FIELDS = (
    "epoch",
    "gen_adv_ab",
    "gen_adv_ba",
    "cycle_forward",
    "cycle_backward",
    "identity_a",
    "identity_b",
    "gen_total",
    "disc_a",
    "disc_b",
)


class NonFiniteLossError(RuntimeError):
    def __init__(self, component: str, epoch: int):
        super().__init__(f"non-finite {component} loss at epoch {epoch}")
        self.component = component
        self.epoch = epoch


class Network(Protocol):
    params: list[Tensor]

    def __call__(self, x: Tensor, mode: str = "eval", rng=None) -> Tensor: ...


@dataclass(frozen=True)
class GANConfig:
    resolution: tuple[int, int, int] = (64, 64, 3)
    gen_filters: int = 16
    disc_filters: int = 32
    residual_blocks: int = 6
    lambda_cycle: float = 10.0
    lambda_identity: float = 5.0
    learning_rate: float = 2e-4
    beta1: float = 0.5
    batch_size: int = 1
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        if not (math.isfinite(self.lambda_cycle) and math.isfinite(self.lambda_identity)):
            raise ValueError("loss weights must be finite")
        if self.lambda_cycle < 0 or self.lambda_identity < 0:
            raise ValueError("loss weights must be non-negative")
        h, w, _ = self.resolution
        if h % 4 or w % 4:
            raise ValueError(f"resolution {h}x{w} must be divisible by 4")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "resolution":
                value = "x".join(str(v) for v in value)
            lines.append(f"{f.name} {value!r}" if isinstance(value, float) else f"{f.name} {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> GANConfig:
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.strip().partition(" ")
            if key not in types:
                raise ValueError(f"unknown bundle field {key!r}")
            if key == "resolution":
                kwargs[key] = tuple(int(v) for v in value.split("x"))
            elif types[key] in ("int", int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


def generator_layers(cfg: GANConfig) -> list:
    """Encoder (3 convs), residual trunk, decoder (2 transpose convs + conv).

    Widths are f, 2f, 2f down and 2f, f up. Capping the trunk at 2f keeps
    the quarter-resolution blocks cheap while the full-resolution layers stay
    wide enough to carry small subjects through.
    """
    f = cfg.gen_filters
    layers = [
        Conv2d(f), InstanceNorm(), ReLU(),
        Conv2d(2 * f, stride=2), InstanceNorm(), ReLU(),
        Conv2d(2 * f, stride=2), InstanceNorm(), ReLU(),
    ]  # fmt: skip
    layers += [ResidualBlock(2 * f) for _ in range(cfg.residual_blocks)]
    layers += [
        TransposeConv2d(2 * f), InstanceNorm(), ReLU(),
        TransposeConv2d(f), InstanceNorm(), ReLU(),
        Conv2d(3), Tanh(),
    ]  # fmt: skip
    return layers


def discriminator_layers(cfg: GANConfig) -> list:
    """Five convs; the last emits one real/fake score per patch."""
    f = cfg.disc_filters
    return [
        Conv2d(f, stride=2), ReLU(),
        Conv2d(2 * f, stride=2), InstanceNorm(), ReLU(),
        Conv2d(4 * f, stride=2), InstanceNorm(), ReLU(),
        Conv2d(8 * f), InstanceNorm(), ReLU(),
        Conv2d(1),
    ]  # fmt: skip


class IdentityNetwork:
    """Returns its input unchanged; stands in for a generator in tests."""

    params: list[Tensor] = []
    decay_flags: list[bool] = []

    def __call__(self, x: Tensor, mode: str = "eval", rng=None) -> Tensor:
        return x


class ConstantNetwork:
    """Emits a constant patch map regardless of input."""

    params: list[Tensor] = []
    decay_flags: list[bool] = []

    def __init__(self, value: float, patch_shape: tuple[int, int, int] = (8, 8, 1)):
        self.value = value
        self.patch_shape = patch_shape

    def __call__(self, x: Tensor, mode: str = "eval", rng=None) -> Tensor:
        return Tensor(np.full((x.shape[0], *self.patch_shape), self.value, dtype=x.dtype))


@dataclass
class CycleGANBundle:
    config: GANConfig
    gen_ab: Network
    gen_ba: Network
    disc_a: Network
    disc_b: Network

    @classmethod
    def create(cls, config: GANConfig = GANConfig(), dtype=np.float32) -> CycleGANBundle:
        r = config.resolution
        s = config.seed
        return cls(
            config,
            Sequential(generator_layers(config), r, seed=s * 4 + 0, dtype=dtype),
            Sequential(generator_layers(config), r, seed=s * 4 + 1, dtype=dtype),
            Sequential(discriminator_layers(config), r, seed=s * 4 + 2, dtype=dtype),
            Sequential(discriminator_layers(config), r, seed=s * 4 + 3, dtype=dtype),
        )

    def networks(self) -> list[tuple[str, Network]]:
        return [("gen_ab", self.gen_ab), ("gen_ba", self.gen_ba), ("disc_a", self.disc_a), ("disc_b", self.disc_b)]

    def to_text(self) -> str:
        return self.config.to_text()


# -- losses ---------------------------------------------------------------


def _targets(like: Tensor, value: float) -> Tensor:
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


def adversarial_losses(disc: Network, real: Tensor, fake: Tensor) -> tuple[Tensor, Tensor]:
    """Least-squares GAN losses: (discriminator loss, generator loss)."""
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("adversarial loss on an empty batch")
    if real.shape[1:] != fake.shape[1:]:
        raise ShapeError(f"real batch {real.shape} and fake batch {fake.shape} differ in resolution")
    # one pass over real and fake together; every layer acts per sample
    scores = disc(concat([real, fake]))
    d_real, d_fake = scores[: real.shape[0]], scores[real.shape[0] :]
    disc_loss = mse(d_real, _targets(d_real, 1.0)) + mse(d_fake, _targets(d_fake, 0.0))
    gen_loss = mse(d_fake, _targets(d_fake, 1.0))
    return disc_loss, gen_loss


def cycle_and_identity_losses(bundle: CycleGANBundle, batch_a: Tensor, batch_b: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(forward cycle, backward cycle, identity A, identity B), all L1."""
    forward = l1(bundle.gen_ba(bundle.gen_ab(batch_a)), batch_a)
    backward = l1(bundle.gen_ab(bundle.gen_ba(batch_b)), batch_b)
    identity_a = l1(bundle.gen_ba(batch_a), batch_a)
    identity_b = l1(bundle.gen_ab(batch_b), batch_b)
    return forward, backward, identity_a, identity_b


@dataclass
class GeneratorLosses:
    gen_adv_ab: Tensor
    gen_adv_ba: Tensor
    cycle_forward: Tensor
    cycle_backward: Tensor
    identity_a: Tensor
    identity_b: Tensor
    total: Tensor
    fake_a: Tensor
    fake_b: Tensor

    def components(self) -> dict[str, float]:
        return {
            "gen_adv_ab": float(self.gen_adv_ab.data),
            "gen_adv_ba": float(self.gen_adv_ba.data),
            "cycle_forward": float(self.cycle_forward.data),
            "cycle_backward": float(self.cycle_backward.data),
            "identity_a": float(self.identity_a.data),
            "identity_b": float(self.identity_b.data),
            "gen_total": float(self.total.data),
        }


def generator_objective(bundle: CycleGANBundle, batch_a: Tensor, batch_b: Tensor) -> GeneratorLosses:
    """Adversarial terms for both directions plus weighted cycle and identity terms."""
    cfg = bundle.config
    n_a, n_b = batch_a.shape[0], batch_b.shape[0]
    # translation, identity and the forward cycle share generator calls
    out_ab = bundle.gen_ab(concat([batch_a, batch_b]))
    fake_b, same_b = out_ab[:n_a], out_ab[n_a:]
    out_ba = bundle.gen_ba(concat([batch_b, batch_a, fake_b]))
    fake_a, same_a, rec_a = out_ba[:n_b], out_ba[n_b : n_b + n_a], out_ba[n_b + n_a :]
    d_fake_b = bundle.disc_b(fake_b)
    d_fake_a = bundle.disc_a(fake_a)
    adv_ab = mse(d_fake_b, _targets(d_fake_b, 1.0))
    adv_ba = mse(d_fake_a, _targets(d_fake_a, 1.0))
    forward = l1(rec_a, batch_a)
    backward = l1(bundle.gen_ab(fake_a), batch_b)
    identity_a = l1(same_a, batch_a)
    identity_b = l1(same_b, batch_b)
    total = adv_ab + adv_ba + (forward + backward) * cfg.lambda_cycle + (identity_a + identity_b) * cfg.lambda_identity
    return GeneratorLosses(adv_ab, adv_ba, forward, backward, identity_a, identity_b, total, fake_a, fake_b)


# -- training -------------------------------------------------------------


def to_gan(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float32) * np.float32(2.0) - np.float32(1.0)


def from_gan(values: np.ndarray) -> np.ndarray:
    return np.clip((values + np.float32(1.0)) * np.float32(0.5), 0.0, 1.0).astype(np.float32)


@dataclass
class GANHistory:
    rows: list[dict[str, float]] = field(default_factory=list)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_FIELDS)
            for r in self.rows:
                w.writerow([int(r["epoch"])] + [repr(float(r[k])) for k in HISTORY_FIELDS[1:]])


def _check_finite(values: dict[str, float], epoch: int) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, epoch)


def _params(*nets: Network) -> tuple[list[Tensor], list[bool]]:
    params: list[Tensor] = []
    flags: list[bool] = []
    for net in nets:
        params += list(net.params)
        flags += list(getattr(net, "decay_flags", [True] * len(net.params)))
    return params, flags


def _set_trainable(net: Network, flag: bool) -> None:
    for p in net.params:
        p.requires_grad = flag


def train_cyclegan(
    bundle: CycleGANBundle, day_set: Dataset, night_set: Dataset, config: GANConfig | None = None
) -> tuple[CycleGANBundle, GANHistory]:
    """Alternate generator and discriminator updates over unpaired batches.

    Each epoch walks ``max(len(night), len(day))`` steps; both sets are
    reshuffled independently every epoch so no pairing is implied.
    """
    cfg = config or bundle.config
    if config is not None:
        bundle.config = cfg
    if len(day_set) == 0 or len(night_set) == 0:
        raise DataError("CycleGAN training needs non-empty day and night sets")
    x_a, _ = night_set.arrays()
    x_b, _ = day_set.arrays()
    for name, x in (("night", x_a), ("day", x_b)):
        if x.shape[1:] != cfg.resolution:
            raise DataError(f"{name} images are {x.shape[1:]}, bundle expects {cfg.resolution}")
    x_a, x_b = to_gan(x_a), to_gan(x_b)
    g_params, g_flags = _params(bundle.gen_ab, bundle.gen_ba)
    d_params, d_flags = _params(bundle.disc_a, bundle.disc_b)
    g_opt = Adam(g_params, lr=cfg.learning_rate, beta1=cfg.beta1, decay=g_flags) if g_params else None
    d_opt = Adam(d_params, lr=cfg.learning_rate, beta1=cfg.beta1, decay=d_flags) if d_params else None
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, 11]))
    history = GANHistory()
    steps = max(len(x_a), len(x_b))
    bs = cfg.batch_size
    for epoch in range(1, cfg.epochs + 1):
        order_a = _cycled(rng.permutation(len(x_a)), steps)
        order_b = _cycled(rng.permutation(len(x_b)), steps)
        sums = {k: 0.0 for k in HISTORY_FIELDS[1:]}
        n_batches = 0
        for start in range(0, steps, bs):
            a = Tensor(x_a[order_a[start : start + bs]])
            b = Tensor(x_b[order_b[start : start + bs]])
            values = _train_step(bundle, a, b, g_opt, d_opt)
            _check_finite(values, epoch)
            for k, v in values.items():
                sums[k] += v
            n_batches += 1
        row = {"epoch": float(epoch), **{k: v / n_batches for k, v in sums.items()}}
        history.rows.append(row)
        log.info("cyclegan epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items()})
    return bundle, history


def _cycled(order: np.ndarray, steps: int) -> np.ndarray:
    reps = -(-steps // len(order))
    return np.tile(order, reps)[:steps]


def _train_step(bundle: CycleGANBundle, a: Tensor, b: Tensor, g_opt: Adam | None, d_opt: Adam | None) -> dict[str, float]:
    for disc in (bundle.disc_a, bundle.disc_b):
        _set_trainable(disc, False)
    losses = generator_objective(bundle, a, b)
    values = losses.components()
    if g_opt is not None and losses.total.requires_grad:
        g_opt.zero_grad()
        losses.total.backward()
        g_opt.step()
    for disc in (bundle.disc_a, bundle.disc_b):
        _set_trainable(disc, True)
    fake_a, fake_b = losses.fake_a.detach(), losses.fake_b.detach()
    disc_a, _ = adversarial_losses(bundle.disc_a, a, fake_a)
    disc_b, _ = adversarial_losses(bundle.disc_b, b, fake_b)
    values["disc_a"] = float(disc_a.data)
    values["disc_b"] = float(disc_b.data)
    if d_opt is not None:
        d_opt.zero_grad()
        (disc_a + disc_b).backward()
        d_opt.step()
    return values


# -- inference ------------------------------------------------------------


def transform_pixels(bundle: CycleGANBundle, pixels: np.ndarray, direction: str = "night2day") -> np.ndarray:
    """Translate a batch (N, H, W, 3) or a single image of [0, 1] pixels."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    single = pixels.ndim == 3
    batch = pixels[None] if single else pixels
    if tuple(batch.shape[1:]) != bundle.config.resolution:
        raise ShapeError(f"image shape {tuple(batch.shape[1:])} does not match bundle resolution {bundle.config.resolution}")
    gen = bundle.gen_ab if direction == "night2day" else bundle.gen_ba
    out = []
    with no_grad():
        for i in range(len(batch)):
            out.append(from_gan(gen(Tensor(to_gan(batch[i : i + 1])), "eval").data))
    result = np.concatenate(out) if out else np.zeros_like(batch)
    return result[0] if single else result


def transform(bundle: CycleGANBundle, image: LabeledImage, direction: str = "night2day") -> LabeledImage:
    """Pure function of (bundle, image); keeps label and source id."""
    pixels = transform_pixels(bundle, image.pixels, direction)
    return replace(image, pixels=pixels, domain="night2day" if direction == "night2day" else "night")


def transform_dataset(bundle: CycleGANBundle, dataset: Dataset, direction: str = "night2day") -> Dataset:
    return Dataset(transform(bundle, item, direction) for item in dataset)


def mean_l1(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    return float(np.mean([np.abs(x - y).mean() for x, y in zip(a, b)]))
