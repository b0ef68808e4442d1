"""Self-describing binary checkpoints for classifiers and CycleGAN bundles.

Layout (all integers little-endian)::

    header   b"EVL1" | u16 version | u8 kind | u8 reserved
             u32 spec_len | spec_text (utf-8)
             i64 seed | 32-byte sha256 config digest
             u32 record_count
    record   u16 name_len | name | u8 ndim | u32 dim * ndim
             u64 payload_len | payload (<f4) | u32 crc32(payload)
    trailer  u32 crc32(all preceding bytes)

See docs/checkpoint.md for the full description.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .arch import ArchitectureSpec
from .cyclegan import CycleGANBundle, GANConfig
from .engine import Sequential
from .training import Classifier

MAGIC = b"EVL1"
VERSION = 1
MAX_RANK = 8
KINDS = {"classifier": 0, "cyclegan": 1}
_KIND_NAMES = {v: k for k, v in KINDS.items()}
_BUNDLE_NETS = ("gen_ab", "gen_ba", "disc_a", "disc_b")

Checkpointable = Union[Classifier, CycleGANBundle]


class CheckpointError(Exception):
    """Base class for every load failure."""


class FormatError(CheckpointError):
    """Wrong magic bytes, unknown version, or unknown kind."""


class TruncatedError(CheckpointError):
    """The file ends before the declared content."""


class IntegrityError(CheckpointError):
    """A checksum or declared length does not match the bytes on disk."""


class SpecMismatchError(CheckpointError):
    """Stored parameters disagree with the network the stored description defines."""


@dataclass
class Record:
    name: str
    array: np.ndarray


@dataclass
class CheckpointContents:
    kind: str
    spec_text: str
    seed: int
    config_digest: bytes
    records: list[Record]


def config_digest(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


# -- encoding -------------------------------------------------------------


def encode(contents: CheckpointContents) -> bytes:
    spec = contents.spec_text.encode("utf-8")
    if len(contents.config_digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    parts = [
        MAGIC,
        struct.pack("<HBB", VERSION, KINDS[contents.kind], 0),
        struct.pack("<I", len(spec)),
        spec,
        struct.pack("<q", contents.seed),
        contents.config_digest,
        struct.pack("<I", len(contents.records)),
    ]
    for rec in contents.records:
        name = rec.name.encode("utf-8")
        payload = np.ascontiguousarray(rec.array, dtype="<f4").tobytes()
        parts += [
            struct.pack("<H", len(name)),
            name,
            struct.pack("<B", rec.array.ndim),
            struct.pack(f"<{rec.array.ndim}I", *rec.array.shape),
            struct.pack("<Q", len(payload)),
            payload,
            struct.pack("<I", zlib.crc32(payload)),
        ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file ends inside {what} at byte {self.pos} (need {n}, have {len(self.data) - self.pos})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> CheckpointContents:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"not a checkpoint: magic bytes {data[:4]!r}, expected {MAGIC!r}")
    version, kind_code, _ = r.unpack("<HBB", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if kind_code not in _KIND_NAMES:
        raise FormatError(f"unknown checkpoint kind {kind_code}")
    (spec_len,) = r.unpack("<I", "spec length")
    spec_text = r.take(spec_len, "spec text").decode("utf-8", errors="replace")
    (seed,) = r.unpack("<q", "seed")
    digest = r.take(32, "config digest")
    (count,) = r.unpack("<I", "record count")
    records = []
    for i in range(count):
        (name_len,) = r.unpack("<H", f"record {i} name length")
        name = r.take(name_len, f"record {i} name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B", f"record {name} rank")
        if ndim > MAX_RANK:
            raise IntegrityError(f"record {name}: rank {ndim} exceeds {MAX_RANK}")
        shape = r.unpack(f"<{ndim}I", f"record {name} shape")
        (payload_len,) = r.unpack("<Q", f"record {name} length")
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if payload_len != expected:
            raise IntegrityError(f"record {name}: payload length {payload_len} does not match shape {shape}")
        payload = r.take(payload_len, f"record {name} payload")
        (crc,) = r.unpack("<I", f"record {name} checksum")
        if zlib.crc32(payload) != crc:
            raise IntegrityError(f"record {name}: payload checksum mismatch")
        records.append(Record(name, np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)))
    body_end = r.pos
    (trailer,) = r.unpack("<I", "trailer")
    if r.pos != len(data):
        raise IntegrityError(f"{len(data) - r.pos} unexpected bytes after trailer")
    if zlib.crc32(data[:body_end]) != trailer:
        raise IntegrityError("header checksum mismatch")
    return CheckpointContents(_KIND_NAMES[kind_code], spec_text, seed, digest, records)


# -- model <-> contents ---------------------------------------------------


def _records(prefix: str, net) -> list[Record]:
    if not isinstance(net, Sequential):
        raise CheckpointError(f"{prefix or 'model'} is a {type(net).__name__}, only layer stacks can be saved")
    return [Record(f"{prefix}{name}", p.data) for name, p in net.named_parameters()]


def _digest(obj, spec_text: str, config_text: str) -> bytes:
    # a loaded object keeps the digest it was stored with so re-saving is byte-stable
    if config_text:
        return config_digest(config_text)
    return getattr(obj, "config_digest", None) or config_digest(spec_text)


def to_contents(obj: Checkpointable, config_text: str = "") -> CheckpointContents:
    if isinstance(obj, Classifier):
        spec_text = obj.spec.to_text()
        return CheckpointContents(
            "classifier", spec_text, int(obj.seed), _digest(obj, spec_text, config_text), _records("", obj.net)
        )
    if isinstance(obj, CycleGANBundle):
        spec_text = obj.to_text()
        records = []
        for net_name in _BUNDLE_NETS:
            records += _records(f"{net_name}/", getattr(obj, net_name))
        return CheckpointContents("cyclegan", spec_text, int(obj.config.seed), _digest(obj, spec_text, config_text), records)
    raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def _fill(net: Sequential, records: list[Record], prefix: str) -> None:
    expected = net.named_parameters()
    if len(records) != len(expected):
        raise SpecMismatchError(f"{prefix or 'model'}: spec declares {len(expected)} parameters, file has {len(records)}")
    arrays = []
    for (name, p), rec in zip(expected, records):
        if rec.name != prefix + name or rec.array.shape != p.shape:
            raise SpecMismatchError(f"record {rec.name} {rec.array.shape} does not match {prefix}{name} {p.shape}")
        arrays.append(rec.array)
    net.load_state(arrays)


def from_contents(contents: CheckpointContents) -> Checkpointable:
    if contents.kind == "classifier":
        try:
            spec = ArchitectureSpec.from_text(contents.spec_text)
        except Exception as exc:
            raise SpecMismatchError(f"unreadable architecture text: {exc}") from exc
        model = Classifier(spec, seed=contents.seed)
        _fill(model.net, contents.records, "")
        model.config_digest = contents.config_digest
        return model
    try:
        bundle = CycleGANBundle.create(GANConfig.from_text(contents.spec_text))
    except Exception as exc:
        raise SpecMismatchError(f"unreadable bundle text: {exc}") from exc
    by_net: dict[str, list[Record]] = {n: [] for n in _BUNDLE_NETS}
    for rec in contents.records:
        head = rec.name.split("/", 1)[0]
        if head not in by_net:
            raise SpecMismatchError(f"record {rec.name} belongs to no bundle network")
        by_net[head].append(rec)
    for net_name in _BUNDLE_NETS:
        _fill(getattr(bundle, net_name), by_net[net_name], f"{net_name}/")
    bundle.config_digest = contents.config_digest
    return bundle


# -- files ----------------------------------------------------------------


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(obj: Checkpointable, path: Path, config_text: str = "") -> None:
    atomic_write(Path(path), encode(to_contents(obj, config_text)))


def load(path: Path) -> Checkpointable:
    return from_contents(decode(Path(path).read_bytes()))


def read_contents(path: Path) -> CheckpointContents:
    return decode(Path(path).read_bytes())
