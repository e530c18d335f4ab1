"""Full-precision tensors and the ``.lqta`` archive format.

Layout of an ``.lqta`` file (little-endian)::

    0..3   magic b"LQTA"
    4      version (1)
    5..8   header length H, u32
    9..    UTF-8 JSON header, H bytes:
           [{"name": str, "shape": [int, ...], "offset": int}, ...] sorted by name,
           offsets in bytes relative to the start of the payload
    ...    payload: concatenated float32 values, row-major
"""

from __future__ import annotations

import json
import math
import struct
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, IoError, ValidationError

ARCHIVE_MAGIC = b"LQTA"
ARCHIVE_VERSION = 1
_PREFIX = struct.Struct("<4sBI")
_F32 = np.dtype("<f4")


class Tensor:
    """Named, shaped, immutable float32 array stored flat in row-major order."""

    __slots__ = ("name", "shape", "data")

    def __init__(self, name: str, shape: Iterable[int], data):
        shape = tuple(int(d) for d in shape)
        if not shape or any(d < 1 for d in shape):
            raise ValidationError(f"tensor {name!r}: invalid shape {shape}")
        arr = np.array(data, dtype=np.float32).reshape(-1)
        if arr.size != math.prod(shape):
            raise ValidationError(
                f"tensor {name!r}: shape {shape} needs {math.prod(shape)} values, got {arr.size}"
            )
        if not np.all(np.isfinite(arr)):
            raise DataError(f"tensor {name!r} contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "name", str(name))
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, key, value):
        raise AttributeError("Tensor is immutable")

    @classmethod
    def from_array(cls, name: str, array) -> Tensor:
        arr = np.asarray(array, dtype=np.float32)
        shape = arr.shape if arr.ndim else (1,)
        return cls(name, shape, arr)

    @property
    def size(self) -> int:
        return self.data.size

    def array(self) -> np.ndarray:
        """The data reshaped to ``shape`` (read-only view)."""
        return self.data.reshape(self.shape)

    def renamed(self, name: str) -> Tensor:
        return Tensor(name, self.shape, self.data)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.data.view(np.uint32).tobytes() == other.data.view(np.uint32).tobytes()
        )

    def __hash__(self):
        return hash((self.name, self.shape, self.data.tobytes()))

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={list(self.shape)})"


class TensorArchive(Mapping):
    """Name-unique collection of tensors, iterated in lexicographic name order."""

    def __init__(self, tensors: Iterable[Tensor] = ()):
        items: dict[str, Tensor] = {}
        for t in tensors:
            if not isinstance(t, Tensor):
                raise ValidationError(f"archive entries must be Tensor, got {type(t).__name__}")
            if not t.name:
                raise ValidationError("tensor names must be non-empty")
            if t.name in items:
                raise ValidationError(f"duplicate tensor name {t.name!r}")
            items[t.name] = t
        self._tensors = {name: items[name] for name in sorted(items)}

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __eq__(self, other):
        if not isinstance(other, TensorArchive):
            return NotImplemented
        return list(self) == list(other) and all(self[k] == other[k] for k in self)

    def __repr__(self):
        return f"TensorArchive({list(self._tensors)})"

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    @property
    def parameter_count(self) -> int:
        return sum(t.size for t in self._tensors.values())


@dataclass(frozen=True)
class TensorStats:
    min: float
    max: float
    mean: float
    stddev: float
    count: int


def tensor_stats(t: Tensor) -> TensorStats:
    """Population statistics over all elements of ``t``."""
    return array_stats(t.data)


def array_stats(values) -> TensorStats:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValidationError("statistics need at least one value")
    mean = float(np.mean(v))
    # two-pass form: mean first, then centred second moment
    std = float(np.sqrt(np.mean((v - mean) ** 2)))
    lo, hi = float(v.min()), float(v.max())
    # summation rounding can push the mean one ulp outside [min, max]
    mean = min(max(mean, lo), hi)
    return TensorStats(min=lo, max=hi, mean=mean, stddev=std, count=int(v.size))


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _write_bytes(path, blob: bytes) -> None:
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def archive_to_bytes(archive: TensorArchive) -> bytes:
    if not isinstance(archive, TensorArchive):
        archive = TensorArchive(archive)
    header = []
    chunks = []
    offset = 0
    for name, t in archive.items():
        header.append({"name": name, "shape": list(t.shape), "offset": offset})
        blob = t.data.astype(_F32, copy=False).tobytes()
        chunks.append(blob)
        offset += len(blob)
    head = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return _PREFIX.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, len(head)) + head + b"".join(chunks)


def archive_from_bytes(blob: bytes) -> TensorArchive:
    if len(blob) < _PREFIX.size:
        raise FormatError("file too short for .lqta prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != ARCHIVE_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != ARCHIVE_VERSION:
        raise FormatError(f"unsupported .lqta version {version}")
    start = _PREFIX.size
    if start + hlen > len(blob):
        raise FormatError("header length exceeds file size")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header: {exc}") from exc
    if not isinstance(header, list):
        raise FormatError("header must be a JSON array")
    payload = memoryview(blob)[start + hlen:]

    spans = []
    for entry in header:
        try:
            name = entry["name"]
            shape = [int(d) for d in entry["shape"]]
            offset = int(entry["offset"])
        except (TypeError, KeyError, ValueError) as exc:
            raise FormatError(f"malformed header entry {entry!r}") from exc
        if not isinstance(name, str) or not shape or any(d < 1 for d in shape) or offset < 0:
            raise FormatError(f"malformed header entry {entry!r}")
        spans.append((offset, offset + 4 * math.prod(shape), name, shape))

    end = 0
    for lo, hi, name, _ in sorted(spans):
        if lo < end:
            raise FormatError(f"tensor {name!r} overlaps its predecessor")
        end = hi
    if end != len(payload):
        raise FormatError(f"payload holds {len(payload)} bytes, header declares {end}")

    tensors = []
    for lo, hi, name, shape in spans:
        values = np.frombuffer(payload[lo:hi], dtype=_F32)
        if not np.all(np.isfinite(values)):
            raise DataError(f"tensor {name!r} contains NaN or Inf")
        tensors.append(Tensor(name, shape, values))
    try:
        return TensorArchive(tensors)
    except ValidationError as exc:
        raise FormatError(str(exc)) from exc


def load_archive(path) -> TensorArchive:
    return archive_from_bytes(_read_bytes(path))


def save_archive(archive: TensorArchive, path) -> None:
    _write_bytes(path, archive_to_bytes(archive))
