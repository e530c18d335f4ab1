"""Bit-packed storage of quantized tensors and the ``.lqnm`` model container.

Packing: each element takes ``B`` bits holding ``sign_bit << (B-1) | m``.
Element 0 sits in the least-significant bits of byte 0 and bits continue
upward through little-endian bytes.  Unused high bits of the last byte must
be zero.

``.lqnm`` layout (little-endian)::

    0..3    magic b"LQNM"
    4       version (1)
    5       B
    6       flags, bit 0 = keep_biases
    7..10   manifest length, u32
    11..    manifest: UTF-8 JSON array sorted by name, entries
            {"name", "shape", "kind": "log"|"raw", "scale" (log only), "offset", "nbytes"}
    ...     payload: per-tensor blobs at their declared (byte-aligned) offsets

Raw tensors (full-precision biases) are float32 little-endian.
"""

from __future__ import annotations

import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import QuantConfig, QuantizedTensor, ScaleStrategy, check_bits, decode
from .errors import DataError, DomainError, FormatError, IoError, ValidationError
from .scale import ScaleFitReport, quantize_tensor
from .tensor_store import Tensor, TensorArchive, _read_bytes, _write_bytes, save_archive

MODEL_MAGIC = b"LQNM"
MODEL_VERSION = 1
FLAG_KEEP_BIASES = 0x01
_PREFIX = struct.Struct("<4sBBBI")
_F32 = np.dtype("<f4")


def packed_nbytes(count: int, bits: int) -> int:
    return (bits * count + 7) // 8


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
    bit_matrix = (codes[:, None] >> np.arange(bits, dtype=np.uint8)) & 1
    return np.packbits(bit_matrix.reshape(-1), bitorder="little").tobytes()


def unpack_codes(blob: bytes, count: int, bits: int) -> np.ndarray:
    bits = check_bits(bits)
    expected = packed_nbytes(count, bits)
    if len(blob) != expected:
        raise FormatError(f"packed blob has {len(blob)} bytes, expected {expected}")
    flat = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), bitorder="little")
    if flat[bits * count:].any():
        raise FormatError("nonzero padding bits in packed blob")
    weights = (1 << np.arange(bits, dtype=np.uint16)).astype(np.uint16)
    return (flat[:bits * count].reshape(count, bits).astype(np.uint16) @ weights).astype(np.uint8)


def pack(qt: QuantizedTensor) -> bytes:
    """``B`` bits per element, LSB-first; see module docstring."""
    return pack_codes(qt.codes, qt.bits)


def unpack(blob: bytes, shape, bits: int, scale: float, name: str = "") -> QuantizedTensor:
    count = math.prod(shape)
    return QuantizedTensor(name, shape, scale, bits, unpack_codes(blob, count, bits))


@dataclass
class CompressionReport:
    original_bytes: int
    compressed_bytes: int
    ratio: float
    file_bytes: int = 0
    file_ratio: float = 0.0
    per_tensor: list[tuple[str, int, int]] = field(default_factory=list)
    scale_reports: dict[str, ScaleFitReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "original_bytes": self.original_bytes,
            "compressed_bytes": self.compressed_bytes,
            "ratio": self.ratio,
            "file_bytes": self.file_bytes,
            "file_ratio": self.file_ratio,
            "per_tensor": [
                {"name": n, "original": o, "compressed": c, "ratio": o / c} for n, o, c in self.per_tensor
            ],
        }


@dataclass
class ModelContainer:
    """In-memory image of a ``.lqnm`` file."""

    config: QuantConfig
    quantized: dict[str, QuantizedTensor]
    passthrough: dict[str, Tensor]
    manifest: list[dict] = field(default_factory=list)

    def __post_init__(self):
        overlap = set(self.quantized) & set(self.passthrough)
        if overlap:
            raise ValidationError(f"tensors both quantized and raw: {sorted(overlap)}")
        for name, qt in self.quantized.items():
            if qt.bits != self.config.bits:
                raise ValidationError(f"tensor {name!r} has {qt.bits} bits, container uses {self.config.bits}")

    def names(self) -> list[str]:
        return sorted([*self.quantized, *self.passthrough])

    def to_bytes(self) -> bytes:
        manifest, blobs, offset = [], [], 0
        for name in self.names():
            if name in self.quantized:
                qt = self.quantized[name]
                blob = pack(qt)
                entry = {"name": name, "shape": list(qt.shape), "kind": "log", "scale": qt.scale}
            else:
                t = self.passthrough[name]
                blob = t.data.astype(_F32, copy=False).tobytes()
                entry = {"name": name, "shape": list(t.shape), "kind": "raw"}
            entry["offset"] = offset
            entry["nbytes"] = len(blob)
            manifest.append(entry)
            blobs.append(blob)
            offset += len(blob)
        self.manifest = manifest
        head = json.dumps(manifest, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        flags = FLAG_KEEP_BIASES if self.config.keep_biases else 0
        prefix = _PREFIX.pack(MODEL_MAGIC, MODEL_VERSION, self.config.bits, flags, len(head))
        return prefix + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, blob: bytes) -> ModelContainer:
        if len(blob) < _PREFIX.size:
            raise FormatError("file too short for .lqnm prefix")
        magic, version, bits, flags, mlen = _PREFIX.unpack_from(blob)
        if magic != MODEL_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported .lqnm version {version}")
        try:
            check_bits(bits)
        except DomainError as exc:
            raise FormatError(str(exc)) from None
        start = _PREFIX.size
        if start + mlen > len(blob):
            raise FormatError("manifest length exceeds file size")
        try:
            manifest = json.loads(blob[start:start + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from exc
        if not isinstance(manifest, list):
            raise FormatError("manifest must be a JSON array")
        payload = blob[start + mlen:]

        quantized, passthrough = {}, {}
        names, end = [], 0
        for entry in manifest:
            try:
                name, kind = entry["name"], entry["kind"]
                shape = [int(d) for d in entry["shape"]]
                offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
            except (TypeError, KeyError, ValueError) as exc:
                raise FormatError(f"malformed manifest entry {entry!r}") from exc
            if not isinstance(name, str) or not name or not shape or any(d < 1 for d in shape):
                raise FormatError(f"malformed manifest entry {entry!r}")
            count = math.prod(shape)
            if kind == "log":
                want = packed_nbytes(count, bits)
            elif kind == "raw":
                want = 4 * count
            else:
                raise FormatError(f"tensor {name!r}: unknown kind {kind!r}")
            if nbytes != want:
                raise FormatError(f"tensor {name!r}: nbytes {nbytes}, expected {want}")
            if offset != end:
                raise FormatError(f"tensor {name!r}: offset {offset}, expected {end}")
            if offset + nbytes > len(payload):
                raise FormatError(f"tensor {name!r} extends past the end of the payload")
            end = offset + nbytes
            chunk = payload[offset:end]
            if kind == "log":
                scale = entry.get("scale")
                if not isinstance(scale, (int, float)) or not math.isfinite(scale) or scale <= 0:
                    raise FormatError(f"tensor {name!r}: invalid scale {scale!r}")
                if float(np.float32(scale)) != float(scale):
                    raise FormatError(f"tensor {name!r}: scale is not a float32 value")
                quantized[name] = unpack(chunk, shape, bits, scale, name)
            else:
                values = np.frombuffer(chunk, dtype=_F32)
                if not np.all(np.isfinite(values)):
                    raise DataError(f"tensor {name!r} contains NaN or Inf")
                passthrough[name] = Tensor(name, shape, values)
            names.append(name)
        if names != sorted(set(names)):
            raise FormatError("manifest names must be unique and sorted")
        if end != len(payload):
            raise FormatError(f"payload holds {len(payload)} bytes, manifest covers {end}")

        keep = bool(flags & FLAG_KEEP_BIASES)
        config = QuantConfig(
            bits=bits,
            # the file keeps scales, not the rule that produced them
            scale_strategy=ScaleStrategy("em"),
            keep_biases=keep,
            bias_names=frozenset(n for n in passthrough if "bias" not in n),
        )
        return cls(config, quantized, passthrough, manifest)


def _max_workers() -> int:
    try:
        cap = int(os.environ.get("LQNT_THREADS", "0"))
    except ValueError:
        cap = 0
    ncpu = os.cpu_count() or 1
    return max(1, min(cap, ncpu) if cap > 0 else ncpu)


def build_container(archive: TensorArchive, config: QuantConfig
                    ) -> tuple[ModelContainer, dict[str, ScaleFitReport]]:
    """Quantize every non-passthrough tensor of ``archive`` per ``config``."""
    if not isinstance(archive, TensorArchive):
        archive = TensorArchive(archive)
    raw = {n: t for n, t in archive.items() if config.passthrough(n)}
    todo = [t for n, t in archive.items() if n not in raw]
    workers = _max_workers()
    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda t: quantize_tensor(t, config), todo))
    else:
        results = [quantize_tensor(t, config) for t in todo]
    quantized = {t.name: qt for t, (qt, _) in zip(todo, results)}
    reports = {t.name: rep for t, (_, rep) in zip(todo, results) if rep is not None}
    return ModelContainer(config, quantized, raw), reports


def compression_report(container: ModelContainer, file_bytes: int = 0) -> CompressionReport:
    per = []
    for name in container.names():
        if name in container.quantized:
            qt = container.quantized[name]
            per.append((name, 4 * qt.size, packed_nbytes(qt.size, qt.bits)))
        else:
            t = container.passthrough[name]
            per.append((name, 4 * t.size, 4 * t.size))
    original = sum(o for _, o, _ in per)
    compressed = sum(c for _, _, c in per)
    if original == 0 or compressed == 0:
        raise ValidationError("cannot report compression for an empty model")
    return CompressionReport(
        original_bytes=original,
        compressed_bytes=compressed,
        ratio=original / compressed,
        file_bytes=file_bytes,
        file_ratio=original / file_bytes if file_bytes else 0.0,
        per_tensor=per,
    )


def write_container(container: ModelContainer, path) -> CompressionReport:
    blob = container.to_bytes()
    _write_bytes(path, blob)
    return compression_report(container, len(blob))


def write_model(archive: TensorArchive, config: QuantConfig, path) -> CompressionReport:
    """Quantize ``archive`` and write it as ``.lqnm``; biases stay float32 when kept."""
    container, reports = build_container(archive, config)
    report = write_container(container, path)
    report.scale_reports = reports
    return report


def read_container(path) -> ModelContainer:
    return ModelContainer.from_bytes(_read_bytes(path))


def read_model(path) -> tuple[dict[str, QuantizedTensor], dict[str, Tensor], QuantConfig]:
    c = read_container(path)
    return c.quantized, c.passthrough, c.config


def dequantize_container(container: ModelContainer) -> TensorArchive:
    tensors = [decode(qt) for qt in container.quantized.values()]
    tensors += list(container.passthrough.values())
    return TensorArchive(tensors)


def dequantize_model(path_in, path_out) -> None:
    """Decode a ``.lqnm`` file into a full-precision ``.lqta`` archive."""
    save_archive(dequantize_container(read_container(path_in)), path_out)


def file_size(path) -> int:
    try:
        return Path(path).stat().st_size
    except OSError as exc:
        raise IoError(f"cannot stat {path}: {exc}") from exc
