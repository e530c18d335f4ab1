"""Logarithmic (power-of-two) codec and the fixed-point baseline.

A B-bit log code holds one sign bit and a (B-1)-bit magnitude ``m``.  It
decodes to ``sign * S * 2**-m`` where ``S`` is the per-tensor scale.  The
packed integer form used throughout is ``code = sign_bit << (B-1) | m`` with
``sign_bit == 1`` for negative values.

Rounding happens in linear space: ``x`` in ``[2**k, 2**(k+1)]`` goes up to
``2**(k+1)`` only when it is strictly above ``1.5 * 2**k``.  The exponent is
obtained from ``frexp`` so values lying exactly on a power of two or on a
midpoint never depend on the rounding of ``log2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DomainError, ValidationError
from .tensor_store import Tensor

MIN_BITS = 1
MAX_BITS = 8


def check_bits(bits: int) -> int:
    if isinstance(bits, bool) or int(bits) != bits or not MIN_BITS <= bits <= MAX_BITS:
        raise DomainError(f"bits must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")
    return int(bits)


def max_magnitude(bits: int) -> int:
    """Largest stored magnitude ``m``; exponents live in ``[-max_magnitude, 0]``."""
    return (1 << (bits - 1)) - 1


def clip_bounds(bits: int) -> tuple[float, float]:
    """Range that ``|v|/S`` is clipped into before rounding."""
    return math.ldexp(1.0, -max_magnitude(bits)), 1.0


def as_scale(scale) -> float:
    """Round a scale to float32, the precision it is stored with."""
    s = float(np.float32(scale))
    if not math.isfinite(s) or s <= 0.0:
        raise DomainError(f"scale must be positive and finite, got {scale!r}")
    return s


@dataclass(frozen=True)
class ScaleStrategy:
    kind: str = "em"
    value: float | None = None

    def __post_init__(self):
        if self.kind not in ("fixed", "max", "em"):
            raise ValidationError(f"unknown scale strategy {self.kind!r}")
        if self.kind == "fixed":
            value = 1.0 if self.value is None else float(self.value)
            if not math.isfinite(value) or value <= 0:
                raise ValidationError(f"fixed scale must be > 0, got {self.value!r}")
            object.__setattr__(self, "value", value)

    @classmethod
    def fixed(cls, value: float = 1.0) -> ScaleStrategy:
        return cls("fixed", value)

    def __str__(self):
        return f"fixed({self.value:g})" if self.kind == "fixed" else self.kind


@dataclass(frozen=True)
class QuantConfig:
    """All quantization knobs for a model.

    ``bias_rule`` is a substring test on tensor names; ``bias_names`` lists
    extra tensors to treat as biases regardless of name.
    """

    bits: int = 4
    scale_strategy: ScaleStrategy = field(default_factory=ScaleStrategy)
    keep_biases: bool = True
    bias_rule: str = "bias"
    bias_names: frozenset[str] = frozenset()
    em_tol: float = 1e-6
    em_max_iter: int = 50

    def __post_init__(self):
        try:
            check_bits(self.bits)
        except DomainError as exc:
            raise ValidationError(str(exc)) from None
        if isinstance(self.scale_strategy, str):
            object.__setattr__(self, "scale_strategy", ScaleStrategy(self.scale_strategy))
        object.__setattr__(self, "bias_names", frozenset(self.bias_names))
        if self.em_tol <= 0 or self.em_max_iter < 1:
            raise ValidationError("em_tol must be > 0 and em_max_iter >= 1")

    def is_bias(self, name: str) -> bool:
        return name in self.bias_names or (bool(self.bias_rule) and self.bias_rule in name)

    def passthrough(self, name: str) -> bool:
        return self.keep_biases and self.is_bias(name)


class QuantizedTensor:
    """Sign + exponent codes of one tensor with its float32 scale."""

    __slots__ = ("name", "shape", "scale", "bits", "codes")

    def __init__(self, name: str, shape, scale: float, bits: int, codes):
        bits = check_bits(bits)
        shape = tuple(int(d) for d in shape)
        if not shape or any(d < 1 for d in shape):
            raise ValidationError(f"quantized tensor {name!r}: invalid shape {shape}")
        codes = np.array(codes, dtype=np.int64).reshape(-1)
        if codes.size != math.prod(shape):
            raise ValidationError(f"quantized tensor {name!r}: {codes.size} codes for shape {shape}")
        if codes.size and (codes.min() < 0 or codes.max() >= (1 << bits)):
            raise ValidationError(f"quantized tensor {name!r}: code outside [0, 2^{bits})")
        codes = codes.astype(np.uint8)
        codes.setflags(write=False)
        object.__setattr__(self, "name", str(name))
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "scale", as_scale(scale))
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "codes", codes)

    def __setattr__(self, key, value):
        raise AttributeError("QuantizedTensor is immutable")

    @classmethod
    def from_parts(cls, name, shape, scale, bits, negative, exponent) -> QuantizedTensor:
        """Build from sign flags and exponents ``q`` (``q <= 0``)."""
        negative = np.asarray(negative, dtype=bool).reshape(-1)
        mag = -np.asarray(exponent, dtype=np.int64).reshape(-1)
        if mag.size and (mag.min() < 0 or mag.max() > max_magnitude(check_bits(bits))):
            raise ValidationError(f"exponent outside (-2^{bits - 1}, 0]")
        return cls(name, shape, scale, bits, (negative.astype(np.int64) << (bits - 1)) | mag)

    @property
    def size(self) -> int:
        return self.codes.size

    @property
    def negative(self) -> np.ndarray:
        return (self.codes >> (self.bits - 1)).astype(bool) if self.bits > 1 else self.codes.astype(bool)

    @property
    def magnitude(self) -> np.ndarray:
        return (self.codes & max_magnitude(self.bits)).astype(np.int64)

    @property
    def exponent(self) -> np.ndarray:
        return -self.magnitude

    @property
    def signs(self) -> np.ndarray:
        return np.where(self.negative, -1.0, 1.0)

    def values(self) -> np.ndarray:
        """Decoded values in float64 (exact: float32 scale times a power of two)."""
        return self.signs * np.ldexp(self.scale, self.exponent)

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.scale == other.scale
            and self.bits == other.bits
            and np.array_equal(self.codes, other.codes)
        )

    def __repr__(self):
        return (
            f"QuantizedTensor(name={self.name!r}, shape={list(self.shape)}, "
            f"bits={self.bits}, scale={self.scale!r})"
        )


def _as_values(t) -> np.ndarray:
    if isinstance(t, Tensor):
        v = t.data.astype(np.float64)
    else:
        v = np.asarray(t, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise DataError("cannot quantize NaN or Inf")
    return v


def nearest_exponents(ratios: np.ndarray) -> np.ndarray:
    """Exponent of the nearest power of two, in linear space, for positive ``ratios``.

    Exact midpoints ``1.5 * 2**k`` round down to ``k``.
    """
    mant, exp = np.frexp(ratios)
    # ratios == mant * 2**exp with mant in [0.5, 1); floor(log2) == exp - 1
    return (exp - 1 + (mant > 0.75)).astype(np.int64)


def nearest_pow2_exponent(x: float) -> int:
    """Integer ``q`` minimising ``|2**q - x|``; midpoints go to the lower power."""
    x = float(x)
    if not math.isfinite(x) or x <= 0:
        raise DomainError(f"expected a positive finite number, got {x!r}")
    return int(nearest_exponents(np.array([x]))[0])


def assign_exponents(values: np.ndarray, scale: float, bits: int) -> np.ndarray:
    """E-step: exponent ``q`` in ``[-max_magnitude, 0]`` for every value at ``scale``."""
    lo, hi = clip_bounds(bits)
    ratios = np.clip(np.abs(values) / scale, lo, hi)
    q = nearest_exponents(ratios)
    return np.clip(q, -max_magnitude(bits), 0)


def sse_at(values: np.ndarray, scale: float, exponents: np.ndarray) -> float:
    """Squared error of ``values`` against ``sign(v) * scale * 2**q``."""
    approx = np.where(values < 0, -1.0, 1.0) * np.ldexp(float(scale), exponents)
    return float(np.sum((approx - values) ** 2))


def encode(t: Tensor, scale: float, bits: int) -> QuantizedTensor:
    """Quantize every element to its nearest center ``±S 2^q``.

    ``scale`` is rounded to float32 first so that codes agree with the scale
    that ends up in the container.  Zero is encoded with a positive sign at
    the smallest magnitude; there is no zero code.
    """
    bits = check_bits(bits)
    s = as_scale(scale)
    values = _as_values(t)
    q = assign_exponents(values, s, bits)
    shape = t.shape if isinstance(t, Tensor) else (values.size,)
    name = t.name if isinstance(t, Tensor) else ""
    return QuantizedTensor.from_parts(name, shape, s, bits, values < 0, q)


def decode(qt: QuantizedTensor) -> Tensor:
    return Tensor(qt.name, qt.shape, qt.values())


def quantization_sse(original: Tensor, qt: QuantizedTensor) -> float:
    """Sum of squared differences between ``original`` and ``decode(qt)``."""
    if tuple(original.shape) != tuple(qt.shape):
        raise ValidationError(f"shape mismatch: {original.shape} vs {qt.shape}")
    v = original.data.astype(np.float64)
    return float(np.sum((qt.values() - v) ** 2))


class LinearQuantizedTensor:
    """Symmetric uniform codes in ``[-(2^(B-1)-1), 2^(B-1)-1]`` with one scale."""

    __slots__ = ("name", "shape", "scale", "bits", "codes")

    def __init__(self, name, shape, scale, bits, codes):
        self.name = name
        self.shape = tuple(shape)
        self.scale = float(scale)
        self.bits = bits
        self.codes = np.asarray(codes, dtype=np.int16)

    @property
    def levels(self) -> int:
        return max_magnitude(self.bits)

    def values(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.scale / self.levels

    def decode(self) -> Tensor:
        return Tensor(self.name, self.shape, self.values())


def linear_encode(t: Tensor, scale: float, bits: int) -> LinearQuantizedTensor:
    """Fixed-point baseline: ``round(clip(v/S, -1, 1) * (2^(B-1)-1))``, ties away from zero."""
    bits = check_bits(bits)
    if bits == 1:
        raise DomainError("linear quantization needs at least 2 bits")
    scale = float(scale)
    if not math.isfinite(scale) or scale <= 0:
        raise DomainError(f"scale must be positive and finite, got {scale!r}")
    values = _as_values(t)
    levels = max_magnitude(bits)
    x = np.clip(values / scale, -1.0, 1.0) * levels
    ax = np.abs(x)
    whole = np.floor(ax)
    codes = np.sign(x) * (whole + (ax - whole >= 0.5))
    shape = t.shape if isinstance(t, Tensor) else (values.size,)
    name = t.name if isinstance(t, Tensor) else ""
    return LinearQuantizedTensor(name, shape, scale, bits, codes.astype(np.int16))


def linear_sse(original: Tensor, lq: LinearQuantizedTensor) -> float:
    if tuple(original.shape) != tuple(lq.shape):
        raise ValidationError(f"shape mismatch: {original.shape} vs {lq.shape}")
    return float(np.sum((lq.values() - original.data.astype(np.float64)) ** 2))
