"""Dot products on log-quantized operands.

Two forward paths must agree bit for bit:

* :func:`qdot_reference` decodes both operands and multiplies.  Scales are
  float32, so every elementwise product of decoded values is exact in
  float64; sums use ``math.fsum`` and are therefore correctly rounded.
* :func:`qdot_shift` never forms a float until the end.  Each product term
  ``±2^(qa+qw)`` is shifted by ``K`` so it becomes the integer
  ``±(1 << (qa+qw+K))``; the accumulator is exact and the result is scaled by
  ``S_a S_w 2^-K`` with one correctly-rounded division.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codec import QuantizedTensor, ScaleStrategy, check_bits, encode, max_magnitude
from .errors import CapacityError, ValidationError
from .tensor_store import Tensor

DEFAULT_ACC_BITS = 512


@dataclass(frozen=True)
class ActQuantConfig:
    bits: int = 4
    scale_mode: ScaleStrategy = field(default_factory=lambda: ScaleStrategy("max"))

    def __post_init__(self):
        check_bits(self.bits)
        if isinstance(self.scale_mode, str):
            object.__setattr__(self, "scale_mode", ScaleStrategy(self.scale_mode))
        if self.scale_mode.kind == "em":
            raise ValidationError("activations support only max or fixed scales")


@dataclass
class ActQuantResult:
    quantized: QuantizedTensor
    degenerate: bool = False


@dataclass
class QDotResult:
    values: Tensor
    saved_for_backward: dict


def quantize_activations(x: Tensor, cfg: ActQuantConfig) -> ActQuantResult:
    """Quantize a matmul input on the fly with a max or fixed scale.

    An all-zero input under max mode falls back to ``S = 1`` and sets
    ``degenerate`` instead of raising.
    """
    if cfg.scale_mode.kind == "fixed":
        return ActQuantResult(encode(x, cfg.scale_mode.value, cfg.bits))
    peak = float(np.max(np.abs(x.data)))
    if peak == 0.0:
        return ActQuantResult(encode(x, 1.0, cfg.bits), degenerate=True)
    return ActQuantResult(encode(x, peak, cfg.bits))


def _matrix(qt: QuantizedTensor, left: bool) -> tuple[int, int]:
    if len(qt.shape) == 1:
        return (1, qt.shape[0]) if left else (qt.shape[0], 1)
    if len(qt.shape) != 2:
        raise ValidationError(f"{qt.name!r}: expected a vector or matrix, got shape {qt.shape}")
    return qt.shape


def _out_shape(a: QuantizedTensor, w: QuantizedTensor) -> tuple[int, ...]:
    m, k = _matrix(a, True)
    k2, n = _matrix(w, False)
    if k != k2:
        raise ValidationError(f"inner dimensions differ: {a.shape} @ {w.shape}")
    shape = ([m] if len(a.shape) == 2 else []) + ([n] if len(w.shape) == 2 else [])
    return tuple(shape) or (1,)


def qdot_reference_values(a: QuantizedTensor, w: QuantizedTensor) -> np.ndarray:
    """Float64 product of the decoded operands, shaped ``(m, n)``."""
    _out_shape(a, w)
    m, k = _matrix(a, True)
    _, n = _matrix(w, False)
    products = a.values().reshape(m, k, 1) * w.values().reshape(1, k, n)
    result = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            result[i, j] = math.fsum(products[i, :, j])
    return result


def qdot_reference(a: QuantizedTensor, w: QuantizedTensor) -> Tensor:
    """Decode both operands and multiply; the oracle for :func:`qdot_shift`."""
    return Tensor("qdot", _out_shape(a, w), qdot_reference_values(a, w))


def shift_offset(a_bits: int, w_bits: int) -> int:
    return max_magnitude(a_bits) + max_magnitude(w_bits)


def max_inner_dim(a_bits: int, w_bits: int, acc_bits: int = DEFAULT_ACC_BITS) -> int:
    """Largest inner dimension whose worst-case sum fits a signed ``acc_bits`` accumulator."""
    k = shift_offset(a_bits, w_bits)
    return ((1 << (acc_bits - 1)) - 1) >> k


def qdot_shift_values(a: QuantizedTensor, w: QuantizedTensor, acc_bits: int = DEFAULT_ACC_BITS
                      ) -> np.ndarray:
    """Integer shift-and-add product, float64, shaped ``(m, n)``."""
    _out_shape(a, w)
    m, k = _matrix(a, True)
    _, n = _matrix(w, False)
    offset = shift_offset(a.bits, w.bits)
    limit = max_inner_dim(a.bits, w.bits, acc_bits)
    if k > limit:
        raise CapacityError(
            f"inner dimension {k} exceeds {limit} for a {acc_bits}-bit accumulator "
            f"at B=({a.bits},{w.bits})"
        )
    # shift each operand so its exponent is non-negative: ±2^(q + max_magnitude)
    ea = (a.exponent + max_magnitude(a.bits)).reshape(m, k)
    ew = (w.exponent + max_magnitude(w.bits)).reshape(k, n)
    sa = np.where(a.negative, -1, 1).reshape(m, k)
    sw = np.where(w.negative, -1, 1).reshape(k, n)
    if k <= max_inner_dim(a.bits, w.bits, 64):
        one = np.int64(1)
        acc = (sa * np.left_shift(one, ea)) @ (sw * np.left_shift(one, ew))
    else:
        one = np.ones((), dtype=object)
        acc = (sa.astype(object) * (one << ea.astype(object))).dot(
            sw.astype(object) * (one << ew.astype(object)))

    num, den = (a.scale * w.scale).as_integer_ratio()  # exact: float32 * float32
    den <<= offset
    flat = [(int(v) * num) / den for v in acc.reshape(-1)]
    return np.array(flat, dtype=np.float64).reshape(m, n)


def qdot_shift(a: QuantizedTensor, w: QuantizedTensor, acc_bits: int = DEFAULT_ACC_BITS) -> Tensor:
    """Integer shift-and-add evaluation of ``decode(a) @ decode(w)``.

    ``acc_bits`` is the declared accumulator width; :class:`CapacityError`
    is raised when ``k * 2^K`` could overflow it.  Narrow cases run on int64
    arrays, wider ones on Python integers.
    """
    return Tensor("qdot", _out_shape(a, w), qdot_shift_values(a, w, acc_bits))


def qdot_forward(x: Tensor, w: QuantizedTensor, cfg: ActQuantConfig) -> QDotResult:
    """``quantize(x) @ decode(w)`` with what the backward pass needs saved.

    ``x`` is ``(m, k)`` full precision, ``w`` a ``(k, n)`` quantized matrix.
    """
    act = quantize_activations(x, cfg)
    xq = act.quantized
    values = qdot_reference(xq, w)
    saved = {
        "x_decoded": xq.values().reshape(_matrix(xq, True)),
        "w_decoded": w.values().reshape(_matrix(w, False)),
        "mask": ste_mask(x.data, xq.scale, xq.bits).reshape(_matrix(xq, True)),
        "scale": xq.scale,
        "degenerate": act.degenerate,
    }
    return QDotResult(values=values, saved_for_backward=saved)


def qdot_backward(result: QDotResult, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the full-precision input and the decoded weights.

    The input gradient goes through the straight-through mask; the scale is
    treated as a constant.
    """
    saved = result.saved_for_backward
    g = np.asarray(upstream, dtype=np.float64).reshape(saved["x_decoded"].shape[0], -1)
    grad_w = saved["x_decoded"].T @ g
    grad_x = (g @ saved["w_decoded"].T) * saved["mask"]
    return grad_x, grad_w


def ste_mask(values, scale: float, bits: int) -> np.ndarray:
    """1 where ``2^(1-2^(B-1)) <= |v|/S <= 1`` (both bounds inclusive), else 0."""
    bits = check_bits(bits)
    ratio = np.abs(np.asarray(values, dtype=np.float64)) / float(scale)
    lo = math.ldexp(1.0, -max_magnitude(bits))
    return ((ratio >= lo) & (ratio <= 1.0)).astype(np.float64)


def ste_backward(upstream_grad: Tensor, original_inputs: Tensor, scale: float, bits: int) -> Tensor:
    """Straight-through gradient of the quantizer: pass inside the clip range, zero outside."""
    if tuple(upstream_grad.shape) != tuple(original_inputs.shape):
        raise ValidationError(f"shape mismatch: {upstream_grad.shape} vs {original_inputs.shape}")
    mask = ste_mask(original_inputs.data, scale, bits)
    return Tensor(upstream_grad.name, upstream_grad.shape, upstream_grad.data * mask)
