"""Per-tensor scale selection: fixed, tensor max, or EM with closed-form refit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codec import (
    QuantConfig,
    QuantizedTensor,
    ScaleStrategy,
    _as_values,
    as_scale,
    assign_exponents,
    check_bits,
    encode,
    sse_at,
)
from .errors import DegenerateError, ValidationError
from .tensor_store import Tensor


@dataclass
class ScaleFitReport:
    scale: float
    iterations: int = 0
    sse_trace: list[float] = field(default_factory=list)
    converged: bool = False


def _name(t) -> str | None:
    return t.name if isinstance(t, Tensor) else None


def max_scale(t: Tensor) -> float:
    """Largest absolute value of ``t``."""
    s = float(np.max(np.abs(_as_values(t))))
    if s == 0.0:
        raise DegenerateError(f"tensor {_name(t)!r} is all zeros; no positive scale", _name(t))
    return s


def _exponents_of(values: np.ndarray, assignment) -> np.ndarray:
    if isinstance(assignment, QuantizedTensor):
        q = assignment.exponent
    else:
        q = np.asarray(assignment, dtype=np.int64).reshape(-1)
    if q.size != values.size:
        raise ValidationError(f"assignment covers {q.size} elements, tensor has {values.size}")
    return q


def _refit(values: np.ndarray, q: np.ndarray) -> float:
    powers = np.ldexp(1.0, q)
    return float(np.sum(powers * np.abs(values)) / np.sum(powers * powers))


def refit_scale(t: Tensor, assignment) -> float:
    """Least-squares scale for fixed exponents: ``sum(2^q |v|) / sum(4^q)``.

    ``assignment`` is a :class:`QuantizedTensor` from :func:`encode` or an
    array of exponents ``q``, one per element of ``t``.
    """
    values = _as_values(t)
    if isinstance(assignment, QuantizedTensor) and isinstance(t, Tensor) and t.shape != assignment.shape:
        raise ValidationError(f"shape mismatch: {t.shape} vs {assignment.shape}")
    q = _exponents_of(values, assignment)
    s = _refit(values, q)
    if s <= 0.0:
        raise DegenerateError(f"tensor {_name(t)!r} is all zeros; no positive scale", _name(t))
    return s


def em_fit_scale(
    t: Tensor,
    bits: int,
    tol: float = 1e-6,
    max_iter: int = 50,
    init_scale: float | None = None,
) -> ScaleFitReport:
    """Alternate nearest-center assignment and closed-form refit of the scale.

    Starts from ``max_scale(t)`` unless ``init_scale`` is given (warm start).
    Stops once the relative change of the scale drops below ``tol``.
    """
    bits = check_bits(bits)
    if not tol > 0:
        raise ValidationError(f"tol must be > 0, got {tol!r}")
    if isinstance(max_iter, bool) or int(max_iter) != max_iter or max_iter < 1:
        raise ValidationError(f"max_iter must be >= 1, got {max_iter!r}")
    values = _as_values(t)
    start = max_scale(t)
    s = start if init_scale is None else float(init_scale)
    if not (math.isfinite(s) and s > 0):
        raise ValidationError(f"init_scale must be positive, got {init_scale!r}")

    report = ScaleFitReport(scale=s)
    for _ in range(int(max_iter)):
        q = assign_exponents(values, s, bits)
        s_new = _refit(values, q)
        report.sse_trace.append(sse_at(values, s_new, q))
        report.iterations += 1
        change = abs(s_new - s) / s
        s = s_new
        if change < tol:
            report.converged = True
            break
    report.scale = s
    return report


def select_scale(t: Tensor, strategy: ScaleStrategy | QuantConfig, bits: int | None = None,
                 init_scale: float | None = None) -> tuple[float, ScaleFitReport | None]:
    """Scale for ``t`` under ``strategy``; the EM report is returned when EM ran."""
    if isinstance(strategy, QuantConfig):
        cfg = strategy
        strategy, bits = cfg.scale_strategy, cfg.bits
        tol, max_iter = cfg.em_tol, cfg.em_max_iter
    else:
        tol, max_iter = 1e-6, 50
    if strategy.kind == "fixed":
        return float(strategy.value), None
    if strategy.kind == "max":
        return max_scale(t), None
    report = em_fit_scale(t, bits, tol=tol, max_iter=max_iter, init_scale=init_scale)
    return report.scale, report


def quantize_tensor(t: Tensor, cfg: QuantConfig, init_scale: float | None = None
                    ) -> tuple[QuantizedTensor, ScaleFitReport | None]:
    """Select the scale per ``cfg`` and encode ``t`` with it."""
    s, report = select_scale(t, cfg, init_scale=init_scale)
    try:
        s32 = as_scale(s)
    except Exception as exc:
        raise DegenerateError(f"tensor {t.name!r}: unusable scale {s!r}", t.name) from exc
    return encode(t, s32, cfg.bits), report
