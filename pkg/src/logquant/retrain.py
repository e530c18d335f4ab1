"""Error-feedback retraining on a small feed-forward regressor.

Parameters live in quantized form between steps.  One step forms the
full-precision update from the decoded parameters, adds the residual left by
the previous re-quantization, re-quantizes (refitting the scale) and keeps
whatever the codec discarded as the new residual.

Parameters and gradients are float32.  Residuals are float64 so that
``u - decode(q)`` is exact and ``decode(q) + residual == u`` holds bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .codec import QuantConfig, QuantizedTensor
from .errors import DataError, TrainingError, ValidationError
from .qdot import ActQuantConfig, quantize_activations, qdot_reference_values, ste_mask
from .scale import quantize_tensor
from .tensor_store import Tensor, TensorArchive


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def split(self, n_first: int) -> tuple[Dataset, Dataset]:
        return Dataset(self.x[:n_first], self.y[:n_first]), Dataset(self.x[n_first:], self.y[n_first:])


def gen_synthetic_task(seed: int, n_samples: int, in_dim: int = 16, teacher_hidden: int = 8,
                       noise: float = 0.05) -> Dataset:
    """Regression data from a fixed random tanh teacher plus Gaussian noise."""
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(in_dim, teacher_hidden))
    b1 = rng.normal(0.0, 0.3, size=teacher_hidden)
    w2 = rng.normal(0.0, 1.0 / math.sqrt(teacher_hidden), size=(teacher_hidden, 1))
    x = rng.standard_normal((n_samples, in_dim))
    y = np.tanh(x @ w1 + b1) @ w2 + noise * rng.standard_normal((n_samples, 1))
    return Dataset(x.astype(np.float32), y.astype(np.float32))


LAYER_NAMES = ("layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias")


@dataclass
class ToyModel:
    """Two-layer tanh regressor ``tanh(x W0 + b0) W1 + b1``."""

    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, seed: int, in_dim: int = 16, hidden: int = 32, out_dim: int = 1) -> ToyModel:
        rng = np.random.default_rng(seed)
        params = {
            "layer0.weight": rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, hidden)),
            "layer0.bias": np.zeros(hidden),
            "layer1.weight": rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, out_dim)),
            "layer1.bias": np.zeros(out_dim),
        }
        return cls({k: v.astype(np.float32) for k, v in params.items()})

    def copy(self) -> ToyModel:
        return ToyModel({k: v.copy() for k, v in self.params.items()})

    def to_archive(self) -> TensorArchive:
        return TensorArchive(Tensor.from_array(k, v) for k, v in self.params.items())

    @classmethod
    def from_archive(cls, archive: TensorArchive) -> ToyModel:
        missing = [n for n in LAYER_NAMES if n not in archive]
        if missing:
            raise ValidationError(f"archive lacks toy-model tensors {missing}")
        return cls({n: np.array(archive[n].array(), dtype=np.float32) for n in LAYER_NAMES})


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    quant: QuantConfig | None = field(default_factory=QuantConfig)
    error_feedback: bool = True
    quantize_dots: bool = False
    act: ActQuantConfig = field(default_factory=ActQuantConfig)
    em_iters_per_step: int = 5

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if not self.lr > 0:
            raise ValidationError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch size must be >= 1")

    @property
    def step_quant(self) -> QuantConfig | None:
        """Quantization used when re-quantizing after an update (EM capped)."""
        if self.quant is None:
            return None
        return replace(self.quant, em_max_iter=min(self.quant.em_max_iter, self.em_iters_per_step))


@dataclass
class ResidualState:
    residuals: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict) -> ResidualState:
        return cls({n: np.zeros(_shape(p), dtype=np.float64) for n, p in params.items()})

    def sse(self) -> float:
        return float(sum(np.sum(r * r) for r in self.residuals.values()))


Params = dict  # name -> QuantizedTensor | float32 ndarray


def _shape(p) -> tuple[int, ...]:
    return p.shape


def decoded(p) -> np.ndarray:
    """Full-precision float32 view of a parameter, quantized or not."""
    if isinstance(p, QuantizedTensor):
        return p.values().astype(np.float32).reshape(p.shape)
    return p


def decode_params(params: Params) -> dict[str, np.ndarray]:
    return {n: decoded(p) for n, p in params.items()}


def quantize_params(model: ToyModel | dict, cfg: QuantConfig | None) -> tuple[Params, dict[str, int]]:
    """One-shot quantization; biases pass through when ``cfg.keep_biases``."""
    params = model.params if isinstance(model, ToyModel) else model
    out, iters = {}, {}
    for name, value in params.items():
        if cfg is None or cfg.passthrough(name):
            out[name] = np.array(value, dtype=np.float32)
            continue
        qt, report = quantize_tensor(Tensor.from_array(name, value), cfg)
        out[name] = qt
        iters[name] = report.iterations if report else 0
    return out, iters


def _project(inp: np.ndarray, w, act: ActQuantConfig | None, cache: list) -> np.ndarray:
    if act is None:
        cache.append((inp, None))
        return inp @ decoded(w).astype(np.float64)
    xq = quantize_activations(Tensor.from_array("act", inp), act).quantized
    x_dec = xq.values().reshape(inp.shape)
    cache.append((x_dec, ste_mask(inp, xq.scale, xq.bits).reshape(inp.shape)))
    if isinstance(w, QuantizedTensor):
        return qdot_reference_values(xq, w)
    return x_dec @ np.asarray(w, dtype=np.float64)


def loss_and_grads(params: Params, x: np.ndarray, y: np.ndarray,
                   act: ActQuantConfig | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error and float32 gradients w.r.t. the decoded parameters.

    With ``act`` set, inputs of both matmuls are log-quantized on the fly and
    their gradients pass through the straight-through mask.
    """
    w0, w1 = params["layer0.weight"], params["layer1.weight"]
    b0 = decoded(params["layer0.bias"]).astype(np.float64)
    b1 = decoded(params["layer1.bias"]).astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cache: list = []
    h = np.tanh(_project(x, w0, act, cache) + b0)
    pred = _project(h, w1, act, cache) + b1
    diff = pred - y
    loss = float(np.mean(diff ** 2))

    g_pred = 2.0 * diff / diff.size
    (x_used, _), (h_used, h_mask) = cache
    g_w1 = h_used.T @ g_pred
    g_b1 = g_pred.sum(axis=0)
    g_h = g_pred @ decoded(w1).astype(np.float64).T
    if h_mask is not None:
        g_h = g_h * h_mask
    g_z = g_h * (1.0 - h * h)
    g_w0 = x_used.T @ g_z
    g_b0 = g_z.sum(axis=0)
    grads = {"layer0.weight": g_w0, "layer0.bias": g_b0, "layer1.weight": g_w1, "layer1.bias": g_b1}
    return loss, {k: v.astype(np.float32) for k, v in grads.items()}


def evaluate(params: Params, data: Dataset, act: ActQuantConfig | None = None) -> float:
    return loss_and_grads(params, data.x, data.y, act)[0]


@dataclass
class StepInfo:
    update: dict[str, np.ndarray]
    sse: float
    scale_iters: int


def sgd_update(p: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
    return (p - np.float32(lr) * g).astype(np.float32)


def ef_step_detailed(params_q: Params, residual: ResidualState, grads: dict[str, np.ndarray],
                     cfg: TrainConfig) -> tuple[Params, ResidualState, StepInfo]:
    quant = cfg.step_quant
    new_params, new_res, updates = {}, {}, {}
    sse, iters = 0.0, 0
    for name, p in params_q.items():
        g = np.asarray(grads[name], dtype=np.float32)
        if g.shape != _shape(p):
            raise ValidationError(f"gradient for {name!r} has shape {g.shape}, expected {_shape(p)}")
        if not np.all(np.isfinite(g)):
            raise DataError(f"non-finite gradient for {name!r}")
        w = sgd_update(decoded(p), g, cfg.lr)
        r = residual.residuals[name]
        if isinstance(p, QuantizedTensor) and cfg.error_feedback:
            u = (w + r).astype(np.float32)
        else:
            u = w
        updates[name] = u
        if not isinstance(p, QuantizedTensor):
            # full-precision tensor: nothing is discarded
            new_params[name] = u
            new_res[name] = np.zeros_like(r)
            continue
        qt, report = quantize_tensor(Tensor.from_array(name, u), quant, init_scale=p.scale
                                     if quant.scale_strategy.kind == "em" else None)
        iters += report.iterations if report else 0
        new_params[name] = qt
        if cfg.error_feedback:
            new_r = u.astype(np.float64) - qt.values().reshape(u.shape)
            sse += float(np.sum(new_r * new_r))
        else:
            new_r = np.zeros_like(r)
            sse += float(np.sum((u.astype(np.float64) - qt.values().reshape(u.shape)) ** 2))
        new_res[name] = new_r
    return new_params, ResidualState(new_res), StepInfo(updates, sse, iters)


def ef_step(params_q: Params, residual: ResidualState, grads: dict[str, np.ndarray],
            cfg: TrainConfig) -> tuple[Params, ResidualState]:
    """Full-precision SGD update, residual carry-over and re-quantization."""
    params, res, _ = ef_step_detailed(params_q, residual, grads, cfg)
    return params, res


@dataclass
class RetrainResult:
    params: Params
    residual: ResidualState
    loss_trace: list[float]
    records: list[dict]
    final_loss: float


def _batches(seed: int, n: int, batch_size: int):
    rng = np.random.default_rng(seed)
    while True:
        yield rng.integers(0, n, size=min(batch_size, n))


def retrain(model: ToyModel | TensorArchive, data: Dataset, cfg: TrainConfig, val: Dataset | None = None,
            callback: Callable[[int, Params, ResidualState, StepInfo], None] | None = None) -> RetrainResult:
    """Quantize ``model`` and retrain it for ``cfg.steps`` SGD steps with error feedback.

    ``cfg.quant = None`` disables quantization altogether (plain SGD).  The
    final loss is measured on ``val`` (or ``data``) with the quantized model.
    """
    if isinstance(model, TensorArchive):
        model = ToyModel.from_archive(model)
    params, _ = quantize_params(model, cfg.quant)
    residual = ResidualState.zeros_like(params)
    act = cfg.act if cfg.quantize_dots else None
    batches = _batches(cfg.seed, len(data), cfg.batch_size)
    losses, records = [], []
    for step in range(cfg.steps):
        idx = next(batches)
        loss, grads = loss_and_grads(params, data.x[idx], data.y[idx], act)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"loss diverged at step {step}", step)
        try:
            params, residual, info = ef_step_detailed(params, residual, grads, cfg)
        except DataError as exc:
            # an overflowing update is divergence too
            raise TrainingError(f"update diverged at step {step}: {exc}", step) from exc
        losses.append(loss)
        records.append({"step": step, "loss": loss, "sse": info.sse, "scale_iters": info.scale_iters})
        if callback is not None:
            callback(step, params, residual, info)
    final = evaluate(params, val if val is not None else data, act)
    if not math.isfinite(final):
        raise TrainingError("final loss is not finite", cfg.steps)
    return RetrainResult(params, residual, losses, records, final)


def train_full_precision(model: ToyModel, data: Dataset, steps: int, lr: float = 0.05,
                         batch_size: int = 32, seed: int = 0) -> ToyModel:
    """Plain SGD pre-training used to produce the model that gets quantized."""
    cfg = TrainConfig(steps=steps, lr=lr, batch_size=batch_size, seed=seed, quant=None,
                      error_feedback=False)
    result = retrain(model, data, cfg)
    return ToyModel({n: np.asarray(p, dtype=np.float32) for n, p in result.params.items()})


def parameter_sse(model: ToyModel, params: Params) -> dict[str, float]:
    out = {}
    for name, p in params.items():
        if isinstance(p, QuantizedTensor):
            ref = model.params[name].astype(np.float64).reshape(-1)
            out[name] = float(np.sum((p.values() - ref) ** 2))
    return out


def quantize_then_eval(model: ToyModel | TensorArchive, cfg: QuantConfig, data: Dataset,
                       act: ActQuantConfig | None = None) -> dict:
    """One-shot quantization without retraining, then evaluation on ``data``."""
    if isinstance(model, TensorArchive):
        model = ToyModel.from_archive(model)
    params, iters = quantize_params(model, cfg)
    per = parameter_sse(model, params)
    return {
        "loss": evaluate(params, data, act),
        "sse": float(sum(per.values())),
        "per_tensor_sse": per,
        "scale_iters": iters,
        "params": params,
    }


def params_to_archive(params: Params) -> TensorArchive:
    return TensorArchive(Tensor.from_array(n, decoded(p)) for n, p in params.items())


@dataclass
class ToyExperiment:
    seed: int
    full_precision_loss: float
    no_retrain_loss: float
    retrained_loss: float
    no_retrain: dict
    retrained: RetrainResult
    pretrained: ToyModel


def make_task(seed: int, n_train: int = 2048, n_val: int = 512, in_dim: int = 16) -> tuple[Dataset, Dataset]:
    return gen_synthetic_task(seed, n_train + n_val, in_dim).split(n_train)


def run_toy_experiment(seed: int, quant: QuantConfig | None = None, pretrain_steps: int = 3000,
                       retrain_steps: int = 500, lr: float = 0.05, batch_size: int = 32,
                       error_feedback: bool = True, quantize_dots: bool = False,
                       act: ActQuantConfig | None = None) -> ToyExperiment:
    """Pre-train at full precision, then compare three arms on the validation set.

    * full precision, trained ``retrain_steps`` further with plain SGD
    * quantized once, no retraining
    * quantized and retrained with error feedback
    """
    quant = quant or QuantConfig()
    train, val = make_task(seed)
    model = train_full_precision(ToyModel.init(seed + 1), train, pretrain_steps, lr, batch_size, seed + 2)
    fp = train_full_precision(model, train, retrain_steps, lr, batch_size, seed + 3)
    act_cfg = (act or ActQuantConfig()) if quantize_dots else None
    baseline = quantize_then_eval(model, quant, val, act_cfg)
    cfg = TrainConfig(steps=retrain_steps, lr=lr, batch_size=batch_size, seed=seed + 3, quant=quant,
                      error_feedback=error_feedback, quantize_dots=quantize_dots,
                      act=act or ActQuantConfig())
    result = retrain(model, train, cfg, val=val)
    return ToyExperiment(
        seed=seed,
        full_precision_loss=evaluate(fp.params, val),
        no_retrain_loss=baseline["loss"],
        retrained_loss=result.final_loss,
        no_retrain=baseline,
        retrained=result,
        pretrained=model,
    )

