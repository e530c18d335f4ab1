"""``logquant`` command line: quantize, dequantize, inspect, compare, train-toy.

Exit codes: 0 success, 1 usage, 2 format/IO, 3 degenerate data, 4 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .codec import QuantConfig, QuantizedTensor, ScaleStrategy, encode, linear_encode, linear_sse, quantization_sse
from .container import (
    ModelContainer,
    build_container,
    compression_report,
    dequantize_model,
    read_container,
    write_container,
)
from .errors import (
    DataError,
    DegenerateError,
    DomainError,
    FormatError,
    IoError,
    TrainingError,
    ValidationError,
)
from .qdot import ActQuantConfig
from .retrain import (
    ToyModel,
    TrainConfig,
    evaluate,
    make_task,
    quantize_then_eval,
    retrain,
    train_full_precision,
)
from .scale import max_scale, select_scale
from .tensor_store import Tensor, array_stats, load_archive

log = logging.getLogger("logquant")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_DEGENERATE, EXIT_TRAINING = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bits(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid bit width {text!r}") from None
    if not 1 <= value <= 8:
        raise argparse.ArgumentTypeError(f"bits must be in [1, 8], got {value}")
    return value


def _positive(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number {text!r}") from None
    if not value > 0 or value == float("inf"):
        raise argparse.ArgumentTypeError(f"value must be > 0, got {text}")
    return value


def _quant_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bits", type=_bits, default=4, help="bits per value, 1-8 (default 4)")
    p.add_argument("--scale", choices=("em", "max", "fixed"), default="em", help="scale strategy")
    p.add_argument("--scale-value", type=_positive, default=None, help="scale for --scale fixed (default 1)")
    p.add_argument("--keep-biases", action=argparse.BooleanOptionalAction, default=True,
                   help="store bias tensors in full precision")
    p.add_argument("--bias-rule", default="bias", metavar="SUBSTR", help="names containing SUBSTR are biases")


def _report_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--report", choices=("text", "json"), default="text")
    p.add_argument("--figures", metavar="DIR", default=None, help="also render PNG figures into DIR")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="logquant", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("quantize", help="quantize a .lqta archive into a .lqnm container")
    p.add_argument("input")
    p.add_argument("output")
    _quant_options(p)
    _report_options(p)

    p = sub.add_parser("dequantize", help="decode a .lqnm container back into a .lqta archive")
    p.add_argument("input")
    p.add_argument("output")
    _report_options(p)

    p = sub.add_parser("inspect", help="per-tensor statistics of a .lqta or .lqnm file")
    p.add_argument("input")
    p.add_argument("--bias-rule", default="bias", metavar="SUBSTR")
    _report_options(p)

    p = sub.add_parser("compare", help="squared error of log and fixed-point quantizers")
    p.add_argument("input")
    _quant_options(p)
    _report_options(p)

    p = sub.add_parser("train-toy", help="error-feedback retraining demo on a synthetic task")
    _quant_options(p)
    p.add_argument("--quantize-dots", action="store_true", help="log-quantize matmul inputs on the fly")
    p.add_argument("--act-scale", choices=("max", "fixed"), default="max")
    p.add_argument("--act-scale-value", type=_positive, default=None)
    p.add_argument("--ef", action=argparse.BooleanOptionalAction, default=True, help="error feedback")
    p.add_argument("--no-retrain", action="store_true", help="only quantize the pre-trained model")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--pretrain-steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=_positive, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="toy.lqnm", help="final quantized model (default toy.lqnm)")
    p.add_argument("--metrics", default=None, help="write the per-step metric stream here instead of stdout")
    _report_options(p)
    return parser


def quant_config(args) -> QuantConfig:
    if args.scale != "fixed" and args.scale_value is not None:
        raise UsageError("--scale-value only applies to --scale fixed")
    strategy = ScaleStrategy.fixed(args.scale_value or 1.0) if args.scale == "fixed" else ScaleStrategy(args.scale)
    return QuantConfig(bits=args.bits, scale_strategy=strategy, keep_biases=args.keep_biases,
                       bias_rule=args.bias_rule)


def _check_input(path) -> None:
    if not Path(path).is_file():
        raise IoError(f"input file not found: {path}")


def _check_output(path) -> None:
    parent = Path(path).resolve().parent
    if Path(path).is_dir() or not parent.is_dir() or not os.access(parent, os.W_OK):
        raise IoError(f"output path is not writable: {path}")


def _emit(report: dict, args, render_text) -> None:
    if args.report == "json":
        print(json.dumps(report, indent=2))
    else:
        print(render_text(report))


def _fmt(x) -> str:
    if x is None:
        return "n/a"
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def _table(rows: list[dict], columns: list[str]) -> str:
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


# --- quantize ---------------------------------------------------------------

def cmd_quantize(args) -> int:
    cfg = quant_config(args)
    _check_input(args.input)
    _check_output(args.output)
    archive = load_archive(args.input)
    container, reports = build_container(archive, cfg)
    report = write_container(container, args.output)
    rows = []
    for name, orig, comp in report.per_tensor:
        row = {"name": name, "original": orig, "compressed": comp, "ratio": orig / comp}
        if name in container.quantized:
            row.update(kind="log", scale=container.quantized[name].scale,
                       em_iterations=reports[name].iterations if name in reports else None)
        else:
            row.update(kind="raw", scale=None, em_iterations=None)
        rows.append(row)
    out = {
        "command": "quantize",
        "bits": cfg.bits,
        "scale_strategy": str(cfg.scale_strategy),
        "keep_biases": cfg.keep_biases,
        "original_bytes": report.original_bytes,
        "payload_bytes": report.compressed_bytes,
        "payload_ratio": report.ratio,
        "file_bytes": report.file_bytes,
        "file_ratio": report.file_ratio,
        "tensors": rows,
    }
    if args.figures:
        from .plotting import plot_ratios
        plot_ratios(rows, Path(args.figures) / "compression_ratios.png")

    def text(r):
        head = (f"bits={r['bits']} scale={r['scale_strategy']} keep_biases={r['keep_biases']}\n"
                f"payload: {r['original_bytes']} -> {r['payload_bytes']} bytes ({r['payload_ratio']:.4f}x)\n"
                f"file:    {r['original_bytes']} -> {r['file_bytes']} bytes ({r['file_ratio']:.4f}x)")
        return head + "\n" + _table(r["tensors"], ["name", "kind", "original", "compressed", "ratio", "scale",
                                                   "em_iterations"])
    _emit(out, args, text)
    return EXIT_OK


# --- dequantize -------------------------------------------------------------

def cmd_dequantize(args) -> int:
    _check_input(args.input)
    _check_output(args.output)
    dequantize_model(args.input, args.output)
    out = {"command": "dequantize", "input": args.input, "output": args.output}
    _emit(out, args, lambda r: f"wrote {r['output']}")
    return EXIT_OK


# --- inspect ----------------------------------------------------------------

def _stats_row(name, values, **extra) -> dict:
    s = array_stats(values)
    return {"name": name, **extra, "count": s.count, "min": s.min, "max": s.max, "mean": s.mean,
            "stddev": s.stddev}


def _aggregate(groups: dict[str, list[np.ndarray]], total: int) -> dict:
    agg = {}
    for label, chunks in groups.items():
        if chunks:
            values = np.concatenate(chunks)
            agg[label] = {"count": int(values.size), "fraction": values.size / total,
                          "stddev": array_stats(values).stddev}
        else:
            agg[label] = {"count": 0, "fraction": 0.0, "stddev": None}
    return agg


def cmd_inspect(args) -> int:
    _check_input(args.input)
    with open(args.input, "rb") as fh:
        magic = fh.read(4)
    rows, groups = [], {"bias": [], "weight": []}
    out: dict = {"command": "inspect", "input": args.input}
    if magic == b"LQNM":
        container = read_container(args.input)
        report = compression_report(container, Path(args.input).stat().st_size)
        for name in container.names():
            if name in container.quantized:
                qt = container.quantized[name]
                values = qt.values()
                rows.append(_stats_row(name, values, kind="log", bits=qt.bits, scale=qt.scale))
            else:
                values = container.passthrough[name].data
                rows.append(_stats_row(name, values, kind="raw", bits=32, scale=None))
            groups["bias" if args.bias_rule in name or name in container.passthrough else "weight"].append(
                np.asarray(values, dtype=np.float64))
        out.update(format="lqnm", bits=container.config.bits, keep_biases=container.config.keep_biases,
                   payload_ratio=report.ratio, file_ratio=report.file_ratio)
        total = sum(r["count"] for r in rows)
    else:
        archive = load_archive(args.input)
        for name, t in archive.items():
            rows.append(_stats_row(name, t.data, kind="bias" if args.bias_rule in name else "weight",
                                   shape=list(t.shape)))
            groups["bias" if args.bias_rule in name else "weight"].append(t.data.astype(np.float64))
        out["format"] = "lqta"
        total = archive.parameter_count
    out["parameters"] = total
    out["aggregate"] = _aggregate(groups, total)
    out["tensors"] = rows
    if args.figures:
        from .plotting import plot_value_histograms
        plot_value_histograms({k: np.concatenate(v) if v else np.array([]) for k, v in groups.items()},
                              Path(args.figures) / "value_histograms.png")

    def text(r):
        lines = [f"format={r['format']} parameters={r['parameters']}"]
        if r["format"] == "lqnm":
            lines.append(f"bits={r['bits']} payload_ratio={r['payload_ratio']:.4f}x file_ratio={r['file_ratio']:.4f}x")
        for label, a in r["aggregate"].items():
            lines.append(f"{label}: count={a['count']} fraction={100 * a['fraction']:.4g}% stddev={_fmt(a['stddev'])}")
        cols = ["name", "kind", "count", "min", "max", "mean", "stddev"]
        if r["format"] == "lqnm":
            cols[2:2] = ["bits", "scale"]
        lines.append(_table(r["tensors"], cols))
        return "\n".join(lines)
    _emit(out, args, text)
    return EXIT_OK


# --- compare ----------------------------------------------------------------

STRATEGIES = ("log+em", "log+max", "log+fixed", "linear+max")


def compare_archive(archive, cfg: QuantConfig, fixed_value: float = 1.0) -> dict:
    """Per-tensor squared error of each strategy over the tensors ``cfg`` quantizes."""
    rows = []
    totals: dict[str, float | None] = {s: 0.0 for s in STRATEGIES}
    for name, t in archive.items():
        if cfg.passthrough(name):
            continue
        row = {"name": name, "count": t.size}
        for strategy, kind in (("log+em", "em"), ("log+max", "max")):
            scale, _ = select_scale(t, ScaleStrategy(kind), cfg.bits)
            row[strategy] = quantization_sse(t, encode(t, scale, cfg.bits))
        row["log+fixed"] = quantization_sse(t, encode(t, fixed_value, cfg.bits))
        try:
            row["linear+max"] = linear_sse(t, linear_encode(t, max_scale(t), cfg.bits))
        except DomainError:
            row["linear+max"] = None
        for s in STRATEGIES:
            totals[s] = None if totals[s] is None or row[s] is None else totals[s] + row[s]
        rows.append(row)
    return {"bits": cfg.bits, "totals": totals, "tensors": rows}


def cmd_compare(args) -> int:
    cfg = quant_config(args)
    _check_input(args.input)
    archive = load_archive(args.input)
    out = {"command": "compare", **compare_archive(archive, cfg, args.scale_value or 1.0)}
    if args.figures:
        from .plotting import plot_sse_comparison
        plot_sse_comparison(out["totals"], Path(args.figures) / "sse_comparison.png")

    def text(r):
        lines = [f"bits={r['bits']}"]
        lines += [f"total {s}: {_fmt(v)}" for s, v in r["totals"].items()]
        lines.append(_table(r["tensors"], ["name", "count", *STRATEGIES]))
        return "\n".join(lines)
    _emit(out, args, text)
    return EXIT_OK


# --- train-toy --------------------------------------------------------------

def _params_container(params, cfg: QuantConfig) -> ModelContainer:
    quantized = {n: p for n, p in params.items() if isinstance(p, QuantizedTensor)}
    raw = {n: Tensor.from_array(n, p) for n, p in params.items() if not isinstance(p, QuantizedTensor)}
    return ModelContainer(cfg, quantized, raw)


def cmd_train_toy(args) -> int:
    cfg = quant_config(args)
    if args.steps < 1 or args.pretrain_steps < 0 or args.batch_size < 1:
        raise UsageError("--steps and --batch-size must be >= 1, --pretrain-steps >= 0")
    if args.act_scale != "fixed" and args.act_scale_value is not None:
        raise UsageError("--act-scale-value only applies to --act-scale fixed")
    act = ActQuantConfig(cfg.bits, ScaleStrategy.fixed(args.act_scale_value or 1.0)
                         if args.act_scale == "fixed" else ScaleStrategy("max"))
    _check_output(args.out)
    if args.metrics:
        _check_output(args.metrics)

    train, val = make_task(args.seed)
    model = ToyModel.init(args.seed + 1)
    if args.pretrain_steps:
        model = train_full_precision(model, train, args.pretrain_steps, args.lr, args.batch_size, args.seed + 2)
    act_cfg = act if args.quantize_dots else None
    baseline = quantize_then_eval(model, cfg, val, act_cfg)
    summary = {"full_precision_loss": evaluate(model.params, val), "no_retrain_loss": baseline["loss"],
               "no_retrain_sse": baseline["sse"]}

    if args.no_retrain:
        records = []
        params = baseline["params"]
    else:
        tcfg = TrainConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=args.seed + 3,
                           quant=cfg, error_feedback=args.ef, quantize_dots=args.quantize_dots, act=act)
        result = retrain(model, train, tcfg, val=val)
        records = result.records
        params = result.params
        summary["retrained_loss"] = result.final_loss

    if args.report == "json":
        lines = [json.dumps(r) for r in records] or [json.dumps({"step": None, **summary})]
    else:
        lines = [f"{r['step']} {r['loss']!r} {r['sse']!r} {r['scale_iters']}" for r in records]
        lines = (["step loss sse scale_iters"] + lines) if records else [
            " ".join(f"{k}={v!r}" for k, v in summary.items())]
    stream = "\n".join(lines) + "\n"
    if args.metrics:
        try:
            Path(args.metrics).write_text(stream)
        except OSError as exc:
            raise IoError(f"cannot write {args.metrics}: {exc}") from exc
    else:
        sys.stdout.write(stream)

    write_container(_params_container(params, cfg), args.out)
    if args.figures and records:
        from .plotting import plot_loss_trace
        plot_loss_trace(records, Path(args.figures) / "loss_trace.png")
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "quantize": cmd_quantize,
    "dequantize": cmd_dequantize,
    "inspect": cmd_inspect,
    "compare": cmd_compare,
    "train-toy": cmd_train_toy,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ValidationError, DomainError) as exc:
        print(f"logquant: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DegenerateError as exc:
        print(f"logquant: degenerate tensor: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (FormatError, IoError, DataError) as exc:
        print(f"logquant: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingError as exc:
        print(f"logquant: training failed at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
