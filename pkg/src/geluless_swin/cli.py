"""Command-line entry point.

Exit codes: 0 success, 1 contract/usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, checkpoint, container, data
from .config import RunConfig
from .distill import eval_accuracy, gelu_replace_distill, train_teacher
from .errors import SwinQuantError
from .quant import Mode, QuantSwinModel, calibrate_activations, fused_op_inventory, quantize_model
from .swin import init_model

log = logging.getLogger("geluless_swin")


class UsageError(SwinQuantError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg = replace(cfg, distill=replace(cfg.distill, seed=cfg.seed))
    if getattr(args, "iters", None) is not None:
        cfg = replace(cfg, bench=replace(cfg.bench, iters=args.iters))
    if getattr(args, "warmup", None) is not None:
        cfg = replace(cfg, bench=replace(cfg.bench, warmup=args.warmup))
    return cfg


def _load_split(data_dir, split: str) -> data.Dataset:
    return checkpoint.dataset_from_tensors(container.load(Path(data_dir) / f"{split}.swq"))


def _write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def cmd_gen_data(args, cfg: RunConfig):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = cfg.model
    train, evaluation = data.generate_split(cfg.seed, cfg.data.n_train, cfg.data.n_eval, m.image_size, m.in_chans)
    container.save(out / "train.swq", checkpoint.dataset_to_tensors(train))
    container.save(out / "eval.swq", checkpoint.dataset_to_tensors(evaluation))
    print(f"wrote {len(train)} train / {len(evaluation)} eval images to {out}")


def cmd_train_teacher(args, cfg: RunConfig):
    train = _load_split(args.data, "train")
    evaluation = _load_split(args.data, "eval")
    model = init_model(cfg.model, seed=cfg.seed)
    t = cfg.teacher
    train_teacher(model, train, t.epochs, t.learning_rate, t.momentum, t.batch_size, seed=cfg.seed, log=log.info)
    checkpoint.save_model(args.out, model)
    acc = eval_accuracy(model, evaluation, cfg.eval_batch_size)
    print(f"teacher eval accuracy {acc:.4f} -> {args.out}")


def cmd_distill(args, cfg: RunConfig):
    teacher = checkpoint.load_any_model(args.teacher)
    if isinstance(teacher, QuantSwinModel):
        raise UsageError("distill needs a float teacher checkpoint")
    train = _load_split(args.data, "train")
    evaluation = _load_split(args.data, "eval")
    student, history = gelu_replace_distill(teacher, train, cfg.distill, evaluation, log=log.info)
    checkpoint.save_model(args.out, student)
    log_path = args.log or str(Path(args.out).with_suffix("")) + "_distill_log.csv"
    _write(log_path, history.to_csv())
    print(f"distilled {len(history)} blocks; final eval accuracy {history.epochs[-1].eval_acc:.4f} -> {args.out}")


def cmd_calibrate(args, cfg: RunConfig):
    model = checkpoint.load_any_model(args.model)
    if isinstance(model, QuantSwinModel):
        raise UsageError("calibrate needs a float checkpoint")
    train = _load_split(args.data, "train")
    n = min(cfg.calib.num_samples, len(train))
    bs = cfg.calib.batch_size
    record = calibrate_activations(model, (train.images[i : min(i + bs, n)] for i in range(0, n, bs)))
    container.save(args.out, checkpoint.record_to_tensors(record))
    print(f"calibrated {len(record.maxabs)} activation sites over {n} images -> {args.out}")


def cmd_quantize(args, cfg: RunConfig):
    model = checkpoint.load_any_model(args.model)
    if isinstance(model, QuantSwinModel):
        raise UsageError("quantize needs a float checkpoint")
    record = checkpoint.record_from_tensors(container.load(args.calib))
    qmodel = quantize_model(model, record, Mode(args.mode))
    checkpoint.save_model(args.out, qmodel)
    print(f"quantized ({qmodel.mode.value}, {len(fused_op_inventory(qmodel))} fused ops) -> {args.out}")


def cmd_eval(args, cfg: RunConfig):
    model = checkpoint.load_any_model(args.model)
    ds = _load_split(args.data, args.split)
    acc = eval_accuracy(model, ds, cfg.eval_batch_size)
    kind = model.mode.value if isinstance(model, QuantSwinModel) else "float32"
    print(f"{kind} accuracy on {args.split}: {acc:.4f}")
    if args.out:
        _write(args.out, json.dumps(cfg.meta(model=str(args.model), kind=kind) | {"accuracy": acc}, indent=2))


def _bench_batch(args, cfg: RunConfig) -> np.ndarray:
    return _load_split(args.data, "eval").images[: cfg.bench.batch_size]


def cmd_bench(args, cfg: RunConfig):
    float_model = checkpoint.load_any_model(args.float)
    q_std = checkpoint.load_any_model(args.standard)
    q_gl = checkpoint.load_any_model(args.geluless)
    if not isinstance(q_std, QuantSwinModel) or q_std.mode is not Mode.STANDARD:
        raise UsageError("--standard must be a standard-mode quantized checkpoint")
    if not isinstance(q_gl, QuantSwinModel) or q_gl.mode is not Mode.GELU_LESS:
        raise UsageError("--geluless must be a gelu-less quantized checkpoint")
    evaluation = _load_split(args.data, "eval")
    batch = _bench_batch(args, cfg)
    b = cfg.bench
    table = bench.compare_modes(float_model, q_std, q_gl, batch, evaluation, b.warmup, b.iters)
    trials = bench.paired_trials(q_std, q_gl, batch, b.trials, b.trial_iters)
    out = Path(args.out)
    meta = cfg.meta(warmup=b.warmup, iters=b.iters, batch_size=len(batch))
    _write(out / "bench.csv", table.to_csv())
    doc = json.loads(table.to_json(meta))
    doc["paired_trials"] = {"geluless_wins": trials.wins, "trials": trials.trials, "iters_per_trial": b.trial_iters}
    _write(out / "bench.json", json.dumps(doc, indent=2))
    print(table.to_csv(), end="")
    print(f"gelu-less faster in {trials.wins}/{trials.trials} paired trials")


def cmd_ablate(args, cfg: RunConfig):
    qmodel = checkpoint.load_any_model(args.model)
    if not isinstance(qmodel, QuantSwinModel) or qmodel.mode is not Mode.STANDARD:
        raise UsageError("ablate needs a standard-mode quantized checkpoint")
    batch = _bench_batch(args, cfg)
    b = cfg.bench
    report = bench.ablate_fused_ops(qmodel, batch, b.warmup, b.iters)
    out = Path(args.out)
    _write(out / "ablation.csv", report.to_csv())
    _write(out / "ablation.json", report.to_json(cfg.meta(warmup=b.warmup, iters=b.iters, batch_size=len(batch))))
    print(report.to_csv(), end="")


def _csv_rows(path: Path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args, cfg: RunConfig):
    src = Path(args.dir)
    lines = ["# GELU-less SWIN reproduction report", ""]
    lines += ["## Reference speedups recomputed from the RTX 4090 latency columns", ""]
    lines += ["| model | " + " | ".join(bench.REFERENCE_VARIANTS) + " |", "|---" * (len(bench.REFERENCE_VARIANTS) + 1) + "|"]
    for name in bench.REFERENCE_MODEL_LATENCY_MS:
        t = bench.reference_speedup_table(name)
        lines.append(f"| {name} | " + " | ".join(f"x{r.speedup:.2f}" for r in t.rows) + " |")
    lines.append("")
    summary = {"reference_speedups": {n: [r.speedup for r in bench.reference_speedup_table(n).rows]
                                  for n in bench.REFERENCE_MODEL_LATENCY_MS}}
    if (src / "bench.csv").exists():
        rows = _csv_rows(src / "bench.csv")
        lines += ["## Toy model: latency and accuracy", "", "| variant | mean ms | speedup | accuracy |", "|---|---|---|---|"]
        lines += [f"| {r['variant']} | {r['mean_ms']} | x{r['speedup']} | {r['accuracy']} |" for r in rows]
        lines.append("")
        summary["bench"] = rows
    if (src / "ablation.csv").exists():
        rows = _csv_rows(src / "ablation.csv")
        rows.sort(key=lambda r: float(r["delta_ms"]), reverse=True)
        lines += ["## Fused-op ablation (largest first)", "", "| fused op | delta ms |", "|---|---|"]
        lines += [f"| {r['fused_op']} | {r['delta_ms']} |" for r in rows]
        lines.append("")
        summary["ablation"] = rows
    for log_file in sorted(src.glob("*distill_log.csv")):
        rows = _csv_rows(log_file)
        lines += [f"## Distillation log ({log_file.name})", "", "| epoch | block | kd loss | eval acc |", "|---|---|---|---|"]
        lines += [f"| {r['epoch']} | {r['block']} | {r['mean_kd_loss']} | {r['eval_acc']} |" for r in rows]
        lines.append("")
        summary.setdefault("distill", {})[log_file.name] = rows
    out = Path(args.out) if args.out else src / "report.md"
    _write(out, "\n".join(lines))
    _write(out.with_suffix(".json"), json.dumps({"meta": cfg.meta(), **summary}, indent=2))
    print(f"report -> {out}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="geluless-swin", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate the toy train/eval containers")
    p.add_argument("--out", default="data")

    p = add("train-teacher", cmd_train_teacher, "train the float GELU teacher")
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="teacher.swq")

    p = add("distill", cmd_distill, "GELU->ReLU replacement with per-block KD")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="student.swq")
    p.add_argument("--log", default=None, help="distillation log CSV (default: <out>_distill_log.csv)")

    p = add("calibrate", cmd_calibrate, "max-abs activation calibration")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="calib.swq")

    p = add("quantize", cmd_quantize, "int8 post-training quantization")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.STANDARD.value)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "top-1 accuracy of a float or quantized checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default="data")
    p.add_argument("--split", choices=["train", "eval"], default="eval")
    p.add_argument("--out", default=None)

    p = add("bench", cmd_bench, "float vs int8 standard vs int8 gelu-less latency table")
    p.add_argument("--float", required=True)
    p.add_argument("--standard", required=True)
    p.add_argument("--geluless", required=True)
    p.add_argument("--data", default="data")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--out", default="reports")

    p = add("ablate", cmd_ablate, "per-fused-op latency by removal")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default="data")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--out", default="reports")

    p = add("report", cmd_report, "collect CSVs into a markdown/JSON report")
    p.add_argument("--dir", default="reports")
    p.add_argument("--out", default=None)
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _load_config(args)
        args.func(args, cfg)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except (SwinQuantError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
