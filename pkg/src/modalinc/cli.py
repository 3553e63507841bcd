"""Command-line experiment runner: ``mil {generate,train,eval,report}``.

Exit codes: 0 success, 2 usage/config error, 3 I/O or data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import statistics
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from .baselines import METHODS, run_baseline, run_joint
from .config import ModelConfig, default_config_path
from .data import BenchmarkSpec, generate_benchmark, load_manifest
from .errors import ConfigError, DataError, EvaluationError, NumericalError
from .evaluation import AA_TOLERANCE, EvalReport, average_accuracy, eval_accuracy, late_fusion_accuracy
from .trainer import load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
log = logging.getLogger("modalinc")


class Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _read_json(path: str | Path, what: str) -> dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise Fail(EXIT_USAGE, f"{what} not found: {path}")
    except json.JSONDecodeError as exc:
        raise Fail(EXIT_USAGE, f"{what} {path} is not valid JSON: {exc}")


# -- generate ------------------------------------------------------------------

def cmd_generate(args: argparse.Namespace) -> int:
    fields: dict[str, Any] = _read_json(args.spec, "benchmark spec") if args.spec else {}
    fields = fields.get("benchmark", fields)
    inline = {"num_classes": args.num_classes, "seed": args.seed, "noise": args.noise, "seq_len": args.seq_len,
              "modalities": tuple(args.modalities.split(",")) if args.modalities else None}
    fields.update({k: v for k, v in inline.items() if v is not None})
    try:
        spec = BenchmarkSpec.from_dict(fields)
    except (ConfigError, TypeError) as exc:
        raise Fail(EXIT_USAGE, f"invalid benchmark spec: {exc}")
    out = Path(args.out)
    if (out / "manifest.json").exists() and not args.force:
        raise Fail(EXIT_USAGE, f"{out / 'manifest.json'} already exists; use --force to overwrite")
    try:
        generate_benchmark(spec, out, force=args.force)
    except OSError as exc:
        raise Fail(EXIT_IO, f"cannot write benchmark to {out}: {exc}")
    print(out / "manifest.json")
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def _experiment(args: argparse.Namespace) -> tuple[ModelConfig, dict[str, Any]]:
    raw = _read_json(args.config, "config") if args.config else {}
    overrides = {"epochs": args.epochs, "batch_size": args.batch_size, "learning_rate": args.lr,
                 "lambda_g": args.lambda_g, "lambda_align": args.lambda_align}
    seed = args.seed
    if seed is None and os.environ.get("MIL_SEED"):
        try:
            seed = int(os.environ["MIL_SEED"])
        except ValueError:
            raise Fail(EXIT_USAGE, f"MIL_SEED must be an integer, got {os.environ['MIL_SEED']!r}")
    overrides["seed"] = seed
    if raw:
        model_fields = dict(raw.get("model", {}))
    else:
        model_fields = json.loads(default_config_path().read_text())["model"]
    model_fields.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = ModelConfig.from_dict(model_fields)
    except (ConfigError, TypeError) as exc:
        raise Fail(EXIT_USAGE, f"invalid config: {exc}")
    return config, raw


def _dataset(args: argparse.Namespace, raw: dict[str, Any], out: Path):
    data = args.data or raw.get("data")
    if data is None and "benchmark" in raw:
        data = out / "data"
        if not (data / "manifest.json").exists():
            generate_benchmark(BenchmarkSpec.from_dict(raw["benchmark"]), data)
    if data is None:
        raise Fail(EXIT_USAGE, "no dataset: pass --data or put 'data'/'benchmark' in the config")
    return load_manifest(data)


def cmd_train(args: argparse.Namespace) -> int:
    config, raw = _experiment(args)
    method = args.method or raw.get("method", "harmony")
    if method not in (*METHODS, "jointt"):
        raise Fail(EXIT_USAGE, f"unknown method {method!r}; valid methods: {', '.join((*METHODS, 'jointt'))}")
    out = Path(args.out)
    order = args.phase_order.split(",") if args.phase_order else raw.get("phase_order")
    manifest = _dataset(args, raw, out)
    if config.num_classes != manifest.num_classes:
        log.info("setting num_classes=%d from the dataset", manifest.num_classes)
        config = config.replace(num_classes=manifest.num_classes)
    if method == "jointt":
        report = run_joint(manifest, config, order)
        (out / "reports").mkdir(parents=True, exist_ok=True)
        report.save(out / "reports" / "eval.json")
    else:
        report = run_baseline(method, manifest, config, phase_order=order, out=out)
    (out / "config.json").write_text(json.dumps(
        {"model": config.to_dict(), "method": method, "data": str(manifest.root),
         "phase_order": report.modalities}, indent=2) + "\n")
    print(report.markdown(), end="")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

def cmd_eval(args: argparse.Namespace) -> int:
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise Fail(EXIT_IO, f"checkpoint not found: {exc.filename}")
    manifest = load_manifest(args.data)
    order = args.phase_order.split(",") if args.phase_order else manifest.modality_ids
    result = {m: eval_accuracy(model, manifest.phase(m).test) for m in order}
    feats, labels = manifest.paired_test(order)
    result["a_multi"] = late_fusion_accuracy(model, feats, labels, mode=model.config.fusion)
    result["average"] = sum(result[m] for m in order) / len(order)
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# -- report --------------------------------------------------------------------

def _load_run(run: Path) -> EvalReport:
    path = run / "reports" / "eval.json" if run.is_dir() else run
    try:
        data = json.loads(path.read_text())
        report = EvalReport(**data)
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise Fail(EXIT_IO, f"run {run}: missing or corrupt report ({exc})")
    try:
        report.check(AA_TOLERANCE)
    except EvaluationError as exc:
        raise Fail(EXIT_IO, f"run {run}: report rejected: {exc}")
    return report


def comparison_rows(runs: Sequence[tuple[str, EvalReport]]) -> tuple[list[str], list[list[str]]]:
    phases = max(len(r.s_matrix) for _, r in runs)
    s_cols = [f"S{m},{n}" for m in range(1, phases + 1) for n in [m, *range(m - 1, 0, -1)]]
    header = ["run", "method", "seed", "order", *s_cols, f"AA_{phases}", "A_multi"]
    rows = []
    for name, r in runs:
        cells = []
        for m in range(1, phases + 1):
            for n in [m, *range(m - 1, 0, -1)]:
                cells.append(f"{r.s_matrix[m - 1][n - 1]:.2f}" if m <= len(r.s_matrix) else "")
        rows.append([name, r.method, "" if r.seed is None else str(r.seed), "-".join(r.modalities), *cells,
                     f"{average_accuracy(r.s_matrix, len(r.s_matrix)):.2f}",
                     "" if r.a_multi is None else f"{r.a_multi:.2f}"])
    return header, rows


def method_means(runs: Sequence[tuple[str, EvalReport]]) -> list[list[str]]:
    by_method: dict[str, list[EvalReport]] = {}
    for _, r in runs:
        by_method.setdefault(r.method, []).append(r)
    out = []
    for method, reports in by_method.items():
        aa = [r.final_aa for r in reports]
        multi = [r.a_multi for r in reports if r.a_multi is not None]
        sd = statistics.stdev(aa) if len(aa) > 1 else 0.0
        out.append([method, str(len(reports)), f"{statistics.mean(aa):.2f} ± {sd:.2f}",
                    f"{statistics.mean(multi):.2f}" if multi else ""])
    return out


def _markdown(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def cmd_report(args: argparse.Namespace) -> int:
    runs = [(Path(r).name, _load_run(Path(r))) for r in args.runs]
    header, rows = comparison_rows(runs)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header, *rows])
    md = _markdown(header, rows) + "\n" + _markdown(["method", "runs", "mean AA", "mean A_multi"], method_means(runs))
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(buf.getvalue())
        (out / "comparison.md").write_text(md)
        if args.curves:
            with open(out / "loss_curves.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["run", "phase", "modality", "epoch", "cls", "align", "total", "val_acc"])
                for run in args.runs:
                    for path in sorted(Path(run).glob("reports/train_phase*.json")):
                        tr = json.loads(path.read_text())
                        for e in tr["epochs"]:
                            writer.writerow([Path(run).name, tr["phase"], tr["modality"], e["epoch"], e["cls"],
                                             e["align"], e["total"], e["val_acc"]])
    print(md, end="")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mil", description="Modality-incremental learning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic benchmark")
    g.add_argument("--spec", help="JSON benchmark spec")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    g.add_argument("--num-classes", type=int)
    g.add_argument("--modalities", help="comma-separated modality ids")
    g.add_argument("--seq-len", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the phase sequence for one method")
    t.add_argument("--config", help="JSON experiment config (defaults to the packaged config)")
    t.add_argument("--data", help="dataset directory or manifest.json")
    t.add_argument("--method", help=f"one of {', '.join((*METHODS, 'jointt'))}")
    t.add_argument("--phase-order", help="comma-separated modality ids")
    t.add_argument("--seed", type=int, help="defaults to $MIL_SEED, then the config seed")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lambda-g", type=float)
    t.add_argument("--lambda-align", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on every modality")
    e.add_argument("--checkpoint", required=True, help="checkpoint path without suffix")
    e.add_argument("--data", required=True)
    e.add_argument("--phase-order")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="compare finished runs")
    r.add_argument("runs", nargs="+", help="run directories (or eval.json files)")
    r.add_argument("--out")
    r.add_argument("--curves", action="store_true", help="also write per-epoch loss curves")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Fail as exc:
        print(f"mil {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"mil {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, EvaluationError, OSError) as exc:
        print(f"mil {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"mil {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
