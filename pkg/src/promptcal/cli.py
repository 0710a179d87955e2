"""Command-line entry point.

Exit codes: 0 success, 1 computation failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as A
from . import losses as L
from .clip_sim import PromptModel, build_task, export_embeddings_csv
from .config import ConfigError, RunConfig, dump_config, from_dict, load_config
from .io import FormatError, dumps, file_digest, read_checkpoint, read_logits_csv, write_checkpoint, \
    write_json, write_jsonl, write_logits_csv
from .metrics import BinningConfig, fit_temperature, report_from_logits, softmax
from .trainer import TrainingDiverged, evaluate, train

DEFAULTS_HELP = """\
defaults:
  metrics      bins = 15, scheme = equal_width
  losses       alpha = 0.1, beta = 0.01, lambda_margin = 1, lambda_mom = 5, tau = 30
  training     lr = 0.005, batch = 8, epochs = 50, variance = population
  temperature  golden-section on ln T in [-5, 5], 200 iterations
  sweeps       seeds 0..9, shots {4, 8, 16, 32}, n_eval = 200 per class
"""


class UsageError(Exception):
    pass


# -- helpers --------------------------------------------------------------------


def _emit(obj) -> None:
    sys.stdout.write(dumps(obj) + "\n")


def _manifest(out: Path, command: str, cfg: RunConfig | None, artifacts: list[str], seed=None, extra=None) -> None:
    manifest = {
        "command": command,
        "config_hash": cfg.digest() if cfg is not None else None,
        "seed": seed if seed is not None else (cfg.seed if cfg is not None else None),
        "artifacts": [{"path": a, "sha256": file_digest(out / a)} for a in sorted(artifacts)],
        "version": __version__,
    }
    if extra:
        manifest.update(extra)
    write_json(out / "manifest.json", manifest)


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_logits(path: str):
    try:
        return read_logits_csv(Path(path))
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


def _rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = _io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (format(v, ".17g") if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _write_pair(out: Path, name: str, obj, rows: list[dict]) -> list[str]:
    write_json(out / f"{name}.json", obj)
    (out / f"{name}.csv").write_text(_rows_to_csv(rows), encoding="utf-8", newline="\n")
    return [f"{name}.json", f"{name}.csv"]


# -- commands --------------------------------------------------------------------


def cmd_metrics(args) -> int:
    logits, labels = _load_logits(args.logits)
    report = report_from_logits(logits, labels, BinningConfig(args.bins, args.scheme))
    _emit(report.to_dict(percent=args.percent))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args.out)
    task = build_task(cfg.task, cfg.seed)
    tcfg = cfg.train_config()
    digest_before = task.anchor_digest()
    model, log = train(PromptModel.from_task(task), task, tcfg)
    if task.anchor_digest() != digest_before:
        raise RuntimeError("frozen anchors changed during training")
    write_jsonl(out / "train_log.jsonl", (r.to_dict() for r in log.records))
    write_checkpoint(out, model.context, {
        "seed": cfg.seed,
        "config_hash": cfg.digest(),
        "step": len(log.records),
        "config": cfg.to_dict(),
    })
    summary = {**log.summary(), "rho_quantiles_10_50_90": log.rho_quantiles(),
               "rho_reference_10_50_90": L.REFERENCE_RATIO_QUANTILES}
    for split in ("base", "novel"):
        res = evaluate(model, task, split, cfg.experiment.n_eval, cfg.seed, tcfg.weights.tau, cfg.metrics)
        summary[split] = res.summary()
    write_json(out / "summary.json", summary)
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8", newline="\n")
    _manifest(out, "train", cfg, ["train_log.jsonl", "context.csv", "context.json", "summary.json", "config.yaml"])
    _emit(summary)
    return 0


def _load_checkpoint(path: str) -> tuple[RunConfig, np.ndarray]:
    try:
        context, sidecar = read_checkpoint(Path(path))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from None
    cfg = from_dict(sidecar.get("config"))
    if cfg.digest() != sidecar.get("config_hash"):
        raise UsageError("checkpoint config hash mismatch")
    return cfg, context


def cmd_eval(args) -> int:
    cfg, context = _load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    task = build_task(cfg.task, cfg.seed)
    model = PromptModel(context, task.encoder, task.class_tokens)
    res = evaluate(model, task, args.split, args.n_eval or cfg.experiment.n_eval, cfg.seed,
                   cfg.train.weights.tau, cfg.metrics)
    prefix = args.split
    write_json(out / f"{prefix}_report.json", res.report.to_dict())
    write_logits_csv(out / f"{prefix}_logits.csv", res.logits, res.labels)
    tuned = model.forward(res.class_ids).embeddings
    (out / f"{prefix}_tuned_embeddings.csv").write_text(export_embeddings_csv(tuned, res.class_ids), encoding="utf-8")
    (out / f"{prefix}_frozen_embeddings.csv").write_text(
        export_embeddings_csv(task.anchors[res.class_ids], res.class_ids), encoding="utf-8")
    summary = {"split": args.split, **res.summary()}
    write_json(out / f"{prefix}_summary.json", summary)
    _manifest(out, "eval", cfg, [f"{prefix}_{n}" for n in ("report.json", "logits.csv", "tuned_embeddings.csv",
                                                            "frozen_embeddings.csv", "summary.json")])
    _emit(summary)
    return 0


def cmd_temp_scale(args) -> int:
    val_z, val_y = _load_logits(args.val)
    fit = fit_temperature(val_z, val_y)
    result = {"fit": fit.to_dict()}
    if args.test:
        test_z, test_y = _load_logits(args.test)
        binning = BinningConfig(args.bins)
        result["test_before"] = report_from_logits(test_z, test_y, binning).to_dict(args.percent)
        result["test_after"] = report_from_logits(test_z / fit.temperature, test_y, binning).to_dict(args.percent)
    if args.out:
        out = _out_dir(args.out)
        write_json(out / "temperature.json", result)
        _manifest(out, "temp-scale", None, ["temperature.json"])
    _emit(result)
    return 0


def _read_embeddings(path: str) -> np.ndarray:
    try:
        rows = Path(path).read_text(encoding="utf-8").strip().split("\n")
        return np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read embeddings {path}: {exc}") from None


def cmd_analyze(args) -> int:
    out = _out_dir(args.out) if args.out else None
    artifacts: list[str] = []
    if args.kind in ("ecdf", "errors"):
        if not args.logits:
            raise UsageError(f"--kind {args.kind} needs --logits")
        logits, labels = _load_logits(args.logits)
        if args.kind == "ecdf":
            stats = L.margins(logits, labels)
            ecdf = A.margin_ecdf(stats.margins)
            result = {"box": A.box_stats(stats.margins), "mean": stats.mean, "variance": stats.variance,
                      "ecdf": ecdf.to_rows()}
            rows = ecdf.to_rows()
        else:
            counts = A.error_confidence_histogram(softmax(logits), labels, args.bins)
            edges = np.arange(args.bins + 1) / args.bins
            rows = [{"lower": float(edges[b]), "upper": float(edges[b + 1]), "errors": int(c)}
                    for b, c in enumerate(counts)]
            result = {"bins": rows, "total_errors": int(counts.sum())}
    elif args.kind == "correlation":
        if not args.runs:
            raise UsageError("--kind correlation needs --runs")
        try:
            runs = json.loads(Path(args.runs).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read runs {args.runs}: {exc}") from None
        if isinstance(runs, dict) and "records" in runs:
            key = "margin_var_" + args.split
            runs = [{"margin_variance": r[key], "ece": r["ece_" + args.split]} for r in runs["records"]]
        r = A.variability_ece_correlation(runs, args.method)
        result = {"method": args.method, "r": r, "n": len(runs)}
        rows = [{"margin_variance": float(x["margin_variance"]), "ece": float(x["ece"])} for x in runs]
    else:
        if not (args.tuned and args.frozen):
            raise UsageError("--kind moments needs --tuned and --frozen")
        tuned, frozen = _read_embeddings(args.tuned), _read_embeddings(args.frozen)
        mom = L.moment_loss(tuned, frozen)
        result = {"drift_mu": mom.parts["mu"].value, "drift_sigma": mom.parts["sigma"].value,
                  "drift_total": mom.value}
        rows = [result]
    if out is not None:
        artifacts = _write_pair(out, args.kind, result, rows)
        _manifest(out, f"analyze:{args.kind}", None, artifacts)
    _emit(result)
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args.out)
    tcfg = cfg.train_config()
    exp = cfg.experiment
    if args.kind == "shots":
        res = A.shots_sweep(cfg.task, tcfg, exp.shots, exp.seeds, n_eval=exp.n_eval)
    elif args.kind == "init":
        res = A.init_robustness_sweep(cfg.task, tcfg, exp.templates, exp.seeds, n_eval=exp.n_eval)
    else:
        res = A.ablation_suite(cfg.task, tcfg, exp.seeds, n_eval=exp.n_eval)
    payload = res.to_dict()
    artifacts = _write_pair(out, args.kind, payload, res.medians())
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8", newline="\n")
    artifacts.append("config.yaml")
    _manifest(out, f"experiment:{args.kind}", cfg, artifacts, extra={"seeds": list(exp.seeds)})
    _print_table(res.medians(), args.percent)
    return 0


def _print_table(rows: list[dict], percent: bool) -> None:
    scale = 100.0 if percent else 1.0
    head = f"{'value':<24}{'method':<12}" + "".join(f"{k:>12}" for k in A.METRIC_KEYS)
    print(head)
    for r in rows:
        print(f"{str(r['value']):<24}{r['method']:<12}" + "".join(f"{r[k] * scale:>12.4f}" for k in A.METRIC_KEYS))


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="promptcal", description="Calibration regularizers for prompt tuning.",
                                epilog=DEFAULTS_HELP, formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("metrics", help="calibration report for a logits CSV", epilog=DEFAULTS_HELP, formatter_class=fmt)
    m.add_argument("--logits", required=True, help="CSV with header label,z0,...,z{K-1}")
    m.add_argument("--bins", type=int, default=15, help="number of bins (default 15)")
    m.add_argument("--scheme", choices=("equal_width", "equal_mass"), default="equal_width")
    m.add_argument("--percent", action="store_true", help="report ece/mce/ace/accuracy x100")
    m.set_defaults(func=cmd_metrics)

    t = sub.add_parser("train", help="tune the prompt on a synthetic task", epilog=DEFAULTS_HELP, formatter_class=fmt)
    t.add_argument("--config", help="YAML run config (defaults if omitted)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split", epilog=DEFAULTS_HELP, formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="directory containing context.csv/context.json")
    e.add_argument("--split", choices=("base", "novel"), default="base")
    e.add_argument("--n-eval", type=int, default=None, help="images per class (default from config: 200)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    ts = sub.add_parser("temp-scale", help="fit a temperature on validation logits", epilog=DEFAULTS_HELP,
                        formatter_class=fmt)
    ts.add_argument("--val", required=True)
    ts.add_argument("--test")
    ts.add_argument("--bins", type=int, default=15)
    ts.add_argument("--percent", action="store_true")
    ts.add_argument("--out")
    ts.set_defaults(func=cmd_temp_scale)

    a = sub.add_parser("analyze", help="margin ECDF, error histogram, correlation or moment drift",
                       epilog=DEFAULTS_HELP, formatter_class=fmt)
    a.add_argument("--kind", choices=("ecdf", "errors", "correlation", "moments"), required=True)
    a.add_argument("--logits")
    a.add_argument("--bins", type=int, default=15)
    a.add_argument("--runs", help="JSON list of {margin_variance, ece} or a sweep JSON")
    a.add_argument("--split", choices=("base", "novel"), default="base")
    a.add_argument("--method", choices=("pearson", "spearman"), default="pearson")
    a.add_argument("--tuned")
    a.add_argument("--frozen")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    x = sub.add_parser("experiment", help="multi-seed sweeps", epilog=DEFAULTS_HELP, formatter_class=fmt)
    x.add_argument("--kind", choices=("shots", "init", "ablation"), required=True)
    x.add_argument("--config")
    x.add_argument("--out", required=True)
    x.add_argument("--percent", action="store_true")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        # reader went away (e.g. piped into head); artifacts are already on disk
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
