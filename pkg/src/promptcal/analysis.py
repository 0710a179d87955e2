"""Post-hoc analyses and multi-seed sweeps.

Quantiles use linear interpolation between order statistics (numpy's
default, Hyndman-Fan type 7). Sweeps retrain from scratch at every grid
point; aggregation is a sequential reduce over records sorted by
``(axis value, method, seed)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import stats as sps

from .clip_sim import INIT_TEMPLATES, PromptModel, TaskConfig, build_task
from ._validation import check_labels, check_probs
from .metrics import BinningConfig, equal_width_index, top1
from .trainer import TrainConfig, evaluate, method_config, train

METRIC_KEYS = ("acc_base", "ece_base", "acc_novel", "ece_novel")
ABLATION_VARIANTS = ("ce", "margin", "margin_l1", "full")


@dataclass(frozen=True)
class EcdfSeries:
    x: np.ndarray
    fractions: np.ndarray

    def to_rows(self) -> list[dict]:
        return [{"x": float(a), "fraction": float(b)} for a, b in zip(self.x, self.fractions)]


def margin_ecdf(margins) -> EcdfSeries:
    m = np.sort(np.asarray(margins, dtype=np.float64).ravel(), kind="stable")
    if m.size < 1:
        raise ValueError("no samples")
    return EcdfSeries(m, np.arange(1, m.size + 1) / m.size)


def box_stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 1:
        raise ValueError("no samples")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    return {
        "min": float(v.min()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(v.max()),
        "iqr": float(q3 - q1),
        "n": int(v.size),
    }


def error_confidence_histogram(probs, labels, num_bins: int = 15) -> np.ndarray:
    """Misclassified-sample counts per equal-width confidence bin."""
    BinningConfig(num_bins)
    p = check_probs(probs)
    y = check_labels(labels, *p.shape)
    pred, conf = top1(p)
    wrong = pred != y
    return np.bincount(equal_width_index(conf[wrong], num_bins), minlength=num_bins)


def variability_ece_correlation(runs: Sequence[dict], method: str = "pearson") -> float:
    """Correlation between per-run margin variance and ECE."""
    if len(runs) < 3:
        raise ValueError("need at least 3 runs")
    x = np.array([r["margin_variance"] for r in runs], dtype=np.float64)
    y = np.array([r["ece"] for r in runs], dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("degenerate correlation")
    if method == "spearman":
        return float(sps.spearmanr(x, y).statistic)
    if method != "pearson":
        raise ValueError(f"unknown correlation method {method!r}")
    xc, yc = x - x.mean(), y - y.mean()
    r = float(np.dot(xc, yc) / math.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))
    return max(-1.0, min(1.0, r))


# -- sweeps ----------------------------------------------------------------------


@dataclass
class SweepResult:
    """Per-seed records of a sweep; ``grid`` fixes the order of axis values."""

    axis: str
    grid: list = field(default_factory=list)
    records: list[dict] = field(default_factory=list)

    def medians(self) -> list[dict]:
        """Per (axis value, method) medians of every metric over seeds."""
        groups: dict[tuple, list[dict]] = {}
        for r in sorted(self.records, key=self._key):
            groups.setdefault((r["value"], r["method"]), []).append(r)
        out = []
        for (value, method), rs in groups.items():
            row = {"value": value, "method": method, "n_seeds": len(rs)}
            for k in METRIC_KEYS:
                row[k] = float(np.median([r[k] for r in rs]))
            out.append(row)
        return out

    def median(self, value, method: str, key: str) -> float:
        for row in self.medians():
            if row["value"] == value and row["method"] == method:
                return row[key]
        raise KeyError((value, method))

    def spread(self, method: str, key: str) -> float:
        """max - min of the per-axis-value medians for one method."""
        vals = [row[key] for row in self.medians() if row["method"] == method]
        return float(max(vals) - min(vals))

    def to_dict(self) -> dict:
        return {"axis": self.axis, "grid": list(self.grid), "records": sorted(self.records, key=self._key),
                "medians": self.medians()}

    def _key(self, r: dict):
        v = r["value"]
        pos = self.grid.index(v) if v in self.grid else len(self.grid)
        return (pos, str(v), r["method"], r["seed"])


def run_point(task_cfg: TaskConfig, train_cfg: TrainConfig, seed: int, method: str,
              init: str | None = None, n_eval: int = 200) -> dict:
    """Build the seed's task, train one method and evaluate both splits."""
    task = build_task(task_cfg, seed)
    cfg = method_config(replace(train_cfg, seed=seed), method)
    model, _ = train(PromptModel.from_task(task, init), task, cfg)
    tau = cfg.weights.tau
    base = evaluate(model, task, "base", n_eval, seed, tau)
    novel = evaluate(model, task, "novel", n_eval, seed, tau)
    return {
        "seed": seed,
        "method": method,
        "acc_base": base.report.accuracy,
        "ece_base": base.report.ece,
        "acc_novel": novel.report.accuracy,
        "ece_novel": novel.report.ece,
        "margin_mean_base": base.margin_stats.mean,
        "margin_var_base": base.margin_stats.variance,
        "margin_var_novel": novel.margin_stats.variance,
        "drift_base": base.drift_total,
        "drift_novel": novel.drift_total,
    }


def shots_sweep(task_cfg: TaskConfig, train_cfg: TrainConfig, shots: Iterable[int] = (4, 8, 16, 32),
                seeds: Iterable[int] = range(10), methods: Sequence[str] = ("ce", "full"),
                n_eval: int = 200) -> SweepResult:
    shots = [int(k) for k in shots]
    result = SweepResult("shots", shots)
    for k in shots:
        cfg_k = replace(task_cfg, shots=int(k))
        for method in methods:
            for seed in seeds:
                rec = run_point(cfg_k, train_cfg, seed, method, n_eval=n_eval)
                rec["value"] = int(k)
                result.records.append(rec)
    return result


def init_robustness_sweep(task_cfg: TaskConfig, train_cfg: TrainConfig,
                          templates: Sequence[str] = INIT_TEMPLATES, seeds: Iterable[int] = range(10),
                          methods: Sequence[str] = ("ce", "full"), n_eval: int = 200) -> SweepResult:
    templates = list(templates)
    result = SweepResult("template", templates)
    for name in templates:
        for method in methods:
            for seed in seeds:
                rec = run_point(task_cfg, train_cfg, seed, method, init=name, n_eval=n_eval)
                rec["value"] = name
                result.records.append(rec)
    return result


def ablation_suite(task_cfg: TaskConfig, train_cfg: TrainConfig, seeds: Iterable[int] = range(10),
                   n_eval: int = 200) -> SweepResult:
    """Median metrics for CE, CE+Margin, CE+Margin+L1 and CE+Margin+Mom."""
    result = SweepResult("variant", list(ABLATION_VARIANTS))
    for method in ABLATION_VARIANTS:
        for seed in seeds:
            rec = run_point(task_cfg, train_cfg, seed, method, n_eval=n_eval)
            rec["value"] = method
            result.records.append(rec)
    return result
