"""Deterministic prompt tuning with the combined calibration objective."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Literal

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import losses as L
from ._validation import check_unit_rows
from .clip_sim import ImageBatch, PromptModel, SyntheticTask, encode_classes, sample_images
from .metrics import BinningConfig, CalibrationReport, report_from_logits, softmax
from .prng import Stream, derive_seed

Split = Literal["base", "novel"]


class TrainingDiverged(RuntimeError):
    """A loss component became non-finite; carries the step and the values."""

    def __init__(self, step: int, values: dict):
        self.step = step
        self.values = values
        super().__init__(f"non-finite loss at step {step}: {values}")


@dataclass(frozen=True)
class TrainConfig:
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    lr: float = 0.005
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    variance_convention: L.VarianceConvention = "population"
    moment_class_subsample: int | None = None
    regularizer: Literal["mom", "l1"] = "mom"
    mbls_weight: float = 0.0
    mbls_cap: float = 10.0

    def __post_init__(self):
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError("lr must be finite and >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.variance_convention not in ("population", "sample"):
            raise ValueError("variance_convention must be 'population' or 'sample'")
        if self.moment_class_subsample is not None and self.moment_class_subsample < 1:
            raise ValueError("moment_class_subsample must be positive")
        if self.regularizer not in ("mom", "l1"):
            raise ValueError("regularizer must be 'mom' or 'l1'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StepRecord:
    step: int
    l_ce: float
    l_margin: float
    l_mom: float
    l_total: float
    margin_mean: float
    margin_var: float
    grad_ratios: L.GradRatioLog

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("step", "l_ce", "l_margin", "l_mom", "l_total", "margin_mean", "margin_var")}
        d["grad_ratios"] = self.grad_ratios.to_dict()
        return d


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)

    def summary(self) -> dict:
        if not self.records:
            return {"steps": 0}
        last = self.records[-1]
        return {
            "steps": len(self.records),
            "final_l_total": last.l_total,
            "final_l_ce": last.l_ce,
            "final_l_margin": last.l_margin,
            "final_l_mom": last.l_mom,
        }

    def rho_quantiles(self, qs=(0.1, 0.5, 0.9)) -> dict:
        out = {}
        for name in ("rho_margin", "rho_mom", "rho_mom_over_margin", "rho_margin_over_ce", "rho_mom_over_ce"):
            vals = np.array([getattr(r.grad_ratios, name) for r in self.records])
            out[name] = [float(np.quantile(vals, q)) for q in qs] if vals.size else []
        return out


@dataclass
class StepResult:
    total: L.LossValueGrad
    context_grads: dict[str, np.ndarray]
    margin_stats: L.MarginStats
    ratios: L.GradRatioLog


def objective(model: PromptModel, task: SyntheticTask, feats: np.ndarray, labels: np.ndarray,
              cfg: TrainConfig, moment_ids: np.ndarray | None = None) -> StepResult:
    """Value and context gradient of the full objective on one batch.

    ``labels`` are global class ids from the base split. Each loss piece is
    backpropagated to the context separately so that gradient-norm ratios are
    available; the total gradient is their weighted sum.
    """
    w = cfg.weights
    base = task.base_ids
    local = labels - base[0]
    emb = model.forward(base)
    logits = w.tau * (feats @ emb.embeddings.T)

    ce = L.cross_entropy(logits, local)
    stats = L.margins(logits, local, cfg.variance_convention)
    margin = L.margin_loss(stats, w.alpha, w.beta)

    def to_ctx(grad_logits: np.ndarray) -> np.ndarray:
        return emb.backward(w.tau * grad_logits.T @ feats)

    g = {
        "ce": to_ctx(ce.grad),
        "margin_mean": to_ctx(margin.parts["mean"].grad),
        "margin_var": to_ctx(margin.parts["var"].grad),
    }
    if cfg.mbls_weight > 0:
        mbls = L.mbls_loss(logits, cfg.mbls_cap, cfg.mbls_weight)
        g_mbls = to_ctx(mbls.grad)
        ce = L.LossValueGrad(ce.value + mbls.value, ce.grad + mbls.grad)
        g["ce"] = g["ce"] + g_mbls

    ids = base if moment_ids is None else moment_ids
    frozen = task.anchors[ids]
    if moment_ids is None:
        sub = emb
    else:
        sub = model.forward(ids)
    if cfg.regularizer == "mom":
        mom = L.moment_loss(sub.embeddings, frozen)
        g["mom_mu"] = sub.backward(mom.parts["mu"].grad)
        g["mom_sigma"] = sub.backward(mom.parts["sigma"].grad)
    else:
        mom = L.l1_align_loss(sub.embeddings, frozen)
        g["mom_mu"] = sub.backward(mom.grad)
        g["mom_sigma"] = np.zeros_like(g["mom_mu"])

    g_margin = g["margin_mean"] + g["margin_var"]
    g_mom = g["mom_mu"] + g["mom_sigma"]
    total = L.total_loss(
        L.LossValueGrad(ce.value, g["ce"]),
        L.LossValueGrad(margin.value, g_margin),
        L.LossValueGrad(mom.value, g_mom),
        w,
    )
    lm, lmom = w.lambda_margin, w.lambda_mom
    ratios = L.grad_ratios({
        "ce": g["ce"],
        "margin_mean": lm * g["margin_mean"],
        "margin_var": lm * g["margin_var"],
        "margin": lm * g_margin,
        "mom_mu": lmom * g["mom_mu"],
        "mom_sigma": lmom * g["mom_sigma"],
        "mom": lmom * g_mom,
    })
    return StepResult(total, g, stats, ratios)


def training_images(task: SyntheticTask, cfg: TrainConfig) -> ImageBatch:
    return sample_images(task, task.base_ids, task.cfg.shots, task.cfg.sigma,
                         derive_seed(cfg.seed, "train-images"))


def _moment_ids(task: SyntheticTask, cfg: TrainConfig, step: int) -> np.ndarray | None:
    k = cfg.moment_class_subsample
    if k is None or k >= task.cfg.num_base:
        return None
    perm = Stream(cfg.seed, "moment-classes", step).permutation(task.cfg.num_base)
    return np.sort(task.base_ids[perm[:k]])


def train(model: PromptModel, task: SyntheticTask, cfg: TrainConfig,
          data: ImageBatch | None = None) -> tuple[PromptModel, TrainLog]:
    """Plain SGD on the context tokens; returns a new model and the step log."""
    if model.encoder is not task.encoder:
        raise ValueError("model is not bound to the task's encoder")
    model = model.copy()
    data = data if data is not None else training_images(task, cfg)
    n = len(data)
    log = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        order = Stream(cfg.seed, "batches", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            # a batch is a set; reduce over it in sample-index order
            idx = np.sort(order[start:start + cfg.batch_size])
            res = objective(model, task, data.features[idx], data.labels[idx], cfg, _moment_ids(task, cfg, step))
            parts = res.total.parts
            rec = StepRecord(
                step=step,
                l_ce=parts["ce"].value,
                l_margin=parts["margin"].value,
                l_mom=parts["mom"].value,
                l_total=res.total.value,
                margin_mean=res.margin_stats.mean,
                margin_var=res.margin_stats.variance,
                grad_ratios=res.ratios,
            )
            values = [rec.l_ce, rec.l_margin, rec.l_mom, rec.l_total]
            if not all(math.isfinite(v) for v in values) or not np.all(np.isfinite(res.total.grad)):
                raise TrainingDiverged(step, {"l_ce": rec.l_ce, "l_margin": rec.l_margin,
                                              "l_mom": rec.l_mom, "l_total": rec.l_total})
            log.records.append(rec)
            model.context -= cfg.lr * res.total.grad
            step += 1
    return model, log


# -- verification ----------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    per_block: dict
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, b = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f(x)
        flat[j] = orig - h
        fm = f(x)
        flat[j] = orig
        gflat[j] = (fp - fm) / (2.0 * h)
    return grad


def gradient_check(model: PromptModel, task: SyntheticTask, cfg: TrainConfig, h: float = 1e-5,
                   tol: float = 1e-6, data: ImageBatch | None = None, n_samples: int | None = 16,
                   corrupt=None) -> GradCheckReport:
    """Compare the analytic context gradient of the total loss with central differences.

    ``corrupt`` optionally transforms the analytic gradient (negative controls).
    Blocks are the total objective and each weighted piece.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    data = data if data is not None else training_images(task, cfg)
    if n_samples is not None and n_samples < len(data):
        pick = Stream(cfg.seed, "gradcheck").permutation(len(data))[:n_samples]
        pick.sort()
        data = ImageBatch(data.features[pick], data.labels[pick])
    feats, labels = data.features, data.labels

    def piece(ctx: np.ndarray, name: str) -> float:
        m = PromptModel(ctx, model.encoder, model.class_tokens, model.init_name)
        return _piece_value(objective(m, task, feats, labels, cfg), name, cfg.weights)

    res = objective(model, task, feats, labels, cfg)
    w = cfg.weights
    analytic = {
        "total": res.total.grad,
        "ce": res.context_grads["ce"],
        "margin": w.lambda_margin * (res.context_grads["margin_mean"] + res.context_grads["margin_var"]),
        "mom": w.lambda_mom * (res.context_grads["mom_mu"] + res.context_grads["mom_sigma"]),
    }
    if corrupt is not None:
        analytic = {k: corrupt(v) for k, v in analytic.items()}
    per_block = {}
    errs = []
    for name, grad in analytic.items():
        numeric = central_difference(lambda c: piece(c, name), model.context, h)
        if not np.any(grad) and not np.any(np.abs(numeric) > 1e-10):
            err = np.zeros_like(grad)
        else:
            err = relative_error(grad, numeric)
        per_block[name] = {"max": float(err.max()), "mean": float(err.mean())}
        errs.append(err.ravel())
    allerr = np.concatenate(errs)
    mx = float(allerr.max())
    return GradCheckReport(mx, float(allerr.mean()), per_block, mx < tol)


def _piece_value(res: StepResult, name: str, weights: L.LossWeights) -> float:
    parts = res.total.parts
    if name == "total":
        return res.total.value
    if name == "ce":
        return parts["ce"].value
    if name == "margin":
        return weights.lambda_margin * parts["margin"].value
    return weights.lambda_mom * parts["mom"].value


# -- evaluation ------------------------------------------------------------------


@dataclass
class EvalResult:
    report: CalibrationReport
    margin_stats: L.MarginStats
    drift: tuple[float, float]
    logits: np.ndarray
    labels: np.ndarray
    class_ids: np.ndarray

    @property
    def drift_total(self) -> float:
        return self.drift[0] + self.drift[1]

    def summary(self) -> dict:
        return {
            "accuracy": self.report.accuracy,
            "ece": self.report.ece,
            "mce": self.report.mce,
            "ace": self.report.ace,
            "nll": self.report.nll,
            "margin_mean": self.margin_stats.mean,
            "margin_var": self.margin_stats.variance,
            "drift_mu": self.drift[0],
            "drift_sigma": self.drift[1],
        }


def evaluate(model: PromptModel, task: SyntheticTask, split: Split = "base", n_eval: int = 200,
             seed: int = 0, tau: float = 30.0, binning: BinningConfig | None = None) -> EvalResult:
    """Calibration, margins and moment drift on fresh images of one split.

    Labels in the returned logits are local to the split (column order =
    ``class_ids``).
    """
    ids = task.split_ids(split)
    batch = sample_images(task, ids, n_eval, task.cfg.sigma, derive_seed(seed, "eval-images", split))
    emb = model.forward(ids).embeddings
    logits = tau * (batch.features @ emb.T)
    local = batch.labels - ids[0]
    report = report_from_logits(logits, local, binning)
    stats = L.margins(logits, local)
    drift = L.moment_drift(emb, task.anchors[ids])
    return EvalResult(report, stats, drift, logits, local, ids)


def zero_shot_logits(task: SyntheticTask, feats: np.ndarray, class_ids, tau: float = 30.0) -> np.ndarray:
    """Logits against frozen anchors of ``class_ids``."""
    v = check_unit_rows(feats)
    anchors = encode_classes(task.encoder, task.template_tokens, task.class_tokens[np.asarray(class_ids)])
    return tau * (v @ anchors.T)


# -- estimator -------------------------------------------------------------------


class PromptTuningClassifier(ClassifierMixin, BaseEstimator):
    """Prompt tuning on a synthetic task behind a classifier interface.

    ``fit(X, y)`` tunes the context on image features ``X`` with base-class
    labels ``y``; ``predict_proba`` scores features against the tuned
    embeddings of ``classes_`` (the fitted classes, or ``eval_classes``).

    Parameters
    ----------
    task : SyntheticTask
        Provides the frozen encoder, class tokens and anchors.
    init : str or None
        Template name used to initialize the context.
    alpha, beta, lambda_margin, lambda_mom, tau : float
        Loss weights.
    lr, batch_size, epochs, seed : training schedule.
    eval_classes : array-like or None
        Class ids scored by ``predict_proba``; defaults to the fitted ones.
    """

    def __init__(self, task=None, init=None, alpha=0.1, beta=0.01, lambda_margin=1.0, lambda_mom=5.0,
                 tau=30.0, lr=0.005, batch_size=8, epochs=50, seed=0, eval_classes=None):
        self.task = task
        self.init = init
        self.alpha = alpha
        self.beta = beta
        self.lambda_margin = lambda_margin
        self.lambda_mom = lambda_mom
        self.tau = tau
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.eval_classes = eval_classes

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            weights=L.LossWeights(self.alpha, self.beta, self.lambda_margin, self.lambda_mom, self.tau),
            lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
        )

    def fit(self, X, y):
        if self.task is None:
            raise ValueError("PromptTuningClassifier needs a task")
        feats = check_unit_rows(X, name="X")
        labels = np.asarray(y, dtype=np.int64)
        if labels.shape != (feats.shape[0],):
            raise ValueError("y must have one label per row of X")
        if not np.all(np.isin(labels, self.task.base_ids)):
            raise ValueError("y must contain base-class ids only")
        model = PromptModel.from_task(self.task, self.init)
        self.model_, self.log_ = train(model, self.task, self._train_config(), ImageBatch(feats, labels))
        self.classes_ = np.unique(labels) if self.eval_classes is None else np.asarray(self.eval_classes)
        self.n_features_in_ = feats.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        feats = check_unit_rows(X, name="X")
        return self.tau * (feats @ self.model_.forward(self.classes_).embeddings.T)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


def with_weights(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, weights=replace(cfg.weights, **kw))


METHODS = ("ce", "margin", "mom", "full", "margin_l1", "mbls")


def method_config(cfg: TrainConfig, method: str) -> TrainConfig:
    """Training config for a named loss variant built on ``cfg``'s weights.

    ``full`` is CE + margin + moment matching; ``margin_l1`` swaps the moment
    term for L1 alignment at the same weight; ``mbls`` is CE plus the
    margin-based label smoothing baseline.
    """
    if method == "full":
        return cfg
    if method == "ce":
        return with_weights(cfg, lambda_margin=0.0, lambda_mom=0.0)
    if method == "margin":
        return with_weights(cfg, lambda_mom=0.0)
    if method == "mom":
        return with_weights(cfg, lambda_margin=0.0)
    if method == "margin_l1":
        return replace(cfg, regularizer="l1")
    if method == "mbls":
        return replace(with_weights(cfg, lambda_margin=0.0, lambda_mom=0.0),
                       mbls_weight=cfg.mbls_weight or 0.1)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
