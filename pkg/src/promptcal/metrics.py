"""Calibration metrics over top-1 confidences.

All quantities are fractions in [0, 1] computed in float64. Per-bin and
per-sample sums use :func:`math.fsum`, which is exactly rounded, so results
do not depend on sample order.

ACE is the equal-mass-binned calibration error: samples sorted by top-1
confidence (ties kept in sample-index order) are split into ``num_bins``
groups whose sizes differ by at most one, and the ECE gap formula is applied
to those groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels, check_logits, check_probs

Scheme = Literal["equal_width", "equal_mass"]

NLL_FLOOR = 1e-300
LOG_T_BOUNDS = (-5.0, 5.0)
GOLDEN_ITERATIONS = 200


@dataclass(frozen=True)
class BinningConfig:
    num_bins: int = 15
    scheme: Scheme = "equal_width"

    def __post_init__(self):
        if int(self.num_bins) < 1:
            raise ValueError("num_bins must be >= 1")
        if self.scheme not in ("equal_width", "equal_mass"):
            raise ValueError(f"unknown binning scheme {self.scheme!r}")


@dataclass(frozen=True)
class BinStat:
    """One reliability bin. Empty bins carry ``None`` for both averages."""

    lower: float
    upper: float
    count: int
    mean_confidence: float | None
    accuracy: float | None

    @property
    def gap(self) -> float | None:
        if self.count == 0:
            return None
        return abs(self.accuracy - self.mean_confidence)

    def to_dict(self) -> dict:
        return {
            "lower": self.lower,
            "upper": self.upper,
            "count": self.count,
            "mean_confidence": self.mean_confidence,
            "accuracy": self.accuracy,
        }


@dataclass(frozen=True)
class CalibrationReport:
    ece: float
    mce: float
    ace: float
    nll: float
    accuracy: float
    mean_confidence: float
    bins: tuple[BinStat, ...] = field(default_factory=tuple)

    def to_dict(self, percent: bool = False) -> dict:
        scale = 100.0 if percent else 1.0
        out = {
            "ece": self.ece * scale,
            "mce": self.mce * scale,
            "ace": self.ace * scale,
            "nll": self.nll,
            "accuracy": self.accuracy * scale,
            "mean_confidence": self.mean_confidence * scale,
            "bins": [b.to_dict() for b in self.bins],
        }
        return out


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"logits must be 2-D (N, K), got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logit")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def top1(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class (lowest index on ties) and its probability."""
    pred = np.argmax(probs, axis=1)
    return pred, probs[np.arange(probs.shape[0]), pred]


def _bin_stat(lower, upper, conf, correct) -> BinStat:
    n = int(conf.size)
    if n == 0:
        return BinStat(float(lower), float(upper), 0, None, None)
    return BinStat(
        float(lower),
        float(upper),
        n,
        math.fsum(conf.tolist()) / n,
        math.fsum(correct.tolist()) / n,
    )


def equal_width_index(conf: np.ndarray, num_bins: int) -> np.ndarray:
    """Zero-based bin index for ((b-1)/B, b/B] bins, with 0 sent to the first bin."""
    edges = np.arange(num_bins + 1, dtype=np.float64) / num_bins
    idx = np.searchsorted(edges, conf, side="left") - 1
    return np.clip(idx, 0, num_bins - 1)


def equal_mass_groups(conf: np.ndarray, num_bins: int, correct: np.ndarray | None = None) -> list[np.ndarray]:
    """Sample indices per equal-mass bin, sorted ascending by confidence.

    Equal confidences are ordered by ``correct`` (wrong first) when given and
    then by sample index, so a group's contents never depend on sample order.
    """
    if correct is None:
        order = np.argsort(conf, kind="stable")
    else:
        order = np.lexsort((np.asarray(correct), conf))
    return np.array_split(order, num_bins)


def reliability_bins(probs, labels, config: BinningConfig | None = None) -> list[BinStat]:
    """Per-bin counts, mean confidence and accuracy of top-1 predictions."""
    config = config or BinningConfig()
    p = check_probs(probs)
    y = check_labels(labels, p.shape[0], p.shape[1])
    pred, conf = top1(p)
    correct = (pred == y).astype(np.float64)
    B = int(config.num_bins)

    if config.scheme == "equal_width":
        idx = equal_width_index(conf, B)
        return [
            _bin_stat(b / B, (b + 1) / B, conf[idx == b], correct[idx == b])
            for b in range(B)
        ]

    bins = []
    prev_upper = 0.0
    for group in equal_mass_groups(conf, B, correct):
        if group.size == 0:
            bins.append(BinStat(prev_upper, prev_upper, 0, None, None))
            continue
        c = conf[group]
        lower, upper = float(c.min()), float(c.max())
        # back to sample-index order so the sums see a canonical ordering
        g = np.sort(group)
        bins.append(_bin_stat(lower, upper, conf[g], correct[g]))
        prev_upper = upper
    return bins


def _check_total(bins: Sequence[BinStat], total: int) -> None:
    if total <= 0:
        raise ValueError("no samples")
    if sum(b.count for b in bins) != total:
        raise ValueError("bin counts do not sum to the sample total")


def ece(bins: Sequence[BinStat], total: int) -> float:
    """Count-weighted mean |accuracy - confidence| over nonempty bins."""
    _check_total(bins, total)
    return math.fsum(b.count / total * b.gap for b in bins if b.count > 0)


def mce(bins: Sequence[BinStat], total: int) -> float:
    """Largest |accuracy - confidence| over nonempty bins."""
    _check_total(bins, total)
    return max(b.gap for b in bins if b.count > 0)


def ace(probs, labels, num_bins: int = 15) -> float:
    bins = reliability_bins(probs, labels, BinningConfig(num_bins, "equal_mass"))
    return ece(bins, sum(b.count for b in bins))


def nll(probs, labels) -> float:
    """Mean negative log-probability of the true class."""
    p = check_probs(probs)
    y = check_labels(labels, p.shape[0], p.shape[1])
    true_p = np.maximum(p[np.arange(p.shape[0]), y], NLL_FLOOR)
    return math.fsum((-np.log(true_p)).tolist()) / p.shape[0]


def accuracy(probs, labels) -> float:
    p = check_probs(probs)
    y = check_labels(labels, p.shape[0], p.shape[1])
    pred, _ = top1(p)
    return float(np.count_nonzero(pred == y)) / p.shape[0]


def calibration_report(probs, labels, config: BinningConfig | None = None) -> CalibrationReport:
    """Full report; ``ece``/``mce`` use ``config`` bins, ``ace`` uses equal-mass bins."""
    config = config or BinningConfig()
    p = check_probs(probs)
    y = check_labels(labels, p.shape[0], p.shape[1])
    n = p.shape[0]
    bins = reliability_bins(p, y, config)
    _, conf = top1(p)
    return CalibrationReport(
        ece=ece(bins, n),
        mce=mce(bins, n),
        ace=ace(p, y, config.num_bins),
        nll=nll(p, y),
        accuracy=accuracy(p, y),
        mean_confidence=math.fsum(conf.tolist()) / n,
        bins=tuple(bins),
    )


def report_from_logits(logits, labels, config: BinningConfig | None = None) -> CalibrationReport:
    z = check_logits(logits)
    return calibration_report(softmax(z), labels, config)


# -- temperature scaling -------------------------------------------------------


def nll_at_temperature(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    """Mean NLL of ``softmax(logits / temperature)`` computed in log space."""
    lp = log_softmax(logits / temperature)
    return -math.fsum(lp[np.arange(lp.shape[0]), labels].tolist()) / lp.shape[0]


@dataclass(frozen=True)
class TemperatureFit:
    temperature: float
    log_temperature: float
    nll_before: float
    nll_after: float
    boundary: bool

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "log_temperature": self.log_temperature,
            "nll_before": self.nll_before,
            "nll_after": self.nll_after,
            "boundary": self.boundary,
        }


def fit_temperature(logits, labels, *, bounds=LOG_T_BOUNDS, iterations=GOLDEN_ITERATIONS) -> TemperatureFit:
    """Golden-section search for the NLL-minimizing temperature over ln T.

    When the minimizer sits on a search bound (e.g. perfectly separable
    validation logits) the exact bound is returned with ``boundary=True``.
    """
    z = check_logits(logits)
    y = check_labels(labels, z.shape[0], z.shape[1])

    def f(log_t: float) -> float:
        return nll_at_temperature(z, y, math.exp(log_t))

    lo, hi = float(bounds[0]), float(bounds[1])
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iterations):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    tol = 1e-9 * (hi - lo)
    boundary = False
    if x - lo <= tol:
        x, boundary = lo, True
    elif hi - x <= tol:
        x, boundary = hi, True
    return TemperatureFit(
        temperature=math.exp(x),
        log_temperature=x,
        nll_before=f(0.0),
        nll_after=f(x),
        boundary=boundary,
    )


class TemperatureScaler(ClassifierMixin, BaseEstimator):
    """Post-hoc temperature scaling as an estimator over logit matrices.

    ``fit(logits, y)`` learns ``temperature_``; ``transform`` divides logits by
    it and ``predict_proba`` returns the rescaled softmax.

    Parameters
    ----------
    log_t_bounds : tuple of float
        Search interval for ln T.
    n_iter : int
        Golden-section iterations.
    """

    def __init__(self, log_t_bounds=LOG_T_BOUNDS, n_iter=GOLDEN_ITERATIONS):
        self.log_t_bounds = log_t_bounds
        self.n_iter = n_iter

    def fit(self, X, y):
        z = check_logits(X)
        y = check_labels(y, z.shape[0], z.shape[1])
        result = fit_temperature(z, y, bounds=self.log_t_bounds, iterations=self.n_iter)
        self.temperature_ = result.temperature
        self.boundary_ = result.boundary
        self.fit_result_ = result
        self.n_features_in_ = z.shape[1]
        self.classes_ = np.arange(z.shape[1])
        return self

    def transform(self, X):
        check_is_fitted(self, "temperature_")
        z = check_logits(X)
        if z.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} classes, got {z.shape[1]}")
        return z / self.temperature_

    def predict_proba(self, X):
        return softmax(self.transform(X))

    def predict(self, X):
        return np.argmax(self.transform(X), axis=1)
