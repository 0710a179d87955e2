"""Input validation helpers shared by the metric, loss and estimator code."""

from __future__ import annotations

import numpy as np


def check_logits(logits, *, min_classes: int = 2, name: str = "logits") -> np.ndarray:
    """Return ``logits`` as a finite float64 ``(N, K)`` array."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"{name} must be 2-D (N, K), got shape {z.shape}")
    if z.shape[0] < 1:
        raise ValueError("no samples")
    if z.shape[1] < min_classes:
        raise ValueError(f"{name} needs at least {min_classes} classes, got {z.shape[1]}")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logit")
    return z


def check_labels(labels, n_samples: int, n_classes: int) -> np.ndarray:
    """Return ``labels`` as an int64 vector of length ``n_samples`` in ``[0, n_classes)``."""
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"labels must have shape ({n_samples},), got {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class indices")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def check_probs(probs, *, atol: float = 1e-9) -> np.ndarray:
    """Return ``probs`` as a row-stochastic float64 ``(N, K)`` array."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"probs must be 2-D (N, K), got shape {p.shape}")
    if p.shape[0] < 1:
        raise ValueError("no samples")
    if not np.all(np.isfinite(p)) or np.any(p < -atol):
        raise ValueError("probs must be finite and nonnegative")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > atol):
        raise ValueError("probs rows must sum to 1")
    return p


def check_unit_rows(x, *, atol: float = 1e-9, name: str = "embeddings") -> np.ndarray:
    """Return ``x`` as a float64 2-D array whose rows have unit L2 norm."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    norms = np.linalg.norm(a, axis=1)
    if np.any(np.abs(norms - 1.0) > atol):
        raise ValueError("unnormalized embedding")
    return a


def check_same_shape(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b
