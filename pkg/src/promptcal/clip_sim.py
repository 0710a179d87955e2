"""Desk-scale stand-in for a frozen CLIP model.

The text encoder mean-pools a token sequence, applies ``tanh(W1 p + b1)``,
projects with ``W2 h + b2`` and L2-normalizes. Class anchors are the
encodings of a fixed template followed by a class token; images are noisy
unit vectors around per-class visual centers. A :class:`PromptModel` swaps the
template for learnable context tokens.

Everything here is a pure function of ``(TaskConfig, seed)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .prng import Stream

TEMPLATES = (
    "a photo of a {}",
    "a nice image of a {}",
    "an example of a {}",
    "a picture of a {}",
    "a photo of the cool {}",
)
INIT_TEMPLATES = TEMPLATES[1:]
DEGENERATE_NORM = 1e-9


@dataclass(frozen=True)
class TaskConfig:
    """Shape and noise settings of a synthetic task.

    ``modality_gap`` scales a hidden offset between the hand-crafted template
    and the context that actually generated the image features; with
    ``modality_gap=0`` images are centered on the zero-shot anchors.
    """

    num_base: int = 8
    num_novel: int = 8
    d_tok: int = 16
    hidden: int = 32
    dim: int = 16
    context_len: int = 4
    shots: int = 16
    sigma: float = 0.6
    template: str = "a photo of a {}"
    modality_gap: float = 0.45
    encoder_gain: float = 4.0
    encoder_bias: float = 0.0
    class_token_scale: float = 2.0
    gap_correlation: float = 0.0
    novel_own_gap: float = 0.5

    def __post_init__(self):
        if self.num_base < 2 or self.num_novel < 1:
            raise ValueError("need num_base >= 2 and num_novel >= 1")
        if self.dim < 4 or self.d_tok < 1 or self.hidden < 1 or self.context_len < 1:
            raise ValueError("degenerate dimensions")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.sigma < 0 or self.modality_gap < 0:
            raise ValueError("sigma and modality_gap must be >= 0")
        if not 0.0 <= self.gap_correlation <= 1.0:
            raise ValueError("gap_correlation must lie in [0, 1]")
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}; choose from {TEMPLATES}")

    @property
    def num_classes(self) -> int:
        return self.num_base + self.num_novel

    def to_dict(self) -> dict:
        return asdict(self)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FrozenEncoder:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def from_seed(cls, seed: int, d_tok: int, hidden: int, dim: int, gain: float = 1.0, bias: float = 0.0):
        return cls(
            W1=_frozen(Stream(seed, "encoder", "W1").normal((hidden, d_tok)) * gain / np.sqrt(d_tok)),
            b1=_frozen(Stream(seed, "encoder", "b1").normal((hidden,)) * 0.1),
            W2=_frozen(Stream(seed, "encoder", "W2").normal((dim, hidden)) / np.sqrt(hidden)),
            b2=_frozen(Stream(seed, "encoder", "b2").normal((dim,)) * bias),
        )

    @property
    def d_tok(self) -> int:
        return self.W1.shape[1]

    @property
    def dim(self) -> int:
        return self.W2.shape[0]

    def forward_pooled(self, pooled: np.ndarray) -> "_EncoderCache":
        """Encode rows of mean-pooled token vectors."""
        p = np.atleast_2d(pooled)
        h = np.tanh(p @ self.W1.T + self.b1)
        raw = h @ self.W2.T + self.b2
        norms = np.linalg.norm(raw, axis=1)
        if np.any(norms < DEGENERATE_NORM):
            raise ValueError("degenerate encoding")
        return _EncoderCache(h=h, out=raw / norms[:, None], norms=norms)

    def backward_pooled(self, cache: "_EncoderCache", grad_out: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product from output rows back to pooled inputs."""
        u = cache.out
        g = np.atleast_2d(grad_out)
        g_raw = (g - u * np.sum(u * g, axis=1, keepdims=True)) / cache.norms[:, None]
        g_pre = (g_raw @ self.W2) * (1.0 - cache.h**2)
        return g_pre @ self.W1


@dataclass(frozen=True)
class _EncoderCache:
    h: np.ndarray
    out: np.ndarray
    norms: np.ndarray


def encode_text(encoder: FrozenEncoder, tokens) -> tuple[np.ndarray, np.ndarray]:
    """Encode one token sequence.

    Returns the unit embedding ``(d,)`` and its Jacobian with respect to the
    tokens, shaped ``(d, L, d_tok)``.
    """
    t = np.asarray(tokens, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] != encoder.d_tok:
        raise ValueError(f"tokens must be (L, {encoder.d_tok}), got {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("non-finite token")
    length = t.shape[0]
    cache = encoder.forward_pooled(t.mean(axis=0))
    # rows of the identity give the full Jacobian through the VJP
    jac_pooled = encoder.backward_pooled(
        _EncoderCache(
            h=np.repeat(cache.h, encoder.dim, axis=0),
            out=np.repeat(cache.out, encoder.dim, axis=0),
            norms=np.repeat(cache.norms, encoder.dim),
        ),
        np.eye(encoder.dim),
    )
    jac = np.repeat(jac_pooled[:, None, :] / length, length, axis=1)
    return cache.out[0], jac


def _pool(context: np.ndarray, class_tokens: np.ndarray) -> np.ndarray:
    return (context.sum(axis=0) + class_tokens) / (context.shape[0] + 1)


def encode_classes(encoder: FrozenEncoder, context: np.ndarray, class_tokens: np.ndarray) -> np.ndarray:
    """Unit embeddings of ``context ++ e_y`` for every row ``e_y``."""
    return encoder.forward_pooled(_pool(context, class_tokens)).out


@dataclass(frozen=True)
class SyntheticTask:
    cfg: TaskConfig
    seed: int
    encoder: FrozenEncoder
    class_tokens: np.ndarray
    template_tokens: np.ndarray
    anchors: np.ndarray
    image_centers: np.ndarray

    @property
    def base_ids(self) -> np.ndarray:
        return np.arange(self.cfg.num_base)

    @property
    def novel_ids(self) -> np.ndarray:
        return np.arange(self.cfg.num_base, self.cfg.num_classes)

    def split_ids(self, split: str) -> np.ndarray:
        if split == "base":
            return self.base_ids
        if split == "novel":
            return self.novel_ids
        raise ValueError(f"unknown split {split!r}")

    def template(self, name: str) -> np.ndarray:
        return template_tokens(self.seed, name, self.cfg.context_len, self.cfg.d_tok)

    def anchor_digest(self) -> str:
        return hashlib.sha256(self.anchors.tobytes()).hexdigest()


def template_tokens(seed: int, name: str, length: int, d_tok: int) -> np.ndarray:
    """Fixed token matrix standing in for a named hand-crafted template."""
    if name not in TEMPLATES:
        raise ValueError(f"unknown template {name!r}")
    return Stream(seed, "template", name).normal((length, d_tok))


def build_task(cfg: TaskConfig, seed: int) -> SyntheticTask:
    encoder = FrozenEncoder.from_seed(seed, cfg.d_tok, cfg.hidden, cfg.dim, cfg.encoder_gain, cfg.encoder_bias)
    class_tokens = Stream(seed, "class-tokens").normal((cfg.num_classes, cfg.d_tok)) * cfg.class_token_scale
    template = template_tokens(seed, cfg.template, cfg.context_len, cfg.d_tok)
    anchors = encode_classes(encoder, template, class_tokens)
    centers = anchors
    if cfg.modality_gap > 0:
        shared = Stream(seed, "modality-gap").normal((cfg.context_len, cfg.d_tok)) * cfg.modality_gap
        own = Stream(seed, "modality-gap", "novel").normal((cfg.context_len, cfg.d_tok)) * cfg.modality_gap
        rho = cfg.gap_correlation
        novel_gap = rho * shared + cfg.novel_own_gap * np.sqrt(1.0 - rho * rho) * own
        centers = np.concatenate([
            encode_classes(encoder, template + shared, class_tokens[: cfg.num_base]),
            encode_classes(encoder, template + novel_gap, class_tokens[cfg.num_base:]),
        ])

    cos = anchors @ anchors.T
    off = cos[~np.eye(cfg.num_classes, dtype=bool)]
    if off.size and off.max() >= 0.999:
        raise ValueError("degenerate task: anchors are not pairwise distinct")
    return SyntheticTask(
        cfg=cfg,
        seed=seed,
        encoder=encoder,
        class_tokens=_frozen(class_tokens),
        template_tokens=_frozen(template),
        anchors=_frozen(anchors),
        image_centers=_frozen(centers),
    )


@dataclass(frozen=True)
class ImageBatch:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]


def sample_images(task: SyntheticTask, class_ids: Sequence[int], per_class: int, sigma: float, seed: int,
                  purpose: str = "images") -> ImageBatch:
    """``normalize(center_y + sigma * g / sqrt(d))`` for ``per_class`` draws of each class.

    ``sigma`` is the RMS norm of the perturbation, so the angular noise level
    does not grow with the embedding dimension.

    Draw ``j`` of class ``y`` depends only on ``(seed, purpose, y, j)``.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    ids = np.asarray(class_ids, dtype=np.int64)
    d = task.cfg.dim
    feats, labels = [], []
    for y in ids:
        g = Stream(seed, purpose, int(y)).normal((per_class, d))
        if sigma == 0:
            # centers are already unit-norm; renormalizing would perturb the last ulp
            feats.append(np.repeat(task.image_centers[y][None, :], per_class, axis=0))
        else:
            x = task.image_centers[y] + (sigma / np.sqrt(d)) * g
            feats.append(x / np.linalg.norm(x, axis=1, keepdims=True))
        labels.append(np.full(per_class, y, dtype=np.int64))
    if not feats:
        return ImageBatch(np.zeros((0, d)), np.zeros(0, dtype=np.int64))
    return ImageBatch(np.concatenate(feats), np.concatenate(labels))


@dataclass
class EmbeddingPass:
    """Tuned class embeddings plus what is needed to backpropagate into the context."""

    embeddings: np.ndarray
    class_ids: np.ndarray
    _cache: _EncoderCache
    _encoder: FrozenEncoder
    _context_len: int

    def backward(self, grad_embeddings: np.ndarray) -> np.ndarray:
        """Context gradient for an upstream gradient on the embeddings."""
        g_pooled = self._encoder.backward_pooled(self._cache, grad_embeddings)
        row = g_pooled.sum(axis=0) / (self._context_len + 1)
        return np.repeat(row[None, :], self._context_len, axis=0)


@dataclass
class PromptModel:
    """Learnable context tokens in front of frozen class tokens."""

    context: np.ndarray
    encoder: FrozenEncoder
    class_tokens: np.ndarray
    init_name: str = field(default="a photo of a {}")

    def __post_init__(self):
        self.context = np.array(self.context, dtype=np.float64)
        if self.context.ndim != 2 or self.context.shape[0] < 1:
            raise ValueError("context must be (M, d_tok) with M >= 1")
        if self.context.shape[1] != self.encoder.d_tok:
            raise ValueError("context width does not match the encoder")

    @classmethod
    def from_task(cls, task: SyntheticTask, init: str | None = None) -> "PromptModel":
        name = init or task.cfg.template
        return cls(task.template(name), task.encoder, task.class_tokens, name)

    def copy(self) -> "PromptModel":
        return PromptModel(self.context.copy(), self.encoder, self.class_tokens, self.init_name)

    def forward(self, class_ids: Sequence[int]) -> EmbeddingPass:
        ids = np.asarray(class_ids, dtype=np.int64)
        cache = self.encoder.forward_pooled(_pool(self.context, self.class_tokens[ids]))
        return EmbeddingPass(cache.out, ids, cache, self.encoder, self.context.shape[0])


def tuned_class_embeddings(model: PromptModel, class_ids: Sequence[int]) -> EmbeddingPass:
    return model.forward(class_ids)


def export_embeddings_csv(embeddings: np.ndarray, class_ids: Sequence[int]) -> str:
    """CSV text with header ``class,e0,...`` and one row per class."""
    d = embeddings.shape[1]
    lines = ["class," + ",".join(f"e{j}" for j in range(d))]
    for cid, row in zip(class_ids, embeddings):
        lines.append(f"{int(cid)}," + ",".join(format(float(v), ".17g") for v in row))
    return "\n".join(lines) + "\n"
