"""Video encoder: a frozen pooled-statistics backbone and a trainable projection head.

The head is fit with the supervised contrastive objective on demonstrator
videos only; cosine similarity between its unit-norm outputs is the video
similarity used for retrieval.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .errors import (
    EmptyPositives,
    InsufficientClassData,
    NonFinite,
    NotNormalized,
    RobotDataLeak,
)
from .world import FEATURE_DIM, N_FRAMES, Domain, VideoFeatures

log = logging.getLogger(__name__)

REPR_DIM = 64
EMBED_DIM = 32
N_STATS = 4
_MIX_SEED = 7321


def _mixing_matrix() -> np.ndarray:
    rng = np.random.default_rng(_MIX_SEED)
    q, r = np.linalg.qr(rng.normal(size=(REPR_DIM, REPR_DIM)))
    return q * np.sign(np.diag(r))[None, :]


MIXING = _mixing_matrix()


def pooled_stats(frames: np.ndarray) -> np.ndarray:
    """Mean, first frame, last frame and mean |frame delta| per channel; frames (..., T, F)."""
    deltas = np.abs(np.diff(frames, axis=-2)).mean(axis=-2)
    return np.concatenate([frames.mean(axis=-2), frames[..., 0, :], frames[..., -1, :], deltas], axis=-1)


def backbone_frames(frames: np.ndarray) -> np.ndarray:
    stats = pooled_stats(np.asarray(frames, dtype=np.float64))
    pad = REPR_DIM - stats.shape[-1]
    stats = np.concatenate([stats, np.zeros(stats.shape[:-1] + (pad,))], axis=-1)
    return stats @ MIXING


def backbone(features: VideoFeatures) -> np.ndarray:
    return backbone_frames(features.frames)


def projection_spec(hidden: int = 64) -> nn.MlpSpec:
    return nn.MlpSpec((REPR_DIM, hidden, EMBED_DIM), "tanh", "l2_normalize")


def project(repr_, params: nn.ParamVector, spec: Optional[nn.MlpSpec] = None) -> np.ndarray:
    return nn.mlp_forward(spec or projection_spec(), params, repr_)


def encode(features: VideoFeatures, params: nn.ParamVector, spec: Optional[nn.MlpSpec] = None) -> np.ndarray:
    return project(backbone(features), params, spec)


def encode_frames(frames: np.ndarray, params: nn.ParamVector, spec: Optional[nn.MlpSpec] = None) -> np.ndarray:
    return project(backbone_frames(frames), params, spec)


def similarity(e1, e2) -> float:
    e1, e2 = np.asarray(e1, dtype=np.float64), np.asarray(e2, dtype=np.float64)
    for e in (e1, e2):
        if abs(np.linalg.norm(e) - 1.0) > 1e-4:
            raise NotNormalized(f"embedding norm {np.linalg.norm(e):.6f}")
    return float(np.clip(e1 @ e2, -1.0, 1.0))


# -- augmentation ---------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    crop: bool = True
    jitter: bool = True
    affine: bool = True
    dropout: bool = True
    crop_min: float = 0.7
    jitter_sigma: float = 0.02
    scale_low: float = 0.8
    scale_high: float = 1.25
    shift: float = 0.1
    dropout_p: float = 0.1

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(crop=False, jitter=False, affine=False, dropout=False)


def augment_frames(frames: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Label-preserving perturbations of a batch of videos, frames (B, T, F)."""
    x = np.array(frames, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    b, t, f = x.shape
    if cfg.crop:
        width = rng.uniform(cfg.crop_min, 1.0, size=b) * (t - 1)
        start = rng.uniform(0.0, 1.0, size=b) * ((t - 1) - width)
        pos = start[:, None] + width[:, None] * np.linspace(0.0, 1.0, t)[None, :]
        lo = np.clip(np.floor(pos).astype(int), 0, t - 1)
        hi = np.clip(lo + 1, 0, t - 1)
        w = (pos - lo)[..., None]
        rows = np.arange(b)[:, None]
        x = (1.0 - w) * x[rows, lo] + w * x[rows, hi]
    if cfg.affine:
        scale = np.exp(rng.uniform(np.log(cfg.scale_low), np.log(cfg.scale_high), size=(b, 1, f)))
        shift = rng.uniform(-cfg.shift, cfg.shift, size=(b, 1, f))
        x = x * scale + shift
    if cfg.jitter:
        x = x + rng.normal(0.0, cfg.jitter_sigma, size=x.shape)
    if cfg.dropout:
        drop = rng.random(size=(b, t)) < cfg.dropout_p
        drop[:, 0] = False
        for j in range(1, t):
            x[:, j] = np.where(drop[:, j, None], x[:, j - 1], x[:, j])
    return x[0] if squeeze else x


def augment(features: VideoFeatures, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> VideoFeatures:
    return VideoFeatures(augment_frames(features.frames, rng, cfg), features.domain)


# -- supervised contrastive loss --------------------------------------------------

def supcon_loss(embeddings: np.ndarray, labels: Sequence, tau: float) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss summed over anchors, and its gradient w.r.t. the rows.

    Every row is an anchor; positives are the other rows sharing its label and
    the denominator runs over all other rows.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = e.shape[0]
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if not np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-6):
        raise NotNormalized("supcon rows must be unit norm")
    others = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & others
    n_pos = pos.sum(axis=1)
    if np.any(n_pos == 0):
        raise EmptyPositives(f"anchors without positives: {np.flatnonzero(n_pos == 0).tolist()}")

    logits = (e @ e.T) / tau
    masked = np.where(others, logits, -np.inf)
    shift = masked.max(axis=1, keepdims=True)
    expd = np.where(others, np.exp(masked - shift), 0.0)
    z = expd.sum(axis=1, keepdims=True)
    log_z = np.log(z) + shift
    per_anchor = -(np.where(pos, logits, 0.0).sum(axis=1) / n_pos) + log_z[:, 0]
    loss = float(per_anchor.sum())
    if not np.isfinite(loss):
        raise NonFinite("supcon loss is not finite")

    g = expd / z - pos / n_pos[:, None]
    grad = (g + g.T) @ e / tau
    return loss, grad


# -- training -------------------------------------------------------------------

@dataclass
class SupConConfig:
    tau: float = 0.1
    batch_pairs: int = 64
    epochs: int = 30
    learning_rate: float = 3e-3
    hidden: int = 64
    steps_per_epoch: Optional[int] = None  # default: one pass over the dataset
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.batch_pairs < 2:
            raise ValueError("need at least two pairs per batch")


@dataclass
class LabeledVideos:
    """Demonstrator videos with their task labels, stacked for batched training."""

    frames: np.ndarray  # (n, T, F)
    labels: np.ndarray  # (n,)
    domains: tuple[Domain, ...]

    @classmethod
    def from_pairs(cls, items: Sequence[tuple[VideoFeatures, int]]) -> "LabeledVideos":
        frames = np.stack([f.frames for f, _ in items]) if items else np.zeros((0, N_FRAMES, FEATURE_DIM))
        return cls(frames, np.array([int(y) for _, y in items], dtype=int), tuple(f.domain for f, _ in items))

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class TrainRecord:
    epoch: int
    mean_loss: float
    intra_margin: float


def class_margin(embeddings: np.ndarray, labels: np.ndarray) -> float:
    """Mean same-class cosine minus mean cross-class cosine (self-pairs excluded)."""
    sims = embeddings @ embeddings.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    return float(sims[same & off].mean() - sims[~same].mean())


def check_demonstrator_only(data: LabeledVideos) -> None:
    leaked = sum(d != Domain.Demonstrator for d in data.domains)
    if leaked:
        raise RobotDataLeak(f"{leaked} non-demonstrator samples in encoder training data")
    classes, counts = np.unique(data.labels, return_counts=True)
    if (counts >= 2).sum() < 2:
        raise InsufficientClassData("need at least two samples for at least two classes")


def train_projection(data: LabeledVideos, config: SupConConfig, seed: int,
                     heldout: Optional[LabeledVideos] = None) -> tuple[nn.ParamVector, list[TrainRecord]]:
    """Fit the projection head with the supervised contrastive loss."""
    check_demonstrator_only(data)
    rng = np.random.default_rng([seed, 11])
    spec = projection_spec(config.hidden)
    params = nn.init_params(spec, rng)
    state = nn.OptimState.fresh(len(params), learning_rate=config.learning_rate)
    n = len(data)
    n_pairs = min(config.batch_pairs, n)
    steps = config.steps_per_epoch or max(1, n // n_pairs)
    eval_set = heldout if heldout is not None else data
    eval_repr = backbone_frames(eval_set.frames)
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for k in range(steps):
            idx = order[(k * n_pairs) % n:][:n_pairs]
            if len(idx) < n_pairs:
                idx = np.concatenate([idx, order[:n_pairs - len(idx)]])
            views = augment_frames(np.repeat(data.frames[idx], 2, axis=0), rng, config.augment)
            labels = np.repeat(data.labels[idx], 2)
            reprs = backbone_frames(views)
            emb = nn.mlp_forward(spec, params, reprs)
            loss, g_emb = supcon_loss(emb, labels, config.tau)
            grad, _ = nn.mlp_gradient(spec, params, reprs, g_emb)
            params, state = nn.adam_step(params, grad, state)
            losses.append(loss)
        margin = class_margin(nn.mlp_forward(spec, params, eval_repr), eval_set.labels)
        curve.append(TrainRecord(epoch, float(np.mean(losses)), margin))
        log.debug("supcon epoch %d loss %.4f margin %.3f", epoch, curve[-1].mean_loss, margin)
    return params, curve
