"""Training losses: additive-angular-margin speaker classification, the
mixed speaker/gender objective, and the contrastive + diversity pair used
by the self-supervised pre-training simulation.

All functions build on :mod:`biaudit.gradkit` tensors and are fully
differentiable under an active tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gradkit as gk

__all__ = [
    "AamConfig",
    "MixConfig",
    "PretrainLossConfig",
    "aam_softmax_loss",
    "aam_softmax_loss_batch",
    "combined_loss",
    "contrastive_loss",
    "diversity_loss",
]


@dataclass(frozen=True)
class AamConfig:
    """Angular-margin softmax hyperparameters."""

    scale: float = 30.0
    margin: float = 0.2
    n_classes: int = 2

    def __post_init__(self):
        if self.scale <= 0.0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not 0.0 <= self.margin < math.pi / 2.0:
            raise ValueError(f"margin must lie in [0, pi/2), got {self.margin}")


@dataclass(frozen=True)
class PretrainLossConfig:
    """Contrastive temperature, diversity weight, and codebook geometry."""

    kappa: float = 0.1
    diversity_weight: float = 0.1
    n_distractors: int = 10
    n_codebooks: int = 2
    codebook_size: int = 8

    def __post_init__(self):
        if self.kappa <= 0.0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if self.diversity_weight < 0.0:
            raise ValueError(f"diversity_weight must be non-negative, got {self.diversity_weight}")
        if self.n_distractors < 1 or self.n_codebooks < 1 or self.codebook_size < 2:
            raise ValueError("invalid codebook geometry")


@dataclass(frozen=True)
class MixConfig:
    """Weighting of the speaker loss against the gender loss.

    ``lam`` = 1 removes the gender branch from the total loss value.  With
    ``adversarial`` set, the caller routes the gender branch through
    gradient reversal at ``grl_scale``; the reported loss value is the same
    either way, only backbone gradients flip.
    """

    lam: float = 0.5
    adversarial: bool = False
    grl_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.grl_scale < 0.0:
            raise ValueError(f"grl_scale must be non-negative, got {self.grl_scale}")


def aam_softmax_loss_batch(embeddings, weights, labels, cfg: AamConfig) -> gk.Tensor:
    """Additive-angular-margin softmax over a batch of embeddings.

    Rows of ``embeddings`` (n, d) and columns of ``weights`` (d, n_classes)
    are L2-normalized, giving cosines of the angles between them; the
    margin is added to the angle of each row's true class before scaling.
    """
    emb = embeddings if isinstance(embeddings, gk.Tensor) else gk.Tensor(embeddings)
    labels = np.asarray(labels, dtype=np.intp)
    n, d = emb.data.shape
    if weights.data.shape != (d, cfg.n_classes):
        raise ValueError(f"weights shape {weights.data.shape} does not match (dim={d}, classes={cfg.n_classes})")
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise ValueError("labels out of range")

    e_hat = gk.l2_normalize_rows(emb)
    w_hat = gk.transpose(gk.l2_normalize_rows(gk.transpose(weights)))
    cos = gk.matmul(e_hat, w_hat)  # (n, classes), cos(theta_j) per row

    onehot = np.zeros((n, cfg.n_classes))
    onehot[np.arange(n), labels] = 1.0
    cos_y = gk.sum_axis(gk.mul(cos, onehot), axis=1)  # (n,)
    sin_y = gk.sqrt(gk.relu(gk.sub(1.0, gk.mul(cos_y, cos_y))))
    # cos(theta_y + m) = cos theta_y cos m - sin theta_y sin m
    cos_y_m = gk.sub(gk.mul(cos_y, math.cos(cfg.margin)), gk.mul(sin_y, math.sin(cfg.margin)))
    delta = gk.reshape(gk.sub(cos_y_m, cos_y), (n, 1))
    logits = gk.mul(gk.add(cos, gk.mul(delta, onehot)), cfg.scale)
    return gk.cross_entropy_batch(logits, labels, reduction="mean")


def aam_softmax_loss(embedding, weights, label: int, cfg: AamConfig) -> gk.Tensor:
    """Single-embedding form of :func:`aam_softmax_loss_batch`."""
    emb = embedding if isinstance(embedding, gk.Tensor) else gk.Tensor(embedding)
    if emb.data.ndim != 1:
        raise ValueError(f"expected a 1-d embedding, got shape {emb.data.shape}")
    return aam_softmax_loss_batch(gk.reshape(emb, (1, emb.data.shape[0])), weights, [int(label)], cfg)


def combined_loss(loss_s, loss_g, cfg: MixConfig) -> gk.Tensor:
    """lam * speaker loss + (1 - lam) * gender loss.

    The adversarial flag never changes this value: reversal sits upstream,
    between the backbone and the gender head, and is identity forward.
    """
    return gk.add(gk.mul(loss_s, cfg.lam), gk.mul(loss_g, 1.0 - cfg.lam))


def contrastive_loss(
    context,
    quantized,
    mask: Sequence[bool],
    distractor_index_sets: Sequence[Sequence[int]],
    cfg: PretrainLossConfig,
) -> gk.Tensor:
    """Sum over masked steps of the negative log-probability of picking the
    step's own quantized vector against its distractors, with cosine
    similarities tempered by kappa."""
    ctx = context if isinstance(context, gk.Tensor) else gk.Tensor(context)
    qtz = quantized if isinstance(quantized, gk.Tensor) else gk.Tensor(quantized)
    mask = np.asarray(mask, dtype=bool)
    t_steps = ctx.data.shape[0]
    if qtz.data.shape != ctx.data.shape or mask.shape != (t_steps,):
        raise ValueError("context, quantized, and mask shapes disagree")
    masked = np.flatnonzero(mask)
    if len(masked) == 0:
        raise ValueError("empty mask: no masked steps to contrast")
    if len(distractor_index_sets) != len(masked):
        raise ValueError("one distractor set per masked step is required")

    k = cfg.n_distractors
    rows, cols = [], []
    for step, distractors in zip(masked, distractor_index_sets):
        distractors = list(distractors)
        if len(distractors) != k:
            raise ValueError(f"step {step} has {len(distractors)} distractors, expected {k}")
        if step in distractors:
            raise ValueError(f"step {step} lists itself as a distractor")
        rows.extend([int(step)] * (k + 1))
        cols.append(int(step))
        cols.extend(int(j) for j in distractors)

    c_hat = gk.l2_normalize_rows(ctx)
    q_hat = gk.l2_normalize_rows(qtz)
    sims = gk.sum_axis(gk.mul(gk.take_rows(c_hat, rows), gk.take_rows(q_hat, cols)), axis=1)
    logits = gk.mul(gk.reshape(sims, (len(masked), k + 1)), 1.0 / cfg.kappa)
    return gk.cross_entropy_batch(logits, np.zeros(len(masked), dtype=np.intp), reduction="sum")


def diversity_loss(per_codebook_mean_probs, cfg: PretrainLossConfig) -> gk.Tensor:
    """Negative mean entropy of the per-codebook average distributions,
    weighted by the diversity weight and 1/(codebooks * codebook size).

    Always lies in [-weight * ln(V) / V, 0]; minimal exactly at uniform
    usage of every codeword.
    """
    probs = (
        per_codebook_mean_probs
        if isinstance(per_codebook_mean_probs, gk.Tensor)
        else gk.Tensor(per_codebook_mean_probs)
    )
    g, v = probs.data.shape
    row_sums = probs.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-9):
        raise ValueError(f"rows must be probability vectors; sums are {row_sums}")
    scale = cfg.diversity_weight / (g * v)
    # -alpha/(G V) * sum_g H(p_g) == alpha/(G V) * sum of p ln p
    return gk.mul(gk.sum_all(gk.xlogx(probs)), scale)
