"""Fine-tuning of the three model variants on a labeled frame corpus.

The backbone is a stack of frame-wise linear+ReLU layers; utterance
embeddings are time means of the final layer.  A speaker head is trained
with the angular-margin loss; a gender head is trained with cross-entropy
and is wired three ways:

  * ``M_s``    -- speaker loss only; the gender head trains as a detached
                  probe and never back-propagates into the backbone;
  * ``M_sg``   -- joint speaker + gender loss;
  * ``M_sga``  -- like ``M_sg`` but the gender branch passes through
                  gradient reversal, so the backbone unlearns gender.

For the first ``warmup_steps`` only the heads train; the backbone stays
frozen.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import gradkit as gk
from .datamodel import EmbeddingRecord, EmbeddingSet, GroupLabel, LayerActivationSet
from .losses import AamConfig, MixConfig, aam_softmax_loss_batch, combined_loss
from .seeding import derive_seed

__all__ = [
    "FineTuneConfig",
    "ModelDims",
    "TrainedModel",
    "VARIANTS",
    "Variant",
    "build_model",
    "extract_embeddings",
    "extract_layer_activations",
    "finetune",
    "load_model_checkpoint",
    "save_model_checkpoint",
]


@dataclass(frozen=True)
class Variant:
    """A named weighting of the speaker/gender objectives."""

    tag: str
    lam: float
    adversarial: bool

    def mix(self, grl_scale: float) -> MixConfig:
        return MixConfig(lam=self.lam, adversarial=self.adversarial, grl_scale=grl_scale)


VARIANTS: dict[str, Variant] = {
    "M_s": Variant("M_s", lam=1.0, adversarial=False),
    "M_sg": Variant("M_sg", lam=0.5, adversarial=False),
    "M_sga": Variant("M_sga", lam=0.5, adversarial=True),
}


@dataclass(frozen=True)
class ModelDims:
    frame_dim: int = 16
    hidden_dim: int = 64
    embedding_dim: int = 32
    depth: int = 4

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("backbone needs at least 2 layers")


@dataclass(frozen=True)
class FineTuneConfig:
    variant: Variant
    warmup_steps: int = 200
    total_steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 0.02
    momentum: float = 0.9
    grl_scale: float = 0.3
    holdout_fraction: float = 0.1
    seed: int = 0
    aam_scale: float = 30.0
    aam_margin: float = 0.2

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"warmup_steps must lie in [0, total_steps], got {self.warmup_steps}/{self.total_steps}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")


@dataclass
class TrainedModel:
    dims: ModelDims
    variant: Variant
    backbone: list[tuple[gk.Parameter, gk.Parameter]]
    speaker_head: gk.Parameter
    gender_head: tuple[gk.Parameter, gk.Parameter]
    speaker_ids: list[str]
    config_hash: str
    seed: int
    step: int = 0
    metrics: dict = field(default_factory=dict)
    history: list[tuple[float, float, float]] = field(default_factory=list)

    def parameters(self) -> dict[str, gk.Parameter]:
        out = {}
        for i, (w, b) in enumerate(self.backbone):
            out[f"backbone.w{i}"] = w
            out[f"backbone.b{i}"] = b
        out["speaker_head.w"] = self.speaker_head
        out["gender_head.w"] = self.gender_head[0]
        out["gender_head.b"] = self.gender_head[1]
        return out

    def backbone_params(self) -> list[gk.Parameter]:
        return [p for pair in self.backbone for p in pair]

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.parameters()):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.parameters()[name].data, dtype="<f8").tobytes())
        return digest.hexdigest()


def _uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[gk.Parameter, gk.Parameter]:
    bound = 1.0 / np.sqrt(fan_in)
    return (
        gk.Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out))),
        gk.Parameter(rng.uniform(-bound, bound, size=fan_out)),
    )


def build_model(
    variant: Variant,
    dims: ModelDims,
    speaker_ids: list[str],
    seed: int,
    config_hash: str = "",
) -> TrainedModel:
    """Untrained model with deterministic uniform fan-in initialization.
    The gender head exists for every variant."""
    widths = [dims.frame_dim] + [dims.hidden_dim] * (dims.depth - 1) + [dims.embedding_dim]
    backbone = []
    for i in range(dims.depth):
        rng = np.random.default_rng(derive_seed(seed, "init", "backbone", i))
        backbone.append(_uniform_init(rng, widths[i], widths[i + 1]))
    spk_rng = np.random.default_rng(derive_seed(seed, "init", "speaker_head"))
    n_speakers = len(speaker_ids)
    bound = 1.0 / np.sqrt(dims.embedding_dim)
    speaker_head = gk.Parameter(spk_rng.uniform(-bound, bound, size=(dims.embedding_dim, n_speakers)))
    gen_rng = np.random.default_rng(derive_seed(seed, "init", "gender_head"))
    gender_head = _uniform_init(gen_rng, dims.embedding_dim, 2)
    return TrainedModel(
        dims=dims,
        variant=variant,
        backbone=backbone,
        speaker_head=speaker_head,
        gender_head=gender_head,
        speaker_ids=list(speaker_ids),
        config_hash=config_hash,
        seed=seed,
    )


def _backbone_layers(model: TrainedModel, frames: gk.Tensor) -> list[gk.Tensor]:
    """Post-activation output of every backbone layer for flat frame rows."""
    outs = []
    h = frames
    for w, b in model.backbone:
        h = gk.relu(gk.linear(h, w, b))
        outs.append(h)
    return outs


def _pooled_embeddings(model: TrainedModel, batch: np.ndarray) -> gk.Tensor:
    """(n, steps, frame_dim) batch -> (n, embedding_dim) time means."""
    n, t_steps, frame_dim = batch.shape
    flat = gk.Tensor(batch.reshape(n * t_steps, frame_dim))
    final = _backbone_layers(model, flat)[-1]
    return gk.segment_mean(final, t_steps)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _balanced_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean per-class recall: prior-free, so a classifier collapsed onto the
    majority class scores 0.5 on two imbalanced classes."""
    pred = np.argmax(logits, axis=1)
    recalls = [np.mean(pred[labels == c] == c) for c in np.unique(labels)]
    return float(np.mean(recalls))


def _gender_logits(model: TrainedModel, batch: np.ndarray) -> np.ndarray:
    emb = _pooled_embeddings(model, batch)
    w, b = model.gender_head
    return emb.data @ w.data + b.data


def _speaker_cosine_logits(model: TrainedModel, batch: np.ndarray) -> np.ndarray:
    emb = _pooled_embeddings(model, batch).data
    e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    w = model.speaker_head.data
    w = w / np.linalg.norm(w, axis=0, keepdims=True)
    return e @ w


def finetune(
    model: TrainedModel,
    frames: np.ndarray,
    speaker_labels: np.ndarray,
    gender_labels: np.ndarray,
    cfg: FineTuneConfig,
) -> TrainedModel:
    """Train in place: heads only during warm-up, everything afterward.

    ``frames``: (utterances, steps, frame_dim); labels are integer
    speaker indices and 0/1 gender codes.  Records per-step losses and
    final train/holdout accuracies in ``model.history``/``model.metrics``.
    """
    n_utts = frames.shape[0]
    if n_utts == 0:
        raise ValueError("empty corpus")
    speaker_labels = np.asarray(speaker_labels, dtype=np.intp)
    gender_labels = np.asarray(gender_labels, dtype=np.intp)
    if len(np.unique(speaker_labels)) < 2:
        raise ValueError("need at least two speakers")
    n_speakers = len(model.speaker_ids)
    aam = AamConfig(scale=cfg.aam_scale, margin=cfg.aam_margin, n_classes=n_speakers)
    mix = model.variant.mix(cfg.grl_scale)

    holdout = np.zeros(n_utts, dtype=bool)
    if cfg.holdout_fraction > 0.0:
        split_rng = np.random.default_rng(derive_seed(cfg.seed, "finetune-holdout", model.variant.tag))
        for spk in np.unique(speaker_labels):
            idx = np.flatnonzero(speaker_labels == spk)
            k = int(round(cfg.holdout_fraction * len(idx)))
            if k > 0:
                holdout[split_rng.choice(idx, size=k, replace=False)] = True
    train_idx = np.flatnonzero(~holdout)
    if len(train_idx) == 0:
        raise ValueError("holdout fraction leaves no training utterances")

    params = list(model.parameters().values())
    gender_params = [model.gender_head[0], model.gender_head[1]]

    for p in model.backbone_params():
        p.frozen = True

    for step in range(cfg.total_steps):
        if step == cfg.warmup_steps:
            for p in model.backbone_params():
                p.frozen = False
        rng = np.random.default_rng(derive_seed(cfg.seed, "finetune-batch", model.variant.tag, step))
        take = rng.choice(train_idx, size=min(cfg.batch_size, len(train_idx)), replace=False)
        batch = frames[take]
        spk = speaker_labels[take]
        gen = gender_labels[take]

        with gk.Tape() as tape:
            emb = _pooled_embeddings(model, batch)
            loss_s = aam_softmax_loss_batch(emb, model.speaker_head, spk, aam)
            if model.variant.lam < 1.0:
                branch = gk.gradient_reversal(emb, cfg.grl_scale) if mix.adversarial else emb
                g_logits = gk.linear(branch, model.gender_head[0], model.gender_head[1])
                loss_g = gk.cross_entropy_batch(g_logits, gen)
            else:
                loss_g = gk.Tensor(0.0)
            total = combined_loss(loss_s, loss_g, mix)
        if not np.isfinite(total.data):
            raise FloatingPointError(f"non-finite loss at step {step} for {model.variant.tag}")
        tape.backward(total)
        gk.sgd_step(params, cfg.learning_rate, cfg.momentum)

        if model.variant.lam == 1.0:
            # detached probe: gender head trains on frozen embeddings and
            # never sends gradient into the backbone
            with gk.Tape() as probe_tape:
                emb_detached = gk.Tensor(emb.data)
                g_logits = gk.linear(emb_detached, model.gender_head[0], model.gender_head[1])
                loss_g = gk.cross_entropy_batch(g_logits, gen)
            probe_tape.backward(loss_g)
            gk.sgd_step(gender_params, cfg.learning_rate, cfg.momentum)

        model.history.append((float(total.data), float(loss_s.data), float(loss_g.data)))
        model.step += 1

    train_frames = frames[train_idx]
    model.metrics["speaker_train_accuracy"] = _accuracy(
        _speaker_cosine_logits(model, train_frames), speaker_labels[train_idx]
    )
    model.metrics["gender_train_accuracy"] = _balanced_accuracy(
        _gender_logits(model, train_frames), gender_labels[train_idx]
    )
    if holdout.any():
        hold_frames = frames[holdout]
        model.metrics["gender_holdout_accuracy"] = _balanced_accuracy(
            _gender_logits(model, hold_frames), gender_labels[holdout]
        )
        model.metrics["speaker_holdout_accuracy"] = _accuracy(
            _speaker_cosine_logits(model, hold_frames), speaker_labels[holdout]
        )
    return model


def extract_embeddings(
    model: TrainedModel,
    frames: np.ndarray,
    utterance_ids: list[str],
    speaker_ids: list[str],
    groups: list[GroupLabel],
) -> EmbeddingSet:
    """One record per utterance: the time mean of the final backbone layer,
    stored at 32-bit precision; provenance is the variant tag."""
    emb = _pooled_embeddings(model, frames).data.astype(np.float32)
    records = tuple(
        EmbeddingRecord(u, s, g, emb[i]) for i, (u, s, g) in enumerate(zip(utterance_ids, speaker_ids, groups))
    )
    return EmbeddingSet(model.dims.embedding_dim, records, model.variant.tag)


def extract_layer_activations(
    model: TrainedModel,
    frames: np.ndarray,
    groups: list[GroupLabel],
    group: GroupLabel,
) -> list[LayerActivationSet]:
    """Per backbone layer, the (neurons x frames) post-activation matrix of
    the group's utterances, frames concatenated in corpus order."""
    keep = np.array([g == group for g in groups], dtype=bool)
    if not keep.any():
        raise ValueError(f"group absent from corpus: {GroupLabel(group).name}")
    sub = frames[keep]
    n, t_steps, frame_dim = sub.shape
    flat = gk.Tensor(sub.reshape(n * t_steps, frame_dim))
    layers = _backbone_layers(model, flat)
    return [
        LayerActivationSet(layer_index=i, group=group, activations=layer.data.T.copy())
        for i, layer in enumerate(layers)
    ]


def save_model_checkpoint(model: TrainedModel, path) -> None:
    from dataclasses import asdict

    from .checkpoint import save_checkpoint

    cfg = {
        "dims": asdict(model.dims),
        "variant": asdict(model.variant),
        "speaker_ids": model.speaker_ids,
        "config_hash": model.config_hash,
        "metrics": model.metrics,
    }
    save_checkpoint(path, "finetune", cfg, model.seed, model.step, model.parameters())


def load_model_checkpoint(path) -> TrainedModel:
    from .checkpoint import load_checkpoint

    header, params = load_checkpoint(path)
    if header["kind"] != "finetune":
        raise ValueError(f"expected a finetune checkpoint, got kind {header['kind']!r}")
    cfg = header["config"]
    variant = Variant(**cfg["variant"])
    model = build_model(
        variant,
        ModelDims(**cfg["dims"]),
        cfg["speaker_ids"],
        header["seed"],
        cfg["config_hash"],
    )
    model.step = int(header["step"])
    model.metrics = dict(cfg.get("metrics", {}))
    for name, param in model.parameters().items():
        param.data = params[name].data
    return model
