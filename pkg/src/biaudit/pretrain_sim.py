"""Desk-scale simulation of the self-supervised pre-training objective:
a frame encoder, span masking, codebook quantization via straight-through
Gumbel-softmax, distractor sampling across the batch, and the joint
contrastive + diversity loss.

The encoder is a frame-wise MLP and the context module reads a three-step
window of (masked) latents, so a masked step must be predicted from its
unmasked neighbors; the quantization path always consumes the unmasked
latents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradkit as gk
from . import losses
from .seeding import derive_seed

__all__ = [
    "CodebookSet",
    "MaskPlan",
    "PretrainModel",
    "ToyEncoderConfig",
    "build_pretrain_model",
    "forward_parts",
    "load_pretrain_checkpoint",
    "plan_mask",
    "pretrain_step",
    "quantize",
    "run_pretraining",
    "save_pretrain_checkpoint",
]


@dataclass(frozen=True)
class MaskPlan:
    """Boolean mask over time steps; every step drawn as a span start turns
    itself and the next span-1 steps on."""

    mask: np.ndarray
    mask_prob: float
    span: int

    def __post_init__(self):
        arr = np.asarray(self.mask, dtype=bool)
        arr.flags.writeable = False
        object.__setattr__(self, "mask", arr)


def plan_mask(t_steps: int, mask_prob: float, span: int, seed: int) -> MaskPlan:
    """Draw a span mask; redraws until at least one step is masked."""
    if not 0.0 < mask_prob < 1.0:
        raise ValueError(f"mask_prob must lie in (0, 1), got {mask_prob}")
    if span < 1:
        raise ValueError(f"span must be at least 1, got {span}")
    if t_steps < span:
        raise ValueError(f"sequence of {t_steps} steps is shorter than span {span}")
    rng = np.random.default_rng(seed)
    while True:
        starts = rng.random(t_steps) < mask_prob
        mask = np.zeros(t_steps, dtype=bool)
        for s in np.flatnonzero(starts):
            mask[s : s + span] = True
        if mask.any():
            return MaskPlan(mask, mask_prob, span)


@dataclass(frozen=True)
class ToyEncoderConfig:
    frame_dim: int = 16
    hidden_dim: int = 32
    latent_dim: int = 16
    context_dim: int = 16
    codeword_dim: int = 8


@dataclass
class CodebookSet:
    """Per-codebook logit projections and codewords, plus the projection
    taking the concatenated macro-codeword to the context dimension."""

    n_codebooks: int
    codebook_size: int
    codeword_dim: int
    logit_weights: list[gk.Parameter]
    logit_biases: list[gk.Parameter]
    codebooks: list[gk.Parameter]
    out_weight: gk.Parameter
    out_bias: gk.Parameter


@dataclass
class PretrainModel:
    config: ToyEncoderConfig
    loss_config: losses.PretrainLossConfig
    encoder: dict[str, gk.Parameter]
    context: dict[str, gk.Parameter]
    mask_vector: gk.Parameter
    codebooks: CodebookSet
    seed: int
    step: int = 0
    history: list[tuple[float, float, float]] = field(default_factory=list)

    def parameters(self) -> dict[str, gk.Parameter]:
        out = dict(self.encoder)
        out.update(self.context)
        out["mask_vector"] = self.mask_vector
        cb = self.codebooks
        for g in range(cb.n_codebooks):
            out[f"quantizer.logit_w{g}"] = cb.logit_weights[g]
            out[f"quantizer.logit_b{g}"] = cb.logit_biases[g]
            out[f"quantizer.codebook{g}"] = cb.codebooks[g]
        out["quantizer.out_w"] = cb.out_weight
        out["quantizer.out_b"] = cb.out_bias
        return out


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[gk.Parameter, gk.Parameter]:
    bound = 1.0 / np.sqrt(fan_in)
    w = gk.Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    b = gk.Parameter(rng.uniform(-bound, bound, size=fan_out))
    return w, b


def build_pretrain_model(cfg: ToyEncoderConfig, loss_cfg: losses.PretrainLossConfig, seed: int) -> PretrainModel:
    enc_rng = np.random.default_rng(derive_seed(seed, "pretrain-init", "encoder"))
    w1, b1 = _init_linear(enc_rng, cfg.frame_dim, cfg.hidden_dim)
    w2, b2 = _init_linear(enc_rng, cfg.hidden_dim, cfg.latent_dim)
    ctx_rng = np.random.default_rng(derive_seed(seed, "pretrain-init", "context"))
    cw1, cb1 = _init_linear(ctx_rng, 3 * cfg.latent_dim, cfg.hidden_dim)
    cw2, cb2 = _init_linear(ctx_rng, cfg.hidden_dim, cfg.context_dim)
    q_rng = np.random.default_rng(derive_seed(seed, "pretrain-init", "quantizer"))
    logit_w, logit_b, books = [], [], []
    for g in range(loss_cfg.n_codebooks):
        # unit-normal logit projection: codeword usage starts peaked, which
        # leaves the diversity term room to spread it out
        logit_w.append(gk.Parameter(q_rng.normal(size=(cfg.latent_dim, loss_cfg.codebook_size))))
        logit_b.append(gk.Parameter(np.zeros(loss_cfg.codebook_size)))
        books.append(gk.Parameter(q_rng.normal(size=(loss_cfg.codebook_size, cfg.codeword_dim))))
    out_w, out_b = _init_linear(q_rng, loss_cfg.n_codebooks * cfg.codeword_dim, cfg.context_dim)
    mask_vec = gk.Parameter(np.random.default_rng(derive_seed(seed, "pretrain-init", "mask")).normal(size=cfg.latent_dim))
    return PretrainModel(
        config=cfg,
        loss_config=loss_cfg,
        encoder={"encoder.w1": w1, "encoder.b1": b1, "encoder.w2": w2, "encoder.b2": b2},
        context={"context.w1": cw1, "context.b1": cb1, "context.w2": cw2, "context.b2": cb2},
        mask_vector=mask_vec,
        codebooks=CodebookSet(
            loss_cfg.n_codebooks, loss_cfg.codebook_size, cfg.codeword_dim, logit_w, logit_b, books, out_w, out_b
        ),
        seed=seed,
    )


def _encode(model: PretrainModel, frames: gk.Tensor) -> gk.Tensor:
    h = gk.relu(gk.linear(frames, model.encoder["encoder.w1"], model.encoder["encoder.b1"]))
    return gk.relu(gk.linear(h, model.encoder["encoder.w2"], model.encoder["encoder.b2"]))


def _context(model: PretrainModel, masked_latents: gk.Tensor, prev_idx: np.ndarray, next_idx: np.ndarray) -> gk.Tensor:
    window = gk.concat_cols(
        [gk.take_rows(masked_latents, prev_idx), masked_latents, gk.take_rows(masked_latents, next_idx)]
    )
    h = gk.relu(gk.linear(window, model.context["context.w1"], model.context["context.b1"]))
    # linear output head: context vectors must be free to match any
    # quantized direction, and an all-zero row would break cosine scoring
    return gk.linear(h, model.context["context.w2"], model.context["context.b2"])


def quantize(
    latents: gk.Tensor,
    codebooks: CodebookSet,
    temperature: float,
    stream: gk.NoiseStream,
) -> tuple[gk.Tensor, gk.Tensor]:
    """Select one codeword per step and codebook with straight-through
    Gumbel-softmax, concatenate, and project to the context dimension.

    Returns ``(quantized, probs)``: ``probs`` stacks the per-codebook
    batch-average selection distributions, taken as the plain softmax of
    the projection logits (no noise, no temperature) so the diversity term
    acts on the full-strength usage statistics.
    """
    selected, avg_probs = [], []
    for g in range(codebooks.n_codebooks):
        logits = gk.linear(latents, codebooks.logit_weights[g], codebooks.logit_biases[g])
        hard, _ = gk.gumbel_softmax_parts(logits, temperature, stream)
        selected.append(gk.matmul(hard, codebooks.codebooks[g]))
        avg_probs.append(gk.mean_pool_time(gk.softmax(logits)))
    macro = gk.concat_cols(selected)
    quantized = gk.linear(macro, codebooks.out_weight, codebooks.out_bias)
    return quantized, gk.stack_rows(avg_probs)


def _neighbor_indices(n_seqs: int, t_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Previous/next flat row index within each sequence, clamped at the
    sequence edges (no bleed across sequences)."""
    base = np.arange(n_seqs * t_steps)
    offs = base % t_steps
    prev_idx = np.where(offs > 0, base - 1, base)
    next_idx = np.where(offs < t_steps - 1, base + 1, base)
    return prev_idx, next_idx


def _sample_distractors(masked_idx: np.ndarray, k: int, rng: np.random.Generator) -> list[list[int]]:
    if len(masked_idx) <= k:
        raise ValueError(f"insufficient data: need more than {k} masked steps in the batch, got {len(masked_idx)}")
    sets = []
    for step in masked_idx:
        others = masked_idx[masked_idx != step]
        sets.append([int(x) for x in rng.choice(others, size=k, replace=False)])
    return sets


def forward_parts(
    model: PretrainModel,
    batch: np.ndarray,
    flat_mask: np.ndarray,
    temperature: float,
    stream: gk.NoiseStream,
) -> tuple[gk.Tensor, gk.Tensor, gk.Tensor]:
    """Forward pass pieces: (contexts, quantized, probs).

    Masking replaces latent rows on the context path only; quantization
    always consumes the unmasked latents.
    """
    n_seqs, t_steps, frame_dim = batch.shape
    frames = gk.Tensor(batch.reshape(n_seqs * t_steps, frame_dim))
    latents = _encode(model, frames)
    keep = (~flat_mask).astype(np.float64)[:, None]
    masked_latents = gk.add(
        gk.mul(latents, keep),
        gk.mul(gk.reshape(model.mask_vector, (1, -1)), flat_mask.astype(np.float64)[:, None]),
    )
    prev_idx, next_idx = _neighbor_indices(n_seqs, t_steps)
    contexts = _context(model, masked_latents, prev_idx, next_idx)
    quantized, probs = quantize(latents, model.codebooks, temperature, stream)
    return contexts, quantized, probs


def pretrain_step(
    batch: np.ndarray,
    model: PretrainModel,
    temperature: float,
    mask_prob: float,
    mask_span: int,
    learning_rate: float,
    momentum: float,
) -> tuple[float, float, float]:
    """One optimization step on a (sequences, steps, frame dim) batch.
    Returns (total, contrastive, diversity) loss values."""
    if batch.ndim != 3 or batch.shape[0] == 0:
        raise ValueError(f"expected a non-empty (sequences, steps, dims) batch, got shape {batch.shape}")
    n_seqs, t_steps, _ = batch.shape
    step_seed = derive_seed(model.seed, "pretrain-step", model.step)

    masks = [
        plan_mask(t_steps, mask_prob, mask_span, derive_seed(step_seed, "mask", i)).mask for i in range(n_seqs)
    ]
    flat_mask = np.concatenate(masks)
    masked_idx = np.flatnonzero(flat_mask)
    distractors = _sample_distractors(
        masked_idx, model.loss_config.n_distractors, np.random.default_rng(derive_seed(step_seed, "distractors"))
    )
    noise = gk.NoiseStream(derive_seed(step_seed, "gumbel"))

    with gk.Tape() as tape:
        contexts, quantized, probs = forward_parts(model, batch, flat_mask, temperature, noise)
        loss_m = losses.contrastive_loss(contexts, quantized, flat_mask, distractors, model.loss_config)
        loss_d = losses.diversity_loss(probs, model.loss_config)
        loss_total = gk.add(loss_m, loss_d)
    if not np.isfinite(loss_total.data):
        raise FloatingPointError(f"non-finite pre-training loss at step {model.step}")
    tape.backward(loss_total)
    gk.sgd_step(model.parameters().values(), learning_rate, momentum)

    model.step += 1
    out = (float(loss_total.data), float(loss_m.data), float(loss_d.data))
    model.history.append(out)
    return out


def run_pretraining(
    model: PretrainModel,
    sequences: np.ndarray,
    n_steps: int,
    temperature: float = 2.0,
    mask_prob: float = 0.065,
    mask_span: int = 2,
    learning_rate: float = 0.01,
    momentum: float = 0.0,
) -> PretrainModel:
    """Full-batch training loop over a fixed set of sequences."""
    for _ in range(n_steps):
        pretrain_step(sequences, model, temperature, mask_prob, mask_span, learning_rate, momentum)
    return model


def save_pretrain_checkpoint(model: PretrainModel, path) -> None:
    from dataclasses import asdict

    from .checkpoint import save_checkpoint

    cfg = {"encoder": asdict(model.config), "loss": asdict(model.loss_config)}
    save_checkpoint(path, "pretrain", cfg, model.seed, model.step, model.parameters())


def load_pretrain_checkpoint(path) -> PretrainModel:
    from .checkpoint import load_checkpoint

    header, params = load_checkpoint(path)
    if header["kind"] != "pretrain":
        raise ValueError(f"expected a pretrain checkpoint, got kind {header['kind']!r}")
    cfg = ToyEncoderConfig(**header["config"]["encoder"])
    loss_cfg = losses.PretrainLossConfig(**header["config"]["loss"])
    model = build_pretrain_model(cfg, loss_cfg, header["seed"])
    model.step = int(header["step"])
    for name, param in model.parameters().items():
        param.data = params[name].data
    return model
