"""Desk-scale bench for studying utility/privacy/fairness trade-offs in
speaker-verification embeddings: adversarial gender suppression during
fine-tuning, a toy contrastive pre-training objective, and a full score-
and activation-level evaluation suite (EER/AUC, fairness discrepancy
rates, activation discrepancies, attribute-inference attacks)."""

__version__ = "0.1.0"

__all__ = [
    "analysis",
    "attacks",
    "datamodel",
    "fairness",
    "finetune",
    "gradkit",
    "losses",
    "metrics",
    "pretrain_sim",
    "seeding",
]
