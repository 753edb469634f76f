"""Gender-inference attacks on utterance embeddings.

An attacker trains a two-layer fully-connected classifier on embeddings
from one model ("train source") and is scored by AUC on embeddings from a
possibly different model ("test source"):

  * uninformed (uIA): trained on unprotected embeddings (``M_s``/``M_sg``),
    evaluated either on the same model or on the protected ``M_sga``;
  * informed (IA): trained and evaluated on ``M_sga`` embeddings.

Attack populations are speaker-disjoint: the attacker never trains on a
speaker it is evaluated on.  AUC below 0.5 is reported as-is; an
uninformed attacker has no way to exploit inversion.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import gradkit as gk
from .datamodel import EmbeddingSet, GroupLabel
from .metrics import mann_whitney_auc
from .seeding import derive_seed

__all__ = [
    "AttackerConfig",
    "AttackerNet",
    "THREAT_ROWS",
    "ThreatReport",
    "ThreatRow",
    "evaluate_attack",
    "run_threat_matrix",
    "save_threat_csv",
    "train_attacker",
]

# canonical threat matrix: (threat model, train source, test source)
THREAT_ROWS: tuple[tuple[str, str, str], ...] = (
    ("uIA", "M_s", "M_s"),
    ("uIA", "M_s", "M_sga"),
    ("uIA", "M_sg", "M_sg"),
    ("uIA", "M_sg", "M_sga"),
    ("IA", "M_sga", "M_sga"),
)


@dataclass(frozen=True)
class AttackerConfig:
    hidden_units: int = 64
    epochs: int = 50
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    validation_fraction: float = 0.3
    seed: int = 0


@dataclass
class AttackerNet:
    """linear -> ReLU -> linear(2), with input standardization folded in."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    input_mean: np.ndarray
    input_scale: np.ndarray
    best_validation_auc: float
    config: AttackerConfig

    def scores(self, embedding_set: EmbeddingSet) -> np.ndarray:
        """Female-class logit per record (AUC is invariant to the monotone
        logit/probability choice)."""
        x = (embedding_set.matrix().astype(np.float64) - self.input_mean) / self.input_scale
        h = np.maximum(x @ self.w1 + self.b1, 0.0)
        logits = h @ self.w2 + self.b2
        return logits[:, int(GroupLabel.FEMALE)]


def _gender_auc(scores: np.ndarray, groups: np.ndarray) -> float:
    pos = scores[groups == int(GroupLabel.FEMALE)]
    neg = scores[groups == int(GroupLabel.MALE)]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need both genders to compute attack AUC")
    return mann_whitney_auc(pos, neg)


def _speaker_split(embedding_set: EmbeddingSet, fraction: float, rng: np.random.Generator) -> tuple[set, set]:
    """Speaker-disjoint split, stratified by gender so both partitions keep
    both genders whenever each gender has at least two speakers."""
    speaker_group: dict[str, GroupLabel] = {}
    for r in embedding_set.records:
        speaker_group.setdefault(r.speaker_id, r.group)
    if len(speaker_group) < 2:
        raise ValueError("need at least two speakers to split")
    train: set[str] = set()
    val: set[str] = set()
    for group in sorted(set(speaker_group.values())):
        pool = [s for s in speaker_group if speaker_group[s] == group]
        order = rng.permutation(len(pool))
        n_val = int(round(fraction * len(pool)))
        if len(pool) >= 2:
            n_val = min(max(n_val, 1), len(pool) - 1)
        val.update(pool[i] for i in order[:n_val])
        train.update(pool[i] for i in order[n_val:])
    return train, val


def train_attacker(train_set: EmbeddingSet, cfg: AttackerConfig) -> AttackerNet:
    """Cross-entropy training with a speaker-disjoint validation split; the
    parameters with the best validation AUC are retained."""
    groups = np.array([int(r.group) for r in train_set.records], dtype=np.intp)
    if len(np.unique(groups)) < 2:
        raise ValueError("attacker training data must contain both genders")

    rng = np.random.default_rng(derive_seed(cfg.seed, "attacker-split"))
    train_spk, val_spk = _speaker_split(train_set, cfg.validation_fraction, rng)
    is_train = np.array([r.speaker_id in train_spk for r in train_set.records])
    x_all = train_set.matrix().astype(np.float64)
    x_train, y_train = x_all[is_train], groups[is_train]
    x_val, y_val = x_all[~is_train], groups[~is_train]
    if len(np.unique(y_train)) < 2 or len(np.unique(y_val)) < 2:
        raise ValueError("speaker split left a single-gender partition; adjust validation_fraction or data")

    mean = x_train.mean(axis=0)
    scale = x_train.std(axis=0)
    scale[scale == 0.0] = 1.0
    x_train = (x_train - mean) / scale
    x_val = (x_val - mean) / scale

    d = x_train.shape[1]
    init_rng = np.random.default_rng(derive_seed(cfg.seed, "attacker-init"))
    bound1 = 1.0 / np.sqrt(d)
    w1 = gk.Parameter(init_rng.uniform(-bound1, bound1, size=(d, cfg.hidden_units)))
    b1 = gk.Parameter(init_rng.uniform(-bound1, bound1, size=cfg.hidden_units))
    bound2 = 1.0 / np.sqrt(cfg.hidden_units)
    w2 = gk.Parameter(init_rng.uniform(-bound2, bound2, size=(cfg.hidden_units, 2)))
    b2 = gk.Parameter(init_rng.uniform(-bound2, bound2, size=2))
    params = [w1, b1, w2, b2]

    def val_auc() -> float:
        h = np.maximum(x_val @ w1.data + b1.data, 0.0)
        logits = h @ w2.data + b2.data
        return _gender_auc(logits[:, int(GroupLabel.FEMALE)], y_val)

    best = (val_auc(), [p.data.copy() for p in params])
    n = len(x_train)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, "attacker-epoch", epoch)).permutation(n)
        for start in range(0, n, cfg.batch_size):
            take = order[start : start + cfg.batch_size]
            with gk.Tape() as tape:
                h = gk.relu(gk.linear(gk.Tensor(x_train[take]), w1, b1))
                logits = gk.linear(h, w2, b2)
                loss = gk.cross_entropy_batch(logits, y_train[take])
            tape.backward(loss)
            gk.sgd_step(params, cfg.learning_rate, cfg.momentum)
        auc_now = val_auc()
        if auc_now > best[0]:
            best = (auc_now, [p.data.copy() for p in params])

    best_auc, (w1d, b1d, w2d, b2d) = best
    return AttackerNet(w1d, b1d, w2d, b2d, mean, scale, best_auc, cfg)


def evaluate_attack(attacker: AttackerNet, test_set: EmbeddingSet) -> float:
    """AUC of the attacker's female-logit scores against the true groups."""
    groups = np.array([int(r.group) for r in test_set.records], dtype=np.intp)
    return _gender_auc(attacker.scores(test_set), groups)


@dataclass(frozen=True)
class ThreatRow:
    threat_model: str
    train_source: str
    test_source: str
    auc: float


@dataclass(frozen=True)
class ThreatReport:
    rows: tuple[ThreatRow, ...]
    attacker_config: AttackerConfig
    train_speakers: tuple[str, ...]
    eval_speakers: tuple[str, ...]
    run_hash: str = ""


def run_threat_matrix(
    embedding_sets: dict[str, EmbeddingSet],
    cfg: AttackerConfig,
    attacker_fraction: float = 0.5,
    run_hash: str = "",
) -> ThreatReport:
    """Run the five canonical attack rows.

    All sets must cover the same speaker population.  Speakers are split
    once into an attacker-training pool and an evaluation pool; every row
    trains on the former (from its train-source set) and is scored on the
    latter (from its test-source set), with a per-row seed derived from
    the master attacker seed.
    """
    for tag in ("M_s", "M_sg", "M_sga"):
        if tag not in embedding_sets:
            raise ValueError(f"missing embedding set for {tag}")
    populations = [tuple(sorted(set(s.speakers()))) for s in embedding_sets.values()]
    if len(set(populations)) != 1:
        raise ValueError("embedding sets must share one speaker population")

    speakers = list(populations[0])
    rng = np.random.default_rng(derive_seed(cfg.seed, "threat-split"))
    order = rng.permutation(len(speakers))
    n_train = max(1, min(len(speakers) - 1, int(round(attacker_fraction * len(speakers)))))
    train_pool = {speakers[i] for i in order[:n_train]}
    eval_pool = set(speakers) - train_pool
    assert not (train_pool & eval_pool)

    rows = []
    for i, (threat, train_tag, test_tag) in enumerate(THREAT_ROWS):
        row_cfg = AttackerConfig(
            hidden_units=cfg.hidden_units,
            epochs=cfg.epochs,
            learning_rate=cfg.learning_rate,
            momentum=cfg.momentum,
            batch_size=cfg.batch_size,
            validation_fraction=cfg.validation_fraction,
            seed=derive_seed(cfg.seed, "threat-row", i, threat, train_tag, test_tag),
        )
        train_subset = embedding_sets[train_tag].subset(lambda r: r.speaker_id in train_pool)
        test_subset = embedding_sets[test_tag].subset(lambda r: r.speaker_id in eval_pool)
        attacker = train_attacker(train_subset, row_cfg)
        rows.append(ThreatRow(threat, train_tag, test_tag, evaluate_attack(attacker, test_subset)))
    return ThreatReport(
        tuple(rows), cfg, tuple(sorted(train_pool)), tuple(sorted(eval_pool)), run_hash
    )


def save_threat_csv(report: ThreatReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threat_model", "train_source", "test_source", "auc"])
        for row in report.rows:
            w.writerow([row.threat_model, row.train_source, row.test_source, repr(row.auc)])
