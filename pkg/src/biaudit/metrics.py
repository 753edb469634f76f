"""Verification scoring and score-level metrics.

Conventions fixed here because tied scores depend on them:
  * a trial is accepted iff score >= threshold (ties accept);
  * AUC gives half credit to ties (Mann-Whitney);
  * EER is linearly interpolated between the two ROC points where
    FAR - FRR changes sign.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import EmbeddingSet, GroupLabel, ScoreRecord, ScoreSet, TrialList

__all__ = [
    "RocCurve",
    "auc",
    "cosine_score",
    "eer",
    "mann_whitney_auc",
    "roc",
    "save_roc",
    "score_trials",
    "subset_by_group",
]


@dataclass(frozen=True)
class RocCurve:
    """FAR/FRR along strictly increasing thresholds (with -inf/+inf sentinels)."""

    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray

    def __post_init__(self):
        for name in ("thresholds", "far", "frr"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def cosine_score(a, b) -> float:
    """Cosine similarity of two nonzero vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("degenerate norm: zero vector has no direction")
    return float(a @ b / (na * nb))


def score_trials(embeddings: EmbeddingSet, trials: TrialList) -> ScoreSet:
    """Cosine-score every trial; the group tag is inherited from the trial."""
    by_utt = {r.utterance_id: r.vector for r in embeddings.records}
    records = []
    for trial, group in trials:
        for utt in (trial.enroll_utt, trial.test_utt):
            if utt not in by_utt:
                raise ValueError(f"missing utterance {utt!r} in embedding set")
        records.append(ScoreRecord(trial, cosine_score(by_utt[trial.enroll_utt], by_utt[trial.test_utt]), group))
    return ScoreSet(tuple(records))


def roc(scores: ScoreSet) -> RocCurve:
    """Sweep FAR/FRR over all distinct scores plus -inf/+inf sentinels.

    Counting is exact: each rate is an integer count divided by the class
    size.
    """
    target = np.sort(scores.target_scores())
    nontarget = np.sort(scores.nontarget_scores())
    if len(target) == 0 or len(nontarget) == 0:
        raise ValueError("need both target and nontarget scores")
    taus = np.concatenate([[-np.inf], np.unique(np.concatenate([target, nontarget])), [np.inf]])
    # accept iff score >= tau
    far = (len(nontarget) - np.searchsorted(nontarget, taus, side="left")) / len(nontarget)
    frr = np.searchsorted(target, taus, side="left") / len(target)
    return RocCurve(taus, far, frr)


def eer(curve: RocCurve) -> tuple[float, float]:
    """Equal error rate and its threshold, linearly interpolated between the
    bracketing curve points."""
    d = curve.far - curve.frr
    for i in range(len(d) - 1):
        if d[i] >= 0.0 and d[i + 1] < 0.0:
            t = 0.0 if d[i] == d[i + 1] else d[i] / (d[i] - d[i + 1])
            rate = curve.far[i] + t * (curve.far[i + 1] - curve.far[i])
            lo, hi = curve.thresholds[i], curve.thresholds[i + 1]
            if not np.isfinite(lo):
                lo = hi
            if not np.isfinite(hi):
                hi = lo
            return float(rate), float(lo + t * (hi - lo))
    raise ValueError("no FAR/FRR crossing on the curve")


def mann_whitney_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """P(pos > neg) + 0.5 P(pos == neg), by midrank counting."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need both classes to compute AUC")
    combined = np.concatenate([pos, neg])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(len(combined), dtype=np.float64)
    sorted_vals = combined[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    r_pos = ranks[: len(pos)].sum()
    return float((r_pos - len(pos) * (len(pos) + 1) / 2.0) / (len(pos) * len(neg)))


def _pair_count_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))


def auc(scores: ScoreSet, positive_class: str = "target") -> float:
    """Area under the ROC curve of the chosen class.

    Exact pair counting for small sets, sort-rank for large ones; the two
    agree to within 1e-12.
    """
    if positive_class == "target":
        pos, neg = scores.target_scores(), scores.nontarget_scores()
    elif positive_class == "nontarget":
        pos, neg = scores.nontarget_scores(), scores.target_scores()
    else:
        raise ValueError(f"unknown positive_class {positive_class!r}")
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need both classes to compute AUC")
    if len(pos) + len(neg) <= 10_000:
        return _pair_count_auc(pos, neg)
    return mann_whitney_auc(pos, neg)


def subset_by_group(scores: ScoreSet, group: GroupLabel) -> ScoreSet:
    filtered = tuple(r for r in scores.records if r.group == group)
    if not filtered:
        raise ValueError(f"group absent: {GroupLabel(group).name}")
    return ScoreSet(filtered)


def save_roc(curve: RocCurve, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "far", "frr"])
        for tau, far, frr in zip(curve.thresholds, curve.far, curve.frr):
            w.writerow([repr(float(tau)), repr(float(far)), repr(float(frr))])
