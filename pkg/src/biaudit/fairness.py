"""Fairness metrics at the score level (A, B, FDR, auFDR) and at the
activation level (per-layer RMS peak and its cross-group discrepancy).

The FDR threshold axis is parameterized by the *overall* system FAR:
thresholds are the pooled nontarget-score quantiles whose overall FAR
falls inside the configured range.  auFDR is the trapezoidal mean of FDR
against overall FAR over that range, so a constant FDR integrates to
itself, and the value always lands in [0, 1].  The covered FAR range is
part of every report because the number is meaningless without it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .datamodel import GroupLabel, LayerActivationSet, ScoreSet

__all__ = [
    "FdrConfig",
    "FdrCurve",
    "ab_at_threshold",
    "aufdr",
    "fad",
    "fdr_curve",
    "lambda_activation",
    "normalized_fad",
    "save_fad_csv",
    "save_fdr_csv",
]


@dataclass(frozen=True)
class FdrConfig:
    """alpha weighs false-alarm vs false-reject discrepancies; epsilon is a
    reporting margin only and never enters the computation."""

    alpha: float = 0.5
    far_range: tuple[float, float] = (0.001, 0.1)
    epsilon: float | None = None
    min_points: int = 100

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        low, high = self.far_range
        if not 0.0 <= low < high <= 1.0:
            raise ValueError(f"invalid FAR range {self.far_range}")


@dataclass(frozen=True)
class FdrCurve:
    """Per-threshold fairness discrepancy points over a stated FAR range."""

    tau: np.ndarray
    far_overall: np.ndarray
    a: np.ndarray
    b: np.ndarray
    fdr: np.ndarray
    alpha: float
    far_range: tuple[float, float]

    def __post_init__(self):
        for name in ("tau", "far_overall", "a", "b", "fdr"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.tau)


def _far_frr(scores: ScoreSet, tau: float) -> tuple[float, float]:
    target = scores.target_scores()
    nontarget = scores.nontarget_scores()
    if len(target) == 0 or len(nontarget) == 0:
        raise ValueError("group missing a trial class: need both target and nontarget scores")
    far = float(np.count_nonzero(nontarget >= tau)) / len(nontarget)
    frr = float(np.count_nonzero(target < tau)) / len(target)
    return far, frr


def ab_at_threshold(scores_by_group: Mapping[GroupLabel, ScoreSet], tau: float) -> tuple[float, float]:
    """Maximum absolute cross-group FAR gap (A) and FRR gap (B) at one
    threshold."""
    if len(scores_by_group) < 2:
        raise ValueError("need at least two groups")
    fars, frrs = [], []
    for group in sorted(scores_by_group):
        far, frr = _far_frr(scores_by_group[group], tau)
        fars.append(far)
        frrs.append(frr)
    return float(max(fars) - min(fars)), float(max(frrs) - min(frrs))


def fdr_curve(
    scores_by_group: Mapping[GroupLabel, ScoreSet],
    cfg: FdrConfig,
    overall_scores: ScoreSet,
) -> FdrCurve:
    """FDR(tau) = 1 - (alpha * A(tau) + (1 - alpha) * B(tau)) over the
    thresholds whose overall FAR lies in cfg.far_range.

    The grid starts from the distinct pooled nontarget scores in range and
    is densified with midpoints up to cfg.min_points (extra thresholds
    between observed scores change no count, only the sampling density).
    """
    low, high = cfg.far_range
    nontarget = np.unique(overall_scores.nontarget_scores())
    n_non = len(overall_scores.nontarget_scores())
    if n_non == 0 or len(overall_scores.target_scores()) == 0:
        raise ValueError("overall scores need both trial classes")

    def overall_far(tau: float) -> float:
        return float(np.count_nonzero(overall_scores.nontarget_scores() >= tau)) / n_non

    taus = [float(t) for t in nontarget if low < overall_far(float(t)) <= high]
    if not taus:
        raise ValueError(f"empty FAR range: no threshold attains overall FAR in ({low}, {high}]")

    taus = sorted(taus)
    while len(taus) < cfg.min_points:
        mids = [0.5 * (a + b) for a, b in zip(taus, taus[1:]) if a != b]
        if not mids:
            break
        merged = sorted(set(taus) | set(mids))
        if len(merged) == len(taus):
            break
        taus = merged

    far_arr, a_arr, b_arr, fdr_arr = [], [], [], []
    for tau in taus:
        a, b = ab_at_threshold(scores_by_group, tau)
        far_arr.append(overall_far(tau))
        a_arr.append(a)
        b_arr.append(b)
        fdr_arr.append(1.0 - (cfg.alpha * a + (1.0 - cfg.alpha) * b))
    return FdrCurve(
        np.array(taus),
        np.array(far_arr),
        np.array(a_arr),
        np.array(b_arr),
        np.array(fdr_arr),
        cfg.alpha,
        cfg.far_range,
    )


def aufdr(curve: FdrCurve) -> float:
    """Trapezoidal mean of FDR against overall FAR over the covered range;
    a constant-FDR curve integrates to that constant."""
    if len(curve) < 2:
        raise ValueError("single-point curve: cannot integrate")
    order = np.argsort(curve.far_overall, kind="mergesort")
    far = curve.far_overall[order]
    fdr = curve.fdr[order]
    width = far[-1] - far[0]
    if width <= 0.0:
        raise ValueError("single-point curve: zero covered FAR width")
    return float(np.trapezoid(fdr, far) / width)


# ---------------------------------------------------------------------------
# activation-level fairness


def lambda_activation(act: LayerActivationSet) -> float:
    """Max over neurons of the root-mean-square activation over frames."""
    a = act.activations
    return float(np.max(np.sqrt(np.mean(a * a, axis=1))))


def fad(lambda_d1: float, lambda_d2: float) -> float:
    """Absolute cross-group difference of the per-layer activation peaks;
    near zero means the layer responds evenly to both groups."""
    if lambda_d1 < 0.0 or lambda_d2 < 0.0:
        raise ValueError("activation peaks must be non-negative")
    return abs(lambda_d1 - lambda_d2)


def normalized_fad(lambda_d1: float, lambda_d2: float) -> float:
    """fad scaled by the larger input into [0, 1]; 0/0 is defined as 0."""
    top = max(lambda_d1, lambda_d2)
    gap = fad(lambda_d1, lambda_d2)
    if top == 0.0:
        return 0.0
    return gap / top


# ---------------------------------------------------------------------------
# CSV data products


def save_fdr_csv(curve: FdrCurve, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "far_overall", "A", "B", "fdr"])
        for i in range(len(curve)):
            w.writerow(
                [
                    repr(float(curve.tau[i])),
                    repr(float(curve.far_overall[i])),
                    repr(float(curve.a[i])),
                    repr(float(curve.b[i])),
                    repr(float(curve.fdr[i])),
                ]
            )


def save_fad_csv(rows, path) -> None:
    """rows: (layer, lambda_male, lambda_female) triples."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "lambda_male", "lambda_female", "fad", "nfad"])
        for layer, lam_m, lam_f in rows:
            w.writerow(
                [
                    layer,
                    repr(float(lam_m)),
                    repr(float(lam_f)),
                    repr(fad(lam_m, lam_f)),
                    repr(normalized_fad(lam_m, lam_f)),
                ]
            )
