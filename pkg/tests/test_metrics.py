import numpy as np
import pytest

from biaudit import metrics as mx
from biaudit.datamodel import EmbeddingRecord, EmbeddingSet, GroupLabel, ScoreRecord, ScoreSet, Trial, TrialList
from oracles import count_far_frr, pair_count_auc, sweep_eer


def score_set(target, nontarget, group=GroupLabel.MALE):
    records = []
    for i, s in enumerate(target):
        records.append(ScoreRecord(Trial(f"t{i}a", f"t{i}b", True), float(s), group))
    for i, s in enumerate(nontarget):
        records.append(ScoreRecord(Trial(f"n{i}a", f"n{i}b", False), float(s), group))
    return ScoreSet(tuple(records))


class TestCosine:
    def test_self_similarity(self):
        assert mx.cosine_score([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert mx.cosine_score([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)

    def test_closed_form(self):
        assert mx.cosine_score([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1.0 / np.sqrt(2.0))

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="degenerate norm"):
            mx.cosine_score([0.0, 0.0], [1.0, 0.0])


class TestScoreTrials:
    def _set_and_trials(self):
        recs = (
            EmbeddingRecord("u1", "s1", GroupLabel.MALE, np.array([1.0, 0.0], np.float32)),
            EmbeddingRecord("u2", "s1", GroupLabel.MALE, np.array([1.0, 0.0], np.float32)),
            EmbeddingRecord("u3", "s2", GroupLabel.FEMALE, np.array([0.0, 1.0], np.float32)),
        )
        es = EmbeddingSet(2, recs, "unit")
        tl = TrialList(
            (Trial("u1", "u2", True), Trial("u1", "u3", False)),
            (GroupLabel.MALE, GroupLabel.MALE),
        )
        return es, tl

    def test_identical_embeddings_score_one(self):
        es, tl = self._set_and_trials()
        out = mx.score_trials(es, tl)
        assert out.records[0].score == pytest.approx(1.0)
        assert len(out) == 2

    def test_missing_utterance_named(self):
        es, _ = self._set_and_trials()
        tl = TrialList((Trial("u1", "zz", True),), (GroupLabel.MALE,))
        with pytest.raises(ValueError, match="zz"):
            mx.score_trials(es, tl)

    def test_matches_independent_loop(self):
        rng = np.random.default_rng(3)
        recs = tuple(
            EmbeddingRecord(f"u{i}", f"s{i // 2}", GroupLabel(i % 2), rng.normal(size=4).astype(np.float32))
            for i in range(10)
        )
        es = EmbeddingSet(4, recs, "unit")
        trials, groups = [], []
        for i in range(0, 10, 2):
            trials.append(Trial(f"u{i}", f"u{i + 1}", True))
            groups.append(GroupLabel(i % 2))
        tl = TrialList(tuple(trials), tuple(groups))
        out = mx.score_trials(es, tl)
        vec = {r.utterance_id: np.asarray(r.vector, np.float64) for r in recs}
        for rec in out.records:
            a, b = vec[rec.trial.enroll_utt], vec[rec.trial.test_utt]
            expected = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
            assert rec.score == pytest.approx(expected, abs=1e-15)


class TestRoc:
    def test_separable_has_zero_error_point(self):
        curve = mx.roc(score_set([1.0], [0.0]))
        assert np.any((curve.far == 0.0) & (curve.frr == 0.0))

    def test_tie_semantics(self):
        curve = mx.roc(score_set([0.5, 0.5], [0.5, 0.5]))
        i = int(np.where(curve.thresholds == 0.5)[0][0])
        assert curve.far[i] == 1.0 and curve.frr[i] == 0.0

    def test_monotone_and_matches_counting(self):
        rng = np.random.default_rng(17)
        target = rng.normal(loc=1.0, size=100)
        nontarget = rng.normal(loc=0.0, size=100)
        curve = mx.roc(score_set(target, nontarget))
        assert np.all(np.diff(curve.thresholds) > 0)
        assert np.all(np.diff(curve.far) <= 0)
        assert np.all(np.diff(curve.frr) >= 0)
        finite = curve.thresholds[np.isfinite(curve.thresholds)]
        probes = finite[np.linspace(0, len(finite) - 1, 11).astype(int)]
        for tau in probes:
            far, frr = count_far_frr(target, nontarget, tau)
            j = int(np.where(curve.thresholds == tau)[0][0])
            assert curve.far[j] == far and curve.frr[j] == frr

    def test_requires_both_classes(self):
        with pytest.raises(ValueError, match="target and nontarget"):
            mx.roc(score_set([1.0], []))


class TestEer:
    def test_separable_is_zero(self):
        eer_val, _ = mx.eer(mx.roc(score_set([1.0, 0.9], [0.1, 0.0])))
        assert eer_val == 0.0

    def test_shuffled_labels_near_half(self):
        rng = np.random.default_rng(23)
        pool = rng.normal(size=4000)
        eer_val, _ = mx.eer(mx.roc(score_set(pool[:2000], pool[2000:])))
        assert eer_val == pytest.approx(0.5, abs=0.05)

    def test_matches_sweep_oracle(self):
        rng = np.random.default_rng(29)
        for _ in range(20):
            target = rng.normal(loc=0.8, size=100)
            nontarget = rng.normal(loc=0.0, size=100)
            got, tau = mx.eer(mx.roc(score_set(target, nontarget)))
            want, want_tau = sweep_eer(target, nontarget)
            assert got == pytest.approx(want, abs=1e-9)
            assert tau == pytest.approx(want_tau, abs=1e-9)


class TestAuc:
    def test_separable(self):
        assert mx.auc(score_set([1.0, 0.9], [0.1, 0.0])) == 1.0

    def test_all_ties(self):
        assert mx.auc(score_set([0.5, 0.5], [0.5, 0.5])) == 0.5

    def test_rank_path_matches_pair_count(self):
        rng = np.random.default_rng(31)
        target = np.round(rng.normal(size=150), 1)  # rounding forces ties
        nontarget = np.round(rng.normal(size=150), 1)
        s = score_set(target, nontarget)
        assert abs(mx.mann_whitney_auc(target, nontarget) - pair_count_auc(target, nontarget)) <= 1e-12
        assert abs(mx.auc(s) - pair_count_auc(target, nontarget)) <= 1e-12

    def test_flipped_labels_complement(self):
        rng = np.random.default_rng(37)
        s = score_set(rng.normal(size=80), rng.normal(size=90))
        assert mx.auc(s, "target") + mx.auc(s, "nontarget") == pytest.approx(1.0, abs=1e-12)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(41)
        target = rng.normal(size=60)
        nontarget = rng.normal(size=60)
        f = lambda x: x**3 + x
        before = mx.auc(score_set(target, nontarget))
        after = mx.auc(score_set(f(target), f(nontarget)))
        assert before == pytest.approx(after, abs=1e-12)

    def test_eer_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(43)
        target = rng.normal(loc=1.0, size=60)
        nontarget = rng.normal(size=60)
        f = lambda x: x**3 + x
        e1, _ = mx.eer(mx.roc(score_set(target, nontarget)))
        e2, _ = mx.eer(mx.roc(score_set(f(target), f(nontarget))))
        assert e1 == pytest.approx(e2, abs=1e-9)


class TestSubsetByGroup:
    def _mixed(self):
        records = (
            ScoreRecord(Trial("a", "b", True), 0.9, GroupLabel.MALE),
            ScoreRecord(Trial("c", "d", False), 0.1, GroupLabel.MALE),
            ScoreRecord(Trial("e", "f", True), 0.8, GroupLabel.FEMALE),
            ScoreRecord(Trial("g", "h", False), 0.2, GroupLabel.FEMALE),
        )
        return ScoreSet(records)

    def test_filters_male(self):
        out = mx.subset_by_group(self._mixed(), GroupLabel.MALE)
        assert len(out) == 2 and all(r.group == GroupLabel.MALE for r in out.records)

    def test_filters_female(self):
        out = mx.subset_by_group(self._mixed(), GroupLabel.FEMALE)
        assert len(out) == 2 and all(r.group == GroupLabel.FEMALE for r in out.records)

    def test_absent_group(self):
        males = mx.subset_by_group(self._mixed(), GroupLabel.MALE)
        with pytest.raises(ValueError, match="group absent"):
            mx.subset_by_group(males, GroupLabel.FEMALE)
