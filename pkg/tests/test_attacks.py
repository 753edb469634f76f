import numpy as np
import pytest

from biaudit import attacks as atk
from biaudit.datamodel import EmbeddingRecord, EmbeddingSet, GroupLabel
from oracles import pair_count_auc


def synthetic_embeddings(n_speakers=20, utts=6, dim=8, offset=4.0, seed=0, provenance="unit", shuffle_labels=False):
    """Gender-separable embeddings: a gender offset on axis 0 plus noise."""
    rng = np.random.default_rng(seed)
    records = []
    for s in range(n_speakers):
        group = GroupLabel.MALE if s % 2 == 0 else GroupLabel.FEMALE
        center = rng.normal(size=dim)
        center[0] = (0.5 if group == GroupLabel.FEMALE else -0.5) * offset
        for u in range(utts):
            vec = (center + 0.5 * rng.normal(size=dim)).astype(np.float32)
            records.append(EmbeddingRecord(f"s{s}_u{u}", f"s{s}", group, vec))
    if shuffle_labels:
        groups = [r.group for r in records]
        shuffled = rng.permutation(len(groups))
        records = [
            EmbeddingRecord(r.utterance_id, r.speaker_id, groups[shuffled[i]], r.vector)
            for i, r in enumerate(records)
        ]
    return EmbeddingSet(dim, tuple(records), provenance)


class TestTrainAttacker:
    def test_separable_data_high_validation_auc(self):
        cfg = atk.AttackerConfig(epochs=20, seed=5)
        net = atk.train_attacker(synthetic_embeddings(offset=4.0), cfg)
        assert net.best_validation_auc >= 0.95

    def test_shuffled_labels_near_chance(self):
        # per-utterance label shuffle: no learnable signal remains
        cfg = atk.AttackerConfig(epochs=20, seed=6)
        data = synthetic_embeddings(n_speakers=30, utts=8, offset=4.0, seed=2, shuffle_labels=True)
        net = atk.train_attacker(data, cfg)
        auc = atk.evaluate_attack(net, data)
        assert abs(auc - 0.5) <= 0.07

    def test_deterministic(self):
        cfg = atk.AttackerConfig(epochs=5, seed=7)
        data = synthetic_embeddings()
        a = atk.train_attacker(data, cfg)
        b = atk.train_attacker(data, cfg)
        for x, y in zip((a.w1, a.b1, a.w2, a.b2), (b.w1, b.b1, b.w2, b.b2)):
            np.testing.assert_array_equal(x, y)

    def test_single_gender_rejected(self):
        records = tuple(
            EmbeddingRecord(f"u{i}", f"s{i}", GroupLabel.MALE, np.ones(4, np.float32)) for i in range(6)
        )
        with pytest.raises(ValueError, match="both genders"):
            atk.train_attacker(EmbeddingSet(4, records, "x"), atk.AttackerConfig())


class TestEvaluateAttack:
    def test_oracle_attacker_scores_one(self):
        data = synthetic_embeddings(n_speakers=10, utts=2, dim=4)
        net = atk.AttackerNet(
            w1=np.eye(4),
            b1=np.zeros(4),
            w2=np.zeros((4, 2)),
            b2=np.zeros(2),
            input_mean=np.zeros(4),
            input_scale=np.ones(4),
            best_validation_auc=1.0,
            config=atk.AttackerConfig(),
        )
        net.w2[0, int(GroupLabel.FEMALE)] = 1e6  # reads the gender axis directly
        assert atk.evaluate_attack(net, data) == 1.0

    def test_constant_attacker_scores_half(self):
        data = synthetic_embeddings(n_speakers=10, utts=2, dim=4)
        net = atk.AttackerNet(
            w1=np.zeros((4, 4)),
            b1=np.zeros(4),
            w2=np.zeros((4, 2)),
            b2=np.zeros(2),
            input_mean=np.zeros(4),
            input_scale=np.ones(4),
            best_validation_auc=0.5,
            config=atk.AttackerConfig(),
        )
        assert atk.evaluate_attack(net, data) == 0.5

    def test_auc_matches_pair_count_oracle(self):
        cfg = atk.AttackerConfig(epochs=3, seed=9)
        data = synthetic_embeddings(seed=4)
        net = atk.train_attacker(data, cfg)
        scores = net.scores(data)
        groups = np.array([int(r.group) for r in data.records])
        want = pair_count_auc(scores[groups == 1], scores[groups == 0])
        assert abs(atk.evaluate_attack(net, data) - want) <= 1e-12

    def test_invariant_to_record_order(self):
        cfg = atk.AttackerConfig(epochs=3, seed=10)
        data = synthetic_embeddings(seed=5)
        net = atk.train_attacker(data, cfg)
        rng = np.random.default_rng(0)
        reordered = EmbeddingSet(
            data.dimension, tuple(data.records[i] for i in rng.permutation(len(data))), data.provenance
        )
        assert atk.evaluate_attack(net, data) == pytest.approx(atk.evaluate_attack(net, reordered), abs=1e-15)


class TestThreatMatrix:
    def _sets(self, protected_offset=0.0):
        base = synthetic_embeddings(n_speakers=24, utts=6, offset=4.0, seed=11, provenance="M_s")
        joint = synthetic_embeddings(n_speakers=24, utts=6, offset=4.0, seed=11, provenance="M_sg")
        prot = synthetic_embeddings(n_speakers=24, utts=6, offset=protected_offset, seed=11, provenance="M_sga")
        return {"M_s": base, "M_sg": joint, "M_sga": prot}

    def test_all_sets_identical_gives_equal_aucs(self):
        base = synthetic_embeddings(n_speakers=16, utts=4, offset=4.0, seed=13, provenance="M_s")
        sets = {
            "M_s": base,
            "M_sg": EmbeddingSet(base.dimension, base.records, "M_sg"),
            "M_sga": EmbeddingSet(base.dimension, base.records, "M_sga"),
        }
        report = atk.run_threat_matrix(sets, atk.AttackerConfig(epochs=5, seed=21))
        same_seed_rows = {}
        for row in report.rows:
            # rows sharing a train source and identical data differ only by seed
            same_seed_rows.setdefault(row.train_source, []).append(row.auc)
        for tag, aucs in same_seed_rows.items():
            assert max(aucs) - min(aucs) <= 0.15  # identical data, independent seeds

    def test_speaker_disjointness_enforced(self):
        report = atk.run_threat_matrix(self._sets(), atk.AttackerConfig(epochs=2, seed=1))
        assert not (set(report.train_speakers) & set(report.eval_speakers))

    def test_population_mismatch_rejected(self):
        sets = self._sets()
        smaller = sets["M_sga"].subset(lambda r: r.speaker_id != "s0")
        sets["M_sga"] = smaller
        with pytest.raises(ValueError, match="speaker population"):
            atk.run_threat_matrix(sets, atk.AttackerConfig(epochs=1, seed=1))

    def test_protected_embeddings_defeat_uninformed_attack(self):
        report = atk.run_threat_matrix(self._sets(protected_offset=0.0), atk.AttackerConfig(epochs=15, seed=3))
        by_key = {(r.threat_model, r.train_source, r.test_source): r.auc for r in report.rows}
        assert by_key[("uIA", "M_s", "M_s")] >= 0.9
        assert by_key[("uIA", "M_sg", "M_sg")] >= 0.9
        assert by_key[("uIA", "M_s", "M_sga")] <= 0.65
        assert by_key[("uIA", "M_sg", "M_sga")] <= 0.65

    def test_csv_schema(self, tmp_path):
        report = atk.run_threat_matrix(self._sets(), atk.AttackerConfig(epochs=1, seed=2))
        p = tmp_path / "threats.csv"
        atk.save_threat_csv(report, p)
        lines = p.read_text().splitlines()
        assert lines[0] == "threat_model,train_source,test_source,auc"
        assert len(lines) == 6
        assert lines[1].startswith("uIA,M_s,M_s,")
        assert lines[5].startswith("IA,M_sga,M_sga,")
