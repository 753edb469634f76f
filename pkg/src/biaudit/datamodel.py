"""Core domain types plus deterministic splits, trial generation, and
bit-exact file I/O for embeddings, trials, and scores.

All types are immutable after construction and all operations are pure,
so everything here is safe for concurrent readers.  Containers are dumb
on purpose: invalid data (NaNs, inconsistent labels, ...) is *representable*
and :func:`validate_dataset` reports the violations.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "EMBEDDING_MAGIC",
    "EmbeddingRecord",
    "EmbeddingSet",
    "GroupLabel",
    "LayerActivationSet",
    "ScoreRecord",
    "ScoreSet",
    "Trial",
    "TrialList",
    "ValidationReport",
    "Violation",
    "load_embeddings",
    "load_scores",
    "load_trials",
    "make_trials",
    "save_embeddings",
    "save_scores",
    "save_trials",
    "split_by_speaker",
    "validate_dataset",
]


class GroupLabel(IntEnum):
    """Demographic group; the integer codes are part of the file formats."""

    MALE = 0
    FEMALE = 1


@dataclass(frozen=True)
class EmbeddingRecord:
    """One utterance-level embedding with its speaker and group labels."""

    utterance_id: str
    speaker_id: str
    group: GroupLabel
    vector: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float32)
        if vec.ndim != 1:
            raise ValueError(f"embedding vector must be 1-d, got shape {vec.shape}")
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)
        object.__setattr__(self, "group", GroupLabel(self.group))


@dataclass(frozen=True)
class EmbeddingSet:
    """A collection of embeddings sharing one dimension and one producer tag."""

    dimension: int
    records: tuple[EmbeddingRecord, ...]
    provenance: str

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def speakers(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.speaker_id, None)
        return list(seen)

    def matrix(self) -> np.ndarray:
        """Stack all vectors into an (n, dimension) float32 matrix."""
        return np.stack([r.vector for r in self.records]) if self.records else np.zeros((0, self.dimension), np.float32)

    def subset(self, keep) -> "EmbeddingSet":
        """Filtered copy keeping records for which ``keep(record)`` is true."""
        return EmbeddingSet(self.dimension, tuple(r for r in self.records if keep(r)), self.provenance)


@dataclass(frozen=True)
class Trial:
    """One verification trial: enrollment utterance vs test utterance."""

    enroll_utt: str
    test_utt: str
    is_target: bool

    def __post_init__(self):
        if self.enroll_utt == self.test_utt:
            raise ValueError(f"trial pairs an utterance with itself: {self.enroll_utt!r}")


@dataclass(frozen=True)
class TrialList:
    """Trials plus, per trial, the group of the enrollment speaker."""

    trials: tuple[Trial, ...]
    groups: tuple[GroupLabel, ...]

    def __post_init__(self):
        if len(self.trials) != len(self.groups):
            raise ValueError("trials and groups must have equal length")

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self) -> Iterator[tuple[Trial, GroupLabel]]:
        return iter(zip(self.trials, self.groups))


@dataclass(frozen=True)
class ScoreRecord:
    trial: Trial
    score: float
    group: GroupLabel


@dataclass(frozen=True)
class LayerActivationSet:
    """Post-activation outputs of one layer for one group, as a
    (neurons x frames) matrix."""

    layer_index: int
    group: GroupLabel
    activations: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.activations, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"activations must be a non-empty 2-d matrix, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "activations", arr)
        if self.layer_index < 0:
            raise ValueError("layer_index must be non-negative")


@dataclass(frozen=True)
class ScoreSet:
    """Scored trials; the carrier for all ROC and fairness computation."""

    records: tuple[ScoreRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def target_scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records if r.trial.is_target], dtype=np.float64)

    def nontarget_scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records if not r.trial.is_target], dtype=np.float64)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_dataset(embedding_set: EmbeddingSet) -> ValidationReport:
    """Report duplicate utterance ids, dimension mismatches, speakers with
    inconsistent group labels, and non-finite vector components."""
    violations: list[Violation] = []
    seen_utts: set[str] = set()
    speaker_group: dict[str, GroupLabel] = {}
    flagged_speakers: set[str] = set()
    for rec in embedding_set.records:
        if rec.utterance_id in seen_utts:
            violations.append(Violation("duplicate_utterance", f"utterance id {rec.utterance_id!r} appears more than once"))
        seen_utts.add(rec.utterance_id)
        if rec.vector.shape[0] != embedding_set.dimension:
            violations.append(
                Violation(
                    "dimension_mismatch",
                    f"utterance {rec.utterance_id!r} has dimension {rec.vector.shape[0]}, expected {embedding_set.dimension}",
                )
            )
        prior = speaker_group.get(rec.speaker_id)
        if prior is None:
            speaker_group[rec.speaker_id] = rec.group
        elif prior != rec.group and rec.speaker_id not in flagged_speakers:
            flagged_speakers.add(rec.speaker_id)
            violations.append(Violation("inconsistent_group", f"speaker {rec.speaker_id!r} carries more than one group label"))
        if not np.all(np.isfinite(rec.vector)):
            violations.append(Violation("non_finite", f"utterance {rec.utterance_id!r} has non-finite vector components"))
    return ValidationReport(tuple(violations))


# ---------------------------------------------------------------------------
# deterministic splits and trial generation


def split_by_speaker(
    embedding_set: EmbeddingSet,
    fractions: tuple[float, float, float],
    seed: int,
) -> tuple[EmbeddingSet, EmbeddingSet, EmbeddingSet]:
    """Partition a set into train/dev/test with no speaker spanning splits.

    Split sizes follow the fractions by largest remainder, so exact
    fractions stay exact.  Deterministic in ``seed``.
    """
    if len(fractions) != 3:
        raise ValueError("expected three fractions (train, dev, test)")
    if any(f <= 0.0 for f in fractions):
        raise ValueError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    speakers = embedding_set.speakers()
    n = len(speakers)
    if n < 3:
        raise ValueError("insufficient speakers")

    order = np.random.default_rng(seed).permutation(n)
    shuffled = [speakers[i] for i in order]

    raw = [f * n for f in fractions]
    counts = [int(x) for x in raw]
    remainders = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in range(n - sum(counts)):
        counts[remainders[i % 3]] += 1

    pools: list[set[str]] = []
    at = 0
    for c in counts:
        pools.append(set(shuffled[at : at + c]))
        at += c

    return tuple(
        EmbeddingSet(
            embedding_set.dimension,
            tuple(r for r in embedding_set.records if r.speaker_id in pool),
            embedding_set.provenance,
        )
        for pool in pools
    )


def make_trials(
    embedding_set: EmbeddingSet,
    n_target: int,
    n_nontarget: int,
    seed: int,
    allow_cross_gender: bool = False,
) -> TrialList:
    """Sample target and nontarget trials without replacement.

    Nontarget pairs cross distinct speakers and, unless
    ``allow_cross_gender`` is set, stay within one gender so the group tag
    (the enrollment speaker's) is unambiguous.
    """
    utts = [r.utterance_id for r in embedding_set.records]
    spk = [r.speaker_id for r in embedding_set.records]
    grp = [r.group for r in embedding_set.records]
    n = len(utts)

    by_speaker: dict[str, list[int]] = {}
    for i, s in enumerate(spk):
        by_speaker.setdefault(s, []).append(i)

    if n_target > 0 and any(len(v) < 2 for v in by_speaker.values()):
        raise ValueError("insufficient data: every speaker needs at least two utterances for target trials")

    target_pairs: list[tuple[int, int]] = []
    for s in sorted(by_speaker):
        idxs = by_speaker[s]
        for a in idxs:
            for b in idxs:
                if a != b:
                    target_pairs.append((a, b))

    nontarget_pairs: list[tuple[int, int]] = []
    for a in range(n):
        for b in range(n):
            if spk[a] == spk[b]:
                continue
            if not allow_cross_gender and grp[a] != grp[b]:
                continue
            nontarget_pairs.append((a, b))

    if n_target > len(target_pairs) or n_nontarget > len(nontarget_pairs):
        raise ValueError(
            f"insufficient data: requested {n_target}/{n_nontarget} trials, "
            f"only {len(target_pairs)}/{len(nontarget_pairs)} candidate pairs exist"
        )

    rng = np.random.default_rng(seed)
    chosen_t = rng.choice(len(target_pairs), size=n_target, replace=False)
    chosen_n = rng.choice(len(nontarget_pairs), size=n_nontarget, replace=False)

    trials: list[Trial] = []
    groups: list[GroupLabel] = []
    for k in chosen_t:
        a, b = target_pairs[int(k)]
        trials.append(Trial(utts[a], utts[b], True))
        groups.append(grp[a])
    for k in chosen_n:
        a, b = nontarget_pairs[int(k)]
        trials.append(Trial(utts[a], utts[b], False))
        groups.append(grp[a])
    return TrialList(tuple(trials), tuple(groups))


# ---------------------------------------------------------------------------
# embedding file format
#
#   [16-byte magic][u32 header length][UTF-8 JSON header]
#   [count records: u32 utt index, u32 speaker index, u8 group, d x f32]
#   [utterance string table][speaker string table]
#
# All integers little-endian.  Table offsets in the header are relative to
# the start of the records section.  A string table is a u32 count followed
# by (u32 length, UTF-8 bytes) entries.

EMBEDDING_MAGIC = b"BIAUDIT-EMB" + b"\x00" * 5

_HEADER_LEN_AT = len(EMBEDDING_MAGIC)
_HEADER_JSON_AT = _HEADER_LEN_AT + 4


def _pack_string_table(strings: Sequence[str]) -> bytes:
    out = [struct.pack("<I", len(strings))]
    for s in strings:
        raw = s.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
    return b"".join(out)


def save_embeddings(embedding_set: EmbeddingSet, path) -> None:
    d = embedding_set.dimension
    utt_table: dict[str, int] = {}
    spk_table: dict[str, int] = {}
    body = bytearray()
    for rec in embedding_set.records:
        ui = utt_table.setdefault(rec.utterance_id, len(utt_table))
        si = spk_table.setdefault(rec.speaker_id, len(spk_table))
        vec = np.ascontiguousarray(rec.vector, dtype="<f4")
        if vec.shape[0] != d:
            raise ValueError(
                f"record {rec.utterance_id!r} has dimension {vec.shape[0]}, set declares {d}"
            )
        body += struct.pack("<IIB", ui, si, int(rec.group))
        body += vec.tobytes()

    utt_bytes = _pack_string_table(list(utt_table))
    header = {
        "dimension": d,
        "count": len(embedding_set.records),
        "provenance": embedding_set.provenance,
        "fields": ["utt_index:u32", "speaker_index:u32", "group:u8", "vector:f32[dimension]"],
        "utt_table_offset": len(body),
        "speaker_table_offset": len(body) + len(utt_bytes),
    }
    header_raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<I", len(header_raw)))
        fh.write(header_raw)
        fh.write(bytes(body))
        fh.write(utt_bytes)
        fh.write(_pack_string_table(list(spk_table)))


def _read_string_table(blob: bytes, at: int, what: str) -> list[str]:
    if at + 4 > len(blob):
        raise ValueError(f"truncation error: {what} table starts past end of file")
    (count,) = struct.unpack_from("<I", blob, at)
    at += 4
    out = []
    for _ in range(count):
        if at + 4 > len(blob):
            raise ValueError(f"truncation error: {what} table cut short")
        (ln,) = struct.unpack_from("<I", blob, at)
        at += 4
        if at + ln > len(blob):
            raise ValueError(f"truncation error: {what} table cut short")
        out.append(blob[at : at + ln].decode("utf-8"))
        at += ln
    return out


def load_embeddings(path) -> EmbeddingSet:
    blob = Path(path).read_bytes()
    if blob[: len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
        raise ValueError(f"format error at byte 0: bad magic {blob[:16]!r}")
    if len(blob) < _HEADER_JSON_AT:
        raise ValueError(f"truncation error: file ends inside header length at byte {len(blob)}")
    (header_len,) = struct.unpack_from("<I", blob, _HEADER_LEN_AT)
    header_end = _HEADER_JSON_AT + header_len
    if header_end > len(blob):
        raise ValueError(f"truncation error: header of {header_len} bytes exceeds file")
    try:
        header = json.loads(blob[_HEADER_JSON_AT:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"format error at byte {_HEADER_JSON_AT}: unreadable header ({e})") from None
    try:
        d = int(header["dimension"])
        count = int(header["count"])
        provenance = str(header["provenance"])
        utt_off = int(header["utt_table_offset"])
        spk_off = int(header["speaker_table_offset"])
    except KeyError as e:
        raise ValueError(f"format error at byte {_HEADER_JSON_AT}: header missing field {e}") from None

    rec_size = 9 + 4 * d
    payload_at = header_end
    if payload_at + count * rec_size > len(blob):
        raise ValueError(f"truncation error: expected {count} records of {rec_size} bytes")

    utt_strings = _read_string_table(blob, payload_at + utt_off, "utterance")
    spk_strings = _read_string_table(blob, payload_at + spk_off, "speaker")

    records = []
    at = payload_at
    for i in range(count):
        ui, si, g = struct.unpack_from("<IIB", blob, at)
        if ui >= len(utt_strings) or si >= len(spk_strings):
            raise ValueError(f"format error at byte {at}: string table index out of range")
        if g not in (0, 1):
            raise ValueError(f"format error at byte {at + 8}: bad group code {g}")
        vec = np.frombuffer(blob, dtype="<f4", count=d, offset=at + 9).copy()
        records.append(EmbeddingRecord(utt_strings[ui], spk_strings[si], GroupLabel(g), vec))
        at += rec_size
    return EmbeddingSet(d, tuple(records), provenance)


# ---------------------------------------------------------------------------
# trial and score CSV formats


def save_trials(trial_list: TrialList, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["enroll_utt", "test_utt", "is_target", "group"])
        for trial, group in trial_list:
            w.writerow([trial.enroll_utt, trial.test_utt, int(trial.is_target), int(group)])


def load_trials(path) -> TrialList:
    trials, groups = [], []
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["enroll_utt", "test_utt", "is_target", "group"]:
            raise ValueError(f"format error: unexpected trial CSV header {header}")
        for row in reader:
            trials.append(Trial(row[0], row[1], bool(int(row[2]))))
            groups.append(GroupLabel(int(row[3])))
    return TrialList(tuple(trials), tuple(groups))


def save_scores(score_set: ScoreSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["enroll_utt", "test_utt", "is_target", "group", "score"])
        for r in score_set.records:
            w.writerow([r.trial.enroll_utt, r.trial.test_utt, int(r.trial.is_target), int(r.group), f"{r.score:.9g}"])


def load_scores(path) -> ScoreSet:
    records = []
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["enroll_utt", "test_utt", "is_target", "group", "score"]:
            raise ValueError(f"format error: unexpected score CSV header {header}")
        for row in reader:
            records.append(
                ScoreRecord(Trial(row[0], row[1], bool(int(row[2]))), float(row[4]), GroupLabel(int(row[3])))
            )
    return ScoreSet(tuple(records))
