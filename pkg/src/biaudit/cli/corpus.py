"""Synthetic frame-sequence corpus: per-speaker Gaussian clusters plus a
gender-dependent mean offset along a dedicated direction.

Speaker means are projected orthogonal to the gender axis, so the offset
magnitude alone controls how much gender information the frames carry
(zero magnitude means genders are statistically indistinguishable).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..datamodel import GroupLabel
from ..seeding import derive_seed

__all__ = ["CORPUS_MAGIC", "Corpus", "CorpusParams", "generate_corpus", "load_corpus", "save_corpus"]

CORPUS_MAGIC = b"BIAUDIT-CRP" + b"\x00" * 5


@dataclass(frozen=True)
class CorpusParams:
    n_speakers: int = 40
    utts_per_speaker: int = 20
    frames_per_utt: int = 20
    frame_dim: int = 16
    male_fraction: float = 0.614
    gender_offset: float = 2.0
    speaker_spread: float = 1.0
    utterance_spread: float = 0.3
    frame_noise: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.male_fraction < 1.0:
            raise ValueError(f"male_fraction must lie in (0, 1), got {self.male_fraction}")
        if min(self.n_speakers, self.utts_per_speaker, self.frames_per_utt, self.frame_dim) < 1:
            raise ValueError("corpus sizes must be positive")


@dataclass(frozen=True)
class Corpus:
    utterance_ids: tuple[str, ...]
    speaker_ids: tuple[str, ...]
    groups: tuple[GroupLabel, ...]
    frames: np.ndarray  # (utterances, frames_per_utt, frame_dim) float32

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float32)
        arr.flags.writeable = False
        object.__setattr__(self, "frames", arr)

    def __len__(self) -> int:
        return len(self.utterance_ids)

    @property
    def frame_dim(self) -> int:
        return self.frames.shape[2]

    @property
    def frames_per_utt(self) -> int:
        return self.frames.shape[1]

    def speaker_index_labels(self) -> tuple[list[str], np.ndarray]:
        """Sorted unique speakers and the per-utterance index labels."""
        speakers = sorted(set(self.speaker_ids))
        index = {s: i for i, s in enumerate(speakers)}
        return speakers, np.array([index[s] for s in self.speaker_ids], dtype=np.intp)

    def gender_labels(self) -> np.ndarray:
        return np.array([int(g) for g in self.groups], dtype=np.intp)

    def frames_float64(self) -> np.ndarray:
        return np.asarray(self.frames, dtype=np.float64)


def gender_axis(frame_dim: int, axis_seed: int) -> np.ndarray:
    """Unit vector along which the gender offset is applied; derived from
    its own seed so several corpora can share one axis."""
    rng = np.random.default_rng(derive_seed(axis_seed, "gender-axis"))
    v = rng.normal(size=frame_dim)
    return v / np.linalg.norm(v)


def generate_corpus(params: CorpusParams, seed: int, axis_seed: int, id_prefix: str = "spk") -> Corpus:
    axis = gender_axis(params.frame_dim, axis_seed)
    n_male = int(round(params.male_fraction * params.n_speakers))
    n_male = min(max(n_male, 1), params.n_speakers - 1)

    utt_ids, spk_ids, groups, all_frames = [], [], [], []
    for s in range(params.n_speakers):
        group = GroupLabel.MALE if s < n_male else GroupLabel.FEMALE
        spk_rng = np.random.default_rng(derive_seed(seed, "speaker", s))
        mean = params.speaker_spread * spk_rng.normal(size=params.frame_dim)
        mean -= (mean @ axis) * axis  # keep speaker identity off the gender axis
        offset = (0.5 if group == GroupLabel.FEMALE else -0.5) * params.gender_offset
        mean = mean + offset * axis
        for u in range(params.utts_per_speaker):
            utt_rng = np.random.default_rng(derive_seed(seed, "utterance", s, u))
            center = mean + params.utterance_spread * utt_rng.normal(size=params.frame_dim)
            frames = center + params.frame_noise * utt_rng.normal(
                size=(params.frames_per_utt, params.frame_dim)
            )
            utt_ids.append(f"{id_prefix}{s:04d}_utt{u:03d}")
            spk_ids.append(f"{id_prefix}{s:04d}")
            groups.append(group)
            all_frames.append(frames.astype(np.float32))
    return Corpus(tuple(utt_ids), tuple(spk_ids), tuple(groups), np.stack(all_frames))


# ---------------------------------------------------------------------------
# corpus file format: mirrors the embedding file layout
#   [16-byte magic][u32 header length][JSON header]
#   [count records: u32 utt idx, u32 speaker idx, u8 group, T*F f32]
#   [utterance table][speaker table]


def _pack_table(strings) -> bytes:
    out = [struct.pack("<I", len(strings))]
    for s in strings:
        raw = s.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
    return b"".join(out)


def save_corpus(corpus: Corpus, path) -> None:
    t_steps, frame_dim = corpus.frames_per_utt, corpus.frame_dim
    utt_table: dict[str, int] = {}
    spk_table: dict[str, int] = {}
    body = bytearray()
    for i in range(len(corpus)):
        ui = utt_table.setdefault(corpus.utterance_ids[i], len(utt_table))
        si = spk_table.setdefault(corpus.speaker_ids[i], len(spk_table))
        body += struct.pack("<IIB", ui, si, int(corpus.groups[i]))
        body += np.ascontiguousarray(corpus.frames[i], dtype="<f4").tobytes()
    utt_bytes = _pack_table(list(utt_table))
    header = {
        "count": len(corpus),
        "frames_per_utt": t_steps,
        "frame_dim": frame_dim,
        "fields": ["utt_index:u32", "speaker_index:u32", "group:u8", "frames:f32[frames_per_utt*frame_dim]"],
        "utt_table_offset": len(body),
        "speaker_table_offset": len(body) + len(utt_bytes),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(bytes(body))
        fh.write(utt_bytes)
        fh.write(_pack_table(list(spk_table)))


def _read_table(blob: bytes, at: int) -> list[str]:
    (count,) = struct.unpack_from("<I", blob, at)
    at += 4
    out = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", blob, at)
        at += 4
        out.append(blob[at : at + ln].decode("utf-8"))
        at += ln
    return out


def load_corpus(path) -> Corpus:
    blob = Path(path).read_bytes()
    if blob[: len(CORPUS_MAGIC)] != CORPUS_MAGIC:
        raise ValueError(f"format error at byte 0: bad magic {blob[:16]!r}")
    (header_len,) = struct.unpack_from("<I", blob, len(CORPUS_MAGIC))
    header_at = len(CORPUS_MAGIC) + 4
    header = json.loads(blob[header_at : header_at + header_len].decode("utf-8"))
    count = int(header["count"])
    t_steps = int(header["frames_per_utt"])
    frame_dim = int(header["frame_dim"])
    rec_size = 9 + 4 * t_steps * frame_dim
    payload_at = header_at + header_len
    if payload_at + count * rec_size > len(blob):
        raise ValueError(f"truncation error: expected {count} records of {rec_size} bytes")
    utts = _read_table(blob, payload_at + int(header["utt_table_offset"]))
    spks = _read_table(blob, payload_at + int(header["speaker_table_offset"]))
    utt_ids, spk_ids, groups, frames = [], [], [], []
    at = payload_at
    for _ in range(count):
        ui, si, g = struct.unpack_from("<IIB", blob, at)
        utt_ids.append(utts[ui])
        spk_ids.append(spks[si])
        groups.append(GroupLabel(g))
        frames.append(
            np.frombuffer(blob, dtype="<f4", count=t_steps * frame_dim, offset=at + 9).reshape(t_steps, frame_dim).copy()
        )
        at += rec_size
    return Corpus(tuple(utt_ids), tuple(spk_ids), tuple(groups), np.stack(frames))
