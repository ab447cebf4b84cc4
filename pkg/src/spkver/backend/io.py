"""Embedding store, trial list and score file formats.

Embedding file (little-endian)::

    b"SVEB" u32 version, u32 dim, u32 count
    count x [u16 id length, UTF-8 id, u16 speaker length, UTF-8 speaker,
             f32 duration_s, f32 raw_magnitude, dim x f32 values]

An empty speaker string means "unknown".
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SVEB"
VERSION = 1


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    vector: np.ndarray
    speaker: str | None = None
    raw_magnitude: float = 1.0
    duration_s: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise DataError(f"embedding {self.id!r} has non-finite values")
        if self.duration_s <= 0:
            raise DataError(f"embedding {self.id!r}: duration must be positive")
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    label: bool | None = None


def write_embeddings(path, records) -> None:
    records = list(records)
    dim = records[0].vector.size if records else 0
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<III", VERSION, dim, len(records)))
        for r in records:
            if r.vector.size != dim:
                raise DataError(f"embedding {r.id!r} has dim {r.vector.size}, expected {dim}")
            for text in (r.id, r.speaker or ""):
                raw = text.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<ff", r.duration_s, r.raw_magnitude))
            fh.write(r.vector.astype("<f4").tobytes())


def read_embeddings(path) -> dict[str, EmbeddingRecord]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise DataError(f"{path}: not an SVEB embedding file")
    try:
        version, dim, count = struct.unpack_from("<III", data, 4)
        if version != VERSION:
            raise DataError(f"{path}: unsupported SVEB version {version}")
        off = 16
        out: dict[str, EmbeddingRecord] = {}
        for _ in range(count):
            texts = []
            for _ in range(2):
                (n,) = struct.unpack_from("<H", data, off)
                texts.append(data[off + 2: off + 2 + n].decode("utf-8"))
                off += 2 + n
            dur, mag = struct.unpack_from("<ff", data, off)
            off += 8
            vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float64)
            off += 4 * dim
            out[texts[0]] = EmbeddingRecord(texts[0], vec, texts[1] or None, float(mag), float(dur))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: truncated or corrupt embedding file ({exc})") from exc
    return out


_LABELS = {"target": True, "nontarget": False}


def read_trials(path) -> list[Trial]:
    trials = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) not in (2, 3):
            raise DataError(f"{path}:{ln}: expected 'enroll_id test_id [target|nontarget]'")
        label = None
        if len(parts) == 3:
            if parts[2] not in _LABELS:
                raise DataError(f"{path}:{ln}: unknown label {parts[2]!r}")
            label = _LABELS[parts[2]]
        trials.append(Trial(parts[0], parts[1], label))
    return trials


def write_trials(path, trials) -> None:
    with open(path, "w") as fh:
        for t in trials:
            tail = "" if t.label is None else (" target" if t.label else " nontarget")
            fh.write(f"{t.enroll} {t.test}{tail}\n")


def read_scores(path) -> tuple[list[tuple[str, str]], np.ndarray]:
    pairs, scores = [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise DataError(f"{path}:{ln}: expected 'enroll_id test_id score'")
        try:
            scores.append(float(parts[2]))
        except ValueError:
            raise DataError(f"{path}:{ln}: score {parts[2]!r} is not a number") from None
        pairs.append((parts[0], parts[1]))
    return pairs, np.array(scores, dtype=np.float64)


def format_scores(pairs, scores) -> str:
    return "".join(f"{e} {t} {s:.6f}\n" for (e, t), s in zip(pairs, scores))


def write_scores(path, pairs, scores) -> None:
    Path(path).write_text(format_scores(pairs, scores))


def labels_for(pairs, trials: list[Trial]) -> np.ndarray:
    """Labels of ``pairs`` looked up in a labeled trial list."""
    table = {}
    for t in trials:
        if t.label is None:
            raise DataError(f"trial {t.enroll} {t.test} has no label")
        table[(t.enroll, t.test)] = t.label
    try:
        return np.array([table[p] for p in pairs], dtype=bool)
    except KeyError as exc:
        raise DataError(f"score pair {exc.args[0]} missing from the labeled trial list") from None
