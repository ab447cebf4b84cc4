"""Cosine scoring, speaker-wise cohorts, adaptive score normalization and fusion."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..tensor import l2_normalize
from .io import DataError, EmbeddingRecord, Trial

SIGMA_FLOOR = 1e-6


def cosine_score(e1, e2) -> float:
    return float(np.clip(l2_normalize(e1) @ l2_normalize(e2), -1.0, 1.0))


@dataclass(frozen=True)
class Cohort:
    speakers: tuple[str, ...]
    embeddings: np.ndarray  # [S, d], unit rows

    def __len__(self):
        return len(self.speakers)


def build_cohort(groups: Mapping[str, Sequence[np.ndarray]]) -> Cohort:
    """Average each speaker's embeddings, then length-normalize the mean."""
    names, rows = [], []
    for spk, vecs in groups.items():
        if len(vecs) == 0:
            raise DataError(f"cohort speaker {spk!r} has no embeddings")
        mean = np.mean(np.asarray(vecs, dtype=np.float64), axis=0)
        if np.linalg.norm(mean) < 1e-12:
            raise DataError(f"cohort speaker {spk!r} averages to a zero vector (degenerate speaker)")
        names.append(spk)
        rows.append(l2_normalize(mean))
    if not rows:
        raise DataError("cohort is empty")
    return Cohort(tuple(names), np.vstack(rows))


def cohort_from_records(records: Iterable[EmbeddingRecord]) -> Cohort:
    groups: dict[str, list[np.ndarray]] = defaultdict(list)
    for r in records:
        if r.speaker is None:
            raise DataError(f"cohort embedding {r.id!r} has no speaker label")
        groups[r.speaker].append(l2_normalize(r.vector))
    return build_cohort(dict(sorted(groups.items())))


def imposter_stats(e: np.ndarray, cohort: Cohort, top_n: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std of the ``top_n`` highest cohort scores, per row of ``e``."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    if top_n > len(cohort):
        raise ValueError(f"top_n={top_n} exceeds cohort size {len(cohort)}")
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    s = l2_normalize(e) @ cohort.embeddings.T
    top = -np.partition(-s, top_n - 1, axis=1)[:, :top_n]
    return top.mean(axis=1), np.maximum(top.std(axis=1), SIGMA_FLOOR)


def asnorm_score(raw: float, enroll, test, cohort: Cohort, top_n: int = 400) -> float:
    (mu_e,), (sd_e,) = imposter_stats(enroll, cohort, top_n)
    (mu_t,), (sd_t,) = imposter_stats(test, cohort, top_n)
    return 0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t)


@dataclass(frozen=True)
class ImposterTable:
    """Per-utterance cohort statistics, computed once and shared by all trials."""

    mean: dict[str, float]
    std: dict[str, float]

    @classmethod
    def build(cls, store: Mapping[str, EmbeddingRecord], ids: Iterable[str],
              cohort: Cohort, top_n: int) -> "ImposterTable":
        ids = sorted(set(ids))
        missing = [i for i in ids if i not in store]
        if missing:
            raise DataError(f"embedding {missing[0]!r} not found in the store")
        if not ids:
            return cls({}, {})
        mu, sd = imposter_stats(np.vstack([store[i].vector for i in ids]), cohort, top_n)
        return cls(dict(zip(ids, mu.tolist())), dict(zip(ids, sd.tolist())))

    def normalize(self, raw: float, enroll: str, test: str) -> float:
        return 0.5 * ((raw - self.mean[enroll]) / self.std[enroll]
                      + (raw - self.mean[test]) / self.std[test])


def score_trials(store: Mapping[str, EmbeddingRecord], trials: Sequence[Trial]) -> np.ndarray:
    out = np.empty(len(trials))
    for k, t in enumerate(trials):
        for i in (t.enroll, t.test):
            if i not in store:
                raise DataError(f"trial references unknown embedding {i!r}")
        out[k] = cosine_score(store[t.enroll].vector, store[t.test].vector)
    return out


def asnorm_trials(raw: np.ndarray, trials: Sequence[Trial], table: ImposterTable) -> np.ndarray:
    return np.array([table.normalize(r, t.enroll, t.test) for r, t in zip(raw, trials)])


def fuse_scores(score_lists: Sequence[Sequence[float]], weights: Sequence[float]) -> np.ndarray:
    if len(score_lists) != len(weights):
        raise ValueError(f"{len(score_lists)} score lists but {len(weights)} weights")
    arrays = [np.asarray(s, dtype=np.float64) for s in score_lists]
    if not arrays:
        raise ValueError("nothing to fuse")
    n = {a.size for a in arrays}
    if len(n) != 1:
        raise ValueError(f"score lists differ in length: {sorted(n)}")
    if not np.all(np.isfinite(weights)):
        raise ValueError("fusion weights must be finite")
    out = np.zeros(arrays[0].size)
    for w, a in zip(weights, arrays):
        out = out + w * a
    return out
