"""Quality measure function: logistic-regression calibration on quality features.

Feature vector per trial (7 values)::

    [score, log dur_enroll, log dur_test, imposter_mean_enroll,
     imposter_mean_test, magnitude_enroll, magnitude_test]

The calibrated score is the LR logit, which is monotone in the
probability and keeps EER/minDCF unaffected by the sigmoid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .io import DataError, EmbeddingRecord, Trial
from .scoring import ImposterTable

FEATURE_NAMES = ("score", "log_duration_enroll", "log_duration_test",
                 "imposter_mean_enroll", "imposter_mean_test",
                 "magnitude_enroll", "magnitude_test")


def qmf_features(trial: Trial, store: Mapping[str, EmbeddingRecord], score: float,
                 imposters: ImposterTable) -> np.ndarray:
    side = []
    for uid in (trial.enroll, trial.test):
        if uid not in store:
            raise DataError(f"embedding {uid!r} not found in the store")
        if uid not in imposters.mean:
            raise DataError(f"no imposter mean for {uid!r}")
        side.append(store[uid])
    e, t = side
    for r in side:
        if not (r.duration_s > 0 and np.isfinite(r.duration_s)):
            raise DataError(f"embedding {r.id!r}: missing or invalid duration_s")
        if not np.isfinite(r.raw_magnitude):
            raise DataError(f"embedding {r.id!r}: missing or invalid raw_magnitude")
    return np.array([score, np.log(e.duration_s), np.log(t.duration_s),
                     imposters.mean[e.id], imposters.mean[t.id],
                     e.raw_magnitude, t.raw_magnitude])


def feature_matrix(trials: Sequence[Trial], store, scores, imposters) -> np.ndarray:
    return np.vstack([qmf_features(t, store, s, imposters) for t, s in zip(trials, scores)])


@dataclass(frozen=True)
class QmfModel:
    weights: np.ndarray
    bias: float
    feat_mean: np.ndarray
    feat_std: np.ndarray

    def logit(self, feats: np.ndarray) -> np.ndarray:
        z = (np.atleast_2d(feats) - self.feat_mean) / self.feat_std
        return z @ self.weights + self.bias

    def probability(self, feats: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logit(feats)))

    def to_json(self) -> str:
        return json.dumps({"weights": self.weights.tolist(), "bias": self.bias,
                           "feat_mean": self.feat_mean.tolist(),
                           "feat_std": self.feat_std.tolist()}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "QmfModel":
        d = json.loads(text)
        return cls(np.array(d["weights"]), float(d["bias"]),
                   np.array(d["feat_mean"]), np.array(d["feat_std"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "QmfModel":
        try:
            return cls.from_json(Path(path).read_text())
        except (KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: not a QMF model file ({exc})") from exc


def _objective(w, b, Z, y, l2):
    z = Z @ w + b
    # log(1 + e^z) - y z, computed stably
    nll = np.mean(np.logaddexp(0.0, z) - y * z)
    return nll + 0.5 * l2 * (w @ w)


def train_qmf(feats: np.ndarray, labels, l2: float = 1e-4, max_iter: int = 3000,
              tol: float = 1e-9, history: list | None = None) -> QmfModel:
    """Full-batch gradient descent from zero weights with step 1/L.

    ``L`` is the Lipschitz constant of the objective's gradient, so every
    step decreases the loss.
    """
    X = np.asarray(feats, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError(f"features {X.shape} do not match {y.size} labels")
    if y.min() == y.max():
        raise ValueError("QMF training needs both target and nontarget trials")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    Z = (X - mean) / std
    A = np.hstack([Z, np.ones((Z.shape[0], 1))])
    lip = 0.25 * np.linalg.eigvalsh(A.T @ A / A.shape[0]).max() + l2
    step = 1.0 / lip
    w = np.zeros(Z.shape[1])
    b = 0.0
    for _ in range(max_iter):
        if history is not None:
            history.append(_objective(w, b, Z, y, l2))
        p = 1.0 / (1.0 + np.exp(-(Z @ w + b)))
        r = p - y
        gw = Z.T @ r / y.size + l2 * w
        gb = r.mean()
        w = w - step * gw
        b = b - step * gb
        if np.sqrt(gw @ gw + gb * gb) < tol:
            break
    return QmfModel(w, float(b), mean, std)
