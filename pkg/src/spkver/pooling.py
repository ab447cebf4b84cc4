"""Multi-query multi-head attention pooling (MQMHA) and statistics pooling.

Each frame ``o_t`` is split into ``H`` slices; every slice is attended by
``Q`` learned query vectors, with the slice itself acting as the key and
value. ``H=1, Q>1`` gives multi-head self-attentive pooling and
``H>1, Q=1`` gives split-feature multi-head attention, through the same
code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, softmax

EPS_VAR = 1e-10


@dataclass(frozen=True)
class PoolingConfig:
    d: int
    heads: int = 16
    queries: int = 4

    def __post_init__(self):
        if self.heads < 1 or self.queries < 1:
            raise ValueError("heads and queries must be >= 1")
        if self.d % self.heads:
            raise ValueError(f"feature dim d={self.d} not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def output_dim(self) -> int:
        """Length of concat(e_m, e_std)."""
        return 2 * self.queries * self.d


def init_queries(cfg: PoolingConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean uniform init, scale 1/sqrt(d/H); shape ``[H, Q, d/H]``."""
    scale = 1.0 / np.sqrt(cfg.head_dim)
    return rng.uniform(-scale, scale, (cfg.heads, cfg.queries, cfg.head_dim))


@dataclass(frozen=True)
class PooledEmbedding:
    e_m: np.ndarray    # [Q*d], ordered head-major then query
    e_std: np.ndarray  # [Q*d]
    weights: np.ndarray  # [T, H, Q]

    def concat(self) -> np.ndarray:
        return np.concatenate([self.e_m, self.e_std])


def _check(O: np.ndarray, mu: np.ndarray, cfg: PoolingConfig) -> np.ndarray:
    O = np.asarray(O, dtype=np.float64)
    if O.ndim != 2 or O.shape[1] != cfg.d:
        raise ShapeError(f"O must be [T, {cfg.d}], got {O.shape}")
    if O.shape[0] < 1:
        raise ShapeError("attention pooling needs at least one frame (T = 0)")
    want = (cfg.heads, cfg.queries, cfg.head_dim)
    if mu.shape != want:
        raise ShapeError(f"query bank shape {mu.shape} does not match config {want}")
    return O


def _forward(O, mu, cfg):
    """Head-major internals: Oh [H, T, k], w [H, Q, T], m/var/std [H, Q, k]."""
    T = O.shape[0]
    Oh = O.reshape(T, cfg.heads, cfg.head_dim).transpose(1, 0, 2)
    w = softmax(mu @ Oh.transpose(0, 2, 1), axis=2)
    m = w @ Oh
    # weighted variance from moments of frames centred on their plain mean
    Oc = Oh - Oh.mean(axis=1, keepdims=True)
    mc = w @ Oc
    var = np.maximum(w @ (Oc * Oc) - mc * mc, 0.0)
    std = np.sqrt(np.maximum(var, EPS_VAR))
    return Oh, w, m, var, std


def mqmha_forward(O: np.ndarray, mu: np.ndarray, cfg: PoolingConfig) -> PooledEmbedding:
    O = _check(O, mu, cfg)
    _, w, m, _, std = _forward(O, mu, cfg)
    return PooledEmbedding(m.reshape(-1), std.reshape(-1), w.transpose(2, 0, 1))


def mqmha_backward(O: np.ndarray, mu: np.ndarray, cfg: PoolingConfig,
                   grad_e_m: np.ndarray, grad_e_std: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a scalar objective w.r.t. ``O`` and the queries.

    Uses var = sum_t w_t o_t^2 - m^2, which splits the std path into a
    correction on the mean gradient plus a second-moment term.
    """
    O = _check(O, mu, cfg)
    H, Q, k = cfg.heads, cfg.queries, cfg.head_dim
    gm = np.asarray(grad_e_m, dtype=np.float64)
    gs = np.asarray(grad_e_std, dtype=np.float64)
    if gm.size != Q * cfg.d or gs.size != Q * cfg.d:
        raise ShapeError(f"upstream gradients must have length {Q * cfg.d}, got {gm.size} and {gs.size}")
    gm = gm.reshape(H, Q, k)
    gs = gs.reshape(H, Q, k)

    Oh, w, m, var, std = _forward(O, mu, cfg)
    gv = np.where(var > EPS_VAR, gs / (2.0 * std), 0.0)    # d/dvar
    gm_tot = gm - 2.0 * m * gv                              # dvar/dm = -2m

    wT = w.transpose(0, 2, 1)                               # [H, T, Q]
    grad_Oh = wT @ gm_tot + 2.0 * Oh * (wT @ gv)
    gw = gm_tot @ Oh.transpose(0, 2, 1) + gv @ (Oh * Oh).transpose(0, 2, 1)
    ga = w * (gw - np.sum(w * gw, axis=2, keepdims=True))  # softmax over t
    grad_Oh += ga.transpose(0, 2, 1) @ mu
    grad_mu = ga @ Oh
    return grad_Oh.transpose(1, 0, 2).reshape(O.shape), grad_mu


def stats_pooling(O: np.ndarray) -> np.ndarray:
    """Frame mean and (population) standard deviation, concatenated."""
    O = np.asarray(O, dtype=np.float64)
    if O.ndim != 2 or O.shape[0] < 1:
        raise ShapeError(f"stats pooling needs a [T >= 1, d] input, got {O.shape}")
    mean = O.mean(axis=0)
    var = ((O - mean) ** 2).mean(axis=0)
    return np.concatenate([mean, np.sqrt(np.maximum(var, EPS_VAR))])
