"""Subcenter AM/AAM-Softmax with the Inter-TopK penalty, plus margin schedules.

The class cosine is the best match over a class's K subcenters. On top of
the usual target margin, the ``top_k`` most similar non-target classes get
an extra penalty ``m_prime`` inside the softmax denominator:
``cos + m'`` for AM and ``cos(theta - m')`` for AAM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .tensor import ShapeError, softmax

_SIN_FLOOR = 1e-12


@dataclass(frozen=True)
class LossHead:
    W: np.ndarray          # [C, K, d]
    s: float = 35.0
    m: float = 0.2
    m_prime: float = 0.06
    top_k: int = 5
    kind: str = "AM"

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 3:
            raise ShapeError(f"subcenter weights must be [C, K, d], got {W.shape}")
        object.__setattr__(self, "W", W)
        if self.kind not in ("AM", "AAM"):
            raise ValueError(f"kind must be 'AM' or 'AAM', got {self.kind!r}")
        if self.s <= 0:
            raise ValueError("scale s must be positive")
        if not 0 <= self.m < 1:
            raise ValueError("margin m must lie in [0, 1)")
        if self.m_prime < 0:
            raise ValueError("m_prime must be nonnegative")
        if self.top_k >= self.num_classes:
            raise ValueError(f"top_k={self.top_k} must be < number of classes {self.num_classes}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def num_subcenters(self) -> int:
        return self.W.shape[1]

    @property
    def inter_topk_enabled(self) -> bool:
        return self.m_prime > 0

    def with_weights(self, W: np.ndarray) -> "LossHead":
        return replace(self, W=W)


def init_head(num_classes: int, dim: int, rng: np.random.Generator, subcenters: int = 3,
              **kwargs) -> LossHead:
    W = rng.normal(0.0, 1.0 / np.sqrt(dim), (num_classes, subcenters, dim))
    return LossHead(W, **kwargs)


def _cosine_table(x: np.ndarray, W: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != W.shape[2]:
        raise ShapeError(f"embedding must be a [{W.shape[2]}] vector, got {x.shape}")
    xn = np.linalg.norm(x)
    if xn == 0:
        raise ValueError("zero embedding has no direction")
    wn = np.linalg.norm(W, axis=2)
    if np.any(wn == 0):
        c, k = np.argwhere(wn == 0)[0]
        raise ValueError(f"subcenter {k} of class {c} is a zero vector")
    table = (W @ x) / (wn * xn)                            # [C, K]
    return np.clip(table, -1.0, 1.0), xn, wn


def subcenter_cosines(x: np.ndarray, head: LossHead) -> np.ndarray:
    """Per-class cosine, taking the closest subcenter of each class."""
    table, _, _ = _cosine_table(x, head.W)
    return table.max(axis=1)


def topk_nontargets(cos: np.ndarray, y: int, k: int) -> np.ndarray:
    """Indices of the ``k`` largest non-target cosines; ties go to the lower index."""
    order = np.lexsort((np.arange(cos.size), -cos))
    order = order[order != y]
    return order[:k]


def _logits(cos, y, head, margin):
    """Logits and d(logit)/d(cos), elementwise."""
    C = cos.size
    pen = np.zeros(C, dtype=bool)
    if head.m_prime > 0:
        pen[topk_nontargets(cos, y, head.top_k)] = True
    s = head.s
    if head.kind == "AM":
        phi = cos + np.where(pen, head.m_prime, 0.0)
        dphi = np.ones(C)
        phi[y] = cos[y] - margin
    else:
        sin = np.sqrt(np.maximum(1.0 - cos * cos, _SIN_FLOOR))
        # cos(theta + a) = cos*cos(a) - sin*sin(a); d/dcos = cos(a) + sin(a)*cos/sin
        shift = np.where(pen, -head.m_prime, 0.0)
        shift[y] = margin
        ca, sa = np.cos(shift), np.sin(shift)
        phi = cos * ca - sin * sa
        dphi = ca + sa * cos / sin
    return s * phi, s * dphi


def inter_topk_loss(cos: np.ndarray, y: int, head: LossHead,
                    margin: float | None = None) -> tuple[float, np.ndarray]:
    """Per-example loss and its exact gradient w.r.t. the class cosines.

    ``margin`` overrides ``head.m`` so that a schedule can drive it.
    """
    cos = np.asarray(cos, dtype=np.float64)
    if cos.ndim != 1 or cos.size != head.num_classes:
        raise ShapeError(f"expected {head.num_classes} cosines, got shape {cos.shape}")
    if not 0 <= y < cos.size:
        raise ValueError(f"label {y} out of range for {cos.size} classes")
    margin = head.m if margin is None else margin
    z, dz = _logits(cos, y, head, margin)
    # written relative to the target logit so a confident example keeps
    # full relative precision in both the loss and d(loss)/d(z_y)
    others = np.delete(z, y) - z[y]
    top = others.max()
    if top <= 0:
        loss = math.log1p(np.exp(others).sum())
    else:
        loss = top + math.log(math.exp(-top) + np.exp(others - top).sum())
    p = softmax(z)
    p[y] = -np.delete(p, y).sum()
    return float(loss), p * dz


def loss_and_grads(x: np.ndarray, y: int, head: LossHead,
                   margin: float | None = None) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss with gradients w.r.t. the embedding ``x`` and subcenter weights ``W``.

    Only the winning subcenter of each class receives gradient.
    """
    table, xn, wn = _cosine_table(x, head.W)
    best = table.argmax(axis=1)
    cls = np.arange(head.num_classes)
    cos = table[cls, best]
    loss, gcos = inter_topk_loss(cos, y, head, margin)
    w_sel = head.W[cls, best]                              # [C, d]
    wn_sel = wn[cls, best]
    x = np.asarray(x, dtype=np.float64)
    # d cos / dx = w/(|x||w|) - cos * x/|x|^2 ; d cos / dw = x/(|x||w|) - cos * w/|w|^2
    grad_x = (gcos / wn_sel) @ w_sel / xn - (gcos @ cos) * x / xn**2
    grad_sel = (gcos / (xn * wn_sel))[:, None] * x[None] - (gcos * cos / wn_sel**2)[:, None] * w_sel
    grad_W = np.zeros_like(head.W)
    grad_W[cls, best] = grad_sel
    return loss, grad_x, grad_W


@dataclass(frozen=True)
class MarginSchedule:
    kind: str = "linear"
    m_start: float = 0.0
    m_end: float = 0.2
    total_steps: int = 1000

    def __post_init__(self):
        if self.kind not in ("linear", "exponential"):
            raise ValueError(f"schedule kind must be linear or exponential, got {self.kind!r}")
        if self.m_start > self.m_end:
            raise ValueError("m_start must not exceed m_end")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if self.kind == "exponential" and self.m_start <= 0:
            raise ValueError("exponential schedule needs m_start > 0")


def margin_value(sched: MarginSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be nonnegative")
    frac = min(step / sched.total_steps, 1.0)
    if frac >= 1.0:
        return sched.m_end
    if sched.kind == "linear":
        return sched.m_start + (sched.m_end - sched.m_start) * frac
    return sched.m_start * (sched.m_end / sched.m_start) ** frac
