"""Central finite-difference checks for every analytic gradient in the package.

Relative error is norm-wise: ``|a - n| / max(|a|, |n|, 1e-12)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .losses import LossHead, inter_topk_loss, loss_and_grads
from .pooling import PoolingConfig, mqmha_backward, mqmha_forward

POOLING_TOL = 1e-4
LOSS_TOL = 1e-6
POOLING_STEP = 1e-5
LOSS_STEP = 1e-6


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a, n) -> float:
    a, n = np.ravel(a), np.ravel(n)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))


@dataclass
class SuiteResult:
    name: str
    instances: int
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


def _pool_instance(rng):
    heads = int(rng.choice([1, 2, 4]))
    queries = int(rng.choice([1, 2, 3]))
    d = heads * int(rng.integers(1, 4))
    T = int(rng.integers(2, 8))
    cfg = PoolingConfig(d, heads, queries)
    O = rng.standard_normal((T, d))
    mu = rng.standard_normal((heads, queries, d // heads))
    gm = rng.standard_normal(queries * d)
    gs = rng.standard_normal(queries * d)
    return cfg, O, mu, gm, gs


def check_pooling(rng, cfg, O, mu, gm, gs, h=POOLING_STEP) -> float:
    def f_O(x):
        p = mqmha_forward(x, mu, cfg)
        return p.e_m @ gm + p.e_std @ gs

    def f_mu(q):
        p = mqmha_forward(O, q, cfg)
        return p.e_m @ gm + p.e_std @ gs

    gO, gmu = mqmha_backward(O, mu, cfg, gm, gs)
    return max(rel_error(gO, numeric_grad(f_O, O, h)), rel_error(gmu, numeric_grad(f_mu, mu, h)))


def pooling_suite(seed: int = 0, instances: int = 100) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = max(check_pooling(rng, *_pool_instance(rng)) for _ in range(instances))
    return SuiteResult("mqmha", instances, worst, POOLING_TOL)


def _separated(rng, n, lo=-0.9, hi=0.9, gap=1e-3):
    while True:
        v = rng.uniform(lo, hi, n)
        s = np.sort(v)
        if n < 2 or np.min(np.diff(s)) > gap:
            return v


def random_head(rng, kind: str, subcenters: int, topk_on: bool, classes: int | None = None,
                dim: int | None = None) -> LossHead:
    C = classes or int(rng.integers(4, 9))
    d = dim or int(rng.integers(3, 9))
    W = rng.standard_normal((C, subcenters, d))
    return LossHead(W, s=float(rng.uniform(5.0, 35.0)), m=float(rng.uniform(0.0, 0.5)),
                    m_prime=float(rng.uniform(0.02, 0.2)) if topk_on else 0.0,
                    top_k=int(rng.integers(1, C)), kind=kind)


def check_loss_cos(rng, head: LossHead, h=LOSS_STEP) -> float:
    cos = _separated(rng, head.num_classes)
    y = int(rng.integers(head.num_classes))
    _, g = inter_topk_loss(cos, y, head)
    return rel_error(g, numeric_grad(lambda c: inter_topk_loss(c, y, head)[0], cos, h))


def check_loss_params(rng, head: LossHead, h=LOSS_STEP) -> float:
    d = head.W.shape[2]
    x = rng.standard_normal(d)
    y = int(rng.integers(head.num_classes))
    _, gx, gW = loss_and_grads(x, y, head)
    nx = numeric_grad(lambda v: loss_and_grads(v, y, head)[0], x, h)
    nW = numeric_grad(lambda w: loss_and_grads(x, y, head.with_weights(w))[0], head.W, h)
    return max(rel_error(gx, nx), rel_error(gW, nW))


LOSS_VARIANTS = [(kind, k, topk) for kind in ("AM", "AAM") for k in (1, 3) for topk in (False, True)]


def loss_suite(kind: str, subcenters: int, topk_on: bool, seed: int = 0,
               instances: int = 100) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        head = random_head(rng, kind, subcenters, topk_on)
        worst = max(worst, check_loss_cos(rng, head), check_loss_params(rng, head))
    name = f"{kind} K={subcenters} inter-topk={'on' if topk_on else 'off'}"
    return SuiteResult(name, instances, worst, LOSS_TOL)


def toy_suite(seed: int = 0, instances: int = 10) -> SuiteResult:
    """End-to-end: loss -> final linear -> MQMHA -> projection."""
    from .trainer import TrainConfig, example_loss_and_grads, init_toy_model

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        kind = str(rng.choice(["AM", "AAM"]))
        cfg = TrainConfig(heads=2, queries=2, d_model=4, d_emb=5, subcenters=2, top_k=2,
                          scale=10.0, m_prime=0.05, loss_kind=kind)
        model = init_toy_model(3, 4, cfg, rng)
        x = rng.standard_normal((6, 3))
        y = int(rng.integers(4))
        margin = float(rng.uniform(0.0, 0.4))
        _, grads = example_loss_and_grads(model, x, y, margin)
        params = model.params()
        for name, p in params.items():
            def f(v, name=name):
                q = dict(params)
                q[name] = v
                return example_loss_and_grads(model.with_params(q), x, y, margin)[0]
            worst = max(worst, rel_error(grads[name], numeric_grad(f, p, POOLING_STEP)))
    return SuiteResult("toy end-to-end", instances, worst, POOLING_TOL)


def run_all(seed: int = 0, instances: int = 100) -> list[SuiteResult]:
    results = [pooling_suite(seed, instances)]
    results += [loss_suite(kind, k, t, seed, instances) for kind, k, t in LOSS_VARIANTS]
    results.append(toy_suite(seed, max(1, instances // 10)))
    return results
