"""Desk-scale training harness for the pooling + margin-loss head.

Toy model: linear frame projection -> MQMHA -> linear embedding layer ->
subcenter margin softmax. Training uses SGD with momentum and weight
decay, reduce-on-plateau on validation EER, and a margin schedule. It runs
in two stages: a base stage, then a large-margin fine-tune that switches to
AAM, turns Inter-TopK off, uses longer crops and drops the speed-perturbed
classes.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np

from .backend.metrics import compute_eer
from .losses import LossHead, MarginSchedule, loss_and_grads, margin_value
from .pooling import PoolingConfig, init_queries, mqmha_backward, mqmha_forward
from .tensor import l2_normalize


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthCorpus:
    """Frame matrices for base speakers and, optionally, speed-perturbed copies.

    Class ``i < n_speakers`` is base speaker ``i``; perturbed copies of
    speaker ``i`` get classes ``n_speakers + 2*i`` and ``n_speakers + 2*i + 1``.
    """

    train: list  # [(frames [T, d_in], class)]
    val: list    # [(frames, base speaker)]
    n_speakers: int
    n_classes: int
    d_in: int
    seed: int

    def base_only(self) -> "SynthCorpus":
        return replace(self, train=[u for u in self.train if u[1] < self.n_speakers],
                       n_classes=self.n_speakers)


def make_corpus(seed: int, n_speakers: int = 8, utts_per_speaker: int = 50, val_per_speaker: int = 10,
                d_in: int = 24, frames: int = 640, n_phones: int = 12, speed_copies: bool = True,
                speaker_scale: float = 0.35, noise: float = 1.0,
                channel: float = 0.1) -> SynthCorpus:
    """Gaussian frame clusters: shared phone means plus a per-speaker offset."""
    if n_speakers < 2:
        raise ValueError("need at least 2 speakers")
    if not 0 < val_per_speaker < utts_per_speaker:
        raise ValueError(f"val_per_speaker={val_per_speaker} must be between 1 and "
                         f"utts_per_speaker - 1 = {utts_per_speaker - 1}")
    rng = np.random.default_rng(seed)
    phones = rng.standard_normal((n_phones, d_in))
    speakers = speaker_scale * rng.standard_normal((n_speakers, d_in))
    # speed perturbation shifts spectral content; modelled as a fixed near-identity warp
    warps = [np.eye(d_in) * 0.8 + 0.2 * np.eye(d_in, k=k) for k in (1, -1)]
    train, val = [], []
    for s in range(n_speakers):
        for u in range(utts_per_speaker):
            ids = rng.integers(n_phones, size=frames)
            offset = channel * rng.standard_normal(d_in)
            x = phones[ids] + speakers[s] + offset + noise * rng.standard_normal((frames, d_in))
            if u < utts_per_speaker - val_per_speaker:
                train.append((x, s))
                if speed_copies:
                    for j, wm in enumerate(warps):
                        train.append((x @ wm, n_speakers + 2 * s + j))
            else:
                val.append((x, s))
    n_classes = n_speakers * (3 if speed_copies else 1)
    return SynthCorpus(train, val, n_speakers, n_classes, d_in, seed)


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ToyModel:
    projection: np.ndarray   # [d_in, d]
    queries: np.ndarray      # [H, Q, d/H]
    pool: PoolingConfig
    final: np.ndarray        # [2*Q*d, d_emb]
    head: LossHead

    def params(self) -> dict[str, np.ndarray]:
        return {"projection": self.projection, "queries": self.queries,
                "final": self.final, "head": self.head.W}

    def with_params(self, p: dict[str, np.ndarray]) -> "ToyModel":
        return replace(self, projection=p["projection"], queries=p["queries"],
                       final=p["final"], head=self.head.with_weights(p["head"]))

    def embed(self, frames: np.ndarray) -> np.ndarray:
        O = frames @ self.projection
        return mqmha_forward(O, self.queries, self.pool).concat() @ self.final


def init_toy_model(d_in: int, n_classes: int, cfg: "TrainConfig", rng: np.random.Generator) -> ToyModel:
    pool = PoolingConfig(cfg.d_model, cfg.heads, cfg.queries)
    proj = rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, cfg.d_model))
    mu = init_queries(pool, rng)
    final = rng.normal(0.0, 1.0 / np.sqrt(pool.output_dim), (pool.output_dim, cfg.d_emb))
    W = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_emb), (n_classes, cfg.subcenters, cfg.d_emb))
    return ToyModel(proj, mu, pool, final, head_for(cfg, W))


def head_for(cfg: "TrainConfig", W: np.ndarray) -> LossHead:
    top_k = min(cfg.top_k, W.shape[0] - 1)
    return LossHead(W, s=cfg.scale, m=cfg.m_start, m_prime=cfg.m_prime, top_k=top_k, kind=cfg.loss_kind)


def batch_loss_and_grads(model: ToyModel, batch: list, margin: float) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over ``[(frames, label), ...]`` and its gradients.

    Backprop runs loss -> final linear -> MQMHA -> projection; examples are
    reduced in list order.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    grads = {"projection": np.zeros_like(model.projection), "queries": np.zeros_like(model.queries),
             "head": np.zeros_like(model.head.W)}
    Z = np.empty((n, model.final.shape[0]))
    G = np.empty((n, model.final.shape[1]))
    total = 0.0
    for i, (frames, label) in enumerate(batch):
        O = frames @ model.projection
        z = mqmha_forward(O, model.queries, model.pool).concat()
        loss, g_emb, g_W = loss_and_grads(z @ model.final, label, model.head, margin)
        total += loss
        g_z = model.final @ g_emb
        half = g_z.size // 2
        g_O, g_mu = mqmha_backward(O, model.queries, model.pool, g_z[:half], g_z[half:])
        grads["projection"] += frames.T @ g_O
        grads["queries"] += g_mu
        grads["head"] += g_W
        Z[i], G[i] = z, g_emb
    grads["final"] = Z.T @ G
    return total / n, {k: v / n for k, v in grads.items()}


def example_loss_and_grads(model: ToyModel, frames: np.ndarray, label: int,
                           margin: float) -> tuple[float, dict[str, np.ndarray]]:
    return batch_loss_and_grads(model, [(frames, label)], margin)


# --------------------------------------------------------------------------
# optimizer and scheduler


@dataclass(frozen=True)
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-3
    buffers: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: OptimState) -> tuple[dict, OptimState]:
    """v <- momentum * v + (g + wd * p);  p <- p - lr * v."""
    new_p, new_buf = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        v = g + state.weight_decay * p
        if name in state.buffers:
            v = state.momentum * state.buffers[name] + v
        new_buf[name] = v
        new_p[name] = p - state.lr * v
    return new_p, replace(state, buffers=new_buf)


@dataclass(frozen=True)
class PlateauState:
    lr: float
    factor: float = 0.1
    patience: int = 2
    min_lr: float = 1e-6
    best: float = math.inf
    bad: int = 0


def plateau_step(state: PlateauState, metric: float) -> PlateauState:
    """Lower is better; decay once patience is exceeded, then start counting again."""
    if metric < state.best:
        return replace(state, best=metric, bad=0)
    bad = state.bad + 1
    if bad > state.patience:
        return replace(state, lr=max(state.lr * state.factor, state.min_lr), bad=0)
    return replace(state, bad=bad)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    steps: int = 200
    batch_size: int = 32
    frames: int = 200
    lr: float = 0.2
    min_lr: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 4e-4
    plateau_factor: float = 0.1
    patience: int = 2
    val_every: int = 20
    loss_kind: str = "AM"
    margin_kind: str = "linear"
    m_start: float = 0.0
    m_end: float = 0.2
    margin_steps: int = 100
    scale: float = 35.0
    m_prime: float = 0.06
    top_k: int = 5
    subcenters: int = 3
    heads: int = 16
    queries: int = 4
    d_model: int = 32
    d_emb: int = 512
    drop_speed_classes: bool = False

    def margin_schedule(self) -> MarginSchedule:
        return MarginSchedule(self.margin_kind, self.m_start, self.m_end, self.margin_steps)


def stage1_preset(**overrides) -> TrainConfig:
    """Base stage: AM loss, Inter-TopK on, margin 0 -> 0.2 linear, 200-frame crops."""
    return replace(TrainConfig(), **overrides)


def stage2_preset(**overrides) -> TrainConfig:
    """Large-margin fine-tune: AAM, no Inter-TopK, margin 0.2 -> 0.5 exponential, 600 frames."""
    cfg = TrainConfig(stage=2, steps=60, batch_size=16, frames=600, lr=0.01, plateau_factor=0.5,
                      loss_kind="AAM", margin_kind="exponential", m_start=0.2, m_end=0.5,
                      margin_steps=40, m_prime=0.0, drop_speed_classes=True)
    return replace(cfg, **overrides)


# Learning rates for large multi-GPU batches; far too slow for a desk run.
FULL_SCALE_LR = {1: 0.08, 2: 8e-5}

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment. ``stage = 2`` selects the fine-tune preset."""
    items = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        items[k] = v
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    unknown = set(items) - set(types)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if base is None:
        base = stage2_preset() if items.get("stage", "1") == "2" else stage1_preset()
    values = {}
    for k, v in items.items():
        t = types[k]
        try:
            if t == "bool":
                values[k] = _BOOL[v.lower()]
            elif t == "int":
                values[k] = int(v)
            elif t == "float":
                values[k] = float(v)
            else:
                values[k] = v
        except (ValueError, KeyError):
            raise ValueError(f"config key {k!r}: cannot parse {v!r} as {t}") from None
    return replace(base, **values)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    history: list = field(default_factory=list)   # (step, loss, val_eer or nan)
    margins: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    model: ToyModel | None = None
    config: TrainConfig | None = None

    @property
    def final_eer(self) -> float:
        vals = [h[2] for h in self.history if not math.isnan(h[2])]
        return vals[-1] if vals else math.nan

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "val_eer"])
            for step, loss, eer in self.history:
                w.writerow([step, repr(loss), "" if math.isnan(eer) else repr(eer)])


def validation_eer(model: ToyModel, val: list) -> float:
    embs = [l2_normalize(model.embed(x)) for x, _ in val]
    spk = [s for _, s in val]
    scores, labels = [], []
    for i, j in combinations(range(len(val)), 2):
        scores.append(float(embs[i] @ embs[j]))
        labels.append(spk[i] == spk[j])
    return compute_eer(scores, labels)[0]


def _crop(x: np.ndarray, frames: int, rng: np.random.Generator) -> np.ndarray:
    if x.shape[0] <= frames:
        return x
    off = int(rng.integers(0, x.shape[0] - frames + 1))
    return x[off:off + frames]


def train_toy(corpus: SynthCorpus, config: TrainConfig, seed: int,
              model: ToyModel | None = None) -> TrainResult:
    rng = np.random.default_rng(seed)
    if config.drop_speed_classes:
        corpus = corpus.base_only()
    if model is None:
        model = init_toy_model(corpus.d_in, corpus.n_classes, config, rng)
    else:
        # carry weights over; the head keeps only the surviving classes
        model = replace(model, head=head_for(config, model.head.W[:corpus.n_classes]))
    sched = config.margin_schedule()
    opt = OptimState(config.lr, config.momentum, config.weight_decay)
    plateau = PlateauState(config.lr, config.plateau_factor, config.patience, config.min_lr)
    res = TrainResult(config=config)
    params = model.params()
    n = len(corpus.train)
    for step in range(config.steps):
        margin = margin_value(sched, step)
        batch = np.sort(rng.choice(n, size=min(config.batch_size, n), replace=False))
        examples = [(_crop(corpus.train[i][0], config.frames, rng), corpus.train[i][1]) for i in batch]
        loss, grads = batch_loss_and_grads(model, examples, margin)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        res.margins.append(margin)
        res.lrs.append(opt.lr)
        if opt.lr > 0:
            params, opt = sgd_step(params, grads, opt)
            model = model.with_params(params)
        eer = math.nan
        if (step + 1) % config.val_every == 0 or step + 1 == config.steps:
            eer = validation_eer(model, corpus.val)
            plateau = plateau_step(replace(plateau, lr=opt.lr), eer)
            opt = replace(opt, lr=plateau.lr)
        res.history.append((step, loss, eer))
    res.model = model
    return res


def train_two_stage(corpus: SynthCorpus, seed: int, stage1: TrainConfig | None = None,
                    stage2: TrainConfig | None = None) -> tuple[TrainResult, TrainResult]:
    first = train_toy(corpus, stage1 or stage1_preset(), seed)
    second = train_toy(corpus, stage2 or stage2_preset(), seed + 1, model=first.model)
    return first, second
