"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py``; a PASS/FAIL line per
criterion is printed in the terminal summary.
"""

import itertools
import math
import time

import numpy as np
import pytest

from oracles import brute_eer, brute_min_dcf, dominant_freq
from spkver.augment import add_noise_at_snr, standard_chain, speed_perturb, time_stretch
from spkver.backend.ablation import STAGES, run_ablation
from spkver.backend.metrics import compute_eer, compute_min_dcf
from spkver.cli import main
from spkver.features import FbankConfig, Waveform, cmn, hz_to_mel, log_fbank, mel_center_frequencies
from spkver.losses import LossHead, inter_topk_loss, loss_and_grads, margin_value
from spkver.model import SpeakerModel, round_to_f32
from spkver.pooling import PoolingConfig, mqmha_forward, stats_pooling
from spkver.repvgg import RepVGGBlockTrain, block_forward, reparameterize_block
from spkver.trainer import make_corpus, stage1_preset, stage2_preset, train_toy

SR = 16000


def criterion(name):
    return pytest.mark.criterion(name)


@criterion("re-parameterization exactness")
def test_reparameterization_exactness():
    rng = np.random.default_rng(0)
    combos = [(c, g, s) for c in (2, 4, 8) for g in (1, 2, c) for s in (1, 2)]
    combos = list(dict.fromkeys(combos))  # C=2 repeats groups=2
    worst_rel = worst_f32 = 0.0
    t0 = time.perf_counter()
    for c, g, s in itertools.islice(itertools.cycle(combos), 200):
        blk = RepVGGBlockTrain.random(c, c, s, g, rng)
        dep = reparameterize_block(blk)
        dep32 = round_to_f32(SpeakerModel((dep,))).blocks[0]
        x = rng.standard_normal((100, c, 8, 8))
        y = block_forward(blk, x)
        scale = np.max(np.abs(y))
        worst_rel = max(worst_rel, np.max(np.abs(y - block_forward(dep, x, "deploy"))) / scale)
        x32 = x.astype(np.float32).astype(np.float64)
        worst_f32 = max(worst_f32, np.max(np.abs(block_forward(blk, x32) - block_forward(dep32, x32, "deploy"))))
    elapsed = time.perf_counter() - t0
    print(f"\nreparam: worst rel {worst_rel:.2e}, worst f32 abs {worst_f32:.2e}, {elapsed:.1f} s")
    assert worst_rel <= 1e-10
    assert worst_f32 <= 1e-4
    assert elapsed < 30


@criterion("gradient suite")
def test_gradient_suite(capsys):
    rc = main(["gradcheck", "--instances", "100", "--seed", "0"])
    out = capsys.readouterr().out
    print(out)
    suites = [ln for ln in out.splitlines() if ln.startswith(("PASS", "FAIL"))]
    assert rc == 0
    assert len(suites) == 10 and all(ln.startswith("PASS") for ln in suites)
    assert all("100 instances" in ln for ln in suites if "end-to-end" not in ln)


def am_softmax(cos, y, s, m):
    z = s * np.asarray(cos, dtype=float)
    z[y] -= s * m
    top = z.max()
    return top + math.log(np.exp(z - top).sum()) - z[y]


@criterion("degenerate-case equivalences")
def test_degenerate_equivalences():
    rng = np.random.default_rng(0)
    worst_pool = worst_am = worst_k1 = 0.0
    for _ in range(200):
        T, d = int(rng.integers(1, 30)), int(rng.integers(1, 16))
        O = rng.standard_normal((T, d)) * rng.uniform(0.1, 5)
        p = mqmha_forward(O, np.zeros((1, 1, d)), PoolingConfig(d, 1, 1))
        worst_pool = max(worst_pool, np.max(np.abs(p.concat() - stats_pooling(O))))

        C = int(rng.integers(2, 20))
        cos = rng.uniform(-1, 1, C)
        y = int(rng.integers(C))
        s, m = rng.uniform(1, 64), rng.uniform(0, 0.5)
        head = LossHead(np.ones((C, 1, 1)), s=s, m=m, m_prime=0.0, top_k=int(rng.integers(1, C)))
        worst_am = max(worst_am, abs(inter_topk_loss(cos, y, head)[0] - am_softmax(cos, y, s, m)))

        D = int(rng.integers(2, 10))
        W = rng.standard_normal((C, 1, D))
        x = rng.standard_normal(D)
        plain = (W[:, 0] @ x) / (np.linalg.norm(W[:, 0], axis=1) * np.linalg.norm(x))
        loss, _, _ = loss_and_grads(x, y, LossHead(W, s=s, m=m, m_prime=0.0, top_k=1))
        worst_k1 = max(worst_k1, abs(loss - am_softmax(np.clip(plain, -1, 1), y, s, m)))
    print(f"\nMQMHA vs stats {worst_pool:.1e}; m'=0 vs AM {worst_am:.1e}; K=1 vs cosine head {worst_k1:.1e}")
    assert worst_pool <= 1e-12
    assert worst_am <= 1e-12
    assert worst_k1 <= 1e-12


@criterion("metric oracle")
def test_metric_oracle():
    rng = np.random.default_rng(0)
    sets = []
    for k in range(50):
        labels = rng.random(1000) < rng.uniform(0.05, 0.5)
        labels[:2] = (True, False)
        scores = rng.standard_normal(1000) + rng.uniform(0, 3) * labels
        if k % 2:
            scores = np.round(scores, 1)  # plenty of ties
        sets.append((scores, labels))
    t0 = time.perf_counter()
    ours = [(compute_eer(s, l)[0], compute_min_dcf(s, l, 0.01)[0], compute_min_dcf(s, l, 0.05)[0])
            for s, l in sets]
    elapsed = time.perf_counter() - t0
    for (s, l), got in zip(sets, ours):
        assert got == (brute_eer(s, l), brute_min_dcf(s, l, 0.01), brute_min_dcf(s, l, 0.05))
    print(f"\n50 x 1000 trials scored in {elapsed:.3f} s")
    assert elapsed < 5


ABLATION_EER = {"raw": 0.05131578947368421, "asnorm": 0.04802631578947368, "qmf": 0.037767857142857145}
ABLATION_DCF = {"raw": 0.2922274436090226, "asnorm": 0.2796616541353384, "qmf": 0.24119360902255638}


@criterion("back-end pipeline ablation")
def test_backend_ablation(tmp_path):
    a = run_ablation(0, out_dir=tmp_path)
    b = run_ablation(0)
    print("\n" + "  ".join(f"{k}: EER {100 * a.eer[k]:.2f}% minDCF {a.min_dcf[k]:.4f}" for k in STAGES))
    for prev, cur in zip(STAGES, STAGES[1:]):
        assert a.eer[cur] <= a.eer[prev] + 0.005
    for k in STAGES:
        np.testing.assert_array_equal(a.scores[k], b.scores[k])
        assert a.eer[k] == pytest.approx(ABLATION_EER[k], rel=1e-9)
        assert a.min_dcf[k] == pytest.approx(ABLATION_DCF[k], rel=1e-9)
        assert (tmp_path / f"scores_{k}.txt").exists()


TOY_FINAL_EER = 0.004642857142857143


@criterion("toy training")
def test_toy_training():
    corpus = make_corpus(0)
    cfg = stage1_preset()
    assert cfg.steps <= 200
    first = train_toy(corpus, cfg, 0)
    print(f"\nstage 1: val EER {100 * first.final_eer:.3f}% after {cfg.steps} steps")
    assert first.final_eer <= 0.05
    assert first.final_eer == pytest.approx(TOY_FINAL_EER, abs=1e-12)
    assert first.margins == [margin_value(cfg.margin_schedule(), t) for t in range(cfg.steps)]
    assert first.margins[0] == 0.0 and first.margins[-1] == 0.2

    s2 = stage2_preset()
    assert (s2.loss_kind, s2.margin_kind, s2.m_start, s2.m_end, s2.m_prime) == ("AAM", "exponential", 0.2, 0.5, 0.0)
    second = train_toy(corpus, s2, 1, model=first.model)
    head = second.model.head
    assert head.kind == "AAM" and not head.inter_topk_enabled
    expect = [0.2 * (0.5 / 0.2) ** (t / s2.margin_steps) if t < s2.margin_steps else 0.5 for t in range(s2.steps)]
    assert second.margins == expect
    print(f"stage 2: val EER {100 * second.final_eer:.3f}%")


@criterion("DSP checks")
def test_dsp():
    rng = np.random.default_rng(0)
    clean = Waveform(0.1 * rng.standard_normal(SR) * np.abs(np.sin(np.arange(SR) / 900)), SR)
    for snr in (-5.0, 0.0, 5.0, 10.0, 20.0):
        out = add_noise_at_snr(clean, rng.uniform(-1, 1, 7000), snr, seed=1)
        n = out.samples - clean.samples
        measured = 10 * np.log10(np.mean(clean.samples ** 2) / np.mean(n ** 2))
        assert abs(measured - snr) <= 0.5

    t = np.arange(4 * SR) / SR
    for f0 in (100.0, 440.0):
        x = Waveform(0.5 * np.sin(2 * np.pi * f0 * t), SR)
        for factor in (0.9, 1.1):
            f = dominant_freq(speed_perturb(x, factor).samples, SR)
            assert abs(f / (f0 * factor) - 1) <= 0.01
        for factor in (0.8, 0.9, 1.1, 1.2):
            y = time_stretch(x, factor).samples
            assert abs(dominant_freq(y[2000:-2000], SR) / f0 - 1) <= 0.02

    chain = standard_chain(noises=[np.ones(8)])
    freq = np.mean([chain.activations(s) for s in range(10_000)], axis=0)
    print(f"\nactivation frequencies {np.round(freq, 4).tolist()}")
    assert np.all(np.abs(freq - [0.2, 0.2, 0.6, 0.2]) <= 0.02)


@criterion("feature checks")
def test_features():
    rng = np.random.default_rng(0)
    for n in (400, 401, 559, 560, 16000, 23456):
        f = log_fbank(Waveform(rng.standard_normal(n), SR), FbankConfig(n_mels=40))
        assert f.shape[0] == 1 + (n - 400) // 160
    assert log_fbank(Waveform(rng.standard_normal(SR), SR)).shape[0] == 98

    x = Waveform(0.5 * np.sin(2 * np.pi * 1000.0 * np.arange(SR) / SR), SR)
    for n_mels in (40, 64, 80, 96):
        centers = mel_center_frequencies(n_mels, 20.0, SR / 2)
        expect = int(np.argmin(np.abs(hz_to_mel(centers) - hz_to_mel(1000.0))))
        assert np.all(log_fbank(x, FbankConfig(n_mels=n_mels)).argmax(axis=1) == expect)

    feats = log_fbank(Waveform(rng.standard_normal(3 * SR), SR))
    assert np.max(np.abs(cmn(feats).mean(axis=0))) <= 1e-10
