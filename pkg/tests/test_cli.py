import json
import re
from pathlib import Path

import numpy as np
import pytest

from spkver.backend.io import read_embeddings, read_scores
from spkver.cli import COMMANDS, main
from spkver.features import Waveform, write_wav

GOLDEN = Path(__file__).parent / "golden"
SR = 16000


def call(*argv):
    return main([str(a) for a in argv])


def run(capsys, *argv):
    rc = call(*argv)
    out, err = capsys.readouterr()
    return rc, out, err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Four 'speakers' with different harmonic voices, three 0.5 s utterances each."""
    root = tmp_path_factory.mktemp("corpus")
    rng = np.random.default_rng(0)
    lines = []
    t = np.arange(SR // 2) / SR
    for s in range(4):
        f0 = 110.0 * (1.5 ** s)
        for u in range(3):
            x = sum(np.sin(2 * np.pi * f0 * h * t) / h for h in range(1, 6))
            x = 0.2 * x / np.max(np.abs(x)) + 0.01 * rng.standard_normal(t.size)
            p = root / f"s{s}u{u}.wav"
            write_wav(p, Waveform(x, SR))
            lines.append(f"s{s}u{u}\tspk{s}\t{p}\n")
    (root / "manifest.tsv").write_text("".join(lines))
    noise = root / "noise.wav"
    write_wav(noise, Waveform(0.1 * rng.standard_normal(4000), SR))
    (root / "noises.txt").write_text(f"{noise}\n")
    trials = []
    ids = [ln.split("\t")[:2] for ln in lines]
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            trials.append(f"{ids[i][0]} {ids[j][0]} {'target' if ids[i][1] == ids[j][1] else 'nontarget'}\n")
    (root / "trials.txt").write_text("".join(trials))
    return root


@pytest.fixture(scope="module")
def pipeline(corpus, tmp_path_factory):
    """extract -> init-model -> fuse-model -> embed, shared by the scoring tests."""
    out = tmp_path_factory.mktemp("run")
    assert call("extract", "--manifest", corpus / "manifest.tsv", "--out-dir", out / "feats", "--n-mels", 24) == 0
    assert call("init-model", "--out", out / "train.svrm", "--n-mels", 24, "--heads", 2, "--queries", 2,
                "--emb-dim", 32, "--seed", 3) == 0
    assert call("fuse-model", "--model", out / "train.svrm", "--out", out / "deploy.svrm", "--seed", 1) == 0
    assert call("embed", "--features", out / "feats" / "feats.tsv", "--model", out / "deploy.svrm",
                "--out", out / "emb.sveb") == 0
    return out


def test_unknown_subcommand(capsys):
    rc, out, err = run(capsys, "frobnicate")
    assert rc == 1
    assert "unknown command 'frobnicate'" in err and "usage: spkver" in err


def test_missing_command_and_bad_flags(capsys):
    assert run(capsys)[0] == 1
    rc, _, err = run(capsys, "score", "--embeddings", "a", "--trials", "b", "--out", "c", "--bogus")
    assert rc == 1 and "unrecognized arguments: --bogus" in err
    rc, _, err = run(capsys, "init-model", "--out", "x.svrm")
    assert rc == 1 and "--seed" in err


@pytest.mark.parametrize("name", ["main"] + list(COMMANDS))
def test_help_golden(capsys, name):
    argv = ["--help"] if name == "main" else [name, "--help"]
    rc, out, _ = run(capsys, *argv)
    assert rc == 0
    assert out == (GOLDEN / f"help_{name}.txt").read_text()


def test_every_flag_in_help(capsys):
    from spkver.cli import build_parser

    sub = next(a for a in build_parser()._actions if a.dest == "command")
    for name, parser in sub.choices.items():
        _, out, _ = run(capsys, name, "--help")
        for action in parser._actions:
            for flag in action.option_strings:
                assert flag in out, (name, flag)


def test_extract_outputs(pipeline):
    rows = [ln.split("\t") for ln in (pipeline / "feats" / "feats.tsv").read_text().splitlines()]
    assert len(rows) == 12
    utt, spk, path, dur = rows[0]
    assert (utt, spk, float(dur)) == ("s0u0", "spk0", 0.5)
    assert np.load(path).shape == (48, 24)


def test_extract_threads_keep_order(corpus, pipeline, tmp_path):
    assert call("extract", "--manifest", corpus / "manifest.tsv", "--out-dir", tmp_path, "--n-mels", 24,
                "--threads", 3) == 0
    a = (tmp_path / "feats.tsv").read_text().replace(str(tmp_path), "X")
    b = (pipeline / "feats" / "feats.tsv").read_text().replace(str(pipeline / "feats"), "X")
    assert a == b


def test_fuse_model_reports_small_deviation(pipeline, capsys):
    rc, out, err = run(capsys, "fuse-model", "--model", pipeline / "train.svrm", "--out",
                       pipeline / "again.svrm", "--seed", "1")
    assert rc == 0
    dev = float(re.search(r"max deviation (\S+)", out).group(1))
    assert dev <= 1e-4
    assert err.startswith("config: fuse-model {")
    assert json.loads(err.split(" ", 2)[2])["seed"] == 1
    assert (pipeline / "again.svrm").read_bytes() == (pipeline / "deploy.svrm").read_bytes()
    rc, _, err = run(capsys, "fuse-model", "--model", pipeline / "deploy.svrm", "--out", pipeline / "x.svrm",
                     "--seed", "1")
    assert rc == 2 and "already a deploy model" in err


def test_embed_train_and_deploy_agree(pipeline, tmp_path):
    assert call("embed", "--features", pipeline / "feats" / "feats.tsv", "--model", pipeline / "train.svrm",
                "--out", tmp_path / "t.sveb", "--threads", 2) == 0
    a, b = read_embeddings(tmp_path / "t.sveb"), read_embeddings(pipeline / "emb.sveb")
    assert list(a) == list(b)
    for k in a:
        assert abs(np.linalg.norm(b[k].vector) - 1) <= 1e-6
        assert b[k].speaker == a[k].speaker and b[k].duration_s == 0.5
        assert np.max(np.abs(a[k].vector - b[k].vector)) <= 1e-4


def test_scoring_chain(corpus, pipeline, capsys):
    d = pipeline
    emb, trials = d / "emb.sveb", corpus / "trials.txt"
    assert run(capsys, "score", "--embeddings", emb, "--trials", trials, "--out", d / "raw.txt")[0] == 0
    assert run(capsys, "score", "--embeddings", emb, "--trials", trials, "--out", d / "raw2.txt",
               "--threads", "4")[0] == 0
    assert (d / "raw.txt").read_bytes() == (d / "raw2.txt").read_bytes()
    pairs, raw = read_scores(d / "raw.txt")
    assert len(pairs) == 66 and np.all(np.abs(raw) <= 1)

    common = ["--embeddings", emb, "--cohort", emb, "--top-n", "4"]
    assert run(capsys, "asnorm", *common, "--trials", trials, "--scores", d / "raw.txt",
               "--out", d / "as.txt")[0] == 0
    assert run(capsys, "qmf-train", *common, "--scores", d / "as.txt", "--trials", trials,
               "--out", d / "qmf.json")[0] == 0
    assert set(json.loads((d / "qmf.json").read_text())) == {"weights", "bias", "feat_mean", "feat_std"}
    assert run(capsys, "qmf-apply", *common, "--model", d / "qmf.json", "--scores", d / "as.txt",
               "--out", d / "cal.txt")[0] == 0
    assert run(capsys, "fuse-scores", "--scores", d / "raw.txt", d / "cal.txt", "--weights", "2,1",
               "--out", d / "fused.txt")[0] == 0
    _, cal = read_scores(d / "cal.txt")
    _, fused = read_scores(d / "fused.txt")
    np.testing.assert_allclose(fused, 2 * raw + cal, rtol=0, atol=2e-6)

    rc, out, _ = run(capsys, "evaluate", "--scores", d / "cal.txt", "--trials", trials, "--p-target", "0.05")
    assert rc == 0
    assert re.fullmatch(r"EER \d+\.\d{4}\nminDCF\(p_target=0\.05\) \d+\.\d{4}\n", out)


def test_evaluate_separable(tmp_path, capsys):
    (tmp_path / "s.txt").write_text("a b 0.9\na c 0.8\nb c 0.1\nc d 0.2\n")
    (tmp_path / "t.txt").write_text("a b target\na c target\nb c nontarget\nc d nontarget\n")
    rc, out, _ = run(capsys, "evaluate", "--scores", tmp_path / "s.txt", "--trials", tmp_path / "t.txt")
    assert rc == 0
    assert out == "EER 0.0000\nminDCF(p_target=0.01) 0.0000\nminDCF(p_target=0.05) 0.0000\n"


def test_data_errors_exit_2(tmp_path, capsys):
    (tmp_path / "bad.sveb").write_bytes(b"garbage")
    (tmp_path / "t.txt").write_text("a b\n")
    rc, _, err = run(capsys, "score", "--embeddings", tmp_path / "bad.sveb", "--trials", tmp_path / "t.txt",
                     "--out", tmp_path / "o.txt")
    assert rc == 2 and err.splitlines()[-1].startswith("error: ") and len(err.splitlines()) == 2
    rc, _, err = run(capsys, "evaluate", "--scores", tmp_path / "missing.txt", "--trials", tmp_path / "t.txt")
    assert rc == 2
    (tmp_path / "s.txt").write_text("a b 0.5\nx y 0.1\n")
    (tmp_path / "t2.txt").write_text("a b target\n")
    rc, _, err = run(capsys, "evaluate", "--scores", tmp_path / "s.txt", "--trials", tmp_path / "t2.txt")
    assert rc == 2 and "missing from the labeled trial list" in err


def test_fuse_scores_misaligned(tmp_path, capsys):
    (tmp_path / "a.txt").write_text("a b 1\nc d 2\n")
    (tmp_path / "b.txt").write_text("c d 1\na b 2\n")
    rc, _, err = run(capsys, "fuse-scores", "--scores", tmp_path / "a.txt", tmp_path / "b.txt",
                     "--out", tmp_path / "o.txt")
    assert rc == 2 and "same order" in err
    rc, _, _ = run(capsys, "fuse-scores", "--scores", tmp_path / "a.txt", "--weights", "x,y",
                   "--out", tmp_path / "o.txt")
    assert rc == 1


def test_augment_deterministic_with_speed(corpus, tmp_path, capsys):
    args = ["augment", "--manifest", corpus / "manifest.tsv", "--noise-list", corpus / "noises.txt",
            "--speed", "--seed", "7"]
    assert run(capsys, *args, "--out-dir", tmp_path / "a")[0] == 0
    assert run(capsys, *args, "--out-dir", tmp_path / "b")[0] == 0
    rows = [ln.split("\t") for ln in (tmp_path / "a" / "manifest.tsv").read_text().splitlines()]
    assert len(rows) == 36
    assert {r[1] for r in rows} >= {"spk0", "spk0-sp0.9", "spk0-sp1.1"}
    for r in rows:
        name = Path(r[2]).name
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rc, _, err = run(capsys, "augment", "--manifest", corpus / "manifest.tsv", "--out-dir", tmp_path / "c",
                     "--seed", "7")
    assert rc == 2 and "no RIR or noise" in err
    assert run(capsys, "augment", "--manifest", corpus / "manifest.tsv", "--out-dir", tmp_path / "d",
               "--preset", "none", "--seed", "7")[0] == 0


def test_config_file_defaults(corpus, tmp_path, capsys):
    cfg = tmp_path / "extract.cfg"
    cfg.write_text(f"manifest = {corpus / 'manifest.tsv'}\nn_mels = 16\n")
    rc, _, err = run(capsys, "extract", "--config", cfg, "--out-dir", tmp_path / "f")
    assert rc == 0 and '"n_mels": 16' in err
    row = (tmp_path / "f" / "feats.tsv").read_text().splitlines()[0].split("\t")
    assert np.load(row[2]).shape[1] == 16
    rc, _, _ = run(capsys, "extract", "--config", cfg, "--out-dir", tmp_path / "g", "--n-mels", "8")
    assert rc == 0
    row = (tmp_path / "g" / "feats.tsv").read_text().splitlines()[0].split("\t")
    assert np.load(row[2]).shape[1] == 8
    cfg.write_text("nonsense_key = 1\n")
    assert run(capsys, "extract", "--config", cfg, "--out-dir", tmp_path / "h")[0] == 1


def test_train_toy_cli(tmp_path, capsys):
    cfg = tmp_path / "toy.cfg"
    cfg.write_text("steps = 4\nbatch_size = 4\nframes = 40\nheads = 2\nqueries = 2\nd_model = 8\n"
                   "d_emb = 16\nval_every = 2\n")
    args = ["train-toy", "--config", cfg, "--stage", "1", "--speakers", "3", "--utts", "12", "--seed", "2"]
    rc, out, _ = run(capsys, *args, "--out-csv", tmp_path / "a.csv")
    assert rc == 0 and out.startswith("stage 1: 4 steps")
    run(capsys, *args, "--out-csv", tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 5
    assert run(capsys, "train-toy", "--config", cfg, "--stage", "both", "--seed", "1")[0] == 1
    cfg.write_text("warp_speed = 9\n")
    assert run(capsys, "train-toy", "--config", cfg, "--seed", "1")[0] == 1


def test_gradcheck_cli(capsys):
    rc, out, _ = run(capsys, "gradcheck", "--instances", "3", "--seed", "0")
    assert rc == 0
    assert re.search(r"^worst relative error \S+ \(.+\)$", out, re.M)
    assert out.count("PASS") == 10
