"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data or validation error. Every
run echoes its resolved configuration to stderr as one ``config:`` line.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().rstrip()}")


def _fmt(prog):
    return argparse.HelpFormatter(prog, width=88, max_help_position=32)


def _pmap(fn, items, threads: int):
    """Ordered map; output order always follows input order."""
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _weights(text: str) -> list[float]:
    try:
        return [float(w) for w in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------- commands


def cmd_extract(a):
    from .features import FbankConfig, log_fbank, read_manifest, read_wav

    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = read_manifest(a.manifest)
    cfg = FbankConfig(n_mels=a.n_mels)

    def one(row):
        utt, spk, path = row[:3]
        wav = read_wav(path)
        feats = log_fbank(wav, cfg)
        dest = out / f"{utt}.npy"
        np.save(dest, feats.astype(np.float32))
        return f"{utt}\t{spk}\t{dest}\t{wav.duration:.6f}\n"

    lines = _pmap(one, rows, a.threads)
    (out / "feats.tsv").write_text("".join(lines))
    print(f"extracted {len(lines)} utterances -> {out / 'feats.tsv'}")


def cmd_augment(a):
    from .augment import (SPEED_FACTORS, EffectChain, chain_apply, standard_chain, speed_perturb,
                          speed_speaker_id, utterance_seed)
    from .features import read_manifest, read_wav, write_wav

    def load_list(path):
        if not path:
            return ()
        return tuple(read_wav(p.strip()).samples for p in Path(path).read_text().splitlines() if p.strip())

    chain = EffectChain()
    if a.preset == "standard":
        chain = standard_chain(load_list(a.rir_list), load_list(a.noise_list))
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for row in read_manifest(a.manifest):
        utt, spk, path = row[:3]
        wav = read_wav(path)
        versions = [(utt, spk, wav)]
        if a.speed:
            versions += [(f"{utt}-sp{f:g}", speed_speaker_id(spk, f), speed_perturb(wav, f))
                         for f in SPEED_FACTORS]
        for uid, sid, w in versions:
            w = chain_apply(w, chain, utterance_seed(a.seed, uid))
            dest = out / f"{uid}.wav"
            write_wav(dest, w)
            lines.append(f"{uid}\t{sid}\t{dest}\n")
    (out / "manifest.tsv").write_text("".join(lines))
    print(f"wrote {len(lines)} utterances -> {out / 'manifest.tsv'}")


def cmd_init_model(a):
    from .model import init_model, save_model
    from .repvgg import EXAMPLE_CONFIGS, BackboneConfig, parse_stages

    config = EXAMPLE_CONFIGS.get(a.stages) or BackboneConfig(parse_stages(a.stages))
    rng = np.random.default_rng(a.seed)
    heads = None if a.stats_pooling else a.heads
    model = init_model(config, a.n_mels, rng, heads, a.queries, a.emb_dim or None)
    save_model(a.out, model)
    print(f"wrote train-mode model with {len(model.blocks)} blocks -> {a.out}")


def cmd_fuse_model(a):
    from .model import load_model, round_to_f32, save_model
    from .repvgg import backbone_forward

    model = load_model(a.model)
    if model.mode != "train":
        raise ValueError(f"{a.model} is already a deploy model")
    deploy = round_to_f32(model.reparameterize())
    n_mels = model.n_mels or a.n_mels
    rng = np.random.default_rng(a.seed)
    worst = 0.0
    for _ in range(a.probes):
        x = rng.standard_normal((1, n_mels, a.probe_frames))
        diff = backbone_forward(model.blocks, x) - backbone_forward(deploy.blocks, x)
        worst = max(worst, float(np.max(np.abs(diff))))
    save_model(a.out, deploy)
    print(f"max deviation {worst:.3e} over {a.probes} probe inputs")
    print(f"wrote deploy model -> {a.out}")


def cmd_embed(a):
    from .backend.io import EmbeddingRecord, write_embeddings
    from .model import load_model

    model = load_model(a.model)
    rows = [ln.split("\t") for ln in Path(a.features).read_text().splitlines() if ln.strip()]

    def one(row):
        if len(row) < 4:
            raise ValueError(f"{a.features}: expected utt<TAB>speaker<TAB>path<TAB>duration")
        utt, spk, path, dur = row[:4]
        e = model.embed(np.load(path).astype(np.float64))
        mag = float(np.linalg.norm(e))
        if mag == 0:
            raise ValueError(f"{utt}: zero embedding")
        return EmbeddingRecord(utt, e / mag, spk or None, mag, float(dur))

    records = _pmap(one, rows, a.threads)
    write_embeddings(a.out, records)
    print(f"wrote {len(records)} embeddings -> {a.out}")


def cmd_score(a):
    from .backend.io import DataError, read_embeddings, read_trials, write_scores
    from .backend.scoring import cosine_score

    store = read_embeddings(a.embeddings)
    trials = read_trials(a.trials)

    def one(t):
        for i in (t.enroll, t.test):
            if i not in store:
                raise DataError(f"trial references unknown embedding {i!r}")
        return cosine_score(store[t.enroll].vector, store[t.test].vector)

    scores = _pmap(one, trials, a.threads)
    write_scores(a.out, [(t.enroll, t.test) for t in trials], scores)
    print(f"scored {len(trials)} trials -> {a.out}")


def _raw_scores(a, trials, store):
    from .backend.io import DataError, read_scores
    from .backend.scoring import score_trials

    if not getattr(a, "scores", None):
        return score_trials(store, trials)
    pairs, scores = read_scores(a.scores)
    if pairs != [(t.enroll, t.test) for t in trials]:
        raise DataError(f"{a.scores} does not follow the trial order of {a.trials}")
    return scores


def _imposters(a, store, ids):
    from .backend.io import read_embeddings
    from .backend.scoring import ImposterTable, cohort_from_records

    cohort = cohort_from_records(read_embeddings(a.cohort).values())
    return ImposterTable.build(store, ids, cohort, a.top_n)


def cmd_asnorm(a):
    from .backend.io import read_embeddings, read_trials, write_scores

    store = read_embeddings(a.embeddings)
    trials = read_trials(a.trials)
    raw = _raw_scores(a, trials, store)
    table = _imposters(a, store, [i for t in trials for i in (t.enroll, t.test)])
    out = _pmap(lambda rt: table.normalize(rt[0], rt[1].enroll, rt[1].test), list(zip(raw, trials)),
                a.threads)
    write_scores(a.out, [(t.enroll, t.test) for t in trials], out)
    print(f"normalized {len(trials)} trials (top-{a.top_n} cohort) -> {a.out}")


def _qmf_inputs(a):
    from .backend.io import Trial, read_embeddings, read_scores
    from .backend.qmf import feature_matrix

    store = read_embeddings(a.embeddings)
    pairs, scores = read_scores(a.scores)
    trials = [Trial(e, t) for e, t in pairs]
    table = _imposters(a, store, [i for p in pairs for i in p])
    return pairs, feature_matrix(trials, store, scores, table)


def cmd_qmf_train(a):
    from .backend.io import labels_for, read_trials
    from .backend.qmf import train_qmf

    pairs, feats = _qmf_inputs(a)
    model = train_qmf(feats, labels_for(pairs, read_trials(a.trials)))
    model.save(a.out)
    print(f"trained QMF on {len(pairs)} trials -> {a.out}")


def cmd_qmf_apply(a):
    from .backend.io import write_scores
    from .backend.qmf import QmfModel

    model = QmfModel.load(a.model)
    pairs, feats = _qmf_inputs(a)
    write_scores(a.out, pairs, model.logit(feats))
    print(f"calibrated {len(pairs)} trials -> {a.out}")


def cmd_fuse_scores(a):
    from .backend.io import DataError, read_scores, write_scores
    from .backend.scoring import fuse_scores

    weights = a.weights or [1.0 / len(a.scores)] * len(a.scores)
    loaded = [read_scores(p) for p in a.scores]
    pairs = loaded[0][0]
    for path, (p, _) in zip(a.scores, loaded):
        if p != pairs:
            raise DataError(f"{path} does not list the same trials in the same order as {a.scores[0]}")
    fused = fuse_scores([s for _, s in loaded], weights)
    write_scores(a.out, pairs, fused)
    print(f"fused {len(a.scores)} score files -> {a.out}")


def cmd_evaluate(a):
    from .backend.io import labels_for, read_scores, read_trials
    from .backend.metrics import compute_eer, compute_min_dcf

    pairs, scores = read_scores(a.scores)
    labels = labels_for(pairs, read_trials(a.trials))
    eer, _ = compute_eer(scores, labels)
    print(f"EER {100 * eer:.4f}")
    for p in a.p_target or [0.01, 0.05]:
        dcf, _ = compute_min_dcf(scores, labels, p)
        print(f"minDCF(p_target={p:g}) {dcf:.4f}")


def cmd_train_toy(a):
    from .trainer import make_corpus, parse_config, stage1_preset, stage2_preset, train_toy

    if a.config and a.stage == "both":
        raise UsageError("--config applies to a single stage; pass --stage 1 or --stage 2")
    corpus = make_corpus(a.seed, n_speakers=a.speakers, utts_per_speaker=a.utts)
    text = Path(a.config).read_text() if a.config else ""
    stages = {"1": [1], "2": [2], "both": [1, 2]}[a.stage]
    model = None
    result = None
    for k, st in enumerate(stages):
        base = stage1_preset() if st == 1 else stage2_preset()
        try:
            cfg = parse_config(text, base) if a.config else base
        except ValueError as exc:
            raise UsageError(f"{a.config}: {exc}") from None
        result = train_toy(corpus, cfg, a.seed + k, model=model)
        model = result.model
        print(f"stage {st}: {cfg.steps} steps, final loss {result.history[-1][1]:.4f}, "
              f"val EER {100 * result.final_eer:.4f}%")
        if a.out_csv:
            path = Path(a.out_csv)
            if len(stages) > 1:
                path = path.with_name(f"{path.stem}_stage{st}{path.suffix}")
            result.write_csv(path)


def cmd_gradcheck(a):
    from .gradcheck import run_all

    results = run_all(a.seed, a.instances)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: worst rel err {r.worst:.3e} "
              f"(tol {r.tol:g}, {r.instances} instances)")
    worst = max(results, key=lambda r: r.worst / r.tol)
    print(f"worst relative error {worst.worst:.3e} ({worst.name})")
    if not all(r.passed for r in results):
        return 2


# ---------------------------------------------------------------- parser


COMMANDS = {
    "extract": (cmd_extract, "WAV manifest -> log-mel feature files"),
    "augment": (cmd_augment, "manifest + effect chain preset -> augmented WAVs"),
    "init-model": (cmd_init_model, "write a seeded random training-mode model file"),
    "embed": (cmd_embed, "features + model file -> embedding file"),
    "fuse-model": (cmd_fuse_model, "re-parameterize a training model into a deploy model"),
    "score": (cmd_score, "cosine-score a trial list"),
    "asnorm": (cmd_asnorm, "speaker-wise adaptive score normalization"),
    "qmf-train": (cmd_qmf_train, "fit the quality-measure calibration model"),
    "qmf-apply": (cmd_qmf_apply, "calibrate scores with a QMF model"),
    "fuse-scores": (cmd_fuse_scores, "weighted sum of score files"),
    "evaluate": (cmd_evaluate, "EER and minDCF of a score file"),
    "train-toy": (cmd_train_toy, "train the pooling/loss head on synthetic speakers"),
    "gradcheck": (cmd_gradcheck, "finite-difference checks of all analytic gradients"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spkver", description="Speaker-verification toolkit.", formatter_class=_fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sp = {}
    for name, (_, help_text) in COMMANDS.items():
        sp[name] = sub.add_parser(name, help=help_text, description=help_text[0].upper() + help_text[1:] + ".",
                                  formatter_class=_fmt)
        sp[name].add_argument("--config", metavar="PATH",
                              help="file of 'key = value' lines supplying defaults"
                              if name != "train-toy"
                              else "training config ('key = value' lines); needs --stage 1 or 2")

    def seed(q, required=False):
        q.add_argument("--seed", type=int, required=required, default=None if required else 0,
                       metavar="N", help="random seed" + (" (required)" if required else " (default 0)"))

    def threads(q):
        q.add_argument("--threads", type=int, default=1, metavar="N", help="worker threads (default 1)")

    def top_n(q):
        q.add_argument("--top-n", type=int, default=400, metavar="N",
                       help="cohort scores kept per side (default 400)")

    q = sp["extract"]
    q.add_argument("--manifest", required=True, help="utt_id<TAB>speaker_id<TAB>path.wav lines")
    q.add_argument("--out-dir", required=True)
    q.add_argument("--n-mels", type=int, default=96, metavar="N", help="mel bands (default 96)")
    threads(q)

    q = sp["augment"]
    q.add_argument("--manifest", required=True)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--preset", choices=["standard", "none"], default="standard",
                   help="effect chain (default standard: gain/white noise/RIR+noise/stretch)")
    q.add_argument("--rir-list", metavar="PATH", help="file listing RIR WAV paths")
    q.add_argument("--noise-list", metavar="PATH", help="file listing noise WAV paths")
    q.add_argument("--speed", action="store_true", help="also emit 0.9/1.1 speed copies as new speakers")
    seed(q, required=True)

    q = sp["init-model"]
    q.add_argument("--out", required=True)
    q.add_argument("--stages", default="tiny",
                   help="named example layout or 'blocks:channels:stride[:groups],...' (default tiny)")
    q.add_argument("--n-mels", type=int, default=96, metavar="N")
    q.add_argument("--heads", type=int, default=1, metavar="H")
    q.add_argument("--queries", type=int, default=1, metavar="Q")
    q.add_argument("--stats-pooling", action="store_true", help="plain mean+std pooling instead of MQMHA")
    q.add_argument("--emb-dim", type=int, default=512, metavar="N", help="0 disables the linear layer")
    seed(q, required=True)

    q = sp["fuse-model"]
    q.add_argument("--model", required=True, help="training-mode model file")
    q.add_argument("--out", required=True, help="deploy model file to write")
    q.add_argument("--probes", type=int, default=8, metavar="N", help="random probe inputs (default 8)")
    q.add_argument("--probe-frames", type=int, default=40, metavar="T")
    q.add_argument("--n-mels", type=int, default=96, metavar="N",
                   help="probe height when the model file does not record it")
    seed(q, required=True)

    q = sp["embed"]
    q.add_argument("--features", required=True, help="feats.tsv written by extract")
    q.add_argument("--model", required=True)
    q.add_argument("--out", required=True)
    threads(q)

    q = sp["score"]
    q.add_argument("--embeddings", required=True)
    q.add_argument("--trials", required=True)
    q.add_argument("--out", required=True)
    threads(q)

    q = sp["asnorm"]
    q.add_argument("--embeddings", required=True)
    q.add_argument("--cohort", required=True, help="embedding file with speaker labels")
    q.add_argument("--trials", required=True)
    q.add_argument("--scores", help="raw scores in trial order (default: recompute cosine)")
    q.add_argument("--out", required=True)
    top_n(q)
    threads(q)

    for name in ("qmf-train", "qmf-apply"):
        q = sp[name]
        if name == "qmf-apply":
            q.add_argument("--model", required=True, help="QMF model (JSON)")
        q.add_argument("--scores", required=True, help="scores to calibrate")
        q.add_argument("--embeddings", required=True)
        q.add_argument("--cohort", required=True)
        if name == "qmf-train":
            q.add_argument("--trials", required=True, help="labeled trial list")
        q.add_argument("--out", required=True)
        top_n(q)

    q = sp["fuse-scores"]
    q.add_argument("--scores", required=True, nargs="+", metavar="PATH")
    q.add_argument("--weights", type=_weights, metavar="w1,w2,...", help="default: equal weights")
    q.add_argument("--out", required=True)

    q = sp["evaluate"]
    q.add_argument("--scores", required=True)
    q.add_argument("--trials", required=True, help="labeled trial list")
    q.add_argument("--p-target", type=float, action="append", metavar="X",
                   help="repeatable; default 0.01 and 0.05")

    q = sp["train-toy"]
    q.add_argument("--stage", choices=["1", "2", "both"], default="1")
    q.add_argument("--speakers", type=int, default=8)
    q.add_argument("--utts", type=int, default=50, help="utterances per speaker")
    q.add_argument("--out-csv", metavar="PATH", help="history as step,loss,val_eer")
    seed(q, required=True)

    q = sp["gradcheck"]
    q.add_argument("--instances", type=int, default=100, metavar="N")
    seed(q, required=True)
    return p


def _apply_config_file(parser, argv):
    """Parse ``argv`` with defaults taken from ``--config``; command-line flags win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv[1:])
    if not known.config or argv[0] == "train-toy":
        return parser.parse_args(argv)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    flags = {}
    for action in sub.choices[argv[0]]._actions:
        for opt in action.option_strings:
            if opt.startswith("--") and opt not in ("--help", "--config"):
                flags[opt[2:].replace("-", "_")] = (opt, action)
    extra = []
    for ln, line in enumerate(Path(known.config).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{known.config}:{ln}: expected 'key = value'")
        key, value = (v.strip() for v in line.split("=", 1))
        if key.replace("-", "_") not in flags:
            raise UsageError(f"{known.config}:{ln}: unknown key {key!r} for {argv[0]}")
        opt, action = flags[key.replace("-", "_")]
        if any(a == opt or a.startswith(opt + "=") for a in argv):
            continue
        # values go back through argparse so types and choices are checked
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() in ("true", "yes", "1"):
                extra.append(opt)
        elif action.nargs == "+":
            extra += [opt, *value.split()]
        else:
            extra += [opt, value]
    return parser.parse_args(argv + extra)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if not argv or argv[0] not in COMMANDS and not argv[0].startswith("-"):
            raise UsageError(("unknown command " + repr(argv[0]) if argv else "missing command")
                             + "\n" + parser.format_help().rstrip())
        args = _apply_config_file(parser, argv)
        if args.command is None:
            raise UsageError(parser.format_help().rstrip())
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    resolved = {k: v for k, v in vars(args).items() if k != "command"}
    print(f"config: {args.command} {json.dumps(resolved, sort_keys=True)}", file=sys.stderr)
    try:
        rc = COMMANDS[args.command][0](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
