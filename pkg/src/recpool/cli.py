"""Command-line entry point: ``python -m recpool <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import SEED_KEYS, ConfigError, RunConfig, describe
from .corpus import Corpus, load_corpus, make_mixture, read_frames, save_corpus, write_frames
from .diarization import diarize, overlap_fraction, synth_stream, write_report, write_rttm
from .pooling import composite_gradcheck, length_ratio, run_recursion
from .trainer import Model, load_checkpoint, train
from .verification import (ModelExtractor, Utterance, attention_selectivity, build_trials,
                           duration_sweep, eer, evaluate, min_dcf, read_trials, score_trial,
                           sir_analysis, summarize, write_metrics, write_scores, write_trials)

log = logging.getLogger("recpool")


def _config(args, command: str, base: dict | None = None) -> RunConfig:
    cfg = RunConfig(base)
    if args.config:
        cfg.apply_lines(Path(args.config).read_text().splitlines())
    cfg.apply_lines(args.set or ())
    if args.seed is not None:
        for key in SEED_KEYS[command]:
            cfg.set(key, args.seed)
    return cfg


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def _write_json(path: Path, payload: dict) -> None:
    write_metrics(path, payload)


def _corpus_for(cfg: RunConfig, corpus_dir) -> Corpus:
    if corpus_dir:
        return load_corpus(corpus_dir)[0]
    return Corpus(cfg.corpus())


def _load_model(path) -> tuple[Model, dict]:
    model, _, meta = load_checkpoint(path)
    return model, meta


def _checkpoint_corpus(cfg: RunConfig, meta: dict, corpus_dir) -> Corpus:
    """Corpus the checkpoint was trained on unless overridden."""
    saved = meta.get("extra", {}).get("config")
    if saved is not None and not corpus_dir:
        base = RunConfig({k: v for k, v in saved.items() if k.startswith("corpus.")})
        return Corpus(base.corpus())
    return _corpus_for(cfg, corpus_dir)


# -- commands -------------------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    cfg = _config(args, "gen-corpus")
    out = _out(args, "corpus")
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"{out} exists and is not empty")
    corpus = Corpus(cfg.corpus())
    save_corpus(out, corpus, cfg["corpus.utts_per_speaker"], cfg["corpus.frames"])
    _write_json(out / "config.json", cfg.as_dict())
    n = len(list(out.glob("*.rpfm")))
    print(f"wrote {n} utterance files for {len(corpus.speakers)} speakers to {out}")
    return 0


def cmd_train(args) -> int:
    out = _out(args, "run")
    ckpt = out / "checkpoint.rpck"
    model, state, start, saved = None, None, 0, None
    if args.resume:
        if not ckpt.exists():
            raise FileNotFoundError(f"nothing to resume: {ckpt} missing")
        model, state, meta = load_checkpoint(ckpt)
        start = int(meta["iteration"])
        saved = meta.get("extra", {}).get("config")
    # a resumed run starts from the checkpoint's settings; file and --set apply on top
    cfg = _config(args, "train", saved)
    corpus = _corpus_for(cfg, args.corpus)
    tc = cfg.train()
    if model is None:
        model = Model.create(cfg.model(), tc.margin, tc.scale)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.as_dict())
    t0 = time.time()
    res = train(tc, corpus, model, out_dir=out, state=state, start_iteration=start,
                extra={"config": cfg.as_dict()})
    tail = res.metrics[-min(50, len(res.metrics)):] if res.metrics else []
    summary = {"config": cfg.as_dict(), "iterations": tc.total_iterations, "resumed_from": start,
               "seconds": time.time() - t0,
               "final_L": float(np.mean([m["L"] for m in tail])) if tail else None,
               "final_count_acc": float(np.mean([m["count_acc"] for m in tail])) if tail else None}
    _write_json(out / "train_report.json", summary)
    print(f"checkpoint {res.checkpoint} after {tc.total_iterations} iterations")
    return 0


def _table(results: dict) -> str:
    lines = ["scenario   EER(%)   minDCF"]
    for sc, r in results.items():
        if r is None:
            lines.append(f"{sc:<9}  n/a      n/a")
        else:
            lines.append(f"{sc:<9}  {100 * r['eer']:6.2f}   {r['min_dcf']:.4f}")
    return "\n".join(lines)


def _verify_external(model, cfg: RunConfig, trials_path: Path, out: Path) -> dict:
    rows = read_trials(trials_path)
    root = trials_path.parent
    paths = sorted({p for _, e, t, _ in rows for p in (e, t)})
    utts = [Utterance(read_frames(root / p), (0,)) for p in paths]
    ext = ModelExtractor(model, cfg["verify.mode"], cfg["verify.correction"],
                         cfg["verify.max_speakers"], cfg["verify.threshold"],
                         existence_means_present=cfg["verify.existence_means_present"])
    embs = dict(zip(paths, ext(utts)))
    scores = np.array([score_trial(embs[e], embs[t], "any_spk")[0][0] for _, e, t, _ in rows])
    labels = np.array([lab for lab, _, _, _ in rows], dtype=bool)
    write_scores(out / "scores_external.csv", scores, labels)
    return {"external": {"eer": eer(scores, labels), "min_dcf": min_dcf(scores, labels, 0.05),
                         "n_scores": int(scores.size)}}


def cmd_verify(args) -> int:
    cfg = _config(args, "verify")
    out = _out(args, "verify")
    out.mkdir(parents=True, exist_ok=True)
    model, meta = _load_model(args.checkpoint)
    payload = {"config": cfg.as_dict(), "checkpoint": str(args.checkpoint)}
    if args.trials:
        payload["results"] = _verify_external(model, cfg, Path(args.trials), out)
        print(_table(payload["results"]))
        _write_json(out / "metrics.json", payload)
        return 0

    corpus = _checkpoint_corpus(cfg, meta, args.corpus)
    trialset = build_trials(corpus, corpus.heldout_ids, cfg.trials())
    if args.export_trials:
        udir = out / "utterances"
        udir.mkdir(exist_ok=True)
        names = [f"utterances/u{i:05d}.rpfm" for i in range(len(trialset.utterances))]
        for name, u in zip(names, trialset.utterances):
            write_frames(out / name, u.features)
        for key, trials in trialset.trials.items():
            write_trials(out / f"trials_{key}.txt", trials, names)
    scenarios = tuple(cfg["verify.scenarios"])
    ext = ModelExtractor(model, cfg["verify.mode"], cfg["verify.correction"],
                         cfg["verify.max_speakers"], cfg["verify.threshold"],
                         existence_means_present=cfg["verify.existence_means_present"])
    results = evaluate(ext, trialset, scenarios)
    for sc, r in results.items():
        if r is not None:
            write_scores(out / f"scores_{sc}.csv", r["scores"], r["labels"])
    payload["mode"] = ext.mode
    payload["results"] = summarize(results)
    print(f"[{ext.mode}]\n" + _table(results))
    if ext.mode != "single":
        single = evaluate(ext.with_mode("single"), trialset, scenarios)
        payload["single_output"] = summarize(single)
        print("[single]\n" + _table(single))
    if cfg["verify.durations"]:
        payload["duration_sweep"] = duration_sweep(model, trialset, cfg["verify.durations"], scenarios)
    if cfg["verify.sir_per_bin"] and model.pooling.recursive:
        sa = sir_analysis(model, corpus, corpus.heldout_ids, cfg["verify.sir_per_bin"],
                          cfg["verify.frames"])
        with open(out / "sir_similarities.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["sir_db", "single_output", "multi_output"])
            w.writeheader()
            w.writerows(sa.pop("similarities"))
        payload["sir_analysis"] = sa
    _write_json(out / "metrics.json", payload)
    return 0


def cmd_diarize(args) -> int:
    cfg = _config(args, "diarize")
    out = _out(args, "diarize")
    out.mkdir(parents=True, exist_ok=True)
    model, meta = _load_model(args.checkpoint)
    corpus = _checkpoint_corpus(cfg, meta, args.corpus)
    rng = np.random.default_rng(cfg["diarize.seed"])
    ids = [int(x) for x in rng.choice(corpus.heldout_ids, cfg["diarize.speakers"], replace=False)]
    stream = synth_stream(corpus, ids, cfg["diarize.turns"], overlap_ratio=cfg["diarize.overlap_ratio"],
                          seed=cfg["diarize.seed"])
    result = diarize(stream, model, cfg.diarize())
    write_rttm(out / "reference.rttm", stream.reference)
    write_rttm(out / "hypothesis.rttm", result["hypothesis"])
    write_rttm(out / "hypothesis_plain_sc.rttm", result["hypothesis_plain"])
    report = dict(result["report"], config=cfg.as_dict(), speakers=ids, duration=stream.duration)
    write_report(out / "report.json", report)
    print(f"overlap {100 * overlap_fraction(stream.reference):.1f}%  "
          f"DER proposed {100 * report['proposed']['der']:.2f}%  "
          f"plain SC {100 * report['plain_sc']['der']:.2f}%")
    return 0


def _save_matrix(path: Path, M: np.ndarray) -> None:
    np.savetxt(path, M, delimiter=",", fmt="%.10g")


def cmd_inspect_attention(args) -> int:
    cfg = _config(args, "inspect-attention")
    out = _out(args, "inspect")
    out.mkdir(parents=True, exist_ok=True)
    model, meta = _load_model(args.checkpoint)
    if not model.pooling.recursive:
        raise ValueError("attention inspection needs a recursive model")
    corpus = _checkpoint_corpus(cfg, meta, args.corpus)
    rng = np.random.default_rng(cfg["inspect.seed"])
    a, b = (int(x) for x in rng.choice(corpus.heldout_ids, 2, replace=False))
    T = cfg["inspect.frames"]
    sample = make_mixture(corpus, (a, b), cfg["inspect.sir_db"], T,
                          (int(rng.integers(2**31)), int(rng.integers(2**31))))
    ratio = length_ratio(T, model.t_train) if cfg["verify.correction"] else 1.0
    with ad.no_grad():
        H = model.frame_embeddings(sample.features)
        steps = run_recursion(H, model.pooling, 2, ratio)
    maps = [s.A.data for s in steps]
    for n, A in enumerate(maps, 1):
        _save_matrix(out / f"attention_spk{n}.csv", A)
    coverage = steps[1].coverage.data
    _save_matrix(out / "coverage.csv", coverage)
    row_err = max(float(np.abs(A.sum(axis=1) - 1).max()) for A in maps)
    report = {"config": cfg.as_dict(), "speakers": [a, b], "frames": T, "D": int(maps[0].shape[0]),
              "existence": [float(s.p) for s in steps], "max_row_sum_error": row_err,
              "selectivity": attention_selectivity(maps)}
    _write_json(out / "report.json", report)
    print(json.dumps(report["selectivity"]))
    return 0 if row_err < 1e-9 else 1


def cmd_gradcheck(args) -> int:
    cfg = _config(args, "gradcheck")
    rng = np.random.default_rng(cfg["gradcheck.seed"])
    n, tol, step = cfg["gradcheck.instances"], cfg["gradcheck.tol"], cfg["gradcheck.step"]
    rows = []
    for name in ad.GRADCHECK_CASES:
        reps = [ad.check_registered_op(name, rng, step, tol) for _ in range(n)]
        rows.append({"op": name, "max_rel_error": max(max(r.max_rel_error) for r in reps),
                     "passed": all(r.passed for r in reps)})
    reps = [composite_gradcheck(rng, step=step, tol=tol) for _ in range(n)]
    rows.append({"op": "pooling_step2_embedding", "max_rel_error": max(max(r.max_rel_error) for r in reps),
                 "passed": all(r.passed for r in reps)})
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['op']:<24} {r['max_rel_error']:.2e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "gradcheck.json", {"config": cfg.as_dict(), "ops": rows})
    return 0 if all(r["passed"] for r in rows) else 1


# -- parser --------------------------------------------------------------------------------------

COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "verify": cmd_verify,
    "diarize": cmd_diarize,
    "inspect-attention": cmd_inspect_attention,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recpool", description=__doc__)
    parser.add_argument("--list-keys", action="store_true", help="print every config key and exit")
    sub = parser.add_subparsers(dest="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="file of key = value lines")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key")
        p.add_argument("--seed", type=int, help="seed for this command")
        p.add_argument("--out", help="output directory")
        if name in ("train", "verify", "diarize", "inspect-attention"):
            p.add_argument("--corpus", help="corpus directory written by gen-corpus")
        if name in ("verify", "diarize", "inspect-attention"):
            p.add_argument("--checkpoint", required=True)
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.rpck")
        if name == "verify":
            p.add_argument("--trials", help="external trial list; paths relative to the list")
            p.add_argument("--export-trials", action="store_true",
                           help="write trial lists and utterance files next to the metrics")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.list_keys:
        print(describe())
        return 0
    if not args.command:
        parser.print_help()
        return 2
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileExistsError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
