"""Acceptance suite: one test and one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary lines are
printed at the end of the session. Criteria 4-8 train the desk models on the
first run (see tests/desk.py for the cache).
"""
import itertools
import json
import time

import numpy as np
import pytest

from recpool import autodiff as ad
from recpool.autodiff import Tensor
from recpool.cli import main
from recpool.corpus import make_mixture
from recpool.diarization import der, read_rttm
from recpool.losses import aam_loss, init_proxies, permutation_loss
from recpool.pooling import (attention_baseline, attention_recursive, composite_gradcheck,
                             expand_context, init_pooling, length_ratio, run_recursion, weighted_stats)
from recpool.verification import (ModelExtractor, TrialConfig, Utterance, attention_selectivity,
                                  build_trials, eer, evaluate, min_dcf)

from desk import checkpoint_path, desk_models
from test_losses import aam_oracle
from test_pooling import attention_oracle, random_params, stats_oracle
from test_verification import dcf_oracle, eer_oracle

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


@pytest.fixture(scope="module")
def desk():
    return desk_models()


@pytest.fixture(scope="module")
def trialset(desk):
    corpus, _, _ = desk
    return build_trials(corpus, corpus.heldout_ids, TrialConfig())


@pytest.fixture(scope="module")
def diarization(desk, tmp_path_factory):
    """The diarize command on the desk checkpoint: 4 held-out speakers, 40% overlap target."""
    out = tmp_path_factory.mktemp("diarize")
    t0 = time.time()
    code = main(["diarize", "--checkpoint", str(checkpoint_path("proposed")), "--out", str(out)])
    dt = time.time() - t0
    assert code == 0
    return json.loads((out / "report.json").read_text()), read_rttm(out / "reference.rttm")["stream"], dt


def test_criterion_1_gradient_integrity():
    rng = np.random.default_rng(0)
    t0 = time.time()
    worst, failed = 0.0, []
    for name in ad.GRADCHECK_CASES:
        for _ in range(20):
            rep = ad.check_registered_op(name, rng, 1e-5, 1e-4)
            worst = max(worst, max(rep.max_rel_error))
            if not rep.passed:
                failed.append(name)
    for _ in range(20):
        rep = composite_gradcheck(rng, step=1e-5, tol=1e-4)
        worst = max(worst, max(rep.max_rel_error))
        if not rep.passed:
            failed.append("pooling_step2_embedding")
    dt = time.time() - t0
    record(1, not failed and dt < 120,
           f"{len(ad.GRADCHECK_CASES)} ops + composite x20, max rel err {worst:.1e}, {dt:.0f}s"
           + (f", failed {sorted(set(failed))}" if failed else ""))


def test_criterion_2_exact_reductions():
    rng = np.random.default_rng(1)
    errs = {"a": 0.0, "b": 0.0, "c": 0.0, "d": 0.0}
    for seed in range(10):
        p = random_params(D=6, E=4, seed=seed)
        H = rng.standard_normal((6, 13))
        exp = expand_context(H)
        A0, _ = attention_baseline(exp, p)
        A1, _ = attention_recursive(exp, np.zeros((6, 13)), p, ratio=float(rng.uniform(0.5, 3)))
        errs["a"] = max(errs["a"], np.abs(A0.data - A1.data).max())
        C = rng.uniform(0, 1, (6, 13))
        Ar, _ = attention_recursive(exp, C, p, ratio=length_ratio(150, 150))
        hid = np.maximum(p.W1.data @ exp.E.data + p.b1.data[:, None] + p.Wc.data @ C, 0)
        plain = ad.softmax(Tensor(p.W2.data @ hid + p.b2.data[:, None])).data
        errs["b"] = max(errs["b"], np.abs(Ar.data - plain).max())
        mu, sd = weighted_stats(H, np.full((6, 13), 1 / 13))
        errs["c"] = max(errs["c"], np.abs(mu.data - exp.mu.data).max(), np.abs(sd.data - exp.sigma.data).max())
        bank = init_proxies(7, 4, seed=seed, margin=0.0, scale=12.0)
        v, y = rng.standard_normal(4), int(rng.integers(7))
        W = bank.W.data
        logits = 12.0 * (W @ v) / (np.linalg.norm(W, axis=1) * np.linalg.norm(v))
        ce = np.log(np.exp(logits - logits.max()).sum()) + logits.max() - logits[y]
        errs["d"] = max(errs["d"], abs(float(aam_loss(v, y, bank).data) - ce))
    ok = all(e <= 1e-12 for e in errs.values())
    record(2, ok, ", ".join(f"({k}) {v:.1e}" for k, v in errs.items()))


def test_criterion_3_oracle_equivalence():
    rng = np.random.default_rng(2)
    perm_ok = True
    for N in (2, 3, 4):
        for seed in range(3):
            bank = init_proxies(8, 5, seed=seed)
            V = [rng.standard_normal(5) for _ in range(N)]
            labels = [int(x) for x in rng.choice(8, N, replace=False)]
            brute = min(np.mean([aam_oracle(V[i], labels[j], bank.W.data, 0.2, 30.0) for i, j in enumerate(order)])
                        for order in itertools.permutations(range(N)))
            got = float(permutation_loss(V, labels, bank)[0].data)
            perm_ok &= abs(got - brute) <= 1e-12 * max(1.0, abs(brute))
    labels = rng.random(1000) < 0.4
    scores = rng.standard_normal(1000) + labels
    s, l = list(map(float, scores)), list(map(bool, labels))
    e_err = abs(eer(scores, labels) - eer_oracle(s, l))
    d_err = max(abs(min_dcf(scores, labels, p) - dcf_oracle(s, l, p)) for p in (0.01, 0.05))
    f_err = 0.0
    for seed in range(5):
        p = random_params(seed=seed)
        H = rng.standard_normal((4, 9))
        C = rng.uniform(0, 1, (4, 9))
        A, _ = attention_recursive(expand_context(H), C, p, ratio=1.3)
        A_ref, _ = attention_oracle(H, p, C, 1.3)
        mu, sd = weighted_stats(H, A.data)
        mu_ref, sd_ref = stats_oracle(H, A_ref)
        f_err = max(f_err, np.abs(A.data - A_ref).max(), np.abs(mu.data - mu_ref).max(),
                    np.abs(sd.data - sd_ref).max())
    ok = perm_ok and e_err <= 1e-9 and d_err <= 1e-9 and f_err <= 1e-12
    record(3, ok, f"perm N=2..4 {'match' if perm_ok else 'MISMATCH'}, eer {e_err:.1e}, "
                  f"mindcf {d_err:.1e}, direct formulas {f_err:.1e}")


def test_criterion_4_structural_invariants(desk, diarization):
    _, models, _ = desk
    rng = np.random.default_rng(3)
    row_err, cov_err = 0.0, 0.0
    model = models["proposed"]
    for T in (1, 37, 150, 600):
        with ad.no_grad():
            H = model.frame_embeddings(rng.standard_normal((2, model.config.feat_dim, T)))
            steps = run_recursion(H, model.pooling, 4, length_ratio(T, model.t_train))
        for n, s in enumerate(steps):
            row_err = max(row_err, np.abs(s.A.data.sum(-1) - 1).max())
            cov_err = max(cov_err, np.abs(s.coverage.data.sum(-1) - n).max())
    report, reference, _ = diarization
    violations = report["cannot_link_violations"]
    self_der = der(reference, reference).der
    ok = row_err <= 1e-9 and cov_err <= 1e-9 and violations == 0 and self_der == 0.0
    record(4, ok, f"row sums {row_err:.1e}, coverage sums {cov_err:.1e}, "
                  f"cannot-link violations {violations}, der(ref,ref) {self_der}")


def _counting(model, corpus, n=200, frames=300, seed=11):
    rng = np.random.default_rng(seed)
    ids = corpus.heldout_ids
    mixes, singles = [], []
    for _ in range(n):
        a, b = (int(x) for x in rng.choice(ids, 2, replace=False))
        s = make_mixture(corpus, (a, b), float(rng.uniform(-5, 5)), frames,
                         (int(rng.integers(2**31)), int(rng.integers(2**31))))
        mixes.append(Utterance(s.features, s.speakers))
        spk = int(rng.choice(ids))
        singles.append(Utterance(corpus.utterance(spk, frames, int(rng.integers(2**31))), (spk,)))
    ext = ModelExtractor(model, "estimated", max_speakers=2)
    p2_mix = np.array([p[1] for _, p in ext.decode(mixes)])
    p2_single = np.array([p[1] for _, p in ext.decode(singles)])
    return float(np.mean(p2_mix < 0.5)), float(np.mean(p2_single >= 0.5))


def test_criterion_5_desk_training(desk, trialset):
    corpus, models, seconds = desk
    prop = evaluate(ModelExtractor(models["proposed"], "estimated", max_speakers=2), trialset,
                    ("svs", "svm", "mvm_any"))
    base = evaluate(ModelExtractor(models["baseline"], "single"), trialset, ("svs", "svm", "mvm_any"))
    mix_acc, single_acc = _counting(models["proposed"], corpus)
    total = seconds["proposed"] + seconds["baseline"]
    checks = {
        "a": prop["svs"]["eer"] < 0.05,
        "b": prop["svm"]["eer"] <= 0.5 * base["svm"]["eer"],
        "c": prop["mvm_any"]["eer"] < base["mvm_any"]["eer"],
        "d": mix_acc >= 0.90 and single_acc >= 0.95,
        "time": total <= 900,
    }
    detail = (f"(a) svs {100 * prop['svs']['eer']:.2f}% [{'ok' if checks['a'] else 'FAIL'}]; "
              f"(b) svm {100 * prop['svm']['eer']:.2f}% vs baseline {100 * base['svm']['eer']:.2f}% "
              f"[{'ok' if checks['b'] else 'FAIL'}]; "
              f"(c) mvm_any {100 * prop['mvm_any']['eer']:.2f}% vs {100 * base['mvm_any']['eer']:.2f}% "
              f"[{'ok' if checks['c'] else 'FAIL'}]; "
              f"(d) counting mix {100 * mix_acc:.1f}% / single {100 * single_acc:.1f}% "
              f"[{'ok' if checks['d'] else 'FAIL'}]; training {total:.0f}s")
    record(5, all(checks.values()), detail)


def test_criterion_6_length_correction(desk, trialset):
    _, models, _ = desk
    model = models["proposed"]
    long_frames = 3 * model.t_train
    long_set = build_trials(desk[0], desk[0].heldout_ids, TrialConfig(frames=long_frames, seed=99))
    scen = ("svm", "mvm_any", "mvm_per")
    off = evaluate(ModelExtractor(model, "oracle", correction=False), long_set, scen)
    on = evaluate(ModelExtractor(model, "oracle", correction=True), long_set, scen)
    better = all(on[s]["eer"] <= off[s]["eer"] for s in scen)
    matched = build_trials(desk[0], desk[0].heldout_ids,
                           TrialConfig(frames=model.t_train, trials=200, mixtures=50, singles_per_speaker=5))
    e_on = ModelExtractor(model, "oracle", correction=True)(matched.utterances)
    e_off = ModelExtractor(model, "oracle", correction=False)(matched.utterances)
    identical = all(np.array_equal(a, b) for x, y in zip(e_on, e_off) for a, b in zip(x, y))
    detail = ", ".join(f"{s} {100 * off[s]['eer']:.2f}% -> {100 * on[s]['eer']:.2f}%" for s in scen)
    record(6, better and identical, f"T={long_frames}: {detail}; matched length bit-identical {identical}")


def test_criterion_7_diarization_direction(diarization):
    rep, _, dt = diarization
    prop, plain = rep["proposed"]["der"], rep["plain_sc"]["der"]
    rel = (plain - prop) / plain if plain > 0 else 0.0
    record(7, prop < plain and dt < 300,
           f"overlap {100 * rep['overlap_fraction']:.1f}%, DER {100 * plain:.2f}% -> {100 * prop:.2f}% "
           f"({100 * rel:.0f}% relative{', meets 25% target' if rel >= 0.25 else ', below 25% target'}), {dt:.0f}s")


def test_criterion_8_attention_selectivity(desk, tmp_path):
    code = main(["inspect-attention", "--checkpoint", str(checkpoint_path("proposed")),
                 "--out", str(tmp_path), "--set", "inspect.sir_db=0"])
    report = json.loads((tmp_path / "report.json").read_text())
    maps = [np.loadtxt(tmp_path / f"attention_spk{n}.csv", delimiter=",") for n in (1, 2)]
    D = desk[1]["proposed"].config.D
    shapes_ok = all(m.shape == (D, report["frames"]) for m in maps)
    sel = attention_selectivity(maps)
    record(8, code == 0 and shapes_ok and sel["frame_disagreement"] >= 0.2,
           f"two {D}x{report['frames']} maps, dominant speaker differs on "
           f"{100 * sel['frame_disagreement']:.1f}% of bins, shares {[round(x, 2) for x in sel['shares']]}")
