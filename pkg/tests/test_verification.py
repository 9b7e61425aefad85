import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recpool.corpus import Corpus, CorpusConfig
from recpool.verification import (P_TARGET, OracleExtractor, Trial, TrialConfig, build_trials, cosine,
                                  eer, evaluate, min_dcf, read_trials, score_trial, write_scores,
                                  write_trials, attention_selectivity)


def sweep(scores, labels):
    """Loop over every candidate threshold (accept score >= thr), plus reject-all."""
    tgt = [s for s, l in zip(scores, labels) if l]
    non = [s for s, l in zip(scores, labels) if not l]
    pts = []
    for thr in sorted(set(scores)) + [float("inf")]:
        miss = sum(1 for s in tgt if s < thr) / len(tgt)
        fa = sum(1 for s in non if s >= thr) / len(non)
        pts.append((miss, fa))
    return pts


def eer_oracle(scores, labels):
    pts = sweep(scores, labels)
    for (m0, f0), (m1, f1) in zip(pts, pts[1:]):
        if m0 == f0:
            return m0
        if m0 < f0 and m1 >= f1:
            # the two lines cross between these neighbours
            t = (f0 - m0) / ((f0 - m0) - (f1 - m1))
            return f0 + t * (f1 - f0)
    return pts[-1][0]


def dcf_oracle(scores, labels, p):
    return min(m * p + f * (1 - p) for m, f in sweep(scores, labels)) / min(p, 1 - p)


def test_trivial_rates():
    assert eer([1, 1, 0, 0], [1, 1, 0, 0]) == 0.0
    assert eer([0, 1], [1, 0]) == 1.0
    assert min_dcf([1, 1, 0, 0], [1, 1, 0, 0], 0.01) == 0.0
    assert min_dcf([0.3] * 6, [1, 0, 1, 0, 0, 0], 0.05) == 1.0


def test_degenerate_labels_rejected():
    with pytest.raises(ValueError):
        eer([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        min_dcf([0.1, 0.2], [0, 0], 0.01)
    with pytest.raises(ValueError):
        min_dcf([0.1, 0.2], [0, 1], 1.0)


@pytest.mark.parametrize("seed", range(3))
def test_rates_match_sweep_oracle(seed):
    rng = np.random.default_rng(seed)
    labels = rng.random(1000) < 0.3
    scores = np.round(rng.standard_normal(1000) + labels * 1.2, 2)   # rounding forces ties
    s, l = list(map(float, scores)), list(map(bool, labels))
    assert abs(eer(scores, labels) - eer_oracle(s, l)) <= 1e-9
    for p in (0.01, 0.05):
        assert abs(min_dcf(scores, labels, p) - dcf_oracle(s, l, p)) <= 1e-9


def test_monotone_transform_invariance():
    rng = np.random.default_rng(4)
    labels = rng.random(300) < 0.5
    scores = rng.standard_normal(300) + labels
    warped = np.exp(3 * scores) + 7
    assert eer(scores, labels) == eer(warped, labels)
    assert min_dcf(scores, labels, 0.01) == min_dcf(warped, labels, 0.01)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=40))
def test_eer_oracle_property(pairs):
    labels = [l for _, l in pairs]
    if all(labels) or not any(labels):
        return
    scores = [float(s) for s, _ in pairs]
    assert abs(eer(scores, labels) - eer_oracle(scores, labels)) <= 1e-9
    assert 0.0 <= eer(scores, labels) <= 1.0


def test_priors():
    assert P_TARGET["svs"] == 0.01
    assert P_TARGET["svm"] == P_TARGET["mvm_any"] == P_TARGET["mvm_per"] == 0.05


def test_score_trial_examples():
    e = np.array([1.0, 2.0, -1.0])
    t = np.array([0.5, 0.1, 3.0])
    assert score_trial([e], [t]) == [(pytest.approx(cosine(e, t)), True)]
    assert score_trial([e], [e, -e])[0][0] == pytest.approx(1.0)


def test_any_spk_is_brute_force_max():
    rng = np.random.default_rng(5)
    for _ in range(20):
        E, T = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
        pairs = [cosine(a, b) for a in E for b in T]
        (s, carries), = score_trial(list(E), list(T))
        assert s == max(pairs) and carries
        assert all(s >= p for p in pairs)


def test_per_spk_emits_best_and_complement():
    rng = np.random.default_rng(6)
    for _ in range(20):
        E, T = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
        sims = np.array([[cosine(a, b) for b in T] for a in E])
        out = score_trial(list(E), list(T), "per_spk")
        assert len(out) == 2 and [c for _, c in out] == [True, False]
        i, j = np.unravel_index(np.argmax(sims), (2, 2))
        assert out[0][0] == sims[i, j] and out[1][0] == sims[1 - i, 1 - j]
    one = score_trial([E[0]], list(T), "per_spk")
    assert one[0][0] == max(cosine(E[0], T[0]), cosine(E[0], T[1]))


def test_per_spk_errors():
    with pytest.raises(ValueError):
        score_trial([np.ones(3)], [np.ones(3)], "per_spk")
    with pytest.raises(ValueError):
        score_trial([], [np.ones(3)])
    with pytest.raises(ValueError):
        score_trial([np.ones(3)], [np.ones(3)], "bogus")


def test_per_spk_tie_goes_to_first_pair():
    e = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    out = score_trial(e, [np.array([1.0, 0.0]), np.array([0.0, 1.0])], "per_spk")
    assert out == [(1.0, True), (1.0, False)]


@pytest.fixture(scope="module")
def small_trials():
    corpus = Corpus(CorpusConfig(n_train=4, n_heldout=6, feat_dim=8, seed=2))
    return corpus, build_trials(corpus, corpus.heldout_ids,
                                TrialConfig(singles_per_speaker=4, mixtures=30, frames=20, trials=200))


def test_trial_labels_follow_speaker_sets(small_trials):
    _, ts = small_trials
    U = ts.utterances
    for key in ("svs", "svm", "mvm"):
        assert abs(sum(t.label for t in ts.trials[key]) - len(ts.trials[key]) / 2) <= 1
        for t in ts.trials[key]:
            a, b = set(U[t.enroll].speakers), set(U[t.test].speakers)
            assert t.label == bool(a & b)
    for t in ts.trials["svs"]:
        assert len(U[t.enroll].speakers) == len(U[t.test].speakers) == 1 and t.enroll != t.test
    for t in ts.trials["svm"]:
        assert len(U[t.test].speakers) == 2 and t.sir_db is not None
    for t in ts.trials["mvm"]:
        assert set(U[t.enroll].speakers) != set(U[t.test].speakers)


def test_oracle_stub_is_perfect(small_trials):
    _, ts = small_trials
    res = evaluate(OracleExtractor(10), ts)
    for sc in ("svs", "svm", "mvm_any", "mvm_per"):
        assert res[sc]["eer"] == 0.0 and res[sc]["min_dcf"] == 0.0
    assert res["mvm_per"]["n_scores"] == 2 * len(ts.trials["mvm"])


def test_trial_and_score_files(tmp_path, small_trials):
    _, ts = small_trials
    paths = [f"u/{u.name}.rpfr" for u in ts.utterances]
    write_trials(tmp_path / "t.txt", ts.trials["svm"], paths)
    back = read_trials(tmp_path / "t.txt")
    assert len(back) == len(ts.trials["svm"])
    t0 = ts.trials["svm"][0]
    assert back[0][:3] == (t0.label, paths[t0.enroll], paths[t0.test])
    assert back[0][3] == pytest.approx(t0.sir_db, abs=1e-4)
    (tmp_path / "bad.txt").write_text("maybe a b\n")
    with pytest.raises(ValueError):
        read_trials(tmp_path / "bad.txt")
    write_scores(tmp_path / "s.csv", [0.5, -0.25], [True, False])
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "trial_index,score,label"


def test_selectivity_extremes():
    A = np.zeros((3, 4))
    A[:, :2] = 1
    sel = attention_selectivity([A, 1 - A])
    assert sel["frame_disagreement"] == 0.0 and sel["min_share"] == 0.5
    B = np.zeros((2, 4))
    B[0] = 1
    sel = attention_selectivity([B, 1 - B])
    assert sel["frame_disagreement"] == 0.5
