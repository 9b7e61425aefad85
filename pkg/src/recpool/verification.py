"""Trials, cosine scoring, EER/minDCF and the SIR / duration analyses."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corpus import Corpus, make_mixture
from .pooling import STOP_THRESHOLD, length_ratio, run_recursion

SCENARIOS = ("svs", "svm", "mvm_any", "mvm_per")
P_TARGET = {"svs": 0.01, "svm": 0.05, "mvm_any": 0.05, "mvm_per": 0.05}


@dataclass
class Utterance:
    features: np.ndarray
    speakers: tuple[int, ...]
    sir_db: float | None = None
    name: str = ""


@dataclass
class Trial:
    enroll: int
    test: int
    label: bool
    sir_db: float | None = None


@dataclass
class TrialSet:
    utterances: list[Utterance]
    trials: dict[str, list[Trial]]


# -- metrics ---------------------------------------------------------------------

def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    tgt, non = np.sort(scores[labels]), np.sort(scores[~labels])
    if tgt.size == 0 or non.size == 0:
        raise ValueError("need at least one target and one nontarget score")
    return scores, tgt, non


def operating_points(scores, labels):
    """(thresholds, P_miss, P_fa) accepting score >= threshold, ascending thresholds.

    The last threshold is +inf (reject everything).
    """
    scores, tgt, non = _split(scores, labels)
    thr = np.append(np.unique(scores), np.inf)
    p_miss = np.searchsorted(tgt, thr, side="left") / tgt.size
    p_fa = 1.0 - np.searchsorted(non, thr, side="left") / non.size
    return thr, p_miss, p_fa


def eer(scores, labels) -> float:
    """Equal error rate, interpolating linearly between bracketing ROC points."""
    _, p_miss, p_fa = operating_points(scores, labels)
    diff = p_miss - p_fa                   # nondecreasing from -1 to +1
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0 or i == 0:
        return float(p_miss[i])
    d0, d1 = diff[i - 1], diff[i]
    t = -d0 / (d1 - d0)
    return float(p_fa[i - 1] + t * (p_fa[i] - p_fa[i - 1]))


def min_dcf(scores, labels, p_target: float, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    if not 0.0 < p_target < 1.0:
        raise ValueError("p_target must lie in (0, 1)")
    _, p_miss, p_fa = operating_points(scores, labels)
    dcf = c_miss * p_miss * p_target + c_fa * p_fa * (1.0 - p_target)
    return float(dcf.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))


# -- scoring ------------------------------------------------------------------------

def cosine(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def score_trial(enroll, test, protocol: str = "any_spk") -> list[tuple[float, bool]]:
    """Score one trial; returns (score, carries_trial_label) pairs.

    ``per_spk`` keeps the trial label on the best cross pair and emits the
    complementary pair as an extra nontarget. Ties go to the first pair in
    row-major (enroll, test) order.
    """
    if not len(enroll) or not len(test):
        raise ValueError("each side needs at least one embedding")
    sims = np.array([[cosine(e, t) for t in test] for e in enroll])
    if protocol == "any_spk":
        return [(float(sims.max()), True)]
    if protocol != "per_spk":
        raise ValueError(f"unknown protocol {protocol!r}")
    if max(len(enroll), len(test)) != 2 or min(len(enroll), len(test)) < 1 or sims.size not in (2, 4):
        raise ValueError("per_spk needs exactly two embeddings on the mixture side")
    i, j = np.unravel_index(int(np.argmax(sims)), sims.shape)
    ci = 1 - i if sims.shape[0] == 2 else i
    cj = 1 - j if sims.shape[1] == 2 else j
    return [(float(sims[i, j]), True), (float(sims[ci, cj]), False)]


# -- extractors -------------------------------------------------------------------------

class ModelExtractor:
    """Embeds utterances with a trained model.

    ``mode``: "estimated" (stop on the existence score), "oracle" (number of
    labelled speakers) or "single" (first decoding step only).
    """

    def __init__(self, model, mode: str = "estimated", correction: bool = True,
                 max_speakers: int = 4, threshold: float = STOP_THRESHOLD, batch_size: int = 64,
                 existence_means_present: bool = False):
        if mode not in ("estimated", "oracle", "single"):
            raise ValueError(f"unknown extraction mode {mode!r}")
        if not model.pooling.recursive:
            mode = "single"
        self.model = model
        self.mode = mode
        self.correction = correction
        self.max_speakers = max_speakers
        self.threshold = threshold
        self.batch_size = batch_size
        self.existence_means_present = existence_means_present

    def with_mode(self, mode: str) -> "ModelExtractor":
        return ModelExtractor(self.model, mode, self.correction, self.max_speakers,
                              self.threshold, self.batch_size, self.existence_means_present)

    def _steps_needed(self, utts) -> int:
        if self.mode == "single":
            return 1
        if self.mode == "oracle":
            return max(len(u.speakers) for u in utts)
        return self.max_speakers

    def decode(self, utts: list[Utterance]) -> list[tuple[list[np.ndarray], np.ndarray]]:
        """Per utterance: (embeddings, existence probabilities of every computed step)."""
        out: list = [None] * len(utts)
        by_len: dict[int, list[int]] = {}
        for i, u in enumerate(utts):
            by_len.setdefault(u.features.shape[1], []).append(i)
        for T, idx in by_len.items():
            ratio = length_ratio(T, self.model.t_train) if self.correction else 1.0
            for lo in range(0, len(idx), self.batch_size):
                chunk = idx[lo:lo + self.batch_size]
                group = [utts[i] for i in chunk]
                n_steps = self._steps_needed(group)
                with ad.no_grad():
                    H = self.model.frame_embeddings(np.stack([u.features for u in group]))
                    steps = run_recursion(H, self.model.pooling, n_steps, ratio)
                V = np.stack([s.v.data for s in steps], axis=1)          # (B, n, E)
                P = np.stack([s.p for s in steps], axis=1)               # (B, n)
                for row, i in enumerate(chunk):
                    n = self._count(group[row], P[row])
                    out[i] = ([V[row, k].copy() for k in range(n)], P[row].copy())
        return out

    def _count(self, utt: Utterance, p: np.ndarray) -> int:
        if self.mode == "single":
            return 1
        if self.mode == "oracle":
            return len(utt.speakers)
        n = 1
        while n < len(p) and (p[n] >= self.threshold if self.existence_means_present
                              else p[n] < self.threshold):
            n += 1
        return n

    def __call__(self, utts):
        return [embs for embs, _ in self.decode(utts)]


class OracleExtractor:
    """Reference stub: one-hot identity vectors taken from the utterance labels."""

    def __init__(self, n_speakers: int):
        self.n = n_speakers
        self.mode = "oracle"

    def with_mode(self, mode):
        return self

    def __call__(self, utts):
        return [[np.eye(self.n)[s] for s in u.speakers] for u in utts]


# -- trial construction -----------------------------------------------------------------

@dataclass
class TrialConfig:
    singles_per_speaker: int = 20
    mixtures: int = 200
    frames: int = 300
    trials: int = 2000
    sir_range: tuple[float, float] = (-5.0, 5.0)
    seed: int = 1234


def _half_split(rng, n, make_target, make_nontarget):
    out = []
    for k in range(n):
        t = make_target() if k % 2 == 0 else make_nontarget()
        if t is not None:
            out.append(t)
    return out


def build_trials(corpus: Corpus, speaker_ids, config: TrialConfig | None = None) -> TrialSet:
    """Single/mixture utterances of ``speaker_ids`` and balanced trial lists."""
    c = config or TrialConfig()
    ids = list(speaker_ids)
    rng = np.random.default_rng(c.seed)
    utts: list[Utterance] = []
    singles_of: dict[int, list[int]] = {}
    for spk in ids:
        for j in range(c.singles_per_speaker):
            seed = int(rng.integers(2**31))
            singles_of.setdefault(spk, []).append(len(utts))
            utts.append(Utterance(corpus.utterance(spk, c.frames, seed), (spk,), None,
                                  f"s{spk}_{j}"))
    mixtures = []
    for j in range(c.mixtures):
        a, b = (int(x) for x in rng.choice(ids, 2, replace=False))
        sir = float(rng.uniform(*c.sir_range))
        s = make_mixture(corpus, (a, b), sir, c.frames, (int(rng.integers(2**31)), int(rng.integers(2**31))))
        mixtures.append(len(utts))
        utts.append(Utterance(s.features, s.speakers, sir, f"m{a}_{b}_{j}"))
    singles = [i for v in singles_of.values() for i in v]

    def pick(seq):
        return seq[int(rng.integers(len(seq)))]

    def svs_target():
        spk = pick(ids)
        a, b = rng.choice(singles_of[spk], 2, replace=False)
        return Trial(int(a), int(b), True)

    def svs_non():
        a, b = rng.choice(ids, 2, replace=False)
        return Trial(pick(singles_of[int(a)]), pick(singles_of[int(b)]), False)

    def svm(target: bool):
        for _ in range(1000):
            m = pick(mixtures)
            e = pick(singles)
            hit = utts[e].speakers[0] in utts[m].speakers
            if hit == target:
                return Trial(e, m, target, utts[m].sir_db)
        return None

    def mvm(target: bool):
        for _ in range(1000):
            a, b = pick(mixtures), pick(mixtures)
            sa, sb = set(utts[a].speakers), set(utts[b].speakers)
            if a == b or sa == sb:
                continue
            if bool(sa & sb) == target:
                return Trial(a, b, target)
        return None

    n = c.trials
    trials = {
        "svs": _half_split(rng, n, svs_target, svs_non),
        "svm": _half_split(rng, n, lambda: svm(True), lambda: svm(False)),
        "mvm": _half_split(rng, n, lambda: mvm(True), lambda: mvm(False)),
    }
    return TrialSet(utts, trials)


# -- evaluation ------------------------------------------------------------------------------

def _truncate(utts: list[Utterance], frames: int | None) -> list[Utterance]:
    if frames is None:
        return utts
    return [Utterance(u.features[:, :frames], u.speakers, u.sir_db, u.name) for u in utts]


def score_scenario(embs, trials: list[Trial], protocol: str) -> tuple[np.ndarray, np.ndarray]:
    scores, labels = [], []
    for t in trials:
        for s, carries in score_trial(embs[t.enroll], embs[t.test], protocol):
            scores.append(s)
            labels.append(t.label if carries else False)
    return np.array(scores), np.array(labels, dtype=bool)


def evaluate(extractor, trialset: TrialSet, scenarios=SCENARIOS, frames: int | None = None) -> dict:
    """EER / minDCF per scenario. ``mvm_per`` always uses oracle speaker counts."""
    utts = _truncate(trialset.utterances, frames)
    embs = extractor(utts)
    results = {}
    oracle_embs = None
    for sc in scenarios:
        base = "mvm" if sc.startswith("mvm") else sc
        trials = trialset.trials[base]
        if sc == "mvm_per":
            if getattr(extractor, "mode", None) == "single":
                results[sc] = None
                continue
            if oracle_embs is None:
                oracle_embs = embs if extractor.mode == "oracle" else extractor.with_mode("oracle")(utts)
            scores, labels = score_scenario(oracle_embs, trials, "per_spk")
        else:
            scores, labels = score_scenario(embs, trials, "any_spk")
        results[sc] = {"eer": eer(scores, labels),
                       "min_dcf": min_dcf(scores, labels, P_TARGET[sc]),
                       "n_scores": int(scores.size),
                       "scores": scores, "labels": labels}
    return results


def summarize(results: dict) -> dict:
    return {k: (None if v is None else {"eer": v["eer"], "min_dcf": v["min_dcf"],
                                        "n_scores": v["n_scores"]})
            for k, v in results.items()}


SIR_BINS = (0.0, 5.0, 10.0, 15.0, np.inf)


def sir_analysis(model, corpus: Corpus, speaker_ids, per_bin: int = 100, frames: int = 300,
                 bins=SIR_BINS, max_abs_sir: float = 25.0, seed: int = 7) -> dict:
    """Counting accuracy per |SIR| bin and target-similarity statistics.

    A mixture counts as correct when p_2 keeps decoding, a single-speaker
    utterance when p_2 stops it.

    Similarities compare a clean enrollment of the target speaker with the
    single-output embedding and with the best of the two oracle-count
    embeddings of a mixture at signed SIR (target over interferer).
    """
    rng = np.random.default_rng(seed)
    ids = list(speaker_ids)
    # two decoding steps: the count is 2 exactly when p_2 does not stop decoding
    est = ModelExtractor(model, "estimated", max_speakers=2)
    single = ModelExtractor(model, "single")
    oracle = ModelExtractor(model, "oracle")
    rows, sims = [], []
    for lo, hi in zip(bins[:-1], bins[1:]):
        top = min(hi, max_abs_sir)
        mixes, enrolls = [], []
        for _ in range(per_bin):
            a, b = (int(x) for x in rng.choice(ids, 2, replace=False))
            sir = float(rng.uniform(lo, top)) * (1 if rng.random() < 0.5 else -1)
            s = make_mixture(corpus, (a, b), sir, frames, (int(rng.integers(2**31)), int(rng.integers(2**31))))
            mixes.append(Utterance(s.features, s.speakers, sir))
            enrolls.append(Utterance(corpus.utterance(a, frames, int(rng.integers(2**31))), (a,)))
        counts = [len(e) for e in est(mixes)]
        label = f"[{lo:g},{hi:g})" if np.isfinite(hi) else f">={lo:g}"
        rows.append({"bin": label, "n": per_bin,
                     "pred_2": float(np.mean(np.array(counts) == 2)),
                     "pred_1": float(np.mean(np.array(counts) == 1))})
        e_emb = single(enrolls)
        for m, e, s1, so in zip(mixes, e_emb, single(mixes), oracle(mixes)):
            sims.append({"sir_db": m.sir_db,
                         "single_output": cosine(e[0], s1[0]),
                         "multi_output": max(cosine(e[0], v) for v in so)})
    singles = [Utterance(corpus.utterance(int(rng.choice(ids)), frames, int(rng.integers(2**31))), (0,))
               for _ in range(per_bin)]
    counts = np.array([len(e) for e in est(singles)])
    single_row = {"bin": "inf", "n": per_bin, "pred_1": float(np.mean(counts == 1)),
                  "pred_2": float(np.mean(counts == 2))}
    return {"singles": single_row, "mixtures": rows, "similarities": sims}


def duration_sweep(model, trialset: TrialSet, durations, scenarios=("svs", "svm", "mvm_any", "mvm_per")) -> list[dict]:
    """EER per duration (first ``t`` frames of every utterance), with and without
    length-mismatch correction, using oracle speaker counts."""
    rows = []
    for t in durations:
        if t < 1:
            raise ValueError("duration shorter than one frame")
        row = {"frames": int(t)}
        for corr in (False, True):
            ext = ModelExtractor(model, "oracle", correction=corr)
            res = evaluate(ext, trialset, scenarios, frames=int(t))
            for sc, r in res.items():
                row[f"{sc}_{'corrected' if corr else 'uncorrected'}"] = None if r is None else r["eer"]
        rows.append(row)
    return rows


def attention_selectivity(maps) -> dict:
    """How differently speakers' attention maps (each D x T) divide the bins.

    ``frame_disagreement`` is the fraction of (dimension, frame) bins whose
    dominant map differs from the dominant map of most dimensions in that
    frame; ``min_share`` is the smallest fraction of bins any map dominates.
    """
    A = np.stack([np.asarray(m) for m in maps])                 # (S, D, T)
    dom = np.argmax(A, axis=0)                                  # (D, T)
    counts = np.stack([(dom == s).sum(axis=0) for s in range(A.shape[0])])   # (S, T)
    majority = np.argmax(counts, axis=0)
    shares = [float(np.mean(dom == s)) for s in range(A.shape[0])]
    return {"frame_disagreement": float(np.mean(dom != majority[None, :])),
            "min_share": min(shares), "shares": shares}


# -- files --------------------------------------------------------------------------------

def write_trials(path, trials: list[Trial], paths: list[str]) -> None:
    with open(path, "w") as fh:
        for t in trials:
            tail = "" if t.sir_db is None else f" {t.sir_db:.4f}"
            fh.write(f"{'target' if t.label else 'nontarget'} {paths[t.enroll]} {paths[t.test]}{tail}\n")


def read_trials(path) -> list[tuple[bool, str, str, float | None]]:
    out = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] not in ("target", "nontarget") or len(parts) not in (3, 4):
            raise ValueError(f"bad trial line: {line!r}")
        sir = float(parts[3]) if len(parts) == 4 else None
        out.append((parts[0] == "target", parts[1], parts[2], sir))
    return out


def write_scores(path, scores, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial_index", "score", "label"])
        for i, (s, l) in enumerate(zip(scores, labels)):
            w.writerow([i, f"{s:.10f}", "target" if l else "nontarget"])


def write_metrics(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
