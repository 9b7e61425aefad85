"""Synthetic speaker corpus, SIR-controlled mixing and a log-mel frontend.

Synthetic "speakers" are stationary random processes over F log-power bins:
a fixed spectral template, a few speaker-specific modulation directions driven
by AR(1) coefficients, an on/off loudness envelope (pauses) and white noise.
Mixing sums two streams in the power domain, which is what the log-mel of a
waveform mixture approximately does.
"""
from __future__ import annotations

import json
import struct
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

FRAME_MAGIC = b"RPFM"
_FRAME_HEADER = struct.Struct("<4sIII")  # magic, F, T, reserved


@dataclass
class SpeakerModel:
    id: int
    template: np.ndarray     # (F,)
    modulation: np.ndarray   # (rank, F)
    seed: int


@dataclass
class RenderParams:
    modulation_scale: float = 0.5
    modulation_rho: float = 0.9
    envelope_depth: float = 6.0
    envelope_duty: float = 0.5
    mean_run: float = 20.0     # mean length of an active run, frames
    noise_std: float = 0.3


@dataclass
class MixtureSpec:
    speaker_ids: tuple[int, ...]
    sir_db: float | None
    duration_frames: int


@dataclass
class Sample:
    features: np.ndarray     # (F, T)
    speakers: tuple[int, ...]
    spec: MixtureSpec


def generate_speaker_set(S: int, F: int, seed: int, *, prior_mean: float = 0.0,
                         prior_std: float = 1.0, modulation_rank: int = 3,
                         modulation_std: float = 0.5,
                         min_distance: float | None = None) -> list[SpeakerModel]:
    """Draw ``S`` speakers with templates from N(prior_mean, prior_std^2 I).

    Templates closer than ``min_distance`` (default half the expected distance
    between two independent draws) to an earlier one are redrawn.
    """
    if S < 2:
        raise ValueError(f"need at least 2 speakers, got S={S}")
    if F < 4:
        raise ValueError(f"need at least 4 feature bins, got F={F}")
    if min_distance is None:
        min_distance = 0.5 * np.sqrt(2.0 * F) * prior_std
    rng = np.random.default_rng(seed)
    speakers: list[SpeakerModel] = []
    templates = np.empty((0, F))
    while len(speakers) < S:
        t = prior_mean + prior_std * rng.standard_normal(F)
        if len(templates) and np.min(np.linalg.norm(templates - t, axis=1)) <= min_distance:
            continue
        mod = modulation_std * rng.standard_normal((modulation_rank, F))
        templates = np.vstack([templates, t])
        speakers.append(SpeakerModel(len(speakers), t, mod, int(rng.integers(2**31))))
    return speakers


def _envelope(rng: np.random.Generator, T: int, duty: float, mean_run: float) -> np.ndarray:
    p_off = 1.0 / mean_run                       # active -> pause
    p_on = p_off * duty / (1.0 - duty)           # keeps the stationary duty cycle
    active = np.empty(T, dtype=bool)
    state = rng.random() < duty
    u = rng.random(T)
    for t in range(T):
        active[t] = state
        state = (u[t] >= p_off) if state else (u[t] < p_on)
    return active.astype(np.float64)


def render_utterance(speaker: SpeakerModel, T: int, seed: int,
                     params: RenderParams | None = None) -> np.ndarray:
    """Render an F x T log-power utterance of ``speaker``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    p = params or RenderParams()
    rng = np.random.default_rng([speaker.seed, seed])
    F = speaker.template.shape[0]
    out = np.repeat(speaker.template[:, None], T, axis=1)

    rank = speaker.modulation.shape[0]
    innov = rng.standard_normal((rank, T))
    rho = p.modulation_rho
    innov[:, 1:] *= np.sqrt(1.0 - rho**2)
    coeffs = lfilter([1.0], [1.0, -rho], innov, axis=1)
    if p.modulation_scale:
        out += p.modulation_scale * (speaker.modulation.T @ coeffs)

    if p.envelope_depth:
        active = _envelope(rng, T, p.envelope_duty, p.mean_run)
        out += p.envelope_depth * (active - p.envelope_duty)[None, :]
    if p.noise_std:
        out += p.noise_std * rng.standard_normal((F, T))
    return out


def mixing_gain(f1: np.ndarray, f2: np.ndarray, sir_db: float) -> float:
    """Gain on stream 2 so that mean power(f1) / (g * mean power(f2)) = sir_db."""
    if np.isinf(sir_db) and sir_db > 0:
        return 0.0
    p1 = np.mean(np.exp(f1))
    p2 = np.mean(np.exp(f2))
    return float(p1 / (p2 * 10.0 ** (sir_db / 10.0)))


def mix(f1: np.ndarray, f2: np.ndarray, sir_db: float) -> np.ndarray:
    """Power-domain mixture of two log-power streams at the given SIR (dB)."""
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape:
        raise ValueError(f"mix: shape mismatch {f1.shape} vs {f2.shape}")
    g = mixing_gain(f1, f2, sir_db)
    if g == 0.0:
        return f1.copy()
    return np.logaddexp(f1, np.log(g) + f2)


def power_ratio_db(f1: np.ndarray, f2: np.ndarray, gain: float) -> float:
    return float(10.0 * np.log10(np.mean(np.exp(f1)) / (gain * np.mean(np.exp(f2)))))


# -- corpus object and batches ---------------------------------------------

@dataclass
class CorpusConfig:
    n_train: int = 40
    n_heldout: int = 10
    feat_dim: int = 40
    seed: int = 0
    prior_mean: float = 0.0
    prior_std: float = 1.0
    modulation_rank: int = 3
    modulation_std: float = 0.5
    render: RenderParams = field(default_factory=RenderParams)


class Corpus:
    """Speaker models split into training and held-out identities.

    Training identities are labelled 0..n_train-1 (they index the proxy
    bank); held-out identities follow.
    """

    def __init__(self, config: CorpusConfig | None = None):
        self.config = config or CorpusConfig()
        c = self.config
        self.speakers = generate_speaker_set(
            c.n_train + c.n_heldout, c.feat_dim, c.seed, prior_mean=c.prior_mean,
            prior_std=c.prior_std, modulation_rank=c.modulation_rank,
            modulation_std=c.modulation_std)
        self.train_ids = list(range(c.n_train))
        self.heldout_ids = list(range(c.n_train, c.n_train + c.n_heldout))

    @property
    def feat_dim(self) -> int:
        return self.config.feat_dim

    def utterance(self, speaker_id: int, T: int, seed: int) -> np.ndarray:
        return render_utterance(self.speakers[speaker_id], T, seed, self.config.render)


@dataclass
class BatchConfig:
    singles: int = 16
    mixtures: int = 8
    frames: int = 150
    sir_range: tuple[float, float] = (-5.0, 5.0)


def draw_sir(rng: np.random.Generator, sir_range=(-5.0, 5.0), size=None):
    lo, hi = sir_range
    return rng.uniform(lo, hi, size)


def make_mixture(corpus: Corpus, ids, sir_db, T: int, seeds) -> Sample:
    f1 = corpus.utterance(ids[0], T, seeds[0])
    if len(ids) == 1:
        return Sample(f1, (ids[0],), MixtureSpec((ids[0],), None, T))
    f2 = corpus.utterance(ids[1], T, seeds[1])
    return Sample(mix(f1, f2, sir_db), tuple(ids), MixtureSpec(tuple(ids), float(sir_db), T))


def sample_batch(corpus: Corpus, config: BatchConfig, seed, speaker_pool=None) -> list[Sample]:
    """Singles first, then two-speaker mixtures with distinct speakers."""
    pool = list(corpus.train_ids if speaker_pool is None else speaker_pool)
    if config.mixtures and len(pool) < 2:
        raise ValueError("mixtures need at least 2 speakers in the pool")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(config.singles):
        spk = int(rng.choice(pool))
        out.append(make_mixture(corpus, (spk,), None, config.frames, (int(rng.integers(2**31)),)))
    for _ in range(config.mixtures):
        a, b = (int(x) for x in rng.choice(pool, size=2, replace=False))
        sir = draw_sir(rng, config.sir_range)
        seeds = (int(rng.integers(2**31)), int(rng.integers(2**31)))
        out.append(make_mixture(corpus, (a, b), sir, config.frames, seeds))
    return out


def stack_features(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.features for s in samples])


# -- files -------------------------------------------------------------------

def write_frames(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f8")
    F, T = frames.shape
    with open(path, "wb") as fh:
        fh.write(_FRAME_HEADER.pack(FRAME_MAGIC, F, T, 0))
        fh.write(frames.tobytes())


def read_frames(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_FRAME_HEADER.size)
        magic, F, T, _ = _FRAME_HEADER.unpack(head)
        if magic != FRAME_MAGIC:
            raise ValueError(f"{path}: not a frame file (magic {magic!r})")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != F * T:
        raise ValueError(f"{path}: expected {F * T} values, found {data.size}")
    return data.reshape(F, T).astype(np.float64)


def save_corpus(directory, corpus: Corpus, utts_per_speaker: int = 20, frames: int = 300) -> Path:
    """Write ``meta.json`` plus one frame file per utterance."""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()):
        raise FileExistsError(f"{directory} exists and is not empty")
    directory.mkdir(parents=True, exist_ok=True)
    utts = []
    for spk in corpus.speakers:
        for j in range(utts_per_speaker):
            name = f"spk{spk.id:03d}_utt{j:03d}.rpfm"
            write_frames(directory / name, corpus.utterance(spk.id, frames, j))
            utts.append({"file": name, "speaker": spk.id,
                         "split": "train" if spk.id in corpus.train_ids else "heldout"})
    c = corpus.config
    meta = {
        "S": len(corpus.speakers),
        "F": c.feat_dim,
        "seeds": {"corpus": c.seed, "speakers": [s.seed for s in corpus.speakers]},
        "generation": {k: v for k, v in asdict(c).items() if k not in ("feat_dim", "seed")},
        "frames": frames,
        "utts_per_speaker": utts_per_speaker,
        "utterances": utts,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_corpus(directory) -> tuple[Corpus, list[dict]]:
    """Rebuild the generator from ``meta.json``; returns it with the utterance index."""
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    gen = dict(meta["generation"])
    render = RenderParams(**gen.pop("render"))
    config = CorpusConfig(feat_dim=meta["F"], seed=meta["seeds"]["corpus"], render=render, **gen)
    corpus = Corpus(config)
    utts = [dict(u, path=str(directory / u["file"])) for u in meta["utterances"]]
    return corpus, utts


# -- real audio ----------------------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int]:
    """Read 16-bit mono PCM; samples scaled to [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit mono PCM is supported")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_wav(path, pcm: np.ndarray, sample_rate: int = 16000) -> None:
    data = np.clip(np.round(np.asarray(pcm) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(data.tobytes())


def mix_waveforms(w1: np.ndarray, w2: np.ndarray, sir_db: float) -> np.ndarray:
    """Add ``w2`` rescaled so the RMS ratio of w1 to it is ``sir_db``."""
    n = min(len(w1), len(w2))
    w1, w2 = np.asarray(w1[:n], float), np.asarray(w2[:n], float)
    rms1 = np.sqrt(np.mean(w1**2))
    rms2 = np.sqrt(np.mean(w2**2))
    if rms2 == 0.0:
        return w1.copy()
    return w1 + w2 * (rms1 / rms2) * 10.0 ** (-sir_db / 20.0)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = 80, n_fft: int = 512, sample_rate: int = 16000,
                   fmin: float = 20.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = fmax or sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def logmel_frontend(pcm: np.ndarray, sample_rate: int = 16000, n_mels: int = 80,
                    mean_norm: bool = True) -> np.ndarray:
    """80 x T log mel energies, 25 ms Hann window, 10 ms hop, no padding."""
    if sample_rate != 16000:
        raise ValueError(f"unsupported sample rate {sample_rate}; expected 16000")
    win, hop, n_fft = 400, 160, 512
    pcm = np.asarray(pcm, dtype=np.float64)
    if pcm.size < win:
        raise ValueError(f"input of {pcm.size} samples is shorter than one {win}-sample window")
    n_frames = (pcm.size - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = pcm[idx] * np.hanning(win)[None, :]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    feats = np.log(power @ mel_filterbank(n_mels, n_fft, sample_rate).T + 1e-10).T
    if mean_norm:
        # centre on the first frame first so constant rows come out exactly zero
        dev = feats - feats[:, :1]
        feats = dev - dev.mean(axis=1, keepdims=True)
    return feats
