"""Flat ``section.key = value`` run configuration with typed, documented defaults."""
from __future__ import annotations

import json
from pathlib import Path

from .corpus import BatchConfig, CorpusConfig, RenderParams
from .diarization import DiarizeConfig
from .trainer import ModelConfig, TrainConfig
from .verification import TrialConfig

# key -> (default, help). Types are taken from the default; None means "optional int".
KEYS: dict[str, tuple[object, str]] = {
    "corpus.n_train": (40, "training speakers"),
    "corpus.n_heldout": (10, "held-out speakers, ids follow the training ones"),
    "corpus.feat_dim": (40, "feature dimension F"),
    "corpus.seed": (0, "speaker-set seed"),
    "corpus.prior_mean": (0.0, "mean of the template prior"),
    "corpus.prior_std": (1.0, "std of the template prior"),
    "corpus.modulation_rank": (3, "rank of per-speaker spectral modulation"),
    "corpus.modulation_std": (0.5, "scale of modulation basis entries"),
    "corpus.modulation_scale": (0.5, "AR(1) modulation amplitude"),
    "corpus.modulation_rho": (0.9, "AR(1) modulation correlation"),
    "corpus.envelope_depth": (6.0, "log-power swing of the on/off envelope"),
    "corpus.envelope_duty": (0.5, "fraction of active frames"),
    "corpus.mean_run": (20.0, "mean envelope run length in frames"),
    "corpus.noise_std": (0.3, "white feature noise"),
    "corpus.utts_per_speaker": (20, "utterances written by gen-corpus"),
    "corpus.frames": (300, "frames per written utterance"),

    "model.hidden": (64, "encoder hidden width"),
    "model.D": (64, "frame embedding dimension"),
    "model.E": (32, "speaker embedding dimension"),
    "model.bottleneck": (None, "attention hidden width, defaults to D/2"),
    "model.kernels": ((5, 3, 3, 1, 1), "TDNN kernel widths"),
    "model.dilations": ((1, 2, 3, 1, 1), "TDNN dilations"),
    "model.recursive": (True, "false trains the single-output baseline"),
    "model.coverage_gain": (0.0, "init gain of the coverage projection, 0 means T_train"),
    "model.seed": (0, "parameter init seed"),

    "train.epochs": (1, "epochs"),
    "train.iters_per_epoch": (1500, "iterations per epoch"),
    "train.epochs_per_cycle": (1, "epochs per learning-rate cycle"),
    "train.warmup": (100, "linear warmup iterations"),
    "train.peak_lr": (1e-3, "peak learning rate of the first cycle"),
    "train.decay": (0.75, "peak decay per cycle"),
    "train.singles": (12, "single-speaker samples per batch"),
    "train.mixtures": (12, "two-speaker samples per batch"),
    "train.sir_min": (-5.0, "lowest training SIR in dB"),
    "train.sir_max": (5.0, "highest training SIR in dB"),
    "train.frames": (150, "training crop length T_train"),
    "train.seed": (0, "batch sampling seed"),
    "train.alpha": (0.3, "counting-loss weight"),
    "train.margin": (0.2, "AAM margin"),
    "train.scale": (30.0, "AAM scale"),
    "train.clip_norm": (5.0, "global gradient-norm clip"),
    "train.checkpoint_every": (500, "checkpoint interval in iterations"),
    "train.log_every": (50, "console log interval"),

    "verify.mode": ("estimated", "estimated, oracle or single"),
    "verify.correction": (True, "rescale coverage by the length ratio"),
    "verify.max_speakers": (2, "cap on decoded speakers, 2 is the range seen in training"),
    "verify.threshold": (0.5, "stop-score threshold"),
    "verify.existence_means_present": (False, "treat p_n as presence instead of stop"),
    "verify.singles_per_speaker": (20, "enrolment pool per held-out speaker"),
    "verify.mixtures": (200, "mixture pool size"),
    "verify.frames": (300, "trial utterance length"),
    "verify.trials": (2000, "trials per scenario"),
    "verify.sir_min": (-5.0, "lowest evaluation-mixture SIR"),
    "verify.sir_max": (5.0, "highest evaluation-mixture SIR"),
    "verify.seed": (1234, "trial construction seed"),
    "verify.scenarios": (("svs", "svm", "mvm_any", "mvm_per"), "scenarios to score"),
    "verify.durations": ((), "extra frame lengths for the duration sweep"),
    "verify.sir_per_bin": (100, "mixtures per |SIR| bin, 0 disables the SIR analysis"),

    "diarize.window": (1.5, "window length in seconds"),
    "diarize.shift": (0.75, "window shift in seconds"),
    "diarize.max_speakers": (8, "cap on estimated speaker count"),
    "diarize.solver": ("jacobi", "jacobi or lapack"),
    "diarize.speakers": (4, "held-out speakers in the synthetic stream"),
    "diarize.turns": (30, "turns in the synthetic stream"),
    "diarize.overlap_ratio": (0.4, "target overlap / speech"),
    "diarize.seed": (0, "stream and clustering seed"),

    "inspect.frames": (300, "mixture length"),
    "inspect.sir_db": (0.0, "mixture SIR"),
    "inspect.seed": (0, "mixture seed"),

    "gradcheck.instances": (20, "random instances per op"),
    "gradcheck.tol": (1e-4, "relative-error tolerance"),
    "gradcheck.step": (1e-5, "central-difference step"),
    "gradcheck.seed": (0, "instance seed"),
}

# Single-output baseline: no coverage path, singles only, no counting loss.
BASELINE_OVERRIDES = (
    "model.recursive = false",
    "train.singles = 16",
    "train.mixtures = 0",
    "train.alpha = 0",
    "train.iters_per_epoch = 800",
)

# --seed sets these keys for each command.
SEED_KEYS = {
    "gen-corpus": ("corpus.seed",),
    "train": ("train.seed", "model.seed"),
    "verify": ("verify.seed",),
    "diarize": ("diarize.seed",),
    "inspect-attention": ("inspect.seed",),
    "gradcheck": ("gradcheck.seed",),
}


class ConfigError(ValueError):
    pass


def _parse(key: str, raw: str):
    default = KEYS[key][0]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if default is None:
            return None if raw.lower() in ("", "none") else int(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if key in ("model.kernels", "model.dilations", "verify.durations"):
                return tuple(int(x) for x in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: v for k, (v, _) in KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, value) if isinstance(value, str) else value

    def __getitem__(self, key: str):
        return self.values[key]

    def apply_lines(self, lines) -> None:
        for n, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            k, v = line.split("=", 1)
            self.set(k.strip(), v)

    @classmethod
    def from_sources(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls()
        if path:
            cfg.apply_lines(Path(path).read_text().splitlines())
        cfg.apply_lines(overrides)
        return cfg

    def as_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.values.items()}

    def dumps(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    # -- module configs -------------------------------------------------------

    def corpus(self) -> CorpusConfig:
        g = self.values
        render = RenderParams(g["corpus.modulation_scale"], g["corpus.modulation_rho"],
                              g["corpus.envelope_depth"], g["corpus.envelope_duty"],
                              g["corpus.mean_run"], g["corpus.noise_std"])
        return CorpusConfig(n_train=g["corpus.n_train"], n_heldout=g["corpus.n_heldout"],
                            feat_dim=g["corpus.feat_dim"], seed=g["corpus.seed"],
                            prior_mean=g["corpus.prior_mean"], prior_std=g["corpus.prior_std"],
                            modulation_rank=g["corpus.modulation_rank"],
                            modulation_std=g["corpus.modulation_std"], render=render)

    def model(self) -> ModelConfig:
        g = self.values
        return ModelConfig(feat_dim=g["corpus.feat_dim"], hidden=g["model.hidden"], D=g["model.D"],
                           E=g["model.E"], bottleneck=g["model.bottleneck"],
                           kernels=tuple(g["model.kernels"]), dilations=tuple(g["model.dilations"]),
                           recursive=g["model.recursive"], n_classes=g["corpus.n_train"],
                           t_train=g["train.frames"], seed=g["model.seed"],
                           coverage_gain=g["model.coverage_gain"])

    def train(self) -> TrainConfig:
        g = self.values
        return TrainConfig(**{k.split(".")[1]: v for k, v in g.items()
                              if k.startswith("train.") and k not in ("train.sir_min", "train.sir_max")},
                           sir_range=(g["train.sir_min"], g["train.sir_max"]))

    def batch(self) -> BatchConfig:
        g = self.values
        return BatchConfig(g["train.singles"], g["train.mixtures"], g["train.frames"],
                           (g["train.sir_min"], g["train.sir_max"]))

    def trials(self) -> TrialConfig:
        g = self.values
        return TrialConfig(g["verify.singles_per_speaker"], g["verify.mixtures"], g["verify.frames"],
                           g["verify.trials"], (g["verify.sir_min"], g["verify.sir_max"]),
                           g["verify.seed"])

    def diarize(self) -> DiarizeConfig:
        g = self.values
        return DiarizeConfig(g["diarize.window"], g["diarize.shift"], g["diarize.max_speakers"],
                             g["diarize.seed"], g["verify.correction"], g["diarize.solver"])


def describe() -> str:
    """Every key with its default and meaning, one per line."""
    out = []
    for k, (v, doc) in KEYS.items():
        shown = ",".join(map(str, v)) if isinstance(v, tuple) else v
        out.append(f"{k} = {shown}    # {doc}")
    return "\n".join(out)
