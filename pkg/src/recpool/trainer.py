"""End-to-end training of encoder + pooling + proxies on mixed batches."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BatchConfig, Corpus, sample_batch, stack_features
from .encoder import EncoderParams, encode, init_encoder
from .losses import ProxyBank, counting_loss_from_logits, init_proxies, permutation_loss_batch, aam_loss
from .pooling import PoolingParams, init_pooling, run_recursion

log = logging.getLogger(__name__)

CKPT_MAGIC = b"RPCK"
CKPT_VERSION = 1
METRIC_COLUMNS = ["iteration", "lr", "L_spk", "L_cnt", "L", "count_acc"]


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


# -- model ---------------------------------------------------------------------

@dataclass
class ModelConfig:
    feat_dim: int = 40
    hidden: int = 64
    D: int = 64
    E: int = 32
    bottleneck: int | None = None
    kernels: tuple[int, ...] = (5, 3, 3, 1, 1)
    dilations: tuple[int, ...] = (1, 2, 3, 1, 1)
    recursive: bool = True
    n_classes: int = 40
    t_train: int = 150
    seed: int = 0
    coverage_gain: float = 0.0     # 0 means t_train


@dataclass
class Model:
    config: ModelConfig
    encoder: EncoderParams
    pooling: PoolingParams
    proxies: ProxyBank

    @classmethod
    def create(cls, config: ModelConfig, margin: float = 0.2, scale: float = 30.0) -> "Model":
        c = config
        enc = init_encoder(c.feat_dim, c.hidden, c.D, c.kernels, c.dilations, seed=c.seed)
        pool = init_pooling(c.D, c.E, c.bottleneck, recursive=c.recursive, seed=c.seed + 1,
                            coverage_gain=c.coverage_gain or float(c.t_train))
        bank = init_proxies(c.n_classes, c.E, seed=c.seed + 2, margin=margin, scale=scale)
        return cls(config, enc, pool, bank)

    @property
    def t_train(self) -> int:
        return self.config.t_train

    def parameters(self) -> dict[str, Tensor]:
        out = self.encoder.named_tensors()
        out.update(self.pooling.named_tensors())
        out["proxies"] = self.proxies.W
        return out

    def frame_embeddings(self, features) -> Tensor:
        return encode(features, self.encoder)


# -- schedule and optimizer ------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 1
    iters_per_epoch: int = 1500
    epochs_per_cycle: int = 1
    warmup: int = 100
    peak_lr: float = 1e-3
    decay: float = 0.75
    singles: int = 12
    mixtures: int = 12
    sir_range: tuple[float, float] = (-5.0, 5.0)
    frames: int = 150
    seed: int = 0
    alpha: float = 0.3
    margin: float = 0.2
    scale: float = 30.0
    clip_norm: float = 5.0
    checkpoint_every: int = 500
    log_every: int = 50

    def __post_init__(self):
        for name in ("epochs", "iters_per_epoch", "epochs_per_cycle", "frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.warmup >= self.cycle_length:
            raise ValueError("warmup must be shorter than a cycle")
        if self.singles + self.mixtures < 1:
            raise ValueError("empty batch")

    @property
    def cycle_length(self) -> int:
        return self.epochs_per_cycle * self.iters_per_epoch

    @property
    def total_iterations(self) -> int:
        return self.epochs * self.iters_per_epoch


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Cyclic schedule: linear warm-up, then cosine annealing to 0 in every cycle."""
    cycle, pos = divmod(iteration, config.cycle_length)
    peak = config.peak_lr * config.decay ** cycle
    if pos < config.warmup:
        return peak * pos / config.warmup
    span = config.cycle_length - config.warmup
    return peak * 0.5 * (1.0 + math.cos(math.pi * (pos - config.warmup) / span))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# -- loss on a batch ----------------------------------------------------------------

@dataclass
class BatchResult:
    loss: Tensor
    L_spk: float
    L_cnt: float
    count_acc: float


def batch_loss(model: Model, samples, alpha: float) -> BatchResult:
    """Mean-over-samples L_spk + alpha * L_cnt with oracle speaker counts."""
    X = Tensor(stack_features(samples))
    n_spk = np.array([len(s.speakers) for s in samples])
    if not model.pooling.recursive and np.any(n_spk > 1):
        raise ValueError("the single-output baseline cannot be trained on mixtures")
    n_steps = 2 if model.pooling.recursive else 1
    H = model.frame_embeddings(X)
    steps = run_recursion(H, model.pooling, n_steps)
    bank = model.proxies

    single = np.flatnonzero(n_spk == 1)
    multi = np.flatnonzero(n_spk == 2)
    parts = []
    if single.size:
        labels = np.array([samples[i].speakers[0] for i in single])
        parts.append(aam_loss(steps[0].v[single], labels, bank))
    if multi.size:
        V = ad.concat([ad.reshape(steps[k].v[multi], (multi.size, 1, -1)) for k in range(2)], axis=1)
        labels = np.array([samples[i].speakers for i in multi])
        pit, _ = permutation_loss_batch(V, labels, bank)
        parts.append(pit)
    l_spk = ad.mean(ad.concat(parts, axis=0))

    if n_steps == 2:
        z2 = steps[1].z
        l_cnt = ad.mean(counting_loss_from_logits(z2, n_spk))
        predicted = np.where(steps[1].p >= 0.5, 1, 2)
        acc = float(np.mean(predicted == n_spk))
        loss = l_spk + l_cnt * alpha if alpha else l_spk
        return BatchResult(loss, float(l_spk.data), float(l_cnt.data), acc)
    return BatchResult(l_spk, float(l_spk.data), 0.0, float(np.mean(n_spk == 1)))


# -- checkpoints -------------------------------------------------------------------

def _model_meta(model: Model) -> dict:
    c = asdict(model.config)
    return {"model": c, "margin": model.proxies.margin, "scale": model.proxies.scale,
            "activations": [l.activation for l in model.encoder.layers]}


def save_checkpoint(path, model: Model, state: OptimizerState | None = None,
                    iteration: int = 0, extra: dict | None = None) -> Path:
    """Write the checkpoint file (layout documented in README)."""
    tensors = {name: t.data for name, t in model.parameters().items()}
    meta = _model_meta(model)
    meta["iteration"] = iteration
    meta["extra"] = extra or {}
    if state is not None:
        meta["adam"] = {"step": state.step, "beta1": state.beta1, "beta2": state.beta2,
                        "eps": state.eps}
        for name in state.m:
            tensors[f"adam.m.{name}"] = state.m[name]
            tensors[f"adam.v.{name}"] = state.v[name]
    blob = json.dumps(meta, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<III", CKPT_VERSION, len(blob), len(tensors)))
        fh.write(blob)
        for name, arr in tensors.items():
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, meta_len, count = struct.unpack("<III", fh.read(12))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fh.read(meta_len))
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape).copy()
    return meta, tensors


def load_checkpoint(path) -> tuple[Model, OptimizerState | None, dict]:
    meta, tensors = read_checkpoint(path)
    mc = dict(meta["model"])
    mc["kernels"] = tuple(mc["kernels"])
    mc["dilations"] = tuple(mc["dilations"])
    model = Model.create(ModelConfig(**mc), meta["margin"], meta["scale"])
    for layer, act in zip(model.encoder.layers, meta["activations"]):
        layer.activation = act
    for name, t in model.parameters().items():
        t.data = tensors[name].copy()
    state = None
    if "adam" in meta:
        a = meta["adam"]
        state = OptimizerState(step=a["step"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
        for name in model.parameters():
            if f"adam.m.{name}" in tensors:
                state.m[name] = tensors[f"adam.m.{name}"]
                state.v[name] = tensors[f"adam.v.{name}"]
    return model, state, meta


# -- training loop --------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    state: OptimizerState
    metrics: list[dict]
    checkpoint: Path | None


def _snapshot(model: Model, state: OptimizerState):
    return ({k: t.data.copy() for k, t in model.parameters().items()},
            {k: v.copy() for k, v in state.m.items()},
            {k: v.copy() for k, v in state.v.items()}, state.step)


def _restore(model: Model, state: OptimizerState, snap) -> None:
    params, m, v, step = snap
    for k, t in model.parameters().items():
        t.data = params[k].copy()
    state.m, state.v, state.step = m, v, step


def train(config: TrainConfig, corpus: Corpus, model: Model | None = None, *,
          out_dir=None, state: OptimizerState | None = None, start_iteration: int = 0,
          stop_iteration: int | None = None, speaker_pool=None,
          extra: dict | None = None) -> TrainResult:
    """Run the training loop from ``start_iteration`` up to ``stop_iteration``.

    With ``out_dir`` set, metrics are appended to ``metrics.csv`` and the
    checkpoint ``checkpoint.rpck`` is refreshed every ``checkpoint_every``
    iterations and at the end.
    """
    if len(corpus.train_ids) < 2:
        raise ValueError("training needs at least 2 speakers")
    if model is None:
        model = Model.create(ModelConfig(feat_dim=corpus.feat_dim, n_classes=len(corpus.train_ids),
                                         t_train=config.frames, seed=config.seed),
                             config.margin, config.scale)
    model.proxies.margin, model.proxies.scale = config.margin, config.scale
    state = state or OptimizerState()
    params = model.parameters()
    batch_cfg = BatchConfig(config.singles, config.mixtures, config.frames, tuple(config.sir_range))
    stop = config.total_iterations if stop_iteration is None else stop_iteration

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = metrics_fh = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "checkpoint.rpck"
        metrics_path = out_dir / "metrics.csv"
        fresh = start_iteration == 0 or not metrics_path.exists()
        metrics_fh = open(metrics_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(metrics_fh, fieldnames=METRIC_COLUMNS)
        if fresh:
            writer.writeheader()

    metrics = []
    last_good = _snapshot(model, state)
    try:
        for it in range(start_iteration, stop):
            lr = lr_at(it, config)
            batch = sample_batch(corpus, batch_cfg, seed=[config.seed, it], speaker_pool=speaker_pool)
            res = batch_loss(model, batch, config.alpha)
            if not np.isfinite(res.loss.data):
                _restore(model, state, last_good)
                if ckpt_path is not None:
                    save_checkpoint(ckpt_path, model, state, it, extra=dict(extra or {}, diverged_at=it))
                raise TrainingDiverged(f"loss became non-finite at iteration {it}", ckpt_path)
            for t in params.values():
                t.grad = None
            res.loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for k, t in params.items()}
            clip_gradients(grads, config.clip_norm)
            adam_step(params, grads, state, lr)

            row = {"iteration": it, "lr": lr, "L_spk": res.L_spk, "L_cnt": res.L_cnt,
                   "L": float(res.loss.data), "count_acc": res.count_acc}
            metrics.append(row)
            if writer is not None:
                writer.writerow(row)
            if config.log_every and it % config.log_every == 0:
                log.info("it %d lr %.2e L %.4f L_spk %.4f L_cnt %.4f acc %.3f",
                         it, lr, row["L"], res.L_spk, res.L_cnt, res.count_acc)
            if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                last_good = _snapshot(model, state)
                if ckpt_path is not None:
                    save_checkpoint(ckpt_path, model, state, it + 1, extra)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, model, state, stop, extra)
    return TrainResult(model, state, metrics, ckpt_path)


def train_config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
