"""AAM-softmax, permutation-free speaker loss, speaker-counting loss."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PERMUTATION_CAP = 6


@dataclass
class ProxyBank:
    W: Tensor             # (S, E), one learnable proxy per training identity
    margin: float = 0.2
    scale: float = 30.0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]


def init_proxies(n_classes: int, E: int, seed: int = 0, margin=0.2, scale=30.0) -> ProxyBank:
    rng = np.random.default_rng(seed)
    return ProxyBank(Tensor(rng.standard_normal((n_classes, E)) / np.sqrt(E), requires_grad=True),
                     margin, scale)


@dataclass
class LossConfig:
    alpha: float = 0.1
    mode: str = "two_speaker_simplified"   # or "general"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.mode not in ("general", "two_speaker_simplified"):
            raise ValueError(f"unknown counting-loss mode {self.mode!r}")


def _unit(x: Tensor) -> Tensor:
    norm = np.linalg.norm(x.data, axis=-1)
    if np.any(norm == 0):
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    return x / ad.sqrt(ad.sum_(x * x, axis=-1, keepdims=True))


def cosine_to_proxies(v, bank: ProxyBank) -> Tensor:
    """Cosines between (..., E) embeddings and every proxy: (..., S)."""
    v = ad.as_tensor(v)
    u = _unit(v)
    wn = _unit(bank.W)
    if v.ndim == 1:
        return ad.matmul(ad.reshape(u, (1, -1)), ad.transpose(wn))[0]
    return ad.matmul(u, ad.transpose(wn))


def _aam_from_cosines(cos: Tensor, targets: np.ndarray, bank: ProxyBank) -> Tensor:
    """Per-row AAM loss for cosines (..., S) and integer targets (...)."""
    onehot = np.zeros(cos.shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    ct = ad.sum_(cos * onehot, axis=-1)
    ctm = ad.cos_add_angle(ct, bank.margin) if bank.margin else ct
    shift = ad.reshape(ctm - ct, ct.shape + (1,)) * onehot
    logits = (cos + shift) * bank.scale
    return ad.logsumexp(logits) - ctm * bank.scale


def aam_loss(v, y, bank: ProxyBank) -> Tensor:
    """Additive angular margin loss of embedding(s) ``v`` for identity(ies) ``y``.

    The competing sum runs over every training identity except the target.
    """
    cos = cosine_to_proxies(v, bank)
    targets = np.asarray(y, dtype=np.int64)
    if cos.ndim == 1:
        return _aam_from_cosines(ad.reshape(cos, (1, -1)), targets.reshape(1), bank)[0]
    return _aam_from_cosines(cos, targets, bank)


def pairwise_aam(V, labels, bank: ProxyBank) -> Tensor:
    """Loss of every (output, label) assignment: V (B, N, E), labels (B, N) -> (B, N, N).

    Entry [b, i, j] is the loss of output i against label j.
    """
    V = ad.as_tensor(V)
    labels = np.asarray(labels, dtype=np.int64)
    B, N, _ = V.shape
    cos = cosine_to_proxies(V, bank)                     # (B, N, S)
    S = cos.shape[-1]
    cos_all = ad.broadcast_to(ad.reshape(cos, (B, N, 1, S)), (B, N, N, S))
    targets = np.broadcast_to(labels[:, None, :], (B, N, N))
    return _aam_from_cosines(cos_all, targets, bank)


def best_permutations(pair_losses: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive search over label orders for (B, N, N) losses.

    Returns (perms (B, N), mean loss of each best assignment (B,)); ``perm[i]``
    is the label index paired with output ``i``.
    """
    B, N, _ = pair_losses.shape
    if N > PERMUTATION_CAP:
        raise ValueError(f"{N} outputs exceed the permutation cap of {PERMUTATION_CAP}")
    perms = np.array(list(itertools.permutations(range(N))))       # (P, N)
    rows = np.arange(N)
    totals = pair_losses[:, rows[None, :], perms].mean(axis=-1)     # (B, P)
    best = np.argmin(totals, axis=1)
    return perms[best], totals[np.arange(B), best]


def permutation_loss_batch(V, labels, bank: ProxyBank) -> tuple[Tensor, np.ndarray]:
    """Permutation-free loss per sample: V (B, N, E), labels (B, N) -> ((B,), perms)."""
    pair = pairwise_aam(V, labels, bank)
    B, N, _ = pair.shape
    perms, _ = best_permutations(pair.data)
    chosen = pair[np.arange(B)[:, None], np.arange(N)[None, :], perms]
    return ad.mean(chosen, axis=-1), perms


def permutation_loss(embeddings, labels, bank: ProxyBank) -> tuple[Tensor, tuple[int, ...]]:
    """Min over label orders of the mean AAM loss for one sample."""
    if len(embeddings) != len(labels):
        raise ValueError(f"{len(embeddings)} embeddings but {len(labels)} labels")
    if len(labels) > PERMUTATION_CAP:
        raise ValueError(f"{len(labels)} outputs exceed the permutation cap of {PERMUTATION_CAP}")
    V = ad.concat([ad.reshape(ad.as_tensor(v), (1, 1, -1)) for v in embeddings], axis=1)
    loss, perms = permutation_loss_batch(V, np.asarray(labels)[None, :], bank)
    return loss[0], tuple(int(labels[j]) for j in perms[0])


def _check_probs(probs):
    for p in probs:
        val = float(ad.as_tensor(p).data)
        if not 0.0 <= val <= 1.0:
            raise ValueError(f"existence probability {val} outside [0, 1]")


def counting_loss(probabilities, N: int, mode: str = "two_speaker_simplified") -> Tensor:
    """Cross-entropy of the stop scores p_1..p_{N+1} for a sample with N speakers."""
    probs = [ad.as_tensor(p) for p in probabilities]
    if mode == "general":
        if len(probs) < N + 1:
            raise ValueError(f"general counting loss needs {N + 1} probabilities")
        _check_probs(probs[:N + 1])
        total = ad.log(probs[N])
        for p in probs[:N]:
            total = total + ad.log(1.0 - p)
        return total * (-1.0 / (N + 1))
    if mode != "two_speaker_simplified":
        raise ValueError(f"unknown counting-loss mode {mode!r}")
    if N not in (1, 2):
        raise ValueError("the simplified counting loss covers N in {1, 2}")
    p2 = probs[1]
    _check_probs([p2])
    return -ad.log(p2) if N == 1 else -ad.log(1.0 - p2)


def counting_loss_from_logits(z2, n_speakers) -> Tensor:
    """Simplified counting loss from the step-2 existence logit, per sample.

    Equal to ``-log p2`` for one speaker and ``-log(1 - p2)`` for two.
    """
    sign = np.where(np.asarray(n_speakers) == 1, 1.0, -1.0)
    return -ad.log_sigmoid(ad.as_tensor(z2) * sign)


def total_loss(embeddings, probabilities, labels, bank: ProxyBank,
               config: LossConfig | None = None) -> tuple[Tensor, dict]:
    """L_spk + alpha * L_cnt for one sample; returns the loss and its parts."""
    config = config or LossConfig()
    l_spk, perm = permutation_loss(embeddings, labels, bank)
    N = len(labels)
    if config.alpha == 0:
        return l_spk, {"L_spk": float(l_spk.data), "L_cnt": 0.0, "perm": perm}
    l_cnt = counting_loss(probabilities, N, config.mode)
    total = l_spk + l_cnt * config.alpha
    return total, {"L_spk": float(l_spk.data), "L_cnt": float(l_cnt.data), "perm": perm}
