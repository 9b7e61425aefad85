"""Attentive statistics pooling with recursive, coverage-driven speaker decoding.

All functions accept frame-wise embeddings shaped (..., D, T); leading axes are
treated as a batch. Attention is computed per dimension over time, so every
row of an attention matrix sums to one.

The existence score ``p_n`` is trained as a *stop* score: the counting loss
pushes it towards 0 while speakers remain and towards 1 after the last one.
Decoding therefore stops before step ``n`` once ``p_n >= threshold``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STOP_THRESHOLD = 0.5


@dataclass
class PoolingParams:
    W1: Tensor            # (D', 3D)
    b1: Tensor            # (D',)
    W2: Tensor            # (D, D')
    b2: Tensor            # (D,)
    Wo: Tensor            # (E, 2D)
    bo: Tensor            # (E,)
    w: Tensor             # (D,)
    b: Tensor             # ()
    Wc: Tensor | None = None   # (D', D); None for the single-output baseline

    @property
    def D(self) -> int:
        return self.W2.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.W1.shape[0]

    @property
    def E(self) -> int:
        return self.Wo.shape[0]

    @property
    def recursive(self) -> bool:
        return self.Wc is not None

    def named_tensors(self, prefix="pool") -> dict[str, Tensor]:
        names = ["W1", "b1", "W2", "b2", "Wo", "bo", "w", "b"] + (["Wc"] if self.recursive else [])
        return {f"{prefix}.{n}": getattr(self, n) for n in names}

    def validate(self) -> None:
        D, Dp, E = self.D, self.bottleneck, self.E
        expected = {"W1": (Dp, 3 * D), "b1": (Dp,), "W2": (D, Dp), "b2": (D,),
                    "Wo": (E, 2 * D), "bo": (E,), "w": (D,), "b": ()}
        if self.recursive:
            expected["Wc"] = (Dp, D)
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ad.ShapeError(f"PoolingParams.{name}: expected {shape}, got {got}")


def init_pooling(D: int, E: int, bottleneck: int | None = None, recursive: bool = True,
                 seed: int = 0, coverage_gain: float = 1.0) -> PoolingParams:
    """Uniform +-1/sqrt(fan_in) init.

    Coverage entries average 1/T after one step, so a unit-gain Wc barely moves
    the logits; ``coverage_gain`` (typically T_train) rescales its bound.
    """
    Dp = bottleneck or max(1, D // 2)
    rng = np.random.default_rng(seed)

    def uni(shape, fan_in, gain=1.0):
        bound = gain / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    params = PoolingParams(
        W1=uni((Dp, 3 * D), 3 * D), b1=zeros((Dp,)),
        W2=uni((D, Dp), Dp), b2=zeros((D,)),
        Wo=uni((E, 2 * D), 2 * D), bo=zeros((E,)),
        w=uni((D,), D), b=zeros(()),
        Wc=uni((Dp, D), D, coverage_gain) if recursive else None,
    )
    params.validate()
    return params


@dataclass
class ContextExpansion:
    E: Tensor       # (..., 3D, T)
    mu: Tensor      # (..., D)
    sigma: Tensor   # (..., D)
    H: Tensor       # (..., D, T)


def expand_context(H) -> ContextExpansion:
    """Append the utterance mean and standard deviation to every frame."""
    H = ad.as_tensor(H)
    if H.ndim < 2 or H.shape[-1] < 1:
        raise ad.ShapeError(f"expand_context: expected (..., D, T) with T >= 1, got {H.shape}")
    mu = ad.mean(H, axis=-1)
    sigma = ad.sqrt(ad.mean(H * H, axis=-1) - mu * mu)
    col = H.shape[:-1] + (1,)
    E = ad.concat([H, ad.broadcast_to(ad.reshape(mu, col), H.shape),
                   ad.broadcast_to(ad.reshape(sigma, col), H.shape)], axis=-2)
    return ContextExpansion(E, mu, sigma, H)


def _column(v: Tensor) -> Tensor:
    return ad.reshape(v, (v.shape[0], 1))


def attention_baseline(exp: ContextExpansion, params: PoolingParams) -> tuple[Tensor, Tensor]:
    """Return (weights, logits), both (..., D, T)."""
    hidden = ad.matmul(params.W1, exp.E) + _column(params.b1)
    logits = ad.matmul(params.W2, ad.relu(hidden)) + _column(params.b2)
    return ad.softmax(logits), logits


def attention_recursive(exp: ContextExpansion, coverage, params: PoolingParams,
                        ratio: float = 1.0) -> tuple[Tensor, Tensor]:
    """Coverage-conditioned attention; ``ratio`` = T_infer / T_train rescales coverage."""
    if params.Wc is None:
        raise ValueError("attention_recursive needs a coverage projection Wc")
    if ratio <= 0:
        raise ValueError(f"length ratio must be positive, got {ratio}")
    hidden = ad.matmul(params.W1, exp.E) + _column(params.b1)
    cov = ad.matmul(params.Wc, coverage)
    hidden = hidden + (cov if ratio == 1.0 else cov * ratio)
    logits = ad.matmul(params.W2, ad.relu(hidden)) + _column(params.b2)
    return ad.softmax(logits), logits


def weighted_stats(H, A) -> tuple[Tensor, Tensor]:
    """Attention-weighted mean and standard deviation over time."""
    H, A = ad.as_tensor(H), ad.as_tensor(A)
    if H.shape != A.shape:
        raise ad.ShapeError(f"weighted_stats: H {H.shape} and A {A.shape} differ")
    mu = ad.sum_(A * H, axis=-1)
    sigma = ad.sqrt(ad.sum_(A * H * H, axis=-1) - mu * mu)
    return mu, sigma


def project_embedding(mu, sigma, params: PoolingParams) -> Tensor:
    stats = ad.concat([mu, sigma], axis=-1)
    return ad.matmul(ad.reshape(stats, stats.shape[:-1] + (1, stats.shape[-1])),
                     ad.transpose(params.Wo))[..., 0, :] + params.bo


def existence_logit(logits, params: PoolingParams) -> Tensor:
    """Pre-sigmoid existence score: time-mean of w . a~_t, minus b."""
    logits = ad.as_tensor(logits)
    proj = ad.matmul(ad.reshape(params.w, (1, params.D)), logits)[..., 0, :]
    return ad.mean(proj, axis=-1) - params.b


def existence_probability(logits, params: PoolingParams) -> Tensor:
    return ad.sigmoid(existence_logit(logits, params))


@dataclass
class StepOutput:
    logits: Tensor      # (..., D, T)
    A: Tensor           # (..., D, T)
    coverage: Tensor    # (..., D, T), coverage fed into this step
    z: Tensor           # (...,) existence logit
    v: Tensor           # (..., E)

    @property
    def p(self) -> np.ndarray:
        return ad._np_sigmoid(np.atleast_1d(self.z.data)).reshape(self.z.shape)


def decode_step(exp: ContextExpansion, coverage, params: PoolingParams, ratio: float = 1.0,
                first: bool = False) -> StepOutput:
    if first or params.Wc is None:
        A, logits = attention_baseline(exp, params)
    else:
        A, logits = attention_recursive(exp, coverage, params, ratio)
    mu, sigma = weighted_stats(exp.H, A)
    v = project_embedding(mu, sigma, params)
    return StepOutput(logits, A, coverage, existence_logit(logits, params), v)


def run_recursion(H, params: PoolingParams, n_steps: int, ratio: float = 1.0) -> list[StepOutput]:
    """Decode ``n_steps`` speakers, accumulating coverage C(n+1) = C(n) + A(n).

    Step 1 sees zero coverage, which reduces the recursive attention to the
    baseline form, so it is computed with the baseline distribution directly.
    """
    if n_steps > 1 and not params.recursive:
        raise ValueError("baseline pooling has no coverage path; only one step is possible")
    exp = expand_context(H)
    coverage = Tensor(np.zeros(exp.H.shape))
    steps = []
    for n in range(n_steps):
        step = decode_step(exp, coverage, params, ratio, first=(n == 0))
        steps.append(step)
        coverage = coverage + step.A
    return steps


@dataclass
class SpeakerEmbedding:
    v: np.ndarray
    step: int
    existence: float


@dataclass
class Extraction:
    embeddings: list[SpeakerEmbedding]
    steps: list[StepOutput] = field(repr=False)

    @property
    def count(self) -> int:
        return len(self.embeddings)


def length_ratio(T_infer: int, T_train: int | None) -> float:
    return 1.0 if not T_train else T_infer / T_train


def extract_speakers(H, params: PoolingParams, mode="estimated", max_speakers: int = 4,
                     ratio: float = 1.0, threshold: float = STOP_THRESHOLD,
                     existence_means_present: bool = False) -> Extraction:
    """Decode per-speaker embeddings from a single (D, T) sequence.

    ``mode`` is ``"estimated"`` (stop on the existence score) or an integer /
    ``("oracle", N)`` giving the exact number of speakers.
    """
    if max_speakers < 1:
        raise ValueError("max_speakers must be >= 1")
    if isinstance(mode, tuple):
        mode = mode[1]
    oracle = None if mode == "estimated" else int(mode)
    if oracle is not None and oracle > max_speakers:
        raise ValueError(f"oracle count {oracle} exceeds max_speakers={max_speakers}")
    if not params.recursive:
        max_speakers = 1
        if oracle is not None and oracle > 1:
            raise ValueError("baseline pooling can only emit one embedding")

    with ad.no_grad():
        exp = expand_context(H)
        coverage = Tensor(np.zeros(exp.H.shape))
        steps, embs = [], []
        limit = oracle if oracle is not None else max_speakers
        for n in range(1, limit + 1):
            step = decode_step(exp, coverage, params, ratio, first=(n == 1))
            p = float(step.p)
            if oracle is None and n > 1:
                stop = (p < threshold) if existence_means_present else (p >= threshold)
                if stop:
                    steps.append(step)
                    break
            steps.append(step)
            embs.append(SpeakerEmbedding(step.v.data.copy(), n, p))
            coverage = coverage + step.A
    return Extraction(embs, steps)


def composite_gradcheck(rng: np.random.Generator, D: int = 4, T: int = 6, E: int = 3,
                        step: float = 1e-5, tol: float = 1e-4) -> ad.GradcheckReport:
    """Gradcheck of every pooling parameter through a weighted sum of the step-2 embedding."""
    params = init_pooling(D, E, recursive=True, seed=int(rng.integers(2**31)))
    names = ["W1", "b1", "W2", "b2", "Wo", "bo", "w", "b", "Wc"]
    for n in names:
        old = getattr(params, n)
        setattr(params, n, Tensor(rng.standard_normal(old.shape) * 0.7))
    H = rng.standard_normal((D, T))
    weights = rng.standard_normal(E)
    ratio = float(rng.uniform(0.5, 3.0))

    def f(*ts):
        p = PoolingParams(**dict(zip(names, ts)))
        return ad.sum_(run_recursion(H, p, 2, ratio)[1].v * weights)

    return ad.gradcheck(f, [getattr(params, n) for n in names], step=step, tol=tol)
