"""Sliding-window embeddings, constrained spectral clustering and DER scoring.

Annotations are lists of ``(speaker, start, end)`` tuples in seconds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse.csgraph import connected_components

from .corpus import Corpus
from .verification import ModelExtractor, Utterance

FPS = 100


@dataclass
class Segment:
    start: float
    end: float
    overlap: bool = False
    embeddings: list = field(default_factory=list)


# -- interval helpers ------------------------------------------------------------

def merge_intervals(intervals) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for s, e in sorted((float(s), float(e)) for s, e in intervals):
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [tuple(x) for x in out]


def speech_regions(annotation) -> list[tuple[float, float]]:
    return merge_intervals((s, e) for _, s, e in annotation)


def overlap_regions(annotation) -> list[tuple[float, float]]:
    """Regions where two or more speakers are active."""
    events = sorted([(s, 1) for _, s, _ in annotation] + [(e, -1) for _, _, e in annotation],
                    key=lambda x: (x[0], x[1]))
    out, active, start = [], 0, None
    for t, d in events:
        active += d
        if active >= 2 and start is None:
            start = t
        elif active < 2 and start is not None:
            if t > start:
                out.append((start, t))
            start = None
    return merge_intervals(out)


def _intersection(a, b, regions) -> float:
    return sum(max(0.0, min(b, e) - max(a, s)) for s, e in regions)


def segment_stream(regions, window: float = 1.5, shift: float = 0.75,
                   overlaps=()) -> list[Segment]:
    """Tile each speech region with windows; flag windows mostly inside overlap.

    A region shorter than the window gets one truncated window; otherwise a
    final window is aligned to the region end if the regular grid misses it.
    """
    if window <= 0 or shift <= 0:
        raise ValueError("window and shift must be positive")
    eps = 1e-9
    segs = []
    for rs, re_ in regions:
        starts = []
        if re_ - rs <= window + eps:
            bounds = [(rs, re_)]
        else:
            s = rs
            while s + window <= re_ + eps:
                starts.append(s)
                s += shift
            if starts[-1] + window < re_ - eps:
                starts.append(re_ - window)
            bounds = [(s, min(s + window, re_)) for s in starts]
        for s, e in bounds:
            flag = _intersection(s, e, overlaps) > 0.5 * (e - s)
            segs.append(Segment(float(s), float(e), flag))
    return segs


# -- synthetic streams --------------------------------------------------------------

@dataclass
class Stream:
    features: np.ndarray          # (F, frames)
    reference: list[tuple]
    fps: int = FPS

    @property
    def duration(self) -> float:
        return self.features.shape[1] / self.fps


def synth_stream(corpus: Corpus, speaker_ids, n_turns: int = 30, turn_range=(2.0, 4.0),
                 overlap_ratio: float = 0.4, seed: int = 0, fps: int = FPS,
                 floor_db: float = -30.0) -> Stream:
    """Conversation of alternating turns; every turn starts before the previous ends.

    Each turn overlaps its predecessor by ``q * length`` with
    ``q = r / (1 + r)``, which gives overlap / speech close to ``r``.
    """
    rng = np.random.default_rng(seed)
    ids = list(speaker_ids)
    q = overlap_ratio / (1.0 + overlap_ratio)
    turns = []
    t, prev = 0.5, None
    for i in range(n_turns):
        spk = int(rng.choice([s for s in ids if s != prev]))
        L = float(rng.uniform(*turn_range))
        start = t if i == 0 else max(0.0, t - q * L)
        turns.append((spk, round(start, 2), round(start + L, 2)))
        t, prev = start + L, spk
    n_frames = int(np.ceil((t + 0.5) * fps))
    power = np.full((corpus.feat_dim, n_frames), 10.0 ** (floor_db / 10.0))
    streams = {spk: corpus.utterance(spk, n_frames, int(rng.integers(2**31))) for spk in set(ids)}
    for spk, s, e in turns:
        a, b = int(round(s * fps)), int(round(e * fps))
        power[:, a:b] += np.exp(streams[spk][:, a:b])
    reference = [(str(spk), s, e) for spk, s, e in turns]
    return Stream(np.log(power), reference, fps)


def overlap_fraction(annotation) -> float:
    speech = sum(e - s for s, e in speech_regions(annotation))
    ov = sum(e - s for s, e in overlap_regions(annotation))
    return ov / speech if speech else 0.0


# -- eigensolver ----------------------------------------------------------------------

def jacobi_eigh(A: np.ndarray, tol: float = 1e-13, max_sweeps: int = 100):
    """Symmetric eigendecomposition by round-robin (parallel-order) Jacobi rotations.

    Each round rotates n/2 disjoint index pairs at once; rotations on disjoint
    pairs commute, so they are applied as one block update. Returns ascending
    eigenvalues and the matching orthonormal eigenvectors as columns.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n) or not np.allclose(A, A.T, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("jacobi_eigh needs a symmetric square matrix")
    V = np.eye(n)
    if n == 1:
        return A.diagonal().copy(), V
    m = n + (n % 2)
    players = list(range(m))
    scale = max(1.0, np.linalg.norm(A))
    for _ in range(max_sweeps):
        # direct sum; subtracting the diagonal from the full norm cancels badly
        off = np.linalg.norm(A - np.diag(A.diagonal()))
        if off < tol * scale:
            break
        order = players[:]
        for _ in range(m - 1):
            pairs = [(order[i], order[m - 1 - i]) for i in range(m // 2)]
            pairs = [(p, q) for p, q in pairs if p < n and q < n]
            P = np.array([p for p, _ in pairs])
            Q = np.array([q for _, q in pairs])
            apq = A[P, Q]
            app, aqq = A[P, P], A[Q, Q]
            active = np.abs(apq) > 1e-300
            theta = np.where(active, (aqq - app) / (2.0 * np.where(active, apq, 1.0)), 0.0)
            big = np.abs(theta) > 1e150           # t ~ 1/(2 theta), avoids overflow in theta**2
            safe = np.where(big, 0.0, theta)
            t = np.where(big, 0.5 / np.where(big, theta, 1.0),
                         np.sign(safe) / (np.abs(safe) + np.sqrt(safe**2 + 1.0)))
            t = np.where(active, t, 0.0)
            t = np.where(active & (theta == 0), 1.0, t)
            c = 1.0 / np.sqrt(t**2 + 1.0)
            s = t * c
            ap, aq = A[:, P].copy(), A[:, Q].copy()
            A[:, P], A[:, Q] = c * ap - s * aq, s * ap + c * aq
            ap, aq = A[P, :].copy(), A[Q, :].copy()
            A[P, :], A[Q, :] = c[:, None] * ap - s[:, None] * aq, s[:, None] * ap + c[:, None] * aq
            vp, vq = V[:, P].copy(), V[:, Q].copy()
            V[:, P], V[:, Q] = c * vp - s * vq, s * vp + c * vq
            order = [order[0]] + [order[-1]] + order[1:-1]
    w = A.diagonal().copy()
    idx = np.argsort(w)
    return w[idx], V[:, idx]


def symmetric_eig(M: np.ndarray, solver: str = "lapack"):
    if solver == "lapack":
        return np.linalg.eigh(M)
    if solver == "jacobi":
        return jacobi_eigh(M)
    raise ValueError(f"unknown eigensolver {solver!r}")


# -- clustering ------------------------------------------------------------------------

def cosine_affinity(X: np.ndarray) -> np.ndarray:
    U = X / np.linalg.norm(X, axis=1, keepdims=True)
    A = np.clip(U @ U.T, -1.0, 1.0)
    np.fill_diagonal(A, 1.0)
    return A


def binarize_affinity(A: np.ndarray, p: int, cannot_links=()) -> np.ndarray:
    """Link each row to its p most similar other rows, symmetrize, cut cannot-links.

    Entries tied with the p-th largest value are kept too, so the result does
    not depend on row order.
    """
    n = A.shape[0]
    scores = A.copy()
    np.fill_diagonal(scores, -np.inf)
    for i, j in cannot_links:
        scores[i, j] = scores[j, i] = -np.inf
    p = min(p, n - 1)
    kth = -np.sort(-scores, axis=1)[:, p - 1:p]
    B = ((scores >= kth - 1e-12) & np.isfinite(scores)).astype(np.float64)
    B = 0.5 * (B + B.T)
    for i, j in cannot_links:
        B[i, j] = B[j, i] = 0.0
    return B


def n_components(B: np.ndarray) -> int:
    return int(connected_components(B > 0, directed=False)[0])


def laplacian(B: np.ndarray) -> np.ndarray:
    B = B.copy()
    np.fill_diagonal(B, 0.0)
    return np.diag(B.sum(axis=1)) - B


def eigengap_estimate(lambdas: np.ndarray, max_speakers: int, eps: float = 1e-10):
    """(k, normalized max gap) from ascending Laplacian eigenvalues."""
    gaps = np.diff(lambdas)[:max_speakers]
    k = int(np.argmax(gaps)) + 1
    return k, gaps[k - 1] / (lambdas[-1] + eps)


def p_grid(n: int, coarse: int = 12, p_min: int = 1) -> list[int]:
    top = max(p_min, int(np.ceil(n / 4)))
    return sorted(set(np.linspace(p_min, top, min(top - p_min + 1, coarse)).round().astype(int).tolist()))


def min_connected_p(A: np.ndarray, cannot_links=(), p_max: int | None = None) -> int:
    """Smallest neighbour count whose binarized graph is a single component."""
    n = A.shape[0]
    hi = max(1, n - 1 if p_max is None else min(p_max, n - 1))
    lo = 1
    if n_components(binarize_affinity(A, hi, cannot_links)) > 1:
        return hi
    while lo < hi:           # connectivity is monotone in p
        mid = (lo + hi) // 2
        if n_components(binarize_affinity(A, mid, cannot_links)) == 1:
            hi = mid
        else:
            lo = mid + 1
    return lo


def _kmeans_pp(X, k, rng):
    centers = [X[rng.integers(len(X))]]
    for _ in range(1, k):
        d = np.min(((X[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d.sum()
        idx = rng.integers(len(X)) if total <= 0 else rng.choice(len(X), p=d / total)
        centers.append(X[idx])
    return np.array(centers)


def constrained_assign(dist: np.ndarray, cannot_links=()) -> np.ndarray:
    """Nearest-centre labels; each cannot-link pair takes the cheapest pair of
    distinct clusters."""
    labels = np.argmin(dist, axis=1)
    k = dist.shape[1]
    fixed: dict[int, int] = {}
    for i, j in cannot_links:
        if i in fixed and j in fixed:
            continue
        if i in fixed or j in fixed:
            a, b = (i, j) if i in fixed else (j, i)
            order = np.argsort(dist[b])
            labels[b] = next(c for c in order if c != fixed[a]) if k > 1 else order[0]
            fixed[b] = int(labels[b])
            continue
        cost = dist[i][:, None] + dist[j][None, :]
        if k > 1:
            np.fill_diagonal(cost, np.inf)
        a, b = np.unravel_index(int(np.argmin(cost)), cost.shape)
        labels[i], labels[j] = a, b
        fixed[i], fixed[j] = int(a), int(b)
    return labels


def constrained_kmeans(X: np.ndarray, k: int, cannot_links=(), n_init: int = 10,
                       max_iter: int = 100, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(n_init):
        C = _kmeans_pp(X, k, rng)
        labels = None
        for _ in range(max_iter):
            dist = ((X[:, None, :] - C[None]) ** 2).sum(-1)
            new = constrained_assign(dist, cannot_links)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for c in range(k):
                members = X[labels == c]
                if len(members):
                    C[c] = members.mean(axis=0)
                else:
                    C[c] = X[np.argmax(dist.min(axis=1))]
        inertia = float(((X - C[labels]) ** 2).sum())
        if inertia < best_inertia - 1e-12:
            best, best_inertia = labels.copy(), inertia
    return best


@dataclass
class ClusterResult:
    labels: np.ndarray
    k: int
    p: int


def cluster(embeddings, cannot_links=(), max_speakers: int = 8, seed: int = 0,
            solver: str = "jacobi", refine: bool = True) -> ClusterResult:
    """NME-style auto-tuned spectral clustering with cannot-link constraints."""
    X = np.asarray(embeddings, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ValueError("clustering needs at least 2 embeddings")
    links = [(int(i), int(j)) for i, j in cannot_links]
    A = cosine_affinity(X)

    cache: dict[int, tuple[float, int]] = {}

    def score(p):
        if p not in cache:
            lam, _ = symmetric_eig(laplacian(binarize_affinity(A, p, links)), solver)
            k, gap = eigengap_estimate(lam, min(max_speakers, n - 1))
            cache[p] = ((p / n) / (gap + 1e-10), k)
        return cache[p]

    # sparser graphs fall apart into components that the eigengap reads as speakers
    grid = p_grid(n, p_min=min_connected_p(A, links, max(1, int(np.ceil(n / 4)))))
    for p in grid:
        score(p)
    if refine and len(grid) > 1:
        best = min(cache, key=lambda p: cache[p][0])
        i = grid.index(best)
        lo, hi = grid[max(0, i - 1)], grid[min(len(grid) - 1, i + 1)]
        for p in range(lo, hi + 1):
            score(p)
    p_best = min(cache, key=lambda p: (cache[p][0], p))
    k = cache[p_best][1]
    if k == 1 and links:
        k = 2
    k = min(k, n)
    _, vecs = symmetric_eig(laplacian(binarize_affinity(A, p_best, links)), solver)
    spec = vecs[:, :k]
    labels = constrained_kmeans(spec, k, links, seed=seed)
    return ClusterResult(labels, k, p_best)


# -- DER -----------------------------------------------------------------------------------

@dataclass
class DERResult:
    der: float
    missed: float
    false_alarm: float
    confusion: float
    total: float
    mapping: dict

    def as_dict(self) -> dict:
        return {"der": self.der, "missed": self.missed, "false_alarm": self.false_alarm,
                "confusion": self.confusion, "total": self.total,
                "mapping": {str(k): str(v) for k, v in self.mapping.items()}}


def _activity(annotation, speakers, mids):
    act = np.zeros((len(speakers), mids.size), dtype=bool)
    index = {s: i for i, s in enumerate(speakers)}
    for spk, s, e in annotation:
        act[index[spk]] |= (mids > s) & (mids < e)
    return act


def der(reference, hypothesis) -> DERResult:
    """Diarization error rate with no collar and optimal one-to-one speaker mapping."""
    for spk, s, e in list(reference) + list(hypothesis):
        if not e > s:
            raise ValueError(f"malformed interval ({spk}, {s}, {e})")
    if not reference:
        raise ValueError("empty reference")
    bounds = np.unique([t for _, s, e in list(reference) + list(hypothesis) for t in (s, e)])
    dur = np.diff(bounds)
    mids = 0.5 * (bounds[:-1] + bounds[1:])
    rs = sorted({r[0] for r in reference}, key=str)
    hs = sorted({h[0] for h in hypothesis}, key=str)
    R = _activity(reference, rs, mids)
    H = _activity(hypothesis, hs, mids) if hs else np.zeros((0, mids.size), dtype=bool)
    nr, nh = R.sum(0), H.sum(0)
    total = float((dur * nr).sum())
    missed = float((dur * np.maximum(0, nr - nh)).sum())
    fa = float((dur * np.maximum(0, nh - nr)).sum())
    mapping = {}
    correct = np.zeros_like(dur)
    if hs:
        overlap = (R[:, None, :] & H[None, :, :]) @ dur          # (nr, nh) seconds
        ri, hi = linear_sum_assignment(-overlap)
        for a, b in zip(ri, hi):
            mapping[hs[b]] = rs[a]
            correct += R[a] & H[b]
    conf = float((dur * (np.minimum(nr, nh) - correct)).sum())
    return DERResult((missed + fa + conf) / total, missed, fa, conf, total, mapping)


# -- timeline conversion ----------------------------------------------------------------------

def windows_to_annotation(segments: list[Segment], labels: list[list[int]], n_frames: int,
                          overlaps=(), fps: int = FPS, two_in_overlap: bool = True) -> list[tuple]:
    """Frame-level label voting; overlap frames keep their two most-voted labels."""
    k = 1 + max((l for ls in labels for l in ls), default=0)
    votes = np.zeros((n_frames, k))
    covered = np.zeros(n_frames, dtype=bool)
    for seg, ls in zip(segments, labels):
        a, b = int(round(seg.start * fps)), int(round(seg.end * fps))
        covered[a:b] = True
        for l in ls:
            votes[a:b, l] += 1
    in_ov = np.zeros(n_frames, dtype=bool)
    for s, e in overlaps:
        in_ov[int(round(s * fps)):int(round(e * fps))] = True
    active = np.zeros((n_frames, k), dtype=bool)
    order = np.argsort(-votes, axis=1, kind="stable")
    rows = np.flatnonzero(covered)
    active[rows, order[rows, 0]] = True
    if two_in_overlap and k > 1:
        two = rows[in_ov[rows] & (votes[rows, order[rows, 1]] > 0)]
        active[two, order[two, 1]] = True
    out = []
    for spk in range(k):
        col = np.concatenate([[False], active[:, spk], [False]])
        edges = np.flatnonzero(np.diff(col.astype(np.int8)))
        for a, b in zip(edges[::2], edges[1::2]):
            out.append((f"spk{spk}", a / fps, b / fps))
    return sorted(out, key=lambda x: (x[1], x[0]))


# -- pipeline ------------------------------------------------------------------------------------

@dataclass
class DiarizeConfig:
    window: float = 1.5
    shift: float = 0.75
    max_speakers: int = 8
    seed: int = 0
    correction: bool = True
    solver: str = "jacobi"


def _window_utts(stream: Stream, segs: list[Segment]) -> list[Utterance]:
    fps = stream.fps
    return [Utterance(stream.features[:, int(round(s.start * fps)):int(round(s.end * fps))],
                      (0, 1) if s.overlap else (0,)) for s in segs]


def diarize(stream: Stream, model, config: DiarizeConfig | None = None) -> dict:
    """Run both the overlap-aware (constrained) and the plain single-embedding system."""
    c = config or DiarizeConfig()
    speech = speech_regions(stream.reference)
    overlaps = overlap_regions(stream.reference)
    segs = segment_stream(speech, c.window, c.shift, overlaps)
    utts = _window_utts(stream, segs)
    n_frames = stream.features.shape[1]

    oracle = ModelExtractor(model, "oracle", correction=c.correction)
    multi = oracle(utts)
    items, owner, links = [], [], []
    for i, (seg, embs) in enumerate(zip(segs, multi)):
        seg.embeddings = embs
        first = len(items)
        items.extend(embs)
        owner.extend([i] * len(embs))
        if len(embs) == 2:
            links.append((first, first + 1))
    res = cluster(np.array(items), links, c.max_speakers, c.seed, c.solver)
    seg_labels: list[list[int]] = [[] for _ in segs]
    for item, lab in zip(owner, res.labels):
        seg_labels[item].append(int(lab))
    hyp = windows_to_annotation(segs, seg_labels, n_frames, overlaps, stream.fps, True)

    single = ModelExtractor(model, "single", correction=c.correction)(utts)
    plain = cluster(np.array([e[0] for e in single]), (), c.max_speakers, c.seed, c.solver)
    hyp_plain = windows_to_annotation(segs, [[int(l)] for l in plain.labels], n_frames,
                                      overlaps, stream.fps, False)

    violations = sum(res.labels[i] == res.labels[j] for i, j in links)
    d_prop = der(stream.reference, hyp)
    d_plain = der(stream.reference, hyp_plain)
    return {
        "hypothesis": hyp,
        "hypothesis_plain": hyp_plain,
        "report": {
            "proposed": dict(d_prop.as_dict(), k=res.k, p=res.p),
            "plain_sc": dict(d_plain.as_dict(), k=plain.k, p=plain.p),
            "n_windows": len(segs),
            "n_overlap_windows": int(sum(s.overlap for s in segs)),
            "cannot_link_violations": int(violations),
            "overlap_fraction": overlap_fraction(stream.reference),
        },
    }


# -- RTTM ------------------------------------------------------------------------------------------

def write_rttm(path, annotation, file_id: str = "stream") -> None:
    with open(path, "w") as fh:
        for spk, s, e in annotation:
            fh.write(f"SPEAKER {file_id} 1 {s:.3f} {e - s:.3f} <NA> <NA> {spk} <NA> <NA>\n")


def read_rttm(path) -> dict[str, list[tuple]]:
    out: dict[str, list[tuple]] = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0] != "SPEAKER":
            continue
        start, dur = float(parts[3]), float(parts[4])
        out.setdefault(parts[1], []).append((parts[7], start, round(start + dur, 6)))
    return out


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
