"""Episodic sampling, prototypes and the positive/negative prototype loss."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus_io import DatasetIndex, LabeledRegion
from .features import time_to_frame
from .tensor_nn import ContractError

logger = logging.getLogger(__name__)

SEGMENT_FRAMES = 17  # 0.2 s at 22050 / 256 frames per second


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 3
    m_shot: int = 3
    segment_frames: int = SEGMENT_FRAMES

    def __post_init__(self):
        if self.n_way < 2 or self.m_shot < 1:
            raise ValueError(f"need n_way >= 2 and m_shot >= 1, got {self.n_way}/{self.m_shot}")


@dataclass
class Episode:
    """Segments of one N-way-M-shot episode, each array (N, M, 2, frames, F).

    ``provenance`` records, per sampled class, which pool it came from.
    """

    classes: list[str]
    support: np.ndarray
    query: np.ndarray
    negative: np.ndarray
    provenance: list[str] = field(default_factory=list)

    @property
    def n_way(self):
        return self.support.shape[0]

    @property
    def m_shot(self):
        return self.support.shape[1]

    def batch(self):
        """All segments stacked as (3*N*M, 2, frames, F): support, query, negative."""
        n, m = self.support.shape[:2]
        return np.concatenate([a.reshape(n * m, *a.shape[2:])
                               for a in (self.support, self.query, self.negative)])


class FeatureStore:
    """Lazily loaded feature maps keyed by audio path."""

    def __init__(self, loader):
        self._loader = loader
        self._maps = {}

    def __call__(self, path):
        fm = self._maps.get(path)
        if fm is None:
            fm = self._maps[path] = self._loader(path)
        return fm

    def preload(self, paths):
        for p in paths:
            self(p)


def region_frames(region: LabeledRegion, n_frames: int):
    start = int(np.clip(time_to_frame(region.onset), 0, n_frames - 1))
    end = int(np.clip(time_to_frame(region.offset), start + 1, n_frames))
    return start, end


def crop_segment(values: np.ndarray, start: int, end: int, frames: int, rng=None):
    """Crop ``frames`` frames from ``values[:, start:end]``.

    With an ``rng`` the crop start is random inside the region; shorter
    regions are taken whole and zero-padded on the right.
    """
    length = end - start
    if length >= frames:
        off = start if rng is None else start + int(rng.integers(0, length - frames + 1))
        return values[:, off:off + frames]
    out = np.zeros((values.shape[0], frames, values.shape[2]), dtype=values.dtype)
    out[:, :length] = values[:, start:end]
    return out


def _pick_regions(rng, regions, k):
    """Choose ``k`` regions with probability proportional to duration."""
    w = np.array([max(r.duration, 1e-6) for r in regions])
    return rng.choice(len(regions), size=k, p=w / w.sum())


@dataclass
class ClassPool:
    """Classes from one dataset index available to the sampler."""

    name: str
    index: DatasetIndex
    features: FeatureStore

    @property
    def classes(self):
        return [c for c in self.index.classes if self.index.positives(c)]


class EpisodeSampler:
    """Draws class-balanced episodes from one or two pools.

    Classes are chosen uniformly without replacement. With two pools the N
    classes split ceil(N/2) / floor(N/2) between them.
    """

    def __init__(self, pools: list[ClassPool], spec: EpisodeSpec):
        if not 1 <= len(pools) <= 2:
            raise ValueError("episode sampler takes one or two class pools")
        self.pools = pools
        self.spec = spec
        counts = [self.spec.n_way - self.spec.n_way // 2, self.spec.n_way // 2] if len(pools) == 2 \
            else [self.spec.n_way]
        self.per_pool = counts
        for pool, k in zip(pools, counts):
            if len(pool.classes) < k:
                raise ValueError(f"pool {pool.name} has {len(pool.classes)} classes, episode needs {k}")
        self.provenance = Counter()

    def _negative_regions(self, pool, cls):
        neg = pool.index.negatives(cls)
        if neg:
            return pool, neg
        logger.warning("class %s has no negative material; drawing from the global negative pool", cls)
        allneg = [r for c in pool.index.classes for r in pool.index.negatives(c)]
        if not allneg:
            raise ValueError(f"no negative material in pool {pool.name}")
        return pool, allneg

    def _segments(self, rng, pool, regions, k):
        frames = self.spec.segment_frames
        picks = _pick_regions(rng, regions, k)
        out = []
        for i in picks:
            r = regions[i]
            fm = pool.features(r.file)
            s, e = region_frames(r, fm.n_frames)
            out.append(crop_segment(fm.values, s, e, frames, rng))
        return np.stack(out)

    def sample(self, rng) -> Episode:
        n, m = self.spec.n_way, self.spec.m_shot
        chosen = []
        for pool, k in zip(self.pools, self.per_pool):
            cls = pool.classes
            for j in rng.choice(len(cls), size=k, replace=False):
                chosen.append((pool, cls[j]))
        support, query, negative, names, prov = [], [], [], [], []
        for pool, cls in chosen:
            pos = pool.index.positives(cls)
            if len(pos) >= 2 * m:
                # support and query come from disjoint events when there are enough
                order = rng.permutation(len(pos))
                sup_regs = [pos[i] for i in order[:len(pos) // 2]]
                qry_regs = [pos[i] for i in order[len(pos) // 2:]]
            else:
                sup_regs = qry_regs = pos
            support.append(self._segments(rng, pool, sup_regs, m))
            query.append(self._segments(rng, pool, qry_regs, m))
            npool, neg = self._negative_regions(pool, cls)
            negative.append(self._segments(rng, npool, neg, m))
            names.append(cls)
            prov.append(pool.name)
            self.provenance[pool.name] += 1
        return Episode(names, np.stack(support), np.stack(query), np.stack(negative), prov)


def sample_episode(index: DatasetIndex, spec: EpisodeSpec, rng, features) -> Episode:
    """One episode from a single index; ``features`` maps audio path to FeatureMap."""
    store = features if isinstance(features, FeatureStore) else FeatureStore(features)
    return EpisodeSampler([ClassPool("train", index, store)], spec).sample(rng)


# ---------------------------------------------------------------------------
# prototypes and distances


def compute_prototypes(embeddings: np.ndarray) -> np.ndarray:
    """Mean over the shot axis: (..., M, D) -> (..., D)."""
    embeddings = np.asarray(embeddings)
    if embeddings.shape[-2] == 0:
        raise ContractError("cannot build a prototype from an empty group")
    return embeddings.mean(axis=-2)


def distance_matrix(query, support_pos, support_neg=None) -> np.ndarray:
    """Euclidean distances from N query prototypes to the interleaved supports.

    Column 2j is the positive support of class j, column 2j+1 its negative
    support. Without negatives the matrix is (N, N).
    """
    q = np.asarray(query, dtype=np.float64)
    cols = np.asarray(support_pos, dtype=np.float64)
    if support_neg is not None:
        n, d = cols.shape
        inter = np.empty((2 * n, d))
        inter[0::2] = cols
        inter[1::2] = np.asarray(support_neg, dtype=np.float64)
        cols = inter
    sq = (q * q).sum(1)[:, None] + (cols * cols).sum(1)[None, :] - 2.0 * q @ cols.T
    return np.sqrt(np.maximum(sq, 0.0))


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def target_columns(n, with_negatives=True):
    return 2 * np.arange(n) if with_negatives else np.arange(n)


def episode_loss(D: np.ndarray, with_negatives: bool = True):
    """Mean negative log-probability of each query's own positive support.

    Probabilities are a softmax over the negated distances of each row.
    Returns ``(loss, log_probs)``.
    """
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    logp = _log_softmax(-D)
    tgt = target_columns(n, with_negatives)
    loss = -logp[np.arange(n), tgt].mean()
    return float(loss), logp


def episode_accuracy(D: np.ndarray, with_negatives: bool = True) -> float:
    D = np.asarray(D)
    n = D.shape[0]
    return float(np.mean(D.argmin(axis=1) == target_columns(n, with_negatives)))


def prototype_loss_and_grads(q, sp, sn=None, min_dist=1e-12):
    """Loss and gradients w.r.t. query, positive and negative prototypes.

    ``sn=None`` drops the negative columns (no negative contrast).
    """
    q = np.asarray(q, dtype=np.float64)
    sp = np.asarray(sp, dtype=np.float64)
    with_neg = sn is not None
    n = q.shape[0]
    if with_neg:
        cols = np.empty((2 * n, q.shape[1]))
        cols[0::2] = sp
        cols[1::2] = np.asarray(sn, dtype=np.float64)
    else:
        cols = sp
    diff = q[:, None, :] - cols[None, :, :]
    D = np.sqrt(np.maximum((diff * diff).sum(-1), min_dist))
    loss, logp = episode_loss(D, with_neg)
    p = np.exp(logp)
    tgt = target_columns(n, with_neg)
    # d loss / d D = (p - onehot) * (-1) / n   (loss uses -D as logits)
    dD = -(p.copy())
    dD[np.arange(n), tgt] += 1.0
    dD /= n
    g = (dD / D)[:, :, None] * diff  # d D_ij / d q_i = diff / D
    dq = g.sum(axis=1)
    dcols = -g.sum(axis=0)
    if with_neg:
        return loss, D, dq, dcols[0::2], dcols[1::2]
    return loss, D, dq, dcols, None
