"""Synthetic datasets and client partitioning.

``char-lm`` draws sequences from a handful of seeded Markov sources over a
64-symbol alphabet; each sequence is labelled with its source, and non-IID
splits skew the source mixture per client. ``cluster-classify`` draws labelled
Gaussian clusters for the MLP family; non-IID splits skew the label mix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import DataBatch

TASKS = ("char-lm", "cluster-classify")
SCHEMES = ("iid", "dirichlet")
ALPHABET = 64


@dataclass(frozen=True)
class Dataset:
    task: str
    x: np.ndarray
    y: np.ndarray
    groups: np.ndarray  # source id (char-lm) or class label (cluster-classify)
    n_groups: int
    meta: dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return int(self.x.shape[0])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.task, self.x[idx], self.y[idx], self.groups[idx], self.n_groups, self.meta)

    def batch(self) -> DataBatch:
        return DataBatch(self.x, self.y)


@dataclass(frozen=True)
class DataShard(DataBatch):
    client: int = 0
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return len(self)


def _markov_tables(rng, n_sources, order, concentration, source_mix):
    """Per-source transition tables: a shared base blended with a source-specific table."""
    contexts = ALPHABET**order
    alpha = np.full(ALPHABET, concentration)
    base = rng.dirichlet(alpha, size=contexts)
    own = rng.dirichlet(alpha, size=(n_sources, contexts))
    return (1.0 - source_mix) * base[None] + source_mix * own


def _sample_rows(rng, probs):
    u = rng.random((probs.shape[0], 1))
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u > cdf).sum(axis=1), ALPHABET - 1)


def make_synthetic_dataset(task: str, size: int, seed: int, *, seq_len: int = 16, order: int = 1,
                           n_sources: int = 4, concentration: float = 0.03, source_mix: float = 0.5,
                           input_dim: int = 16,
                           num_classes: int = 8, separation: float = 3.0, clusters_per_class: int = 1,
                           noise: float = 1.0) -> Dataset:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = np.random.default_rng(seed)
    if task == "char-lm":
        if not 0.0 <= source_mix <= 1.0:
            raise ValueError("source_mix must be in [0, 1]")
        return _char_lm(rng, size, seq_len, order, n_sources, concentration, source_mix)
    return _clusters(rng, size, input_dim, num_classes, separation, clusters_per_class, noise)


def _char_lm(rng, size, seq_len, order, n_sources, concentration, source_mix):
    if order < 1 or order > 2:
        raise ValueError("markov order must be 1 or 2")
    tables = _markov_tables(rng, n_sources, order, concentration, source_mix)
    src = rng.integers(0, n_sources, size=size)
    seq = np.zeros((size, seq_len + 1), dtype=np.int64)
    seq[:, :order] = rng.integers(0, ALPHABET, size=(size, order))
    for t in range(order, seq_len + 1):
        ctx = seq[:, t - 1] if order == 1 else seq[:, t - 2] * ALPHABET + seq[:, t - 1]
        seq[:, t] = _sample_rows(rng, tables[src, ctx])
    counts = np.bincount(seq[:, 1:].ravel(), minlength=ALPHABET)
    p = counts[counts > 0] / counts.sum()
    meta = {"unigram_entropy": float(-(p * np.log(p)).sum()), "order": order,
            "conditional_entropy": _conditional_entropy(tables, src, seq, order)}
    return Dataset("char-lm", seq[:, :-1], seq[:, 1:], src, n_sources, meta)


def _conditional_entropy(tables, src, seq, order):
    """Mean per-token entropy of the true next-symbol distribution (the loss floor)."""
    total, n = 0.0, 0
    for t in range(order, seq.shape[1]):
        ctx = seq[:, t - 1] if order == 1 else seq[:, t - 2] * ALPHABET + seq[:, t - 1]
        p = tables[src, ctx]
        total += float(-(p * np.log(np.maximum(p, 1e-300))).sum())
        n += p.shape[0]
    return total / n


def _clusters(rng, size, input_dim, num_classes, separation, clusters_per_class, noise):
    n_centres = num_classes * clusters_per_class
    centres = rng.standard_normal((n_centres, input_dim))
    centres *= separation / np.linalg.norm(centres, axis=1, keepdims=True)
    which = rng.integers(0, n_centres, size=size)
    x = centres[which] + noise * rng.standard_normal((size, input_dim)) / np.sqrt(input_dim)
    y = (which % num_classes).astype(np.int64)
    meta = {"separation": separation, "clusters_per_class": clusters_per_class}
    return Dataset("cluster-classify", x.astype(np.float32), y, y.copy(), num_classes, meta)


def holdout_split(dataset: Dataset, n_eval: int, seed: int) -> tuple[Dataset, Dataset]:
    """(train, eval) split with ``n_eval`` examples held out uniformly at random."""
    if not 0 <= n_eval < len(dataset):
        raise ValueError(f"n_eval must be in [0, {len(dataset)})")
    perm = np.random.default_rng([seed, 7]).permutation(len(dataset))
    return dataset.subset(np.sort(perm[n_eval:])), dataset.subset(np.sort(perm[:n_eval]))


def partition_data(dataset: Dataset, m: int, scheme: str = "iid", alpha: float = 1.0, seed: int = 0,
                   min_size: int = 1, max_tries: int = 1000) -> list[DataShard]:
    """Split ``dataset`` into ``m`` disjoint shards whose union is the dataset."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if not 1 <= m <= len(dataset):
        raise ValueError(f"need 1 <= m <= {len(dataset)}, got {m}")
    rng = np.random.default_rng([seed, 5])
    if scheme == "iid":
        parts = [np.sort(p) for p in np.array_split(rng.permutation(len(dataset)), m)]
    else:
        if not alpha > 0:
            raise ValueError(f"dirichlet alpha must be > 0, got {alpha}")
        parts = _dirichlet_parts(dataset, m, alpha, rng, min_size, max_tries)
    return [DataShard(dataset.x[p], dataset.y[p], client=i, indices=p) for i, p in enumerate(parts)]


def _dirichlet_parts(dataset, m, alpha, rng, min_size, max_tries):
    by_group = [np.flatnonzero(dataset.groups == g) for g in range(dataset.n_groups)]
    for _ in range(max_tries):
        buckets = [[] for _ in range(m)]
        for idx in by_group:
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(m, alpha))
            cuts = np.round(np.cumsum(props)[:-1] * len(idx)).astype(int)
            for i, chunk in enumerate(np.split(idx, cuts)):
                buckets[i].append(chunk)
        parts = [np.sort(np.concatenate(b)) for b in buckets]
        if min(len(p) for p in parts) >= min_size:
            return parts
    raise ValueError(f"could not give every client >= {min_size} examples in {max_tries} draws")


def group_distribution(shard_or_groups, n_groups: int) -> np.ndarray:
    counts = np.bincount(np.asarray(shard_or_groups), minlength=n_groups).astype(float)
    return counts / max(counts.sum(), 1.0)


def mean_tv_distance(dataset: Dataset, shards: list[DataShard]) -> float:
    """Average total-variation distance between each shard's group mix and the global mix."""
    glob = group_distribution(dataset.groups, dataset.n_groups)
    tvs = [0.5 * np.abs(group_distribution(dataset.groups[s.indices], dataset.n_groups) - glob).sum()
           for s in shards]
    return float(np.mean(tvs))
