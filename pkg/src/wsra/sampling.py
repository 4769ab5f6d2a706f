"""Batch assembly with top/last-K filtered negatives and pseudo-positives."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class SamplingConfig:
    batch_size: int = 42
    k_top: int = 3
    k_last: int = 3

    def __post_init__(self):
        if self.k_top < 0 or self.k_last < 0:
            raise ValueError("k_top and k_last must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def check_batch(self, n: int) -> None:
        if n >= 2 and not self.k_top + self.k_last < n - 1:
            raise ValueError(
                f"sampling needs k_top + k_last < N - 1 (N={n}, k_top={self.k_top}, k_last={self.k_last})"
            )


@dataclass
class BatchItem:
    video_id: str
    query_id: str
    features: np.ndarray  # (T, d_v)
    query: np.ndarray  # (d_t,)


@dataclass
class Batch:
    items: list[BatchItem]
    neg_query: np.ndarray  # (N,) index into items
    pseudo_positive: np.ndarray  # (N,) index into items
    rng_seed: int | None = None

    @property
    def queries(self) -> np.ndarray:
        return np.stack([it.query for it in self.items])

    def __len__(self) -> int:
        return len(self.items)


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cosine: degenerate vector")
    return x / n


def rank_queries(anchor, pool) -> np.ndarray:
    """Indices of ``pool`` by descending cosine to ``anchor``; ties keep pool order."""
    pool = np.atleast_2d(np.asarray(pool, dtype=np.float64))
    if pool.shape[0] == 0 or pool.size == 0:
        raise ValueError("rank_queries: empty pool")
    sims = _unit(pool) @ _unit(np.asarray(anchor, dtype=np.float64))
    return np.lexsort((np.arange(len(sims)), -sims))


def select_negatives(ranked: Sequence[int], cfg: SamplingConfig, rng, exclude_pp: Sequence[bool] | None = None) -> tuple[int, int]:
    """Draw one hard negative and name the pseudo-positive from a ranked pool.

    The negative is uniform over ``ranked[k_top : len - k_last]``. The
    pseudo-positive is the best-ranked entry not flagged in ``exclude_pp``
    (indexed like the pool, e.g. same-video queries), normally ``ranked[0]``.
    """
    ranked = np.asarray(ranked, dtype=np.int64)
    n = len(ranked)
    if n < 1 or n <= cfg.k_top + cfg.k_last:
        raise ValueError(
            f"select_negatives: pool of {n} (N={n + 1}) cannot drop k_top={cfg.k_top} and k_last={cfg.k_last}"
        )
    rng = np.random.default_rng(rng)
    neg = int(ranked[rng.integers(cfg.k_top, n - cfg.k_last)])
    if exclude_pp is None:
        return neg, int(ranked[0])
    exclude_pp = np.asarray(exclude_pp, dtype=bool)
    for r in ranked:
        if not exclude_pp[r]:
            return neg, int(r)
    raise ValueError("select_negatives: no pseudo-positive from a different video")


def assemble_batch(dataset, cfg: SamplingConfig, rng, indices: Sequence[int] | None = None) -> Batch:
    """Assemble one batch from a training set.

    ``dataset`` provides ``items`` (records with ``video_id``, ``query_id``,
    ``query``) and ``features(video_id)``. Without ``indices``, ``batch_size``
    items are drawn without replacement. ``rng`` may be a seed or a Generator.
    """
    seed = int(rng) if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng)
    n_total = len(dataset.items)
    if indices is None:
        if n_total < cfg.batch_size:
            raise ValueError(f"assemble_batch: dataset has {n_total} pairs, batch needs {cfg.batch_size}")
        indices = rng.choice(n_total, size=cfg.batch_size, replace=False)
    indices = [int(i) for i in indices]
    items = []
    for i in indices:
        rec = dataset.items[i]
        items.append(BatchItem(rec.video_id, rec.query_id, dataset.features(rec.video_id), rec.query))
    N = len(items)
    neg = np.full(N, -1, dtype=np.int64)
    pp = np.full(N, -1, dtype=np.int64)
    if N >= 2:
        cfg.check_batch(N)
        Q = np.stack([it.query for it in items])
        vids = np.array([it.video_id for it in items])
        for i in range(N):
            others = np.array([j for j in range(N) if j != i])
            ranked = rank_queries(Q[i], Q[others])
            same = vids[others] == vids[i]
            ni, pi = select_negatives(ranked, cfg, rng, exclude_pp=same)
            neg[i] = others[ni]
            pp[i] = others[pi]
    return Batch(items=items, neg_query=neg, pseudo_positive=pp, rng_seed=seed)


def epoch_batches(dataset, cfg: SamplingConfig, seed: int, epoch: int):
    """Yield the ``floor(len / N)`` batches of one epoch.

    Item order comes from ``(seed, epoch)``; each batch draws its negatives
    from its own seed so a failing batch can be rebuilt in isolation.
    """
    n = len(dataset.items)
    N = min(cfg.batch_size, n)
    order = np.random.default_rng([seed, epoch, 0]).permutation(n)
    for b in range(n // N):
        batch_seed = batch_seed_for(seed, epoch, b)
        yield assemble_batch(dataset, cfg, batch_seed, indices=order[b * N : (b + 1) * N])


def batch_seed_for(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index + 1]).generate_state(1)[0])
