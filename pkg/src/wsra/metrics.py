"""Temporal IoU, Recall@K at IoU thresholds, and mean IoU."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .grounding import GroundingResult
from .spans import TemporalSpan

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


def temporal_iou(a: TemporalSpan, b: TemporalSpan) -> float:
    """Intersection over union of two half-open spans (touching spans -> 0)."""
    if a.mode != b.mode:
        raise ValueError(f"temporal_iou: span modes differ ({a.mode} vs {b.mode})")
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    return inter / (a.length + b.length - inter)


def _truth_for(result: GroundingResult, truth: Mapping[str, TemporalSpan]) -> TemporalSpan:
    try:
        return truth[result.query_id]
    except KeyError:
        raise KeyError(f"no ground-truth span for query {result.query_id!r}") from None


def _ious(result: GroundingResult, gt: TemporalSpan, k: int | None = None) -> np.ndarray:
    ranked = result.ranked if k is None else result.ranked[:k]
    for p in ranked:
        if p.span.mode != gt.mode:
            raise ValueError(f"temporal_iou: span modes differ ({p.span.mode} vs {gt.mode})")
    starts = np.array([p.span.start for p in ranked])
    ends = np.array([p.span.end for p in ranked])
    return _kernels.iou_table(starts, ends, np.array([gt.start]), np.array([gt.end]))[:, 0]


def recall_at_k(results: Sequence[GroundingResult], truth: Mapping[str, TemporalSpan], k: int, threshold: float) -> float:
    """Percentage of queries with a top-``k`` proposal at IoU >= ``threshold``."""
    if not results:
        raise ValueError("recall_at_k: no results")
    hits = 0
    for r in results:
        ious = _ious(r, _truth_for(r, truth), k)
        hits += bool(np.any(ious >= threshold))
    return 100.0 * hits / len(results)


def mean_iou(results: Sequence[GroundingResult], truth: Mapping[str, TemporalSpan]) -> float:
    if not results:
        raise ValueError("mean_iou: no results")
    total = sum(float(_ious(r, _truth_for(r, truth), 1)[0]) for r in results)
    return 100.0 * total / len(results)


def didemo_exact_recall(results: Sequence[GroundingResult], truth: Mapping[str, TemporalSpan]) -> tuple[float, float, float]:
    """(R@1, R@5, mIoU) where a hit means an exact segment match (IoU = 1)."""
    return (
        recall_at_k(results, truth, 1, 1.0),
        recall_at_k(results, truth, 5, 1.0),
        mean_iou(results, truth),
    )


@dataclass
class EvalReport:
    recall: dict[float, tuple[float, float]]  # threshold -> (R@1, R@5)
    miou: float
    num_queries: int
    extra: dict[str, float] = field(default_factory=dict)

    def r_at(self, k: int, threshold: float) -> float:
        return self.recall[threshold][0 if k == 1 else 1]

    def to_keyvalue(self) -> str:
        lines = [f"num_queries={self.num_queries}"]
        for th in sorted(self.recall):
            r1, r5 = self.recall[th]
            lines.append(f"R@1,IoU={th:g}={r1:.2f}")
            lines.append(f"R@5,IoU={th:g}={r5:.2f}")
        lines.append(f"mIoU={self.miou:.2f}")
        for k, v in self.extra.items():
            lines.append(f"{k}={v:.2f}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        ths = sorted(self.recall)
        head = "".join(f"  IoU={th:<4g} R@1   R@5 " for th in ths)
        row = "".join(f"  {self.recall[th][0]:>10.2f} {self.recall[th][1]:>6.2f}" for th in ths)
        return f"queries={self.num_queries}\n{head}   mIoU\n{row}  {self.miou:>6.2f}\n"


def parse_keyvalue_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, v = line.rsplit("=", 1)
            out[k] = float(v)
    return out


def evaluate(results: Sequence[GroundingResult], truth: Mapping[str, TemporalSpan], thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> EvalReport:
    recall = {
        float(th): (recall_at_k(results, truth, 1, th), recall_at_k(results, truth, 5, th))
        for th in thresholds
    }
    return EvalReport(recall=recall, miou=mean_iou(results, truth), num_queries=len(results))


def random_ranker_recall(
    candidates: Sequence[Sequence[TemporalSpan]],
    truth: Sequence[TemporalSpan],
    k: int,
    threshold: float,
    trials: int,
    rng=None,
) -> float:
    """Monte-Carlo Recall@k of a ranker that orders proposals uniformly at random.

    Each trial picks a query uniformly, shuffles its candidates, and counts a
    hit when one of the first ``k`` reaches ``threshold`` IoU with the truth.
    """
    rng = np.random.default_rng(rng)
    q_idx = rng.integers(0, len(candidates), size=trials)
    hits = 0
    for q in np.unique(q_idx):
        n_trials = int(np.count_nonzero(q_idx == q))
        spans = candidates[q]
        gt = truth[q]
        good = np.array([temporal_iou(s, gt) >= threshold for s in spans])
        ranks = np.argsort(rng.random((n_trials, len(spans))), axis=1)
        # a hit is any good candidate in the first k; count via first good rank
        good_rank = np.where(good[ranks], np.arange(len(spans))[None, :], len(spans)).min(axis=1)
        hits += int(np.count_nonzero(good_rank < k))
    return 100.0 * hits / trials


def random_ranker_exact(num_candidates: int, k: int, trials: int, rng=None) -> float:
    """Recall@k (exact match) of a uniform random ranking over ``num_candidates``."""
    rng = np.random.default_rng(rng)
    target = rng.integers(0, num_candidates, size=trials)
    ranks = np.argsort(rng.random((trials, num_candidates)), axis=1)
    return 100.0 * _kernels.topk_hits(ranks, target, k) / trials
