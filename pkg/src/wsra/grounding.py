"""Temporal proposals, proposal pooling, and query grounding."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .scoring import WsraModel, score_numpy
from .spans import SNIPPET, TIME, TemporalSpan

DIDEMO_SEGMENTS = 6
DEFAULT_FRACTIONS = (0.2, 0.3, 0.4, 0.5)
DEFAULT_OVERLAP = 0.8
HEADS = ("video", "snippet", "both")
SCORINGS = ("pooled", "contrast")


@dataclass
class Proposal:
    span: TemporalSpan
    feature: np.ndarray
    score: float


@dataclass
class ProposalSet:
    spans: list[TemporalSpan]
    features: np.ndarray  # (P, d), row p pooled over spans[p]
    rows: np.ndarray | None = None  # (P, 2) covered snippet rows [a, b)
    snippets: np.ndarray | None = None  # (T, d) per-snippet features

    def __len__(self) -> int:
        return len(self.spans)


@dataclass
class GroundingResult:
    query_id: str
    ranked: list[Proposal]

    @property
    def top(self) -> Proposal:
        return self.ranked[0]


def enumerate_segment_proposals(num_segments: int) -> list[TemporalSpan]:
    """All contiguous ``[a, b)`` segment ranges, ordered by start then end."""
    if num_segments < 1:
        raise ValueError("num_segments must be >= 1")
    return [
        TemporalSpan(a, b, SNIPPET)
        for a in range(num_segments)
        for b in range(a + 1, num_segments + 1)
    ]


def enumerate_sliding_proposals(duration: float, fractions: Sequence[float] = DEFAULT_FRACTIONS, overlap: float = DEFAULT_OVERLAP) -> list[TemporalSpan]:
    """Multi-scale sliding windows sized as fractions of the video length.

    For each fraction ``f`` windows of length ``f * duration`` start at 0 and
    advance by ``(1 - overlap) * f * duration``. The first window that would
    run past the end is clamped to end at ``duration``; later starts are not
    generated. Exact duplicates across scales are dropped.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    tol = 1e-9 * duration
    spans: list[TemporalSpan] = []
    seen: set[tuple[float, float]] = set()
    for f in fractions:
        if not 0 < f <= 1:
            raise ValueError(f"window fraction {f} outside (0, 1]")
        length = f * duration
        stride = (1.0 - overlap) * length
        if stride <= 0:
            raise ValueError(f"non-positive stride for fraction {f} and overlap {overlap}")
        k = 0
        while True:
            start = k * stride
            if start >= duration - tol:
                break
            end = start + length
            clamped = end > duration + tol
            end = min(end, duration)
            key = (round(start / tol), round(end / tol))
            if key not in seen:
                seen.add(key)
                spans.append(TemporalSpan(start, end, TIME))
            if clamped or end >= duration - tol:
                break
            k += 1
    return spans


def covered_rows(span: TemporalSpan, num_snippets: int, snippet_duration: float = 1.0) -> tuple[int, int]:
    """Rows ``[a, b)`` covered by ``span``: by index in snippet mode, by
    snippet midpoint containment in time mode."""
    if span.mode == SNIPPET:
        a, b = int(span.start), int(math.ceil(span.end))
    else:
        a = math.ceil(span.start / snippet_duration - 0.5)
        b = math.ceil(span.end / snippet_duration - 0.5)
    return max(a, 0), min(b, num_snippets)


def pool_proposal_feature(V: np.ndarray, span: TemporalSpan, snippet_duration: float = 1.0) -> np.ndarray:
    a, b = covered_rows(span, V.shape[0], snippet_duration)
    if b <= a:
        raise ValueError(f"span [{span.start}, {span.end}) covers no snippet")
    return V[a:b].mean(axis=0)


def _rows(spans: Sequence[TemporalSpan], num_snippets: int, snippet_duration: float) -> np.ndarray:
    return np.array([covered_rows(s, num_snippets, snippet_duration) for s in spans], dtype=np.int64).reshape(-1, 2)


def pool_spans(V: np.ndarray, spans: Sequence[TemporalSpan], snippet_duration: float = 1.0) -> np.ndarray:
    rows = _rows(spans, V.shape[0], snippet_duration)
    if np.any(rows[:, 1] <= rows[:, 0]):
        bad = spans[int(np.flatnonzero(rows[:, 1] <= rows[:, 0])[0])]
        raise ValueError(f"span [{bad.start}, {bad.end}) covers no snippet")
    return _kernels.pool_rows(V, rows[:, 0], rows[:, 1])


def didemo_feature_augment(V: np.ndarray) -> np.ndarray:
    """Per-proposal ``concat(global, local)`` features for a 6-segment video.

    ``local`` is the mean over a proposal's segments and ``global`` the mean of
    all 21 local features. Rows follow :func:`enumerate_segment_proposals`.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != DIDEMO_SEGMENTS:
        raise ValueError(f"didemo augmentation needs {DIDEMO_SEGMENTS} segments, got shape {V.shape}")
    local = pool_spans(V, enumerate_segment_proposals(DIDEMO_SEGMENTS))
    glob = np.broadcast_to(local.mean(axis=0), local.shape)
    return np.concatenate([glob, local], axis=1)


def build_proposals(V: np.ndarray, mode: str, snippet_duration: float = 1.0, fractions=DEFAULT_FRACTIONS, overlap=DEFAULT_OVERLAP) -> ProposalSet:
    """Proposal spans and pooled features for one video.

    ``segment``: every contiguous snippet range. ``didemo``: rows of ``V`` are
    already the 21 augmented proposal features. ``sliding``: time windows;
    windows that contain no snippet midpoint are dropped.
    """
    V = np.asarray(V, dtype=np.float64)
    if mode == "segment":
        spans = enumerate_segment_proposals(V.shape[0])
        return ProposalSet(spans, pool_spans(V, spans), _rows(spans, V.shape[0], 1.0), V)
    if mode == "didemo":
        spans = enumerate_segment_proposals(DIDEMO_SEGMENTS)
        if V.shape[0] != len(spans):
            raise ValueError(f"didemo mode expects {len(spans)} augmented rows, got {V.shape[0]}")
        return ProposalSet(spans, V)
    if mode == "sliding":
        T = V.shape[0]
        spans = []
        for s in enumerate_sliding_proposals(T * snippet_duration, fractions, overlap):
            a, b = covered_rows(s, T, snippet_duration)
            if b > a:
                spans.append(s)
        return ProposalSet(spans, pool_spans(V, spans, snippet_duration), _rows(spans, T, snippet_duration), V)
    raise ValueError(f"unknown dataset mode {mode!r}")


def _head_scores(model: WsraModel, X: np.ndarray, query: np.ndarray, head: str) -> np.ndarray:
    if head == "both":
        return 0.5 * (score_numpy(model.phi_video, X, query) + score_numpy(model.phi_snippet, X, query))
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
    return score_numpy(model.head(head), X, query)


def contrast_scores(snippet_scores: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``(1 + inside - outside) / 2`` from per-snippet scores, where inside and
    outside are the mean scores of the covered and uncovered snippets. A span
    covering the whole video has outside 0.
    """
    s = np.asarray(snippet_scores, dtype=np.float64)
    T = s.shape[0]
    csum = np.concatenate([[0.0], np.cumsum(s)])
    a, b = rows[:, 0], rows[:, 1]
    n_in = b - a
    inside = (csum[b] - csum[a]) / n_in
    n_out = T - n_in
    outside = np.where(n_out > 0, (csum[T] - csum[b] + csum[a]) / np.maximum(n_out, 1), 0.0)
    return 0.5 * (1.0 + inside - outside)


def proposal_scores(model: WsraModel, proposals: ProposalSet, query: np.ndarray, head: str = "snippet", scoring: str = "pooled") -> np.ndarray:
    """``pooled`` scores each proposal's mean feature; ``contrast`` compares
    per-snippet scores inside and outside the span."""
    if scoring == "pooled":
        return _head_scores(model, proposals.features, query, head)
    if scoring != "contrast":
        raise ValueError(f"unknown proposal scoring {scoring!r}; expected one of {SCORINGS}")
    if proposals.snippets is None or proposals.rows is None:
        raise ValueError("contrast scoring needs per-snippet features")
    return contrast_scores(_head_scores(model, proposals.snippets, query, head), proposals.rows)


def rank_order(scores: np.ndarray, spans: Sequence[TemporalSpan]) -> np.ndarray:
    """Descending score; ties go to the earlier start, then the earlier end."""
    starts = np.array([s.start for s in spans])
    ends = np.array([s.end for s in spans])
    return np.lexsort((ends, starts, -np.asarray(scores)))


def ground(model: WsraModel, query_id: str, query: np.ndarray, proposals: ProposalSet, head: str = "snippet", top_k: int | None = 5, scoring: str = "pooled") -> GroundingResult:
    if len(proposals) == 0:
        raise ValueError("ground: no proposals")
    scores = proposal_scores(model, proposals, query, head, scoring)
    order = rank_order(scores, proposals.spans)
    if top_k is not None:
        order = order[:top_k]
    ranked = [Proposal(proposals.spans[p], proposals.features[p], float(scores[p])) for p in order]
    return GroundingResult(query_id, ranked)


# prediction files: one line per query,
# "<query_id>\t<mode>\t<start> <end> <score>\t<start> <end> <score>..."

def format_prediction(result: GroundingResult) -> str:
    mode = result.ranked[0].span.mode
    cells = [f"{p.span.start!r} {p.span.end!r} {p.score:.6f}" for p in result.ranked]
    return "\t".join([result.query_id, mode, *cells])


def write_predictions(path, results: Iterable[GroundingResult]) -> None:
    Path(path).write_text("".join(format_prediction(r) + "\n" for r in results))


def read_predictions(path) -> list[GroundingResult]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise ValueError(f"{path}:{lineno}: malformed prediction line")
        qid, mode = parts[0], parts[1]
        ranked = []
        for cell in parts[2:]:
            s, e, sc = cell.split()
            ranked.append(Proposal(TemporalSpan(float(s), float(e), mode), np.empty(0), float(sc)))
        out.append(GroundingResult(qid, ranked))
    return out
