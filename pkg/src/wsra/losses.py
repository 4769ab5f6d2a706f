"""Pair-weighting losses at video, snippet and batch level, and their sum.

All three are logistic losses of the form ``log(1 + sum exp(tau * (...)))``
with one log over the summed terms, so harder pairs take a larger share of
the gradient.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numgrad as ng
from .attention import batch_weights, snippet_weights, video_attention
from .numgrad import ShapeError, Tensor
from .scoring import score_pairs

log = logging.getLogger(__name__)

PAIRINGS = ("printed", "swapped")


@dataclass(frozen=True)
class LossWeights:
    alpha_w: float = 0.1
    beta_w: float = 1.0
    delta_w: float = 0.1
    margin: float = 0.4
    tau: float = 1.0
    pairing: str = "printed"

    def __post_init__(self):
        if min(self.alpha_w, self.beta_w, self.delta_w) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.margin <= 0 or self.tau <= 0:
            raise ValueError("margin and tau must be positive")
        if self.pairing not in PAIRINGS:
            raise ValueError(f"pairing must be one of {PAIRINGS}, got {self.pairing!r}")


@dataclass
class LossBreakdown:
    video: Tensor
    snippet: Tensor
    batch: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("video", "snippet", "batch", "total")}


def video_loss(s_p, s_n, margin: float, tau: float) -> Tensor:
    """``log[1 + sum_i exp(tau * (s_n_i - s_p_i + m))]`` over the batch."""
    s_p, s_n = ng.as_tensor(s_p), ng.as_tensor(s_n)
    if s_p.shape != s_n.shape or s_p.ndim != 1:
        raise ShapeError(f"video_loss: incompatible shapes {s_p.shape} and {s_n.shape}")
    if s_p.shape[0] == 0:
        raise ValueError("video_loss: empty batch")
    return ng.log1p_sumexp(ng.scale(s_n - s_p + margin, tau))


def snippet_loss(beta_pos, beta_neg, s_p, s_n, margin: float, tau: float, pairing: str = "printed") -> Tensor:
    """Snippet-level loss of one video, one log over its T snippets.

    ``printed``: exponent ``tau * (beta_pos * s_n - beta_neg * s_p + m)``.
    ``swapped``: exponent ``tau * (beta_neg * s_n - beta_pos * s_p + m)``.
    """
    beta_pos, beta_neg = ng.as_tensor(beta_pos), ng.as_tensor(beta_neg)
    s_p, s_n = ng.as_tensor(s_p), ng.as_tensor(s_n)
    if not (beta_pos.shape == beta_neg.shape == s_p.shape == s_n.shape) or s_p.ndim != 1:
        raise ShapeError(
            f"snippet_loss: incompatible shapes {beta_pos.shape}, {beta_neg.shape}, {s_p.shape}, {s_n.shape}"
        )
    if s_p.shape[0] == 0:
        raise ValueError("snippet_loss: video has no snippets")
    if pairing == "printed":
        z = beta_pos * s_n - beta_neg * s_p
    elif pairing == "swapped":
        z = beta_neg * s_n - beta_pos * s_p
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    return ng.log1p_sumexp(ng.scale(z + margin, tau))


def batch_loss(v_f, v_b, v_f_partner, gamma, margin: float, tau: float) -> Tensor:
    """Cross-video loss on cosine similarities of pooled features.

    ``s_p_i = cos(v_f_i, v_f_+)``, ``s_n_i = cos(v_b_i, v_f_+)``, and gamma
    scales the whole hinge term inside the exponential.
    """
    v_f, v_b, v_fp = ng.as_tensor(v_f), ng.as_tensor(v_b), ng.as_tensor(v_f_partner)
    gamma = np.asarray(gamma.data if isinstance(gamma, Tensor) else gamma, dtype=np.float64)
    if v_f.ndim != 2 or gamma.shape != (v_f.shape[0],):
        raise ShapeError(f"batch_loss: incompatible shapes {v_f.shape} and gamma {gamma.shape}")
    s_p = ng.cosine(v_f, v_fp)
    s_n = ng.cosine(v_b, v_fp)
    return ng.log1p_sumexp(ng.mul(s_n - s_p + margin, tau * gamma))


def total_loss(model, batch, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the three terms over one assembled batch.

    The snippet term sums the per-video snippet losses over the batch. Terms
    with zero weight are not built. Snippet and batch terms need at least two
    items and are skipped (with a warning) otherwise.
    """
    N = len(batch.items)
    zero = ng.Tensor(0.0)
    need_attention = weights.alpha_w > 0 or weights.delta_w > 0
    atts = [video_attention(model, it.features, it.query) for it in batch.items] if need_attention else []

    video = zero
    if weights.alpha_w > 0:
        Q = batch.queries
        s_p = score_pairs(model.phi_video, ng.stack([a.v_f for a in atts]), Q)
        s_n = score_pairs(model.phi_video, ng.stack([a.v_b for a in atts]), Q)
        video = video_loss(s_p, s_n, weights.margin, weights.tau)

    snippet = zero
    batch_term = zero
    if N < 2 and (weights.beta_w > 0 or weights.delta_w > 0):
        log.warning("batch of size 1: snippet and batch losses skipped")
    elif N >= 2:
        if weights.beta_w > 0:
            Q = batch.queries
            terms = []
            for j, it in enumerate(batch.items):
                sw = snippet_weights(model, it.features, Q)
                neg = int(batch.neg_query[j])
                if neg == j or batch.items[neg].query_id == it.query_id:
                    raise ValueError(f"snippet_loss: negative query of item {j} is its own query {it.query_id!r}")
                terms.append(
                    snippet_loss(
                        sw.beta[:, j], sw.beta[:, neg], sw.scores[:, j], sw.scores[:, neg],
                        weights.margin, weights.tau, weights.pairing,
                    )
                )
            snippet = terms[0]
            for t in terms[1:]:
                snippet = snippet + t
        if weights.delta_w > 0:
            pp = np.asarray(batch.pseudo_positive)
            gamma = batch_weights(batch.queries, pp)
            v_f = ng.stack([a.v_f for a in atts])
            v_b = ng.stack([a.v_b for a in atts])
            batch_term = batch_loss(v_f, v_b, v_f[pp], gamma, weights.margin, weights.tau)

    total = ng.scale(video, weights.alpha_w) + ng.scale(snippet, weights.beta_w) + ng.scale(batch_term, weights.delta_w)
    return LossBreakdown(video=video, snippet=snippet, batch=batch_term, total=total)

