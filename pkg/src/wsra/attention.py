"""Referring-attention weights over snippets, queries and batch items."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numgrad as ng
from .numgrad import ShapeError, Tensor
from .scoring import WsraModel, score_grid, score_matrix


@dataclass
class VideoAttention:
    alpha: Tensor  # (T,)
    v_f: Tensor  # (d_v,)
    v_b: Tensor  # (d_v,)
    scores: Tensor  # (T,) raw phi_video scores


@dataclass
class SnippetWeights:
    beta: Tensor  # (T, N), rows sum to one
    scores: Tensor  # (T, N) raw phi_snippet scores


def attend(scores, V) -> VideoAttention:
    """Softmax attention from given per-snippet scores and the fore/background
    features it pools: ``v_f = sum_t alpha_t v_t`` and
    ``v_b = sum_t (1 - alpha_t) v_t / (T - 1)``.
    """
    V, scores = ng.as_tensor(V), ng.as_tensor(scores)
    if V.ndim != 2 or V.shape[0] < 2:
        raise ValueError("background undefined for single-snippet video")
    if scores.shape != (V.shape[0],):
        raise ShapeError(f"attend: incompatible shapes {scores.shape} and {V.shape}")
    alpha = ng.softmax(scores)
    v_f = ng.matmul(alpha, V)
    v_b = ng.scale(ng.matmul(1.0 - alpha, V), 1.0 / (V.shape[0] - 1))
    return VideoAttention(alpha=alpha, v_f=v_f, v_b=v_b, scores=scores)


def video_attention(model: WsraModel, V, t) -> VideoAttention:
    """:func:`attend` over the phi_video scores of each snippet against ``t``."""
    V = ng.as_tensor(V)
    if V.ndim != 2 or V.shape[0] < 2:
        raise ValueError("background undefined for single-snippet video")
    return attend(score_matrix(model.phi_video, V, t), V)


def snippet_weights(model: WsraModel, V, queries) -> SnippetWeights:
    """Per snippet, a softmax over the ``N`` batch queries of phi_snippet scores."""
    Q = ng.as_tensor(queries)
    if Q.ndim != 2 or Q.shape[0] < 2:
        raise ValueError(f"snippet_weights: need at least 2 queries, got shape {Q.shape}")
    scores = score_grid(model.phi_snippet, V, Q)
    return SnippetWeights(beta=ng.softmax(scores, axis=1), scores=scores)


def cosine_matrix(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("cosine: degenerate vector")
    U = X / norms[:, None]
    return U @ U.T


def batch_weights(queries, pseudo_positive: Sequence[int]) -> np.ndarray:
    """``gamma_i = exp(cos(t_i, t_pp(i))) / sum_j exp(cos(t_i, t_j))``.

    The denominator runs over every batch item, ``i`` included. Text features
    are frozen, so the weights are plain arrays without gradient.
    """
    Q = np.asarray(queries.data if isinstance(queries, Tensor) else queries, dtype=np.float64)
    N = Q.shape[0]
    pp = np.asarray(pseudo_positive, dtype=np.int64)
    if N < 2:
        raise ValueError(f"batch_weights: need at least 2 queries, got {N}")
    if pp.shape != (N,):
        raise ShapeError(f"batch_weights: expected {N} pseudo-positive indices, got shape {pp.shape}")
    if np.any(pp == np.arange(N)):
        bad = int(np.flatnonzero(pp == np.arange(N))[0])
        raise ValueError(f"batch_weights: item {bad} is its own pseudo-positive")
    C = cosine_matrix(Q)
    # cosines lie in [-1, 1]; no max shift needed
    E = np.exp(C)
    return E[np.arange(N), pp] / E.sum(axis=1)
