"""Cross-modal scoring heads and the two-head model container."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numgrad as ng
from .numgrad import ShapeError, Tensor


@dataclass
class ScoringParams:
    """Parameters of one scoring head ``sigmoid(FC(cat(v, t)))``.

    With ``hidden == 0`` the FC is a single affine map ``W`` (1 x (d_v + d_t))
    plus bias ``b``. With ``hidden > 0`` a tanh layer ``W1``/``b1`` precedes
    it and ``W`` becomes (1 x hidden). An optional bilinear term
    ``t . (A v)`` with ``A`` (d_t x d_v) is added to the logit; without it
    the head ranks visual inputs identically for every query.
    """

    W: Tensor
    b: Tensor
    d_visual: int
    d_text: int
    W1: Tensor | None = None
    b1: Tensor | None = None
    A: Tensor | None = None

    @property
    def hidden(self) -> int:
        return 0 if self.W1 is None else self.W1.shape[0]

    @property
    def bilinear(self) -> bool:
        return self.A is not None

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        if self.A is not None:
            out["A"] = self.A
        if self.W1 is not None:
            out["W1"] = self.W1
            out["b1"] = self.b1
        out["W"] = self.W
        out["b"] = self.b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.tensors().values())

    @classmethod
    def init(cls, d_visual: int, d_text: int, hidden: int = 0, rng=None, zero: bool = False, bilinear: bool = False) -> "ScoringParams":
        """Uniform(+-1/sqrt(fan_in)) weights and zero biases, or all zeros."""
        rng = np.random.default_rng(rng)

        def uniform(rows, cols):
            if zero:
                return np.zeros((rows, cols))
            bound = 1.0 / np.sqrt(cols)
            return rng.uniform(-bound, bound, size=(rows, cols))

        d_in = d_visual + d_text
        A = Tensor(uniform(d_text, d_visual), requires_grad=True) if bilinear else None
        if hidden:
            W1 = Tensor(uniform(hidden, d_in), requires_grad=True)
            b1 = Tensor(np.zeros(hidden), requires_grad=True)
            W = Tensor(uniform(1, hidden), requires_grad=True)
        else:
            W1 = b1 = None
            W = Tensor(uniform(1, d_in), requires_grad=True)
        return cls(W=W, b=Tensor(np.zeros(1), requires_grad=True), d_visual=d_visual, d_text=d_text, W1=W1, b1=b1, A=A)


def _logits(params: ScoringParams, v: Tensor, t: Tensor) -> Tensor:
    """Pre-sigmoid scores; ``v`` and ``t`` share their leading shape."""
    h = ng.concat([v, t], axis=-1)
    if params.W1 is not None:
        h = ng.tanh(ng.affine(h, params.W1, params.b1))
    out = ng.affine(h, params.W, params.b)
    out = ng.reshape(out, out.shape[:-1])
    if params.A is not None:
        proj = ng.affine(v, params.A, Tensor(np.zeros(params.d_text)))
        out = out + ng.sum(proj * t, axis=-1)
    return out


def _check_dims(params: ScoringParams, v: Tensor, t: Tensor) -> None:
    if v.shape[-1] != params.d_visual or t.shape[-1] != params.d_text:
        raise ShapeError(
            f"score: expected visual dim {params.d_visual} and text dim {params.d_text}, "
            f"got {v.shape} and {t.shape}"
        )


def score(params: ScoringParams, v, t) -> Tensor:
    """Score of one visual vector against one text vector, in (0, 1)."""
    v, t = ng.as_tensor(v), ng.as_tensor(t)
    if v.ndim != 1 or t.ndim != 1:
        raise ShapeError(f"score: expected vectors, got {v.shape} and {t.shape}")
    _check_dims(params, v, t)
    return ng.sigmoid(_logits(params, v, t))


def score_matrix(params: ScoringParams, V, t) -> Tensor:
    """Scores of every row of ``V`` (T x d_v) against one query -> (T,)."""
    V, t = ng.as_tensor(V), ng.as_tensor(t)
    if V.ndim != 2 or V.shape[0] == 0:
        raise ShapeError(f"score_matrix: expected a non-empty matrix, got shape {V.shape}")
    _check_dims(params, V, t)
    tt = ng.broadcast_to(t, (V.shape[0], t.shape[0]))
    return ng.sigmoid(_logits(params, V, tt))


def score_pairs(params: ScoringParams, X, Q) -> Tensor:
    """Row ``i`` of ``X`` scored against row ``i`` of ``Q`` -> (N,)."""
    X, Q = ng.as_tensor(X), ng.as_tensor(Q)
    if X.ndim != 2 or Q.ndim != 2 or X.shape[0] != Q.shape[0]:
        raise ShapeError(f"score_pairs: incompatible shapes {X.shape} and {Q.shape}")
    _check_dims(params, X, Q)
    return ng.sigmoid(_logits(params, X, Q))


def score_grid(params: ScoringParams, V, Q) -> Tensor:
    """Scores of every row of ``V`` (T x d_v) against every query in ``Q``
    (N x d_t) -> (T, N)."""
    V, Q = ng.as_tensor(V), ng.as_tensor(Q)
    if V.ndim != 2 or Q.ndim != 2 or V.shape[0] == 0 or Q.shape[0] == 0:
        raise ShapeError(f"score_grid: expected non-empty matrices, got {V.shape} and {Q.shape}")
    _check_dims(params, V, Q)
    T, N = V.shape[0], Q.shape[0]
    VV = ng.broadcast_to(ng.reshape(V, (T, 1, V.shape[1])), (T, N, V.shape[1]))
    QQ = ng.broadcast_to(ng.reshape(Q, (1, N, Q.shape[1])), (T, N, Q.shape[1]))
    return ng.sigmoid(_logits(params, VV, QQ))


def score_numpy(params: ScoringParams, X: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Graph-free forward for inference: rows of ``X`` against matching rows
    (or a single row) of ``Q``."""
    X = np.asarray(X, dtype=np.float64)
    Q = np.broadcast_to(np.asarray(Q, dtype=np.float64), X.shape[:-1] + (params.d_text,))
    h = np.concatenate([X, Q], axis=-1)
    if params.W1 is not None:
        h = np.tanh(h @ params.W1.data.T + params.b1.data)
    z = (h @ params.W.data.T + params.b.data)[..., 0]
    if params.A is not None:
        z = z + np.sum((X @ params.A.data.T) * Q, axis=-1)
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class WsraModel:
    phi_video: ScoringParams
    phi_snippet: ScoringParams
    d_visual: int
    d_text: int
    margin: float = 0.4
    tau: float = 1.0

    def __post_init__(self):
        if self.margin <= 0 or self.tau <= 0:
            raise ValueError(f"margin and tau must be positive, got m={self.margin}, tau={self.tau}")

    @classmethod
    def init(cls, d_visual: int, d_text: int, hidden: int = 0, seed: int = 0, margin: float = 0.4, tau: float = 1.0, zero: bool = False, bilinear: bool = False) -> "WsraModel":
        rng = np.random.default_rng(seed)
        return cls(
            phi_video=ScoringParams.init(d_visual, d_text, hidden, rng, zero=zero, bilinear=bilinear),
            phi_snippet=ScoringParams.init(d_visual, d_text, hidden, rng, zero=zero, bilinear=bilinear),
            d_visual=d_visual,
            d_text=d_text,
            margin=margin,
            tau=tau,
        )

    def head(self, name: str) -> ScoringParams:
        if name == "video":
            return self.phi_video
        if name == "snippet":
            return self.phi_snippet
        raise ValueError(f"unknown scoring head {name!r}")

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, head in (("phi_video", self.phi_video), ("phi_snippet", self.phi_snippet)):
            for k, t in head.tensors().items():
                out[f"{prefix}.{k}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.named_parameters().items():
            if arrays[k].shape != t.shape:
                raise ShapeError(f"checkpoint parameter {k}: shape {arrays[k].shape} != {t.shape}")
            t.data = arrays[k].copy()
