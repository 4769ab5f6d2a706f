"""Oracles and small builders shared by the test modules."""
import math
from fractions import Fraction

import numpy as np

from wsra import numgrad as ng
from wsra.sampling import Batch, BatchItem
from wsra.scoring import WsraModel


def central_diff(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        up = f()
        x[i] = old - step
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * step)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_batch(rng, N=4, T=5, d_v=8, d_t=8) -> Batch:
    items = [
        BatchItem(f"v{i}", f"q{i}", rng.standard_normal((T, d_v)), rng.standard_normal(d_t))
        for i in range(N)
    ]
    neg = np.array([(i + 1 + rng.integers(N - 1)) % N for i in range(N)])
    pp = np.array([(i + 1 + rng.integers(N - 1)) % N for i in range(N)])
    return Batch(items, neg, pp)


def random_model(seed, d_v=8, d_t=8, hidden=0, bilinear=True, scale=1.0) -> WsraModel:
    m = WsraModel.init(d_v, d_t, hidden=hidden, seed=seed, bilinear=bilinear)
    rng = np.random.default_rng(seed + 1000)
    for t in m.parameters():
        t.data = scale * rng.standard_normal(t.shape)
    return m


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax(x, axis=-1):
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def loop_score(params, v, t) -> float:
    """phi(v, t) written out with plain loops over the weight rows."""
    x = list(v) + list(t)
    h = x
    if params.W1 is not None:
        h = [np.tanh(sum(w * xi for w, xi in zip(row, x)) + b) for row, b in zip(params.W1.data, params.b1.data)]
    z = sum(w * hi for w, hi in zip(params.W.data[0], h)) + params.b.data[0]
    if params.A is not None:
        for a in range(params.d_text):
            for c in range(params.d_visual):
                z += t[a] * params.A.data[a, c] * v[c]
    return 1.0 / (1.0 + np.exp(-z))


def direct_video(s_p, s_n, m, tau):
    return math.log(1 + sum(math.exp(tau * (n - p + m)) for p, n in zip(s_p, s_n)))


def direct_snippet(bp, bn, s_p, s_n, m, tau, pairing="printed"):
    if pairing == "printed":
        z = [a * n - b * p for a, b, p, n in zip(bp, bn, s_p, s_n)]
    else:
        z = [b * n - a * p for a, b, p, n in zip(bp, bn, s_p, s_n)]
    return math.log(1 + sum(math.exp(tau * (x + m)) for x in z))


def brute_segments(n):
    out = []
    for a in range(n):
        for b in range(n):
            if b >= a:
                out.append((a, b + 1))
    return out


def brute_sliding(duration, fractions, overlap):
    """Exact-arithmetic window generator; inputs are converted via their decimal strings."""
    D, o = Fraction(str(duration)), Fraction(str(overlap))
    out = []
    for f in fractions:
        L = Fraction(str(f)) * D
        stride = (1 - o) * L
        start = Fraction(0)
        while start < D:
            span = (start, min(start + L, D))
            if span not in out:
                out.append(span)
            if start + L >= D:
                break
            start += stride
    return [(float(a), float(b)) for a, b in out]
