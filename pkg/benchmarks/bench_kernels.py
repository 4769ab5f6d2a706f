"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the workloads the package runs: proposal pooling for a
long (128-snippet) video, an IoU table between proposals and truth, and the
random-ranker Monte-Carlo count. First calls (JIT compile) are excluded.
"""
import argparse
import timeit

import numpy as np

from wsra import _kernels as K
from wsra.grounding import enumerate_sliding_proposals, enumerate_segment_proposals


def cases(rng):
    T, d = 128, 1024
    V = rng.standard_normal((T, d))
    spans = enumerate_segment_proposals(T)
    starts = np.array([int(s.start) for s in spans])
    ends = np.array([int(s.end) for s in spans])
    yield "pool_rows (8256 spans, d=1024)", (V, starts, ends), K.pool_rows_numpy, K.pool_rows_numba

    win = enumerate_sliding_proposals(30.0)
    a = np.array([[w.start, w.end] for w in win] * 40)
    b = rng.uniform(0, 30, (2000, 2))
    b.sort(axis=1)
    b[:, 1] += 0.1
    yield f"iou_table ({len(a)} x {len(b)})", (a[:, 0], a[:, 1], b[:, 0], b[:, 1]), K.iou_table_numpy, K.iou_table_numba

    ranks = np.argsort(rng.random((100_000, 21)), axis=1)
    target = rng.integers(0, 21, 100_000)
    yield "topk_hits (100k x 21, k=5)", (ranks, target, 5), K.topk_hits_numpy, K.topk_hits_numba


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if not K.HAS_NUMBA:
        print("numba not importable; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<36} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, inputs, f_np, f_nb in cases(rng):
        out_np, out_nb = f_np(*inputs), f_nb(*inputs)  # warm-up, compiles numba
        assert np.allclose(out_np, out_nb), name
        t_np = min(timeit.repeat(lambda: f_np(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<36} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
