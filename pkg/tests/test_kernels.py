import os
import subprocess
import sys

import numpy as np
import pytest

from wsra import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not installed")


def loop_pool(V, starts, ends):
    return np.array([[sum(V[r, j] for r in range(a, b)) / (b - a) for j in range(V.shape[1])] for a, b in zip(starts, ends)])


def spans(rng, n, T):
    a = rng.integers(0, T, n)
    b = np.array([rng.integers(x + 1, T + 1) for x in a])
    return a, b


@pytest.mark.parametrize("impl", ["numpy", pytest.param("numba", marks=needs_numba)])
def test_pool_rows_matches_loop(impl):
    f = getattr(K, f"pool_rows_{impl}")
    rng = np.random.default_rng(0)
    for _ in range(20):
        T = int(rng.integers(1, 15))
        V = rng.standard_normal((T, 4))
        a, b = spans(rng, 10, T)
        np.testing.assert_allclose(f(V, a, b), loop_pool(V, a, b), atol=1e-12)


@pytest.mark.parametrize("impl", ["numpy", pytest.param("numba", marks=needs_numba)])
def test_iou_table_and_topk(impl):
    iou, topk = getattr(K, f"iou_table_{impl}"), getattr(K, f"topk_hits_{impl}")
    a_s, a_e = np.array([0.0, 10.0, 0.0]), np.array([5.0, 20.0, 1.0])
    b_s, b_e = np.array([5.0, 15.0]), np.array([10.0, 25.0])
    want = [[0.0, 0.0], [0.0, 5 / 15], [0.0, 0.0]]
    np.testing.assert_allclose(iou(a_s, a_e, b_s, b_e), want, atol=1e-15)
    ranks = np.array([[2, 0, 1], [1, 2, 0], [0, 1, 2]])
    target = np.array([0, 0, 0])
    assert [topk(ranks, target, k) for k in (1, 2, 3)] == [1, 2, 3]


@needs_numba
def test_backends_agree_on_random_inputs():
    rng = np.random.default_rng(1)
    V = rng.standard_normal((40, 16))
    a, b = spans(rng, 300, 40)
    np.testing.assert_allclose(K.pool_rows_numba(V, a, b), K.pool_rows_numpy(V, a, b), atol=1e-12)
    x = np.sort(rng.uniform(0, 30, (200, 2)), axis=1)
    y = np.sort(rng.uniform(0, 30, (50, 2)), axis=1)
    args = (x[:, 0], x[:, 1] + 0.1, y[:, 0], y[:, 1] + 0.1)
    np.testing.assert_allclose(K.iou_table_numba(*args), K.iou_table_numpy(*args), atol=1e-15)
    ranks = np.argsort(rng.random((5000, 21)), axis=1)
    target = rng.integers(0, 21, 5000)
    for k in (1, 5, 21):
        assert K.topk_hits_numba(ranks, target, k) == K.topk_hits_numpy(ranks, target, k)


def backend_with(flag):
    env = dict(os.environ)
    env.pop("WSRA_DISABLE_NUMBA", None)
    if flag is not None:
        env["WSRA_DISABLE_NUMBA"] = flag
    code = "from wsra import _kernels as K; print(K.BACKEND)"
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.strip()


def test_env_flag_selects_numpy():
    assert backend_with("1") == "numpy"
    assert backend_with("true") == "numpy"
    expected = "numba" if K.HAS_NUMBA else "numpy"
    assert backend_with(None) == expected
    assert backend_with("0") == expected
