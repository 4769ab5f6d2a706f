"""Acceptance gate: eight criteria, each reported as a PASS/FAIL line.

Tolerances are fixed; a criterion that cannot be met stays red.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from helpers import (
    brute_segments,
    brute_sliding,
    direct_snippet,
    direct_video,
    loop_score,
    random_batch,
    random_model,
    rel_err,
)
from wsra.attention import attend, batch_weights, snippet_weights, video_attention
from wsra.cli import ablation_config, main
from wsra.data import SyntheticSpec, load_manifest, write_synthetic
from wsra.grounding import GroundingResult, Proposal, enumerate_segment_proposals, enumerate_sliding_proposals
from wsra.losses import LossWeights, batch_loss, snippet_loss, total_loss, video_loss
from wsra.metrics import mean_iou, random_ranker_exact, recall_at_k, temporal_iou
from wsra import numgrad as ng
from wsra.numgrad import Tensor
from wsra.scoring import WsraModel
from wsra.spans import TIME, TemporalSpan
from wsra.train import RunConfig, train_and_evaluate

SEEDS = range(5)


def verdict(n, title, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
    assert ok, detail


# 1. gradients


def fd_all_terms(f, x, step=1e-4):
    """Central differences of every loss term at once; one sweep per array."""
    g = {}
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        up = f()
        x[i] = old - step
        down = f()
        x[i] = old
        for k in up:
            g.setdefault(k, np.zeros_like(x))[i] = (up[k] - down[k]) / (2 * step)
    return g


def test_criterion_1_gradient_suite():
    t0 = time.time()
    worst = {"video": 0.0, "snippet": 0.0, "batch": 0.0, "total": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        batch = random_batch(rng, N=4, T=5, d_v=8, d_t=8)
        # every fourth model has a hidden layer so W1 and b1 are covered too
        model = random_model(seed, hidden=3 if seed % 4 == 3 else 0, scale=0.5)
        w = LossWeights(pairing="printed" if seed % 2 == 0 else "swapped")
        params = model.parameters()
        analytic = {}
        for term in worst:
            for p in params:
                p.grad = None
            getattr(total_loss(model, batch, w), term).backward()
            # a term that never touches a head leaves its grad unset: zero
            analytic[term] = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        for j, p in enumerate(params):
            num = fd_all_terms(lambda: total_loss(model, batch, w).values(), p.data)
            for term in worst:
                worst[term] = max(worst[term], rel_err(analytic[term][j], num[term]))
    elapsed = time.time() - t0
    ok = max(worst.values()) < 1e-3 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.0f}s"
    verdict(1, "analytic vs central-difference gradients, 20 batches", ok, detail)


# 2. formula oracles


def cos(a, b):
    return float(np.dot(a, b) / math.sqrt(np.dot(a, a) * np.dot(b, b)))


def test_criterion_2_formula_oracles():
    rng = np.random.default_rng(0)
    worst = 0.0
    cases = 1000
    for c in range(cases):
        T, N, d = int(rng.integers(2, 7)), int(rng.integers(2, 6)), int(rng.integers(2, 5))
        model = random_model(c, d_v=d, d_t=d, scale=0.7)
        V, Q = rng.standard_normal((T, d)), rng.standard_normal((N, d))
        # attention over snippets
        s = [loop_score(model.phi_video, v, Q[0]) for v in V]
        e = [math.exp(x) for x in s]
        alpha = [x / sum(e) for x in e]
        worst = max(worst, np.max(np.abs(video_attention(model, V, Q[0]).alpha.data - alpha)))
        # attention over queries, per snippet
        beta = snippet_weights(model, V, Q).beta.data
        for t in range(T):
            e = [math.exp(loop_score(model.phi_snippet, V[t], q)) for q in Q]
            worst = max(worst, max(abs(beta[t, n] - e[n] / sum(e)) for n in range(N)))
        # batch weights
        pp = [(i + 1 + int(rng.integers(N - 1))) % N for i in range(N)]
        g = batch_weights(Q, pp)
        for i in range(N):
            den = sum(math.exp(cos(Q[i], Q[j])) for j in range(N))
            worst = max(worst, abs(g[i] - math.exp(cos(Q[i], Q[pp[i]])) / den))
        # losses
        m, tau = float(rng.uniform(0.05, 1)), float(rng.uniform(0.5, 3))
        sp, sn = rng.random(N), rng.random(N)
        worst = max(worst, abs(video_loss(sp, sn, m, tau).item() - direct_video(sp, sn, m, tau)))
        bp, bn, tp, tn = rng.random((4, T))
        pairing = "printed" if c % 2 == 0 else "swapped"
        got = snippet_loss(bp, bn, tp, tn, m, tau, pairing).item()
        worst = max(worst, abs(got - direct_snippet(bp, bn, tp, tn, m, tau, pairing)))
        vf, vb, vfp = rng.standard_normal((3, N, d))
        gam = rng.random(N)
        want = math.log(1 + sum(math.exp(tau * gam[i] * (cos(vb[i], vfp[i]) - cos(vf[i], vfp[i]) + m)) for i in range(N)))
        worst = max(worst, abs(batch_loss(vf, vb, vfp, gam, m, tau).item() - want))
    verdict(2, "attention weights and loss values vs direct formulas", worst <= 1e-12, f"{cases} cases, max abs err {worst:.1e}")


# 3. analytic fixed points


def test_criterion_3_fixed_points():
    worst = 0.0
    rng = np.random.default_rng(3)
    for T in (2, 5, 9):
        V = rng.standard_normal((T, 4))
        for c in (-3.0, 0.0, 0.7, 40.0):
            a = attend(Tensor(np.full(T, c)), V)
            worst = max(worst, np.max(np.abs(a.alpha.data - 1 / T)))
            worst = max(worst, np.max(np.abs(a.v_f.data - V.mean(axis=0))), np.max(np.abs(a.v_b.data - V.mean(axis=0))))
        z = WsraModel.init(4, 3, zero=True, bilinear=True)
        a = video_attention(z, V, rng.standard_normal(3))
        worst = max(worst, np.max(np.abs(a.v_f.data - V.mean(axis=0))), np.max(np.abs(a.v_b.data - V.mean(axis=0))))
        sp = rng.uniform(0.5, 0.9, T)
        worst = max(worst, abs(video_loss(sp, sp - 0.4, 0.4, 1.0).item() - math.log(1 + T)))
        b = np.full(T, 0.25)
        worst = max(worst, abs(snippet_loss(b, b, sp, sp - 0.4 / 0.25, 0.4, 1.0).item() - math.log(1 + T)))
    for x in (np.zeros(6), np.full(6, 123.0)):
        worst = max(worst, np.max(np.abs(ng.softmax(Tensor(x)).data - 1 / 6)))
    verdict(3, "uniform softmax, log(1+N) and log(1+T), mean features under uniform attention", worst <= 1e-9, f"max err {worst:.1e}")


# 4. proposal counts


def test_criterion_4_proposal_counts():
    seg_ok = len(enumerate_segment_proposals(6)) == 21 and all(
        [(int(s.start), int(s.end)) for s in enumerate_segment_proposals(n)] == brute_segments(n)
        and len(enumerate_segment_proposals(n)) == n * (n + 1) // 2
        for n in range(1, 11)
    )
    rng = np.random.default_rng(4)
    grid = [0.1, 0.2, 0.25, 0.3, 0.4, 0.5, 0.6, 0.75, 1.0]
    slide_ok = 0
    for _ in range(50):
        duration = float(rng.integers(4, 200)) / 2
        fr = tuple(sorted(rng.choice(grid, size=rng.integers(1, 5), replace=False)))
        ov = float(rng.choice([0.0, 0.2, 0.5, 0.8]))
        got = [(s.start, s.end) for s in enumerate_sliding_proposals(duration, fr, ov)]
        want = brute_sliding(duration, fr, ov)
        slide_ok += len(got) == len(want) and np.allclose(got, want, rtol=0, atol=1e-9 * duration)
    verdict(4, "segment n(n+1)/2 for n=1..10, sliding windows vs exact generator", seg_ok and slide_ok == 50, f"segment {'ok' if seg_ok else 'mismatch'}, sliding {slide_ok}/50")


# 5. metric oracles


def test_criterion_5_metric_oracles():
    def T_(a, b):
        return TemporalSpan(a, b, TIME)

    iou_ok = (
        temporal_iou(T_(2, 9), T_(2, 9)) == 1.0
        and temporal_iou(T_(10, 20), T_(15, 25)) == 5 / 15
        and temporal_iou(T_(0, 5), T_(5, 10)) == 0.0
    )
    rng = np.random.default_rng(5)
    count_ok = True
    for _ in range(100):
        truth, results = {}, []
        for i in range(5):
            a = int(rng.integers(0, 10))
            truth[f"q{i}"] = T_(a, a + int(rng.integers(1, 6)))
            starts = rng.integers(0, 12, 4)
            spans = [T_(int(s), int(s) + int(rng.integers(1, 6))) for s in starts]
            results.append(GroundingResult(f"q{i}", [Proposal(s, np.empty(0), 1 - 0.1 * j) for j, s in enumerate(spans)]))

        def cells(s):
            return set(range(int(s.start), int(s.end)))

        def iou(x, y):
            return len(cells(x) & cells(y)) / len(cells(x) | cells(y))

        for k in (1, 2):
            for th in (0.3, 0.5, 0.7):
                hits = sum(any(iou(p.span, truth[r.query_id]) >= th for p in r.ranked[:k]) for r in results)
                count_ok &= recall_at_k(results, truth, k, th) == 100.0 * hits / 5
        miou = 100.0 * sum(iou(r.ranked[0].span, truth[r.query_id]) for r in results) / 5
        count_ok &= abs(mean_iou(results, truth) - miou) < 1e-12
    r1 = random_ranker_exact(21, 1, 100_000, rng=0)
    r5 = random_ranker_exact(21, 5, 100_000, rng=1)
    mc_ok = abs(r1 - 4.76) <= 0.5 and abs(r5 - 23.8) <= 0.5
    ok = iou_ok and count_ok and mc_ok
    verdict(5, "IoU cases, recall/mIoU counting oracles, random ranker over 21", ok, f"iou {iou_ok}, counting {count_ok}, R@1 {r1:.2f}, R@5 {r5:.2f}")


# 6. synthetic end-to-end


@pytest.fixture(scope="module")
def synthetic_sets(tmp_path_factory):
    def make(C):
        out = {}
        for seed in SEEDS:
            d = tmp_path_factory.mktemp(f"c{C}s{seed}")
            # 300 videos split 2/3, 1/6, 1/6 gives 200 train, 50 val, 50 test
            p = write_synthetic(SyntheticSpec(num_videos=300, num_concepts=C, seed=seed), d)
            out[seed] = (
                load_manifest(p["train"]),
                load_manifest(p["val"], p["val_truth"]),
                load_manifest(p["test"], p["test_truth"]),
                d,
            )
        return out

    return make


def run(cfg, sets, label):
    train_m, val_m, test_m, d = sets
    _, _, report = train_and_evaluate(cfg, train_m, d / label, val_m, test_m)
    return report.r_at(1, 0.7)


def test_criterion_6_synthetic_end_to_end(synthetic_sets):
    t0 = time.time()
    sets = synthetic_sets(8)
    assert all(len(s[0].videos) == 200 and len(s[2].videos) == 50 for s in sets.values())
    full, video_only = [], []
    for seed in SEEDS:
        base = RunConfig(seed=seed, epochs=30, learning_rate=1e-2)
        full.append(run(base, sets[seed], "all"))
        video_only.append(run(ablation_config(base, ("video",)), sets[seed], "video"))
    elapsed = time.time() - t0
    a, v = float(np.mean(full)), float(np.mean(video_only))
    ok = a >= 70.0 and a - v >= 5.0 and elapsed < 600
    detail = f"all losses R@1 {a:.1f} {full}, video only {v:.1f} {video_only}, {elapsed:.0f}s"
    verdict(6, "all losses reach R@1@0.7 >= 70 and beat video-only by >= 5", ok, detail)


def test_criterion_7_sampling_ablation(synthetic_sets):
    # three concepts over 200 videos: a batch of 12 holds several queries of
    # the anchor's own concept, so the top of the ranking is near-duplicates
    sets = synthetic_sets(3)
    wins, pairs = 0, []
    for seed in SEEDS:
        base = RunConfig(seed=seed, epochs=30, learning_rate=1e-2, batch_size=12)
        r3 = run(replace(base, k_top=3), sets[seed], "k3")
        r0 = run(replace(base, k_top=0), sets[seed], "k0")
        pairs.append((r3, r0))
        wins += r3 >= r0
    verdict(7, "k_top=3 R@1 >= k_top=0 R@1 with duplicated concepts", wins >= 4, f"{wins}/5 seeds, (k3, k0) = {pairs}")


# 8. determinism


def test_criterion_8_determinism(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--set", "num_videos", "90", "--set", "seed", "8"]) == 0
    common = ["train", "--train", str(tmp_path / "d/train/manifest.txt"), "--val", str(tmp_path / "d/val/manifest.txt"),
              "--val-truth", str(tmp_path / "d/truth/val.truth"), "--batch-size", "12", "--epochs", "4", "--learning-rate", "0.01"]
    assert main(common + ["--out", str(tmp_path / "a")]) == 0
    assert main(common + ["--out", str(tmp_path / "b")]) == 0
    assert main(common + ["--out", str(tmp_path / "c"), "--resume", str(tmp_path / "a/checkpoints/epoch_0002")]) == 0

    def blobs(run, name):
        d = tmp_path / run / "checkpoints" / name
        return [(d / f).read_bytes() for f in ("checkpoint.txt", "checkpoint.bin", "config.txt")]

    repeat = all(blobs("a", f"epoch_{e:04d}") == blobs("b", f"epoch_{e:04d}") for e in range(5))
    resumed = blobs("a", "epoch_0004") == blobs("c", "epoch_0004")
    verdict(8, "repeat runs and resumed run give bit-identical checkpoints", repeat and resumed, f"repeat {repeat}, resume {resumed}")
