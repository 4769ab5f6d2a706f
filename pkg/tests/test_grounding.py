import math

import numpy as np
import pytest

from wsra.grounding import (
    ProposalSet,
    build_proposals,
    contrast_scores,
    covered_rows,
    didemo_feature_augment,
    enumerate_segment_proposals,
    enumerate_sliding_proposals,
    ground,
    pool_proposal_feature,
    pool_spans,
    proposal_scores,
    read_predictions,
    write_predictions,
)
from wsra.scoring import WsraModel
from wsra.spans import SNIPPET, TIME, TemporalSpan

from helpers import brute_segments, brute_sliding, loop_score, random_model




def test_segment_counts():
    assert len(enumerate_segment_proposals(6)) == 21
    for n in range(1, 11):
        spans = enumerate_segment_proposals(n)
        assert len(spans) == n * (n + 1) // 2
        assert [(int(s.start), int(s.end)) for s in spans] == brute_segments(n)
        assert all(s.mode == SNIPPET for s in spans)
    with pytest.raises(ValueError):
        enumerate_segment_proposals(0)


def test_sliding_hand_examples():
    spans = enumerate_sliding_proposals(10.0, (0.5,), 0.8)
    np.testing.assert_allclose([(s.start, s.end) for s in spans], [(k, k + 5) for k in range(6)], atol=1e-12)
    for f in (0.2, 0.3, 0.4, 0.5, 0.7, 1.0):
        tiles = enumerate_sliding_proposals(10.0, (f,), 0.0)
        assert len(tiles) == math.ceil(1 / f - 1e-9)
        assert tiles[-1].end == 10.0
    with pytest.raises(ValueError, match="stride"):
        enumerate_sliding_proposals(10.0, (0.5,), 1.0)
    with pytest.raises(ValueError):
        enumerate_sliding_proposals(10.0, (1.5,), 0.5)


def test_sliding_matches_exact_oracle():
    cases = [(30.0, (0.2, 0.3, 0.4, 0.5), 0.8)]
    rng = np.random.default_rng(0)
    grid = [0.1, 0.2, 0.25, 0.3, 0.4, 0.5, 0.6, 0.75, 1.0]
    for _ in range(50):
        fr = tuple(sorted(rng.choice(grid, size=rng.integers(1, 4), replace=False)))
        cases.append((float(rng.integers(4, 200)) / 2, fr, float(rng.choice([0.0, 0.25, 0.5, 0.8]))))
    for duration, fr, ov in cases:
        got = [(s.start, s.end) for s in enumerate_sliding_proposals(duration, fr, ov)]
        want = brute_sliding(duration, fr, ov)
        assert len(got) == len(want), (duration, fr, ov)
        np.testing.assert_allclose(got, want, atol=1e-9 * duration)
        assert all(0 <= a < b <= duration for a, b in got)


def loop_pool(V, span, sd):
    rows = [V[i] for i in range(V.shape[0]) if span.start <= (i + 0.5) * sd < span.end]
    return sum(rows) / len(rows)


def test_pooling_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        T, sd = int(rng.integers(2, 12)), float(rng.choice([0.5, 1.0, 2.0]))
        V = rng.standard_normal((T, 4))
        a = rng.uniform(0, T * sd - 0.6 * sd)
        b = rng.uniform(a + 0.6 * sd, T * sd + 1e-9)
        span = TemporalSpan(a, b, TIME)
        if covered_rows(span, T, sd)[1] <= covered_rows(span, T, sd)[0]:
            continue
        np.testing.assert_allclose(pool_proposal_feature(V, span, sd), loop_pool(V, span, sd), atol=1e-12)
    V = rng.standard_normal((5, 3))
    np.testing.assert_array_equal(pool_proposal_feature(V, TemporalSpan(2, 3, SNIPPET)), V[2])
    np.testing.assert_allclose(pool_proposal_feature(V, TemporalSpan(0, 5, SNIPPET)), V.mean(axis=0), atol=1e-15)
    with pytest.raises(ValueError, match="covers no snippet"):
        pool_proposal_feature(V, TemporalSpan(0.1, 0.4, TIME))


def test_pool_spans_matches_single_span_pooling():
    rng = np.random.default_rng(2)
    V = rng.standard_normal((7, 5))
    spans = enumerate_segment_proposals(7)
    np.testing.assert_allclose(pool_spans(V, spans), [pool_proposal_feature(V, s) for s in spans], atol=1e-12)


def test_didemo_augment():
    u = np.array([1.0, -2.0, 0.5])
    aug = didemo_feature_augment(np.tile(u, (6, 1)))
    assert aug.shape == (21, 6)
    np.testing.assert_allclose(aug, np.tile(np.concatenate([u, u]), (21, 1)), atol=1e-15)
    rng = np.random.default_rng(3)
    V = rng.standard_normal((6, 4))
    local = np.array([V[a:b].mean(axis=0) for a, b in brute_segments(6)])
    want = np.concatenate([np.tile(local.mean(axis=0), (21, 1)), local], axis=1)
    np.testing.assert_allclose(didemo_feature_augment(V), want, atol=1e-12)
    with pytest.raises(ValueError, match="6 segments"):
        didemo_feature_augment(V[:5])


def test_build_proposals_modes():
    rng = np.random.default_rng(4)
    V = rng.standard_normal((10, 3))
    seg = build_proposals(V, "segment")
    assert len(seg) == 55 and seg.rows.shape == (55, 2)
    sl = build_proposals(V, "sliding", snippet_duration=2.0)
    assert all(s.mode == TIME and s.end <= 20.0 for s in sl.spans)
    dd = build_proposals(rng.standard_normal((21, 6)), "didemo")
    assert len(dd) == 21 and dd.rows is None
    with pytest.raises(ValueError, match="21"):
        build_proposals(V, "didemo")
    with pytest.raises(ValueError, match="unknown dataset mode"):
        build_proposals(V, "charades")


def test_contrast_scores_oracle():
    rng = np.random.default_rng(5)
    for _ in range(30):
        T = int(rng.integers(1, 9))
        s = rng.random(T)
        rows = np.array(brute_segments(T))
        got = contrast_scores(s, rows)
        for (a, b), g in zip(rows, got):
            outside = [s[i] for i in range(T) if not a <= i < b]
            out_mean = sum(outside) / len(outside) if outside else 0.0
            assert g == pytest.approx((1 + s[a:b].mean() - out_mean) / 2, abs=1e-12)


def test_proposal_scores_against_loop():
    model = random_model(6, d_v=3, d_t=4, scale=0.5)
    rng = np.random.default_rng(6)
    V, q = rng.standard_normal((5, 3)), rng.standard_normal(4)
    props = build_proposals(V, "segment")
    want = [loop_score(model.phi_snippet, x, q) for x in props.features]
    np.testing.assert_allclose(proposal_scores(model, props, q), want, atol=1e-12)
    per = [loop_score(model.phi_video, x, q) for x in V]
    got = proposal_scores(model, props, q, head="video", scoring="contrast")
    np.testing.assert_allclose(got, contrast_scores(np.array(per), props.rows), atol=1e-12)
    with pytest.raises(ValueError, match="unknown head"):
        proposal_scores(model, props, q, head="audio")
    with pytest.raises(ValueError, match="per-snippet"):
        proposal_scores(model, ProposalSet(props.spans, props.features), q, scoring="contrast")


def test_ground_single_proposal_and_ordering():
    model = random_model(7, d_v=3, d_t=4, scale=0.5)
    rng = np.random.default_rng(7)
    V, q = rng.standard_normal((6, 3)), rng.standard_normal(4)
    one = ProposalSet([TemporalSpan(1, 2, SNIPPET)], V[1:2])
    assert ground(model, "q", q, one).top.span == TemporalSpan(1, 2, SNIPPET)
    props = build_proposals(V, "segment")
    res = ground(model, "q", q, props, top_k=None)
    scores = [p.score for p in res.ranked]
    assert all(x >= y for x, y in zip(scores, scores[1:]))
    assert all(0 < s < 1 for s in scores)
    assert len(ground(model, "q", q, props, top_k=5).ranked) == 5
    perm = rng.permutation(len(props))
    shuffled = ProposalSet([props.spans[i] for i in perm], props.features[perm])
    assert [p.span for p in ground(model, "q", q, shuffled, top_k=None).ranked] == [p.span for p in res.ranked]
    again = ground(model, "q", q, props, top_k=None)
    assert [p.score for p in again.ranked] == scores
    with pytest.raises(ValueError, match="no proposals"):
        ground(model, "q", q, ProposalSet([], np.empty((0, 3))))


def test_ties_go_to_earlier_start_then_end():
    model = WsraModel.init(3, 4, zero=True)
    props = build_proposals(np.ones((4, 3)), "segment")
    res = ground(model, "q", np.ones(4), props, top_k=None)
    assert [(p.span.start, p.span.end) for p in res.ranked] == brute_segments(4)


def test_predictions_round_trip(tmp_path):
    model = random_model(8, d_v=3, d_t=4)
    rng = np.random.default_rng(8)
    results = []
    for i in range(3):
        props = build_proposals(rng.standard_normal((8, 3)), "sliding", snippet_duration=1.3)
        results.append(ground(model, f"q{i}", rng.standard_normal(4), props, top_k=4))
    write_predictions(tmp_path / "p.txt", results)
    back = read_predictions(tmp_path / "p.txt")
    for r, b in zip(results, back):
        assert r.query_id == b.query_id
        assert [p.span for p in r.ranked] == [p.span for p in b.ranked]
        np.testing.assert_allclose([p.score for p in b.ranked], [p.score for p in r.ranked], atol=5e-7)
    first = (tmp_path / "p.txt").read_text().splitlines()[0].split("\t")
    assert first[1] == TIME and len(first[2].split()[2].split(".")[1]) == 6
