import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone
from sklearn.pipeline import Pipeline

from eventlab.frames import FrameStack
from eventlab.vpr import (DenseSAD, PlaceMatcher, SparseSAD, describe_dense, describe_sparse,
                          distance_matrix, evaluate, pr_auc, pr_curve, ranked_references,
                          recall_at_k, select_active_pixels, top1_correct)

from oracles import auc_oracle, pr_oracle, recall_oracle


def _stack(counts):
    counts = np.asarray(counts, dtype=np.uint16)
    if counts.ndim == 3:
        counts = counts[:, None]
    n = counts.shape[0]
    return FrameStack(counts, np.arange(n) * 10, np.arange(n) * 10 + 10, "fixed_window", 10,
                      "summed", counts.shape[-1], counts.shape[-2])


# --------------------------------------------------------------------------- descriptors

def test_dense_flatten_and_pool():
    st_ = _stack([[[1, 2], [3, 4]]])
    assert describe_dense(st_, 1).tolist() == [[1, 2, 3, 4]]
    assert describe_dense(st_, 2).tolist() == [[2.5]]


def test_dense_matches_block_loop():
    rng = np.random.default_rng(0)
    c = rng.integers(0, 30, size=(3, 64, 64))
    got = describe_dense(_stack(c), 4)
    for f in range(3):
        expect = []
        for by in range(16):
            for bx in range(16):
                block = [int(c[f, y, x]) for y in range(by * 4, by * 4 + 4) for x in range(bx * 4, bx * 4 + 4)]
                expect.append(sum(block) / 16)
        assert got[f].tolist() == expect


def test_dense_partial_blocks_average_present_pixels():
    c = np.arange(15).reshape(1, 3, 5)
    got = describe_dense(_stack(c), 2)
    assert got[0, -1] == pytest.approx(14.0)
    assert got[0, 0] == pytest.approx((0 + 1 + 5 + 6) / 4)


def test_single_varying_pixel_selected_first():
    c = np.full((4, 3, 3), 5)
    c[:, 0, 0] = [0, 9, 0, 9]
    assert select_active_pixels(_stack(c), 1).tolist() == [0]


def test_full_pixel_set():
    rng = np.random.default_rng(1)
    st_ = _stack(rng.integers(0, 5, size=(5, 4, 6)))
    assert sorted(select_active_pixels(st_, 24).tolist()) == list(range(24))


def test_variance_selection_matches_sort_oracle():
    import statistics
    from fractions import Fraction

    rng = np.random.default_rng(2)
    c = rng.integers(0, 6, size=(7, 16, 16))
    got = select_active_pixels(_stack(c), 10).tolist()
    var = []
    for idx in range(256):
        y, x = divmod(idx, 16)
        var.append(statistics.pvariance([Fraction(int(v)) for v in c[:, y, x]]))
    expect = sorted(range(256), key=lambda i: (-var[i], i))[:10]
    assert got == expect


def test_selection_needs_two_frames():
    with pytest.raises(ValueError, match="two frames"):
        select_active_pixels(_stack(np.zeros((1, 2, 2))), 1)


def test_sparse_descriptor_cases():
    rng = np.random.default_rng(3)
    c = rng.integers(0, 9, size=(4, 5, 7))
    st_ = _stack(c)
    assert np.array_equal(describe_sparse(st_, np.arange(35)), describe_dense(st_, 1))
    assert describe_sparse(st_, [12]).shape == (4, 1)
    pix = rng.choice(35, size=9, replace=False)
    got = describe_sparse(st_, pix)
    for f in range(4):
        assert got[f].tolist() == [float(c[f, i // 7, i % 7]) for i in sorted(pix.tolist())]


# --------------------------------------------------------------------------- distances

def test_distance_simple_cases():
    assert distance_matrix([[1.0, 2.0]], [[1.0, 2.0]]).d.tolist() == [[0.0]]
    assert distance_matrix([[0.0, 0.0]], [[1.0, 1.0]], "sad").d[0, 0] == 2.0
    assert distance_matrix([[0.0, 0.0]], [[1.0, 1.0]], "l2").d[0, 0] == pytest.approx(math.sqrt(2))
    assert distance_matrix([[0.0, 0.0]], [[1.0, 1.0]], "cosine").d[0, 0] == 1.0


@pytest.mark.parametrize("metric", ["sad", "l2", "cosine"])
def test_distance_matches_double_loop(metric):
    rng = np.random.default_rng(4)
    ref, qry = rng.random((30, 12)), rng.random((40, 12))
    got = distance_matrix(ref, qry, metric).d
    assert got.shape == (40, 30)
    for i in range(40):
        for j in range(30):
            a, b = qry[i].tolist(), ref[j].tolist()
            if metric == "sad":
                e = sum(abs(u - v) for u, v in zip(a, b))
            elif metric == "l2":
                e = math.sqrt(sum((u - v) ** 2 for u, v in zip(a, b)))
            else:
                e = 1 - sum(u * v for u, v in zip(a, b)) / math.sqrt(sum(u * u for u in a) * sum(v * v for v in b))
            assert got[i, j] == pytest.approx(e, rel=1e-12, abs=1e-15)


def test_distance_errors():
    with pytest.raises(ValueError, match="mismatch"):
        distance_matrix(np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        distance_matrix(np.array([[np.nan]]), np.zeros((1, 1)))


# --------------------------------------------------------------------------- recall / PR

def test_recall_perfect_and_total_miss():
    d = 1 - np.eye(5)
    assert recall_at_k(d, np.eye(5), 1) == 1.0
    assert recall_at_k(d, np.roll(np.eye(5), 1, axis=1), 1) == 0.0


def test_recall_ignores_queries_without_positives():
    d = 1 - np.eye(3)
    gt = np.eye(3)
    gt[2] = 0
    assert recall_at_k(d, gt, 1) == 1.0
    with pytest.raises(ValueError, match="undefined"):
        recall_at_k(d, np.zeros((3, 3)), 1)


def test_ties_go_to_lowest_index():
    d = np.zeros((1, 4))
    assert ranked_references(d).tolist() == [[0, 1, 2, 3]]
    assert recall_at_k(d, [[0, 0, 0, 1]], 3) == 0.0
    assert top1_correct(d, [[1, 0, 0, 0]]).tolist() == [1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 5, 10]))
def test_recall_matches_oracle(seed, k):
    rng = np.random.default_rng(seed)
    d = rng.integers(0, 20, size=(20, 20)).astype(float)
    gt = np.abs(np.subtract.outer(np.arange(20), np.arange(20))) <= 1
    gt[rng.random(20) < 0.2] = False
    if not gt.any():
        gt[0, 0] = True
    assert recall_at_k(d, gt, k) == recall_oracle(d.tolist(), gt.tolist(), k)


def test_pr_curve_perfect():
    c = pr_curve(1 - np.eye(4), np.eye(4))
    assert c.points()[-1] == (1.0, 1.0) and all(p == 1.0 for _, p in c.points())
    assert pr_auc(c) == 1.0


def test_pr_curve_total_failure():
    c = pr_curve(1 - np.eye(4), np.roll(np.eye(4), 1, axis=1))
    assert all(p == 0.0 for r, p in c.points() if r > 0) and c.tp.sum() == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pr_curve_matches_threshold_enumeration(seed):
    rng = np.random.default_rng(seed)
    d = rng.integers(0, 15, size=(25, 25)).astype(float)
    gt = np.abs(np.subtract.outer(np.arange(25), np.arange(25))) <= 2
    gt[rng.random(25) < 0.3] = False
    if not gt.any():
        gt[3, 3] = True
    c = pr_curve(d, gt)
    th, tp, fp, gtp = pr_oracle(d.tolist(), gt.tolist())
    assert c.thresholds.tolist() == th and c.tp.tolist() == tp and c.fp.tolist() == fp and c.gtp == gtp


def test_auc_unit_square_and_triangle():
    assert pr_auc([(0, 1), (1, 1)]) == 1.0
    assert pr_auc([(0, 1), (1, 0)]) == 0.5


def test_auc_matches_trapezoid_oracle():
    rng = np.random.default_rng(6)
    pts = [(0.0, 1.0)] + sorted(zip(rng.random(30).tolist(), rng.random(30).tolist()))
    assert pr_auc(pts) == pytest.approx(auc_oracle(pts), rel=1e-12)


def test_evaluate_report_shape():
    rep = evaluate(1 - np.eye(6), np.eye(6))
    d = rep.to_dict()
    assert d["recall_at"] == {"1": 1.0, "10": 1.0, "5": 1.0} and d["gtp"] == 6
    assert d["pr_curve"][0] == [0.0, 1.0]


# --------------------------------------------------------------------------- estimators

def test_estimators_follow_sklearn_contract():
    rng = np.random.default_rng(7)
    ref = _stack(rng.integers(0, 4, size=(6, 8, 8)))
    for est in (DenseSAD(downsample=2), SparseSAD(n_pixels=5)):
        assert clone(est).get_params() == est.get_params()
        pipe = Pipeline([("describe", est), ("match", PlaceMatcher("sad"))]).fit(ref)
        assert pipe.predict(ref).tolist() == list(range(6))
        assert pipe.score(ref, np.eye(6)) == 1.0


def test_sparse_reuses_reference_pixels():
    rng = np.random.default_rng(8)
    ref = _stack(rng.integers(0, 4, size=(6, 8, 8)))
    qry = _stack(rng.integers(0, 4, size=(3, 8, 8)))
    est = SparseSAD(n_pixels=0.1).fit(ref)
    assert len(est.pixels_) == 6
    assert np.array_equal(est.transform(qry), describe_sparse(qry, est.pixels_))


def test_matcher_kneighbors():
    m = PlaceMatcher("l2").fit(np.array([[0.0], [10.0], [3.0]]))
    dist, idx = m.kneighbors(np.array([[2.0]]), 2)
    assert idx.tolist() == [[2, 0]] and dist.tolist() == [[1.0, 2.0]]
