import math

import numpy as np
import pytest

from eventlab.ground_truth import (GroundTruthMatrix, PlaceIndex, PositionTrack, build_gt_position,
                                   build_gt_time, derive_headings, gt_tolerance_in_places,
                                   haversine_m, load_gt, load_position_track, save_gt,
                                   save_position_track)


def test_identical_times_zero_tolerance_is_identity():
    p = PlaceIndex(np.array([0, 5, 9, 20]))
    assert np.array_equal(build_gt_time(p, p, 0).matrix, np.eye(4, dtype=bool))


def test_one_second_spacing_three_hundred_ms_is_identity():
    p = PlaceIndex(np.arange(10) * 1_000_000)
    gt = build_gt_time(p, p, 300_000)
    assert np.array_equal(gt.matrix, np.eye(10, dtype=bool)) and gt.gtp == 10


@pytest.mark.parametrize("seed", range(5))
def test_time_gt_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    ref = np.sort(rng.integers(0, 10_000_000, size=40))
    qry = np.sort(ref[rng.integers(0, 40, size=30)] + rng.integers(-500_000, 500_000, size=30))
    qry = np.clip(qry, 0, None)
    tol = int(rng.integers(0, 400_000))
    gt = build_gt_time(PlaceIndex(ref), PlaceIndex(qry), tol)
    for i, q in enumerate(qry.tolist()):
        for j, r in enumerate(ref.tolist()):
            assert gt.matrix[i, j] == (abs(q - r) <= tol)


def test_coincident_points_all_ones():
    pos = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    p = PlaceIndex(np.arange(3), pos, "planar")
    assert build_gt_position(p, p, 10.0).matrix.all()


def test_reverse_direction_clears_opposed_headings():
    pos = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    ref = PlaceIndex(np.arange(3), pos, "planar", headings=np.array([90.0, 90.0, 90.0]))
    qry = PlaceIndex(np.arange(3), pos, "planar", headings=np.array([270.0, 270.0, 270.0]))
    assert not build_gt_position(ref, qry, 10.0, ["reverse_direction"]).matrix.any()
    assert build_gt_position(ref, qry, 10.0).matrix.all()


def test_reverse_direction_threshold_inclusive():
    pos = np.zeros((1, 2))
    ref = PlaceIndex([0], pos, "planar", headings=[350.0])
    assert build_gt_position(ref, PlaceIndex([0], pos, "planar", headings=[80.0]), 1,
                             ["reverse_direction"]).matrix.all()
    assert not build_gt_position(ref, PlaceIndex([0], pos, "planar", headings=[81.0]), 1,
                                 ["reverse_direction"]).matrix.any()


@pytest.mark.parametrize("seed", range(3))
def test_planar_gt_matches_distance_loop(seed):
    rng = np.random.default_rng(seed)
    r = rng.uniform(0, 200, size=(50, 2))
    q = rng.uniform(0, 200, size=(50, 2))
    gt = build_gt_position(PlaceIndex(np.arange(50), r, "planar"),
                           PlaceIndex(np.arange(50), q, "planar"), 25.0)
    for i in range(50):
        for j in range(50):
            d = math.sqrt((q[i, 0] - r[j, 0]) ** 2 + (q[i, 1] - r[j, 1]) ** 2)
            assert gt.matrix[i, j] == (d <= 25.0)


def test_endpoint_overlap_filter():
    n = 40
    pos = np.zeros((n, 2))
    p = PlaceIndex(np.arange(n), pos, "planar", headings=np.zeros(n))
    m = build_gt_position(p, p, 1.0, ["endpoint_overlap"]).matrix
    z = math.ceil(0.05 * n)  # 2 places at each end
    for i in range(n):
        for j in range(n):
            cross = (i >= n - z and j < z) or (i < z and j >= n - z)
            assert m[i, j] == (not cross)


def test_haversine_one_degree_latitude():
    assert haversine_m(0.0, 0.0, 1.0, 0.0) == pytest.approx(111_195, rel=1e-3)


def test_latlon_gt():
    ref = PlaceIndex([0, 1], [[-27.47, 153.02], [-27.48, 153.02]], "latlon")
    qry = PlaceIndex([0], [[-27.47001, 153.02]], "latlon")
    assert build_gt_position(ref, qry, 5.0).matrix.tolist() == [[True, False]]


def test_mixed_coordinates_rejected():
    a = PlaceIndex([0], [[0.0, 0.0]], "planar")
    b = PlaceIndex([0], [[0.0, 0.0]], "latlon")
    with pytest.raises(ValueError, match="mixed"):
        build_gt_position(a, b, 1.0)


def test_derived_headings_planar_compass():
    h = derive_headings(np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 1.0]]), "planar")
    assert h.tolist() == [0.0, 0.0, 90.0, 90.0]


@pytest.mark.parametrize("places, spacing, expected", [(3, 1_000_000, 3_000_000), (0, 777, 0),
                                                       (5, 100_000, 500_000)])
def test_tolerance_in_places(places, spacing, expected):
    assert gt_tolerance_in_places(places, spacing) == expected


def test_place_index_validation():
    with pytest.raises(ValueError):
        PlaceIndex([3, 1])
    with pytest.raises(ValueError):
        PlaceIndex([0, 1], [[0.0, 0.0]], "planar")


def test_gt_persistence_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    m = rng.random((13, 21)) < 0.3
    m[4] = False
    gt = GroundTruthMatrix(m, "time_us", 300_000, (), np.arange(13), np.arange(21))
    save_gt(gt, tmp_path / "g.gt")
    assert (tmp_path / "g.gt").stat().st_size == 13 * 3
    back = load_gt(tmp_path / "g.gt")
    assert np.array_equal(back.matrix, m) and back.gtp == gt.gtp and 4 in back.empty_rows


def test_position_track_io_and_lookup(tmp_path):
    tr = PositionTrack(np.array([0, 100, 200]), np.array([[0.0, 0.0], [1.0, 0.5], [2.0, 1.0]]), "planar")
    save_position_track(tr, tmp_path / "p.csv")
    back = load_position_track(tmp_path / "p.csv")
    assert back.coords == "planar" and np.array_equal(back.positions, tr.positions)
    assert back.at([49, 50, 51, 500]).tolist() == [[0.0, 0.0], [0.0, 0.0], [1.0, 0.5], [2.0, 1.0]]
    (tmp_path / "bad.csv").write_text("time,a,b\n")
    with pytest.raises(ValueError, match="header"):
        load_position_track(tmp_path / "bad.csv")
