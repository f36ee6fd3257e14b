import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from eventlab.slam import (DegenerateAlignmentError, Trajectory, TrajectoryAligner, accuracy,
                           align_se3, associate, box_summary, eval_trials, load_trajectory,
                           rmse_ate, save_trajectory)

from oracles import greedy_association_oracle


def _traj(t, pos):
    return Trajectory(np.asarray(t), np.asarray(pos, dtype=float))


def test_identity_pairing():
    t = [0, 10, 20]
    assert associate(_traj(t, np.zeros((3, 3))), _traj(t, np.zeros((3, 3)))).tolist() == [[0, 0], [1, 1], [2, 2]]


def test_nearest_within_tolerance():
    est = _traj([0, 100_000], np.zeros((2, 3)))
    gt = _traj([49_000], np.zeros((1, 3)))
    assert associate(est, gt, 50_000).tolist() == [[0, 0]]


def test_no_pairs_error():
    with pytest.raises(ValueError, match="no pose pairs"):
        associate(_traj([0], np.zeros((1, 3))), _traj([10_000], np.zeros((1, 3))), 5)


@pytest.mark.parametrize("seed", range(5))
def test_association_matches_greedy_oracle(seed):
    rng = np.random.default_rng(seed)
    gt_t = np.unique(rng.integers(0, 1_000_000, size=60))
    est_t = np.unique(gt_t[rng.integers(0, len(gt_t), size=50)] + rng.integers(-20_000, 20_000, size=50))
    est_t = est_t[est_t >= 0]
    got = associate(_traj(est_t, np.zeros((len(est_t), 3))), _traj(gt_t, np.zeros((len(gt_t), 3))), 15_000)
    assert [tuple(p) for p in got.tolist()] == greedy_association_oracle(est_t.tolist(), gt_t.tolist(), 15_000)


def test_alignment_identity():
    p = np.random.default_rng(0).random((10, 3))
    a = align_se3(p, p)
    assert np.allclose(a.rotation, np.eye(3), atol=1e-12) and np.allclose(a.translation, 0, atol=1e-12)


def test_alignment_recovers_inverse_transform():
    rng = np.random.default_rng(1)
    gt = rng.normal(size=(20, 3))
    r = Rotation.random(random_state=2).as_matrix()
    t = rng.normal(size=3)
    est = gt @ r.T + t
    a = align_se3(est, gt)
    assert np.allclose(a.rotation, r.T, atol=1e-10)
    assert np.allclose(a.translation, -r.T @ t, atol=1e-10)
    assert rmse_ate(est, gt, a) / 100 <= 1e-9


def test_planar_square_quarter_turn():
    sq = np.array([[1.0, 0, 0], [0, 1.0, 0], [-1.0, 0, 0], [0, -1.0, 0]])
    rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    a = align_se3(sq, sq @ rz.T)
    assert np.allclose(a.rotation, rz, atol=1e-12)
    assert np.linalg.det(a.rotation) == pytest.approx(1.0)


def test_reflection_is_not_returned():
    rng = np.random.default_rng(3)
    gt = rng.normal(size=(10, 3))
    est = gt * np.array([1, 1, -1])
    assert np.linalg.det(align_se3(est, gt).rotation) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("pts", [np.zeros((5, 3)), np.outer(np.arange(5.0), [1, 2, 3]), np.zeros((2, 3))])
def test_degenerate_alignment(pts):
    with pytest.raises(DegenerateAlignmentError):
        align_se3(pts, pts)


def test_alignment_is_least_squares_optimal():
    rng = np.random.default_rng(4)
    gt = rng.normal(size=(30, 3))
    est = gt + rng.normal(scale=0.05, size=gt.shape)
    a = align_se3(est, gt)
    base = rmse_ate(est, gt, a)
    for _ in range(50):
        dr = Rotation.from_rotvec(rng.normal(scale=1e-3, size=3)).as_matrix()
        perturbed = type(a)(dr @ a.rotation, a.translation + rng.normal(scale=1e-3, size=3))
        assert rmse_ate(est, gt, perturbed) >= base - 1e-12


def test_rmse_cases():
    p = np.random.default_rng(5).random((5, 3))
    a = align_se3(p, p)
    assert rmse_ate(p, p, a) == pytest.approx(0.0, abs=1e-10)
    ident = type(a)(np.eye(3), np.zeros(3))
    est = np.zeros((2, 3))
    gt = np.array([[0.03, 0, 0], [0, 0.04, 0]])
    assert rmse_ate(est, gt, ident) == pytest.approx(math.sqrt((9 + 16) / 2), rel=1e-12)


def test_rmse_matches_residual_loop():
    rng = np.random.default_rng(6)
    gt = rng.normal(size=(1000, 3))
    est = gt + rng.normal(scale=0.01, size=gt.shape)
    a = align_se3(est, gt)
    total = 0.0
    for e, g in zip(est.tolist(), gt.tolist()):
        m = [sum(a.rotation[i, k] * e[k] for k in range(3)) + a.translation[i] for i in range(3)]
        total += sum((g[i] - m[i]) ** 2 for i in range(3))
    assert rmse_ate(est, gt, a) == pytest.approx(math.sqrt(total / 1000) * 100, rel=1e-12)


@pytest.mark.parametrize("rmse, acc", [(2.0, 0.5), (0.5, 2.0), (3.536, 1 / 3.536)])
def test_accuracy(rmse, acc):
    assert accuracy(rmse) == pytest.approx(acc)
    assert accuracy(3.536) == pytest.approx(0.2828, abs=1e-4)


def test_accuracy_zero_is_error():
    with pytest.raises(ValueError, match="undefined"):
        accuracy(0.0)


def test_box_summary_cases():
    assert box_summary([0.0] * 5) == {"min": 0.0, "q1": 0.0, "median": 0.0, "q3": 0.0, "max": 0.0}
    assert set(box_summary([2.5]).values()) == {2.5}
    vals = [3.0, 1.0, 4.0, 1.5, 9.0]
    s = sorted(vals)
    # n = 5: quartile positions 1, 2, 3 fall on order statistics exactly
    assert box_summary(vals) == {"min": s[0], "q1": s[1], "median": s[2], "q3": s[3], "max": s[4]}


def test_trials_and_io(tmp_path):
    rng = np.random.default_rng(7)
    t = np.arange(50) * 10_000
    gt = Trajectory(t, rng.normal(size=(50, 3)))
    save_trajectory(gt, tmp_path / "gt.csv")
    back = load_trajectory(tmp_path / "gt.csv")
    assert np.array_equal(back.t_us, t) and np.array_equal(back.positions, gt.positions)
    trials = [Trajectory(t, gt.positions + rng.normal(scale=0.01, size=(50, 3))) for _ in range(3)]
    results, box = eval_trials(trials, gt)
    assert box["min"] == min(r.rmse_ate_cm for r in results) and all(r.pairs == 50 for r in results)


def test_trajectory_loader_errors(tmp_path):
    (tmp_path / "bad.csv").write_text("0.0,1,2,3\n")
    with pytest.raises(ValueError, match=":1:"):
        load_trajectory(tmp_path / "bad.csv")
    (tmp_path / "q.csv").write_text("0.0 0 0 0 0 0 0 2\n")
    with pytest.raises(ValueError, match="unit"):
        load_trajectory(tmp_path / "q.csv")
    assert load_trajectory(tmp_path / "q.csv", normalize_quaternions=True).orientations[0, 3] == 1.0


def test_aligner_estimator():
    rng = np.random.default_rng(8)
    t = np.arange(20) * 1000
    gt = Trajectory(t, rng.normal(size=(20, 3)))
    est = Trajectory(t, gt.positions + 1.0)
    al = TrajectoryAligner().fit(est, gt)
    assert np.allclose(al.transform(est), gt.positions) and al.score(est, gt) == pytest.approx(0, abs=1e-9)
