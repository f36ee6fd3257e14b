"""Trajectory scoring: timestamp association, rigid SE(3) alignment and RMSE-ATE."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_int
from .events import parse_seconds_us

DEFAULT_MAX_DT_US = 10_000
TRAJECTORY_COLUMNS = ("t_seconds", "px", "py", "pz", "qx", "qy", "qz", "qw")


class DegenerateAlignmentError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    t_us: np.ndarray
    positions: np.ndarray
    orientations: np.ndarray | None = None  # (n, 4) as qx, qy, qz, qw

    def __post_init__(self):
        t = np.asarray(self.t_us, dtype=np.int64)
        pos = np.asarray(self.positions, dtype=np.float64)
        if t.ndim != 1 or pos.shape != (t.size, 3):
            raise ValueError("trajectory needs n timestamps and an (n, 3) position array")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        if self.orientations is not None:
            q = np.asarray(self.orientations, dtype=np.float64)
            if q.shape != (t.size, 4):
                raise ValueError("orientations must be (n, 4) quaternions")
            if np.any(np.abs(np.linalg.norm(q, axis=1) - 1.0) > 1e-9):
                raise ValueError("orientation quaternions must be unit norm")
            object.__setattr__(self, "orientations", q)
        object.__setattr__(self, "t_us", t)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return int(self.t_us.size)


@dataclass(frozen=True)
class AlignmentResult:
    rotation: np.ndarray
    translation: np.ndarray
    rmse_ate_cm: float | None = None
    pairs: int = 0

    @property
    def accuracy_inv_cm(self):
        return accuracy(self.rmse_ate_cm)

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation


def load_trajectory(path, normalize_quaternions=False) -> Trajectory:
    """Read ``t_seconds,px,py,pz,qx,qy,qz,qw`` rows (comma or whitespace separated).

    Lines starting with ``#`` and a header row are skipped.
    """
    ts, rows = [], []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = [p for p in s.replace(",", " ").split()]
            if parts[0] == "t_seconds":
                continue
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                ts.append(parse_seconds_us(parts[0]))
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 7)
    q = arr[:, 3:]
    if normalize_quaternions and len(q):
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
    return Trajectory(np.asarray(ts, dtype=np.int64), arr[:, :3], q)


def save_trajectory(traj: Trajectory, path):
    q = traj.orientations
    if q is None:
        q = np.tile([0.0, 0.0, 0.0, 1.0], (len(traj), 1))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for t, p, qq in zip(traj.t_us.tolist(), traj.positions.tolist(), q.tolist()):
            w.writerow([f"{t // 1_000_000}.{t % 1_000_000:06d}", *map(repr, p), *map(repr, qq)])


def associate(est: Trajectory, gt: Trajectory, max_dt_us: int = DEFAULT_MAX_DT_US):
    """Greedy one-to-one pairing in ascending ``|dt|`` (ties: lower est, then gt index).

    Returns an ``(m, 2)`` int array of (est index, gt index) sorted by est index.
    """
    if not len(est) or not len(gt):
        raise ValueError("both trajectories must be non-empty")
    max_dt_us = check_int(max_dt_us, "max_dt_us", 0)
    lo = np.searchsorted(gt.t_us, est.t_us - max_dt_us, side="left")
    hi = np.searchsorted(gt.t_us, est.t_us + max_dt_us, side="right")
    counts = hi - lo
    ei = np.repeat(np.arange(len(est)), counts)
    gi = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)]) if counts.sum() else np.zeros(0, np.int64)
    dt = np.abs(est.t_us[ei] - gt.t_us[gi])
    order = np.lexsort((gi, ei, dt))
    used_e = np.zeros(len(est), dtype=bool)
    used_g = np.zeros(len(gt), dtype=bool)
    pairs = []
    for k in order:
        e, g = ei[k], gi[k]
        if not used_e[e] and not used_g[g]:
            used_e[e] = used_g[g] = True
            pairs.append((e, g))
    if not pairs:
        raise ValueError(f"no pose pairs within {max_dt_us} us")
    pairs = np.asarray(sorted(pairs), dtype=np.int64)
    return pairs


def align_se3(est_points, gt_points) -> AlignmentResult:
    """Least-squares rigid transform mapping ``est_points`` onto ``gt_points`` (no scale).

    Cross-covariance SVD with a determinant sign correction so the result is
    always a proper rotation.
    """
    est = np.asarray(est_points, dtype=np.float64)
    gt = np.asarray(gt_points, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise ValueError("point sets must both be (n, 3)")
    if est.shape[0] < 3:
        raise DegenerateAlignmentError(f"need at least 3 pairs, got {est.shape[0]}")
    mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
    cov = (gt - mu_g).T @ (est - mu_e) / est.shape[0]
    u, s, vt = np.linalg.svd(cov)
    scale = max(s[0], np.finfo(float).tiny)
    if s[1] <= 1e-12 * scale:
        raise DegenerateAlignmentError(
            "degenerate configuration: cross-covariance rank < 2 (points collinear or coincident)")
    sign = np.sign(np.linalg.det(u @ vt)) or 1.0
    rotation = u @ np.diag([1.0, 1.0, sign]) @ vt
    translation = mu_g - rotation @ mu_e
    return AlignmentResult(rotation, translation, pairs=est.shape[0])


def rmse_ate(est_points, gt_points, alignment: AlignmentResult) -> float:
    """Root-mean-square position residual after alignment, in centimetres."""
    resid = np.asarray(gt_points) - alignment.apply(est_points)
    return float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))) * 100.0)


def accuracy(rmse_ate_cm) -> float:
    """Inverse RMSE-ATE in 1/cm."""
    if rmse_ate_cm is None or rmse_ate_cm <= 0:
        raise ValueError("accuracy is undefined for zero RMSE-ATE (perfect alignment)")
    return 1.0 / rmse_ate_cm


def evaluate_trajectory(est: Trajectory, gt: Trajectory, max_dt_us=DEFAULT_MAX_DT_US) -> AlignmentResult:
    pairs = associate(est, gt, max_dt_us)
    e, g = est.positions[pairs[:, 0]], gt.positions[pairs[:, 1]]
    align = align_se3(e, g)
    return AlignmentResult(align.rotation, align.translation, rmse_ate(e, g, align), len(pairs))


def box_summary(values):
    """min, Q1, median, Q3, max with linear interpolation between order statistics."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("no values to summarise")
    q = np.quantile(v, [0.25, 0.5, 0.75])
    return {"min": float(v[0]), "q1": float(q[0]), "median": float(q[1]),
            "q3": float(q[2]), "max": float(v[-1])}


def eval_trials(trials, gt: Trajectory, max_dt_us=DEFAULT_MAX_DT_US):
    """Score each trial trajectory; returns (per-trial results, box summary of RMSE-ATE)."""
    trials = list(trials)
    if not trials:
        raise ValueError("at least one trial is required")
    results = [evaluate_trajectory(t, gt, max_dt_us) for t in trials]
    return results, box_summary([r.rmse_ate_cm for r in results])


class TrajectoryAligner(BaseEstimator):
    """sklearn-style wrapper: ``fit(est, gt)`` learns the SE(3) alignment.

    ``transform`` maps estimated positions into the ground-truth frame and
    ``score`` returns the negated RMSE-ATE in centimetres (higher is better).
    """

    def __init__(self, max_dt_us=DEFAULT_MAX_DT_US):
        self.max_dt_us = max_dt_us

    def fit(self, X: Trajectory, y: Trajectory):
        res = evaluate_trajectory(X, y, self.max_dt_us)
        self.rotation_, self.translation_ = res.rotation, res.translation
        self.rmse_ate_cm_, self.n_pairs_ = res.rmse_ate_cm, res.pairs
        return self

    def transform(self, X):
        pts = X.positions if isinstance(X, Trajectory) else np.asarray(X, dtype=np.float64)
        return pts @ self.rotation_.T + self.translation_

    def score(self, X, y):
        pairs = associate(X, y, self.max_dt_us)
        resid = y.positions[pairs[:, 1]] - self.transform(X.positions[pairs[:, 0]])
        return -float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))) * 100.0)
