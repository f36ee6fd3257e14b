"""Place-recognition baselines, distance matrices and Recall@K / PR-AUC scoring.

Ties are always broken towards the lowest index so results are reproducible
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_choice, check_finite_matrix, check_int
from .frames import FrameStack
from .ground_truth import GroundTruthMatrix

METRICS = ("sad", "l2", "cosine")
DEFAULT_KS = (1, 5, 10)


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    d: np.ndarray
    metric: str = "sad"

    def __post_init__(self):
        d = check_finite_matrix(self.d, "distance matrix")
        if d.size and d.min() < 0:
            raise ValueError("distances must be non-negative")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    @property
    def shape(self):
        return self.d.shape


# --------------------------------------------------------------------------- descriptors

def _summed_float(stack):
    if len(stack) == 0:
        raise ValueError("cannot describe an empty frame stack")
    return stack.summed().astype(np.float64)


def describe_dense(stack: FrameStack, downsample: int = 4) -> np.ndarray:
    """Block-mean pooled, flattened summed-polarity frames, one row per frame.

    Trailing partial blocks are averaged over the pixels they actually hold.
    """
    downsample = check_int(downsample, "downsample", 1)
    frames = _summed_float(stack)
    if downsample == 1:
        return frames.reshape(len(frames), -1)
    h, w = frames.shape[1:]
    rows = np.arange(0, h, downsample)
    cols = np.arange(0, w, downsample)
    pooled = np.add.reduceat(np.add.reduceat(frames, rows, axis=1), cols, axis=2)
    rh = np.diff(np.append(rows, h))
    cw = np.diff(np.append(cols, w))
    pooled /= (rh[:, None] * cw[None, :])
    return pooled.reshape(len(frames), -1)


def _variance_key(frames):
    """n^2 * population variance per pixel, exact in integer arithmetic."""
    c = frames.reshape(frames.shape[0], -1).astype(np.int64)
    n = c.shape[0]
    s = c.sum(axis=0)
    return n * (c * c).sum(axis=0) - s * s


def select_active_pixels(stack: FrameStack, k: int) -> np.ndarray:
    """Row-major indices of the ``k`` pixels whose counts vary most across frames.

    Returned in rank order (largest variance first, ties to the lower index).
    """
    if len(stack) < 2:
        raise ValueError("pixel variance needs at least two frames")
    k = check_int(k, "k", 1)
    n_pixels = stack.width * stack.height
    if k > n_pixels:
        raise ValueError(f"k={k} exceeds the {n_pixels} available pixels")
    key = _variance_key(stack.summed())
    order = np.lexsort((np.arange(n_pixels), -key))
    return order[:k]


def describe_sparse(stack: FrameStack, pixels) -> np.ndarray:
    """Counts at ``pixels`` (ascending row-major order), one row per frame."""
    idx = np.unique(np.asarray(pixels, dtype=np.int64))
    if idx.size == 0:
        raise ValueError("pixel set is empty")
    n_pixels = stack.width * stack.height
    if idx[0] < 0 or idx[-1] >= n_pixels:
        raise ValueError(f"pixel index outside 0..{n_pixels - 1}")
    frames = _summed_float(stack)
    return frames.reshape(len(frames), -1)[:, idx]


# --------------------------------------------------------------------------- distances

def distance_matrix(reference, query, metric="sad") -> DistanceMatrix:
    """Pairwise distances, rows = queries, columns = references.

    Cosine distance is ``1 - cos``; an all-zero vector is at distance 1 from
    everything.
    """
    check_choice(metric, "metric", METRICS)
    ref = check_finite_matrix(reference, "reference descriptors")
    qry = check_finite_matrix(query, "query descriptors")
    if ref.shape[1] != qry.shape[1]:
        raise ValueError(
            f"descriptor length mismatch: reference {ref.shape[1]}, query {qry.shape[1]}")
    if metric == "sad":
        d = cdist(qry, ref, "cityblock")
    elif metric == "l2":
        d = cdist(qry, ref, "euclidean")
    else:
        nq = np.linalg.norm(qry, axis=1)
        nr = np.linalg.norm(ref, axis=1)
        denom = np.outer(nq, nr)
        with np.errstate(invalid="ignore", divide="ignore"):
            d = 1.0 - (qry @ ref.T) / denom
        d[denom == 0] = 1.0
        d = np.clip(d, 0.0, 2.0)
    return DistanceMatrix(d, metric)


# --------------------------------------------------------------------------- scoring

def _as_arrays(d, gt):
    dm = d.d if isinstance(d, DistanceMatrix) else check_finite_matrix(d, "distance matrix")
    g = gt.matrix if isinstance(gt, GroundTruthMatrix) else np.asarray(gt).astype(bool)
    if dm.shape != g.shape:
        raise ValueError(f"distance matrix {dm.shape} and ground truth {g.shape} differ in shape")
    return dm, g


def ranked_references(d, k=None):
    """Reference indices per query sorted by distance (stable: ties -> lower index)."""
    order = np.argsort(d, axis=1, kind="stable")
    return order if k is None else order[:, :k]


def top1_correct(d, gt) -> np.ndarray:
    """1 where a query's best match is a ground-truth positive (all queries kept)."""
    dm, g = _as_arrays(d, gt)
    best = np.argmin(dm, axis=1)
    return g[np.arange(len(best)), best].astype(np.uint8)


def recall_at_k(d, gt, k: int) -> float:
    """Share of answerable queries with a positive among their ``k`` nearest references.

    Queries without any ground-truth positive are left out of the denominator.
    """
    k = check_int(k, "k", 1)
    dm, g = _as_arrays(d, gt)
    answerable = g.any(axis=1)
    if not answerable.any():
        raise ValueError("no query has a ground-truth positive; recall is undefined")
    top = ranked_references(dm[answerable], min(k, dm.shape[1]))
    hits = np.take_along_axis(g[answerable], top, axis=1).any(axis=1)
    return float(hits.mean())


@dataclass(frozen=True)
class PRCurve:
    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    gtp: int

    @property
    def recall(self):
        return self.tp / self.gtp

    @property
    def precision(self):
        return self.tp / (self.tp + self.fp)

    def points(self):
        """(recall, precision) pairs, starting from (0, 1), in threshold order."""
        return [(0.0, 1.0)] + list(zip(self.recall.tolist(), self.precision.tolist()))


def pr_curve(d, gt) -> PRCurve:
    """Threshold sweep over each answerable query's single best-match distance."""
    dm, g = _as_arrays(d, gt)
    answerable = g.any(axis=1)
    gtp = int(answerable.sum())
    if gtp == 0:
        raise ValueError("no query has a ground-truth positive (GTP = 0)")
    dm, g = dm[answerable], g[answerable]
    best = np.argmin(dm, axis=1)
    score = dm[np.arange(len(best)), best]
    correct = g[np.arange(len(best)), best]
    order = np.argsort(score, kind="stable")
    score, correct = score[order], correct[order]
    tp_cum = np.cumsum(correct)
    fp_cum = np.cumsum(~correct)
    # last position of each distinct score = everything accepted at that threshold
    last = np.flatnonzero(np.append(score[1:] != score[:-1], True))
    return PRCurve(score[last], tp_cum[last], fp_cum[last], gtp)


def pr_auc(curve) -> float:
    """Trapezoidal area over recall; no extrapolation beyond the largest recall.

    ``curve`` is a :class:`PRCurve` or a sequence of (recall, precision).
    Points with equal recall keep their given order.
    """
    pts = curve.points() if isinstance(curve, PRCurve) else list(curve)
    if not pts:
        raise ValueError("empty precision-recall curve")
    arr = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    arr = arr[np.argsort(arr[:, 0], kind="stable")]
    r, p = arr[:, 0], arr[:, 1]
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


@dataclass
class EvalReport:
    recall_at: dict
    pr_points: list
    pr_auc: float
    gtp: int
    queries_total: int
    operating_points: list = field(default_factory=list)
    empty_queries: list = field(default_factory=list)

    def to_dict(self):
        return {
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "pr_auc": self.pr_auc,
            "pr_curve": [[r, p] for r, p in self.pr_points],
            "operating_points": self.operating_points,
            "gtp": self.gtp,
            "queries_total": self.queries_total,
            "queries_without_positive": self.empty_queries,
            "rules": {
                "recall_denominator": "queries with >= 1 ground-truth positive",
                "pr_curve": "per-query best match, threshold sweep over distinct distances, "
                            "no interpolation, trapezoidal area up to max recall",
                "tie_break": "lowest reference index",
            },
        }


def evaluate(d, gt, ks=DEFAULT_KS) -> EvalReport:
    dm, g = _as_arrays(d, gt)
    curve = pr_curve(dm, g)
    ops = [{"threshold": float(t), "tp": int(tp), "fp": int(fp), "gtp": curve.gtp}
           for t, tp, fp in zip(curve.thresholds, curve.tp, curve.fp)]
    return EvalReport(
        recall_at={int(k): recall_at_k(dm, g, k) for k in ks},
        pr_points=curve.points(),
        pr_auc=pr_auc(curve),
        gtp=curve.gtp,
        queries_total=int(dm.shape[0]),
        operating_points=ops,
        empty_queries=[int(i) for i in np.flatnonzero(~g.any(axis=1))],
    )


# --------------------------------------------------------------------------- estimators

class DenseSAD(TransformerMixin, BaseEstimator):
    """Whole-frame descriptor compared with sum of absolute differences."""

    metric = "sad"

    def __init__(self, downsample=4):
        self.downsample = downsample

    def fit(self, X, y=None):
        check_int(self.downsample, "downsample", 1)
        self.n_features_out_ = describe_dense(X[:1], self.downsample).shape[1] if len(X) else 0
        return self

    def transform(self, X):
        check_is_fitted(self)
        return describe_dense(X, self.downsample)


class SparseSAD(TransformerMixin, BaseEstimator):
    """SAD over the reference pixels whose activity varies most across frames.

    ``n_pixels`` is a count, or a fraction of the sensor when given as a float
    in (0, 1]. The selection made in ``fit`` is reused verbatim for queries.
    """

    metric = "sad"

    def __init__(self, n_pixels=0.05):
        self.n_pixels = n_pixels

    def _k(self, stack):
        total = stack.width * stack.height
        if isinstance(self.n_pixels, float):
            if not 0 < self.n_pixels <= 1:
                raise ValueError("fractional n_pixels must lie in (0, 1]")
            return max(1, int(round(self.n_pixels * total)))
        return check_int(self.n_pixels, "n_pixels", 1)

    def fit(self, X, y=None):
        self.pixels_ = select_active_pixels(X, self._k(X))
        self.resolution_ = (X.width, X.height)
        return self

    def transform(self, X):
        check_is_fitted(self, "pixels_")
        if (X.width, X.height) != self.resolution_:
            raise ValueError("query resolution differs from the fitted reference")
        return describe_sparse(X, self.pixels_)


class PlaceMatcher(BaseEstimator):
    """Nearest-reference lookup over descriptor rows.

    ``fit`` stores reference descriptors; ``predict`` returns the best
    reference index per query and ``score`` the Recall@1 against a ground
    truth matrix.
    """

    def __init__(self, metric="sad"):
        self.metric = metric

    def fit(self, X, y=None):
        check_choice(self.metric, "metric", METRICS)
        self.reference_ = check_finite_matrix(X, "reference descriptors")
        return self

    def distances(self, X) -> DistanceMatrix:
        check_is_fitted(self, "reference_")
        return distance_matrix(self.reference_, X, self.metric)

    def kneighbors(self, X, n_neighbors=1):
        d = self.distances(X).d
        idx = ranked_references(d, min(n_neighbors, d.shape[1]))
        return np.take_along_axis(d, idx, axis=1), idx

    def predict(self, X):
        return self.kneighbors(X, 1)[1][:, 0]

    def score(self, X, y, k=1):
        return recall_at_k(self.distances(X), y, k)
