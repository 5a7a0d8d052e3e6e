"""
-----------------------------------------------------------------------------------
Description: DBSCAN over latent points & k-distance elbow estimation of epsilon
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.spatial.distance import cdist
from sklearn.cluster import DBSCAN

from errors import ArgumentError

NOISE = -1
ROLES = ('core', 'border', 'noise')


@dataclass(frozen=True)
class DbscanParams:
    epsilon: float
    min_points: int = 5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ArgumentError(f'epsilon must be > 0, got {self.epsilon}')
        if self.min_points < 1:
            raise ArgumentError(f'min_points must be >= 1, got {self.min_points}')


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    labels: np.ndarray   # cluster id >= 0 or NOISE
    roles: np.ndarray    # 'core' | 'border' | 'noise'

    @property
    def noise_mask(self):
        return self.labels == NOISE

    @property
    def num_clusters(self):
        return int(self.labels.max()) + 1 if self.labels.size else 0


@dataclass(frozen=True)
class EpsilonEstimate:
    epsilon: float
    index: int
    flat: bool


def _points(points):
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return X


def squared_distances(points):
    X = _points(points)
    return cdist(X, X, metric='sqeuclidean')


def kdist_curve(points, k):
    """Distance of every point to its k-th nearest other point, sorted ascending."""
    X = _points(points)
    if k < 1:
        raise ArgumentError(f'k must be >= 1, got {k}')
    if X.shape[0] <= k:
        raise ArgumentError(f'k-distance with k={k} needs more than {k} points, got {X.shape[0]}')
    d2 = squared_distances(X)
    np.fill_diagonal(d2, np.inf)
    kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
    return np.sort(np.sqrt(kth))


def estimate_epsilon(curve, window=11) -> EpsilonEstimate:
    """
    Elbow of the k-distance curve: centered moving average of width `window`,
    discrete second differences, curve value at the largest second difference in
    the upper half of the curve (first index among ties).
    """
    curve = np.asarray(curve, dtype=np.float64)
    if window < 1:
        raise ArgumentError(f'smoothing window must be >= 1, got {window}')
    if curve.size <= window or curve.size < 3:
        raise ArgumentError(f'curve of length {curve.size} too short for window {window}')
    if np.any(np.diff(curve) < 0):
        raise ArgumentError('k-distance curve must be sorted ascending')
    if curve[0] == curve[-1]:
        logging.warning(f'flat k-distance curve, epsilon falls back to {curve[0]}')
        return EpsilonEstimate(epsilon=float(curve[0]), index=0, flat=True)

    smoothed = uniform_filter1d(curve, size=window, mode='nearest')
    second = smoothed[2:] - 2 * smoothed[1:-1] + smoothed[:-2]   # second[i] is at curve index i + 1
    start = max(curve.size // 2 - 1, 0)
    tail = second[start:]
    peak = tail.max()
    candidates = np.flatnonzero(np.isclose(tail, peak, rtol=1e-9, atol=0.0))
    index = int(start + candidates[0] + 1)
    return EpsilonEstimate(epsilon=float(curve[index]), index=index, flat=False)


def dbscan(points, params: DbscanParams) -> ClusterAssignment:
    """
    Exact DBSCAN on squared distances; the neighborhood count includes the point
    itself. Clusters are seeded in ascending index order, a border point joins the
    first cluster that reaches it.
    """
    X = _points(points)
    if X.shape[0] == 0:
        raise ArgumentError('dbscan needs at least one point')
    # squared radius of the tiny fallback epsilon underflows to 0
    radius = max(params.epsilon ** 2, np.finfo(np.float64).tiny)
    model = DBSCAN(eps=radius, min_samples=params.min_points, metric='precomputed')
    labels = model.fit_predict(squared_distances(X)).astype(np.int64)
    roles = np.full(labels.shape, 'border', dtype=object)
    roles[model.core_sample_indices_] = 'core'
    roles[labels == NOISE] = 'noise'
    return ClusterAssignment(labels=labels, roles=roles)
