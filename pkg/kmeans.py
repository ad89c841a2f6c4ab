"""k-means++ seeding, Lloyd iteration and best-of-restarts selection.

Distances are squared Euclidean. Labels are 1-based to match Parcellation.
"""
import logging
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy.spatial.distance import cdist

from data_model import ValidationError, as_generator, derive_seed

log = logging.getLogger(__name__)

DEFAULT_RESTARTS = 10
DEFAULT_MAX_ITER = 300
DEFAULT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    objective: float
    iterations: int
    history: tuple
    converged: bool
    restart: int = 0

    @property
    def k(self):
        return self.centers.shape[0]

    @property
    def degenerate(self):
        return np.unique(self.labels).size < self.k


def _as_points(points):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValidationError("points must be a non-empty n x d array")
    return points


def kmeanspp_seed(points, k, rng=None):
    """Indices of k initial centers drawn by D^2 sampling.

    When every remaining point coincides with a chosen center the draw falls
    back to a uniform choice among the indices not yet chosen.
    """
    points = _as_points(points)
    n = points.shape[0]
    if k < 1 or k > n:
        raise ValidationError(f"cannot seed k={k} centers from {n} points")
    rng = as_generator(rng)
    chosen = [int(rng.integers(n))]
    d2 = cdist(points, points[chosen[-1]][None, :], "sqeuclidean").ravel()
    taken = np.zeros(n, dtype=bool)
    taken[chosen[-1]] = True
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            log.debug("k-means++: all remaining distances are zero, seeding uniformly")
            idx = int(rng.choice(np.flatnonzero(~taken)))
        chosen.append(idx)
        taken[idx] = True
        np.minimum(d2, cdist(points, points[idx][None, :], "sqeuclidean").ravel(), out=d2)
    return np.array(chosen, dtype=np.int64)


def _assign(points, centers):
    d2 = cdist(points, centers, "sqeuclidean")
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(points.shape[0]), labels]


def lloyd(points, centers, max_iter=DEFAULT_MAX_ITER, tol=DEFAULT_TOL):
    """Lloyd iteration from the given centers.

    An empty cluster is reseeded at the point farthest from its current
    center (lowest index on ties). Returned centers are the ones the final
    labels were assigned against.
    """
    points = _as_points(points)
    centers = np.array(centers, dtype=np.float64).reshape(-1, points.shape[1])
    k = centers.shape[0]
    if k < 1:
        raise ValidationError("need at least one center")
    if max_iter < 1:
        raise ValidationError("max_iter must be >= 1")
    history = []
    previous = None
    converged = False
    for iteration in range(1, max_iter + 1):
        labels, dist = _assign(points, centers)
        empty = np.flatnonzero(np.bincount(labels, minlength=k) == 0)
        for c in empty:
            far = int(np.argmax(dist))
            if dist[far] <= 0:
                break
            log.debug("lloyd: reseeding empty cluster %d at point %d", c + 1, far)
            centers[c] = points[far]
            dist[far] = 0.0
        if empty.size:
            labels, dist = _assign(points, centers)
        objective = float(dist.sum())
        if history and objective > history[-1] * (1 + 1e-12) + 1e-300:
            log.warning("lloyd: objective rose from %r to %r", history[-1], objective)
        history.append(objective)
        if objective == 0.0:
            converged = True
            break
        if previous is not None:
            change = history[-2] - objective
            if np.array_equal(labels, previous) or change <= tol * history[-2]:
                converged = True
                break
        previous = labels
        if iteration == max_iter:
            break
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, points)
        counts = np.bincount(labels, minlength=k)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled][:, None]
    return KMeansResult(
        labels=labels + 1,
        centers=centers,
        objective=objective,
        iterations=iteration,
        history=tuple(history),
        converged=converged,
    )


def kmeans_single(points, k, rng=None, max_iter=DEFAULT_MAX_ITER, tol=DEFAULT_TOL):
    points = _as_points(points)
    seeds = kmeanspp_seed(points, k, rng)
    return lloyd(points, points[seeds], max_iter=max_iter, tol=tol)


def kmeans_multi(
    points, k, restarts=DEFAULT_RESTARTS, seed=0, max_iter=DEFAULT_MAX_ITER, tol=DEFAULT_TOL, n_jobs=1
):
    """Best of `restarts` seeded runs by objective; restart r draws from derive_seed(seed, r)."""
    if restarts < 1:
        raise ValidationError("restarts must be >= 1")
    points = _as_points(points)

    def run(r):
        rng = np.random.default_rng(derive_seed(seed, r))
        return kmeans_single(points, k, rng, max_iter=max_iter, tol=tol)

    results = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(run)(r) for r in range(restarts))
    best = min(range(restarts), key=lambda r: (results[r].objective, r))
    log.debug(
        "k-means: best of %d restarts is #%d with objective %.6g",
        restarts, best, results[best].objective,
    )
    chosen = results[best]
    return KMeansResult(
        labels=chosen.labels,
        centers=chosen.centers,
        objective=chosen.objective,
        iterations=chosen.iterations,
        history=chosen.history,
        converged=chosen.converged,
        restart=best,
    )
