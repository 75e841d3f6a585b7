"""User grouping from listening-genre profiles: seeded K-means and
elbow-based selection of the group count.

Profiles are genre proportions over each user's train history. Distance
is Euclidean; inertia is the summed squared distance of every profile to
its assigned centroid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .data import Dataset, SplitDataset
from .numerics import Rng
from .validation import check_is_fitted


@dataclass
class GroupAssignment:
    """K-means result over profiled users plus the full-population map.

    ``group_of`` covers every user id; users without a train-history
    profile are assigned to the largest group.
    """

    user_ids: np.ndarray
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    group_of: np.ndarray

    @property
    def n_groups(self) -> int:
        return self.centroids.shape[0]


def genre_profiles(dataset: Dataset, split: SplitDataset):
    """Per-user genre proportion vectors from the train split.

    Returns (user_ids, profiles); users with no train records are
    excluded (they cannot be grouped from history).
    """
    n_genres = len(dataset.music.genres)
    counts = np.zeros((dataset.n_users, n_genres))
    for u, _, v in split.train:
        counts[u, dataset.music.genre_ids[v]] += 1
    totals = counts.sum(axis=1)
    user_ids = np.where(totals > 0)[0]
    if user_ids.size == 0:
        raise ValueError("no users with train history to profile")
    profiles = counts[user_ids] / totals[user_ids, None]
    return user_ids, profiles


def _kmeans_pp_init(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    """k-means++ seeding: spread initial centroids by squared distance."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(0, n))
    centers[0] = x[first]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[int(rng.integers(0, n))]
            continue
        probs = d2 / total
        idx = int(rng.choice(n, p=probs))
        centers[j] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))
    return centers


def kmeans(profiles: np.ndarray, n_groups: int, seed: int, max_iter: int = 100):
    """Lloyd iterations with k-means++ seeding, deterministic in seed.

    An emptied cluster is re-seeded at the point farthest from its
    centroid assignment. Returns (labels, centroids, inertia).
    """
    x = np.asarray(profiles, dtype=float)
    n = x.shape[0]
    if not 1 <= n_groups <= n:
        raise ValueError(f"n_groups must be in [1, {n}]")
    rng = Rng(seed).split("kmeans-init")
    centers = _kmeans_pp_init(x, n_groups, rng)
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        dist2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dist2.argmin(axis=1)
        for j in range(n_groups):
            members = x[new_labels == j]
            if members.shape[0] == 0:
                # re-seed empty cluster at the globally farthest point
                far = dist2[np.arange(n), new_labels].argmax()
                centers[j] = x[far]
                new_labels[far] = j
            else:
                centers[j] = members.mean(axis=0)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    dist2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = dist2.argmin(axis=1)
    inertia = float(dist2[np.arange(n), labels].sum())
    return labels, centers, inertia


def assign_groups(
    dataset: Dataset, split: SplitDataset, n_groups: int, seed: int, max_iter: int = 100
) -> GroupAssignment:
    """Cluster profiled users and extend to the whole population."""
    user_ids, profiles = genre_profiles(dataset, split)
    labels, centers, inertia = kmeans(profiles, n_groups, seed, max_iter)
    counts = np.bincount(labels, minlength=n_groups)
    group_of = np.full(dataset.n_users, int(counts.argmax()), dtype=int)
    group_of[user_ids] = labels
    return GroupAssignment(user_ids, labels, centers, inertia, group_of)


def inertia_curve(
    profiles: np.ndarray, candidates, seed: int, n_restarts: int = 5
) -> np.ndarray:
    """Best-of-``n_restarts`` inertia for each candidate group count."""
    values = []
    for g in candidates:
        best = np.inf
        for r in range(n_restarts):
            _, _, inertia = kmeans(profiles, g, seed * 1000 + g * 10 + r)
            best = min(best, inertia)
        values.append(best)
    return np.array(values)


def select_knee(candidates, curve) -> int:
    """Knee of a decreasing curve: the candidate with the largest
    positive second difference. Flat curves return the smallest
    candidate; ties break toward the smaller G.
    """
    candidates = list(candidates)
    curve = np.asarray(curve, dtype=float)
    if len(candidates) < 3:
        raise ValueError("need at least 3 candidate group counts")
    if any(b <= a for a, b in zip(candidates, candidates[1:])):
        raise ValueError("candidates must be strictly ascending")
    span = curve.max() - curve.min()
    if span <= 1e-12 * max(1.0, abs(curve[0])):
        return candidates[0]
    second = curve[:-2] - 2 * curve[1:-1] + curve[2:]
    best = int(np.argmax(second))  # argmax takes the first (smallest G) on ties
    return candidates[best + 1]


def elbow_select(profiles: np.ndarray, candidates, seed: int, n_restarts: int = 5):
    """Inertia(G) curve plus the knee per ``select_knee``.

    The caller may override the returned G*.
    """
    candidates = list(candidates)
    if len(candidates) < 3:
        raise ValueError("need at least 3 candidate group counts")
    curve = inertia_curve(profiles, candidates, seed, n_restarts)
    return curve, select_knee(candidates, curve)


class GenreKMeans(BaseEstimator):
    """Estimator wrapper over the seeded K-means used for user grouping.

    Parameters follow sklearn convention; fitted state is exposed via
    ``labels_``, ``cluster_centers_``, ``inertia_``.
    """

    def __init__(self, n_groups: int = 2, seed: int = 0, max_iter: int = 100):
        self.n_groups = n_groups
        self.seed = seed
        self.max_iter = max_iter

    def fit(self, X, y=None):
        labels, centers, inertia = kmeans(X, self.n_groups, self.seed, self.max_iter)
        self.labels_ = labels
        self.cluster_centers_ = centers
        self.inertia_ = inertia
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        x = np.asarray(X, dtype=float)
        dist2 = ((x[:, None, :] - self.cluster_centers_[None, :, :]) ** 2).sum(axis=2)
        return dist2.argmin(axis=1)

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_
