"""Formula-defined baseline scorers sharing the evaluation protocol.

Every scorer follows the estimator shape: hyperparameters in the
constructor, ``fit(dataset, split)`` builds state, and
``score_candidates(user_id, tag_id, candidates)`` returns one score per
candidate track.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import Dataset, NegativeSampler, SplitDataset
from .numerics import Rng, sigmoid
from .validation import check_is_fitted

DEFAULT_NEIGHBORS = 50


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def _row_normalize(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def _interaction_matrix(dataset: Dataset, split: SplitDataset) -> np.ndarray:
    mat = np.zeros((dataset.n_users, dataset.n_tracks))
    mat[split.train[:, 0], split.train[:, 2]] = 1.0
    return mat


class RandomScorer(BaseEstimator):
    """Seeded random scores, reproducible per (user, tag) query."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def fit(self, dataset: Dataset, split: SplitDataset):
        self.n_tracks_ = dataset.n_tracks
        self.rng_ = Rng(self.seed).split("baseline-random")
        return self

    def score_candidates(self, user_id: int, tag_id: int, candidates: np.ndarray):
        check_is_fitted(self, "n_tracks_")
        query = self.rng_.split(f"query-{user_id}-{tag_id}")
        scores = query.uniform(0.0, 1.0, self.n_tracks_)
        return scores[np.asarray(candidates, dtype=int)]


class PopScorer(BaseEstimator):
    """Train-split play counts; every user sees the same ranking."""

    def fit(self, dataset: Dataset, split: SplitDataset):
        self.counts_ = np.bincount(split.train[:, 2], minlength=dataset.n_tracks).astype(float)
        return self

    def score_candidates(self, user_id: int, tag_id: int, candidates: np.ndarray):
        check_is_fitted(self, "counts_")
        return self.counts_[np.asarray(candidates, dtype=int)]


class UserCFScorer(BaseEstimator):
    """Cosine user-user collaborative filtering on binary histories.

    Score of track v for user u sums the similarities of u's top-m
    neighbors that listened to v.
    """

    def __init__(self, m_neighbors: int = DEFAULT_NEIGHBORS):
        self.m_neighbors = m_neighbors

    def _similarity(self, dataset: Dataset, split: SplitDataset) -> np.ndarray:
        normalized = _row_normalize(_interaction_matrix(dataset, split))
        return normalized @ normalized.T

    def fit(self, dataset: Dataset, split: SplitDataset):
        self.matrix_ = _interaction_matrix(dataset, split)
        sims = self._similarity(dataset, split)
        np.fill_diagonal(sims, -np.inf)  # a user is not their own neighbor
        m = min(self.m_neighbors, sims.shape[0] - 1)
        order = np.argsort(-sims, axis=1, kind="stable")[:, :m]
        self.neighbors_ = order
        self.neighbor_sims_ = np.take_along_axis(sims, order, axis=1)
        self.neighbor_sims_[~np.isfinite(self.neighbor_sims_)] = 0.0
        return self

    def score_candidates(self, user_id: int, tag_id: int, candidates: np.ndarray):
        check_is_fitted(self, "matrix_")
        cands = np.asarray(candidates, dtype=int)
        neighbors = self.neighbors_[user_id]
        sims = self.neighbor_sims_[user_id]
        return sims @ self.matrix_[neighbors][:, cands]


class ItemCFScorer(BaseEstimator):
    """Cosine item-item collaborative filtering on binary histories.

    Score of track v sums similarities of v's top-m neighbor tracks that
    appear in the user's history.
    """

    def __init__(self, m_neighbors: int = DEFAULT_NEIGHBORS):
        self.m_neighbors = m_neighbors

    def _similarity(self, dataset: Dataset, split: SplitDataset) -> np.ndarray:
        normalized = _row_normalize(_interaction_matrix(dataset, split).T)
        return normalized @ normalized.T

    def fit(self, dataset: Dataset, split: SplitDataset):
        self.matrix_ = _interaction_matrix(dataset, split)
        sims = self._similarity(dataset, split)
        np.fill_diagonal(sims, -np.inf)
        m = min(self.m_neighbors, sims.shape[0] - 1)
        order = np.argsort(-sims, axis=1, kind="stable")[:, :m]
        self.neighbors_ = order
        self.neighbor_sims_ = np.take_along_axis(sims, order, axis=1)
        self.neighbor_sims_[~np.isfinite(self.neighbor_sims_)] = 0.0
        return self

    def score_candidates(self, user_id: int, tag_id: int, candidates: np.ndarray):
        check_is_fitted(self, "matrix_")
        cands = np.asarray(candidates, dtype=int)
        history = self.matrix_[user_id]  # (V,) 0/1
        listened_mask = history[self.neighbors_[cands]]  # (C, m)
        return (self.neighbor_sims_[cands] * listened_mask).sum(axis=1)


class UserCFEmotionScorer(BaseEstimator):
    """User CF where similarity comes from emotions on co-listened tracks.

    sim(u1, u2) averages the cosine of the two users' emotion vectors on
    each track both listened to, normalized by sqrt(|V_u1| * |V_u2|);
    scores weight each neighbor's contribution by the cosine between the
    query emotion and the neighbor's emotion on the candidate track.
    """

    def __init__(self, m_neighbors: int = DEFAULT_NEIGHBORS):
        self.m_neighbors = m_neighbors

    def fit(self, dataset: Dataset, split: SplitDataset):
        vecs = dataset.emotion_vocab.vectors
        emo: list[dict[int, np.ndarray]] = [dict() for _ in range(dataset.n_users)]
        counts: list[dict[int, int]] = [dict() for _ in range(dataset.n_users)]
        for u, tag, v in split.train:
            u, tag, v = int(u), int(tag), int(v)
            if v in emo[u]:
                emo[u][v] = emo[u][v] + vecs[tag]
                counts[u][v] += 1
            else:
                emo[u][v] = vecs[tag].copy()
                counts[u][v] = 1
        for u in range(dataset.n_users):
            for v in emo[u]:
                emo[u][v] = emo[u][v] / counts[u][v]
        self.emotion_by_user_ = emo
        self.tag_vectors_ = vecs
        listeners: list[list[int]] = [[] for _ in range(dataset.n_tracks)]
        for u in range(dataset.n_users):
            for v in emo[u]:
                listeners[v].append(u)
        self.listeners_ = listeners
        n = dataset.n_users
        sims = np.zeros((n, n))
        for u1 in range(n):
            v1 = emo[u1]
            if not v1:
                continue
            for u2 in range(u1 + 1, n):
                v2 = emo[u2]
                if not v2:
                    continue
                common = v1.keys() & v2.keys()
                if not common:
                    continue
                total = sum(_cosine(v1[v], v2[v]) for v in common)
                sims[u1, u2] = sims[u2, u1] = total / np.sqrt(len(v1) * len(v2))
        self.sims_ = sims
        masked = sims.copy()
        np.fill_diagonal(masked, -np.inf)
        m = min(self.m_neighbors, n - 1)
        self.neighbors_ = np.argsort(-masked, axis=1, kind="stable")[:, :m]
        return self

    def score_candidates(self, user_id: int, tag_id: int, candidates: np.ndarray):
        check_is_fitted(self, "sims_")
        query = self.tag_vectors_[tag_id]
        neighbor_set = {
            int(n): self.sims_[user_id, n]
            for n in self.neighbors_[user_id]
            if np.isfinite(self.sims_[user_id, n]) and self.sims_[user_id, n] > 0
        }
        scores = np.zeros(len(candidates))
        for i, v in enumerate(np.asarray(candidates, dtype=int)):
            total = 0.0
            for u2 in self.listeners_[v]:
                sim = neighbor_set.get(u2)
                if sim is None:
                    continue
                total += sim * _cosine(query, self.emotion_by_user_[u2][v])
            scores[i] = total
        return scores


class ItemCFEmotionScorer(BaseEstimator):
    """Item CF where similarity comes from emotions of shared listeners.

    sim(v1, v2) averages the cosine of each common listener's emotions on
    the two tracks, normalized by sqrt(|U_v1| * |U_v2|); scores weight
    each history track by the cosine between the query emotion and the
    user's own emotion on that history track.
    """

    def __init__(self, m_neighbors: int = DEFAULT_NEIGHBORS):
        self.m_neighbors = m_neighbors

    def fit(self, dataset: Dataset, split: SplitDataset):
        vecs = dataset.emotion_vocab.vectors
        emo: list[dict[int, np.ndarray]] = [dict() for _ in range(dataset.n_users)]
        counts: list[dict[int, int]] = [dict() for _ in range(dataset.n_users)]
        for u, tag, v in split.train:
            u, tag, v = int(u), int(tag), int(v)
            if v in emo[u]:
                emo[u][v] = emo[u][v] + vecs[tag]
                counts[u][v] += 1
            else:
                emo[u][v] = vecs[tag].copy()
                counts[u][v] = 1
        for u in range(dataset.n_users):
            for v in emo[u]:
                emo[u][v] = emo[u][v] / counts[u][v]
        self.emotion_by_user_ = emo
        self.tag_vectors_ = vecs
        users_of: list[list[int]] = [[] for _ in range(dataset.n_tracks)]
        for u in range(dataset.n_users):
            for v in emo[u]:
                users_of[v].append(u)
        n = dataset.n_tracks
        sims = np.zeros((n, n))
        for v1 in range(n):
            set1 = set(users_of[v1])
            if not set1:
                continue
            for v2 in range(v1 + 1, n):
                common = set1 & set(users_of[v2])
                if not common:
                    continue
                total = sum(_cosine(emo[u][v1], emo[u][v2]) for u in common)
                sims[v1, v2] = sims[v2, v1] = total / np.sqrt(
                    len(users_of[v1]) * len(users_of[v2])
                )
        self.sims_ = sims
        masked = sims.copy()
        np.fill_diagonal(masked, -np.inf)
        m = min(self.m_neighbors, n - 1)
        self.neighbors_ = np.argsort(-masked, axis=1, kind="stable")[:, :m]
        return self

    def score_candidates(self, user_id: int, tag_id: int, candidates: np.ndarray):
        check_is_fitted(self, "sims_")
        query = self.tag_vectors_[tag_id]
        history = self.emotion_by_user_[user_id]
        scores = np.zeros(len(candidates))
        for i, v in enumerate(np.asarray(candidates, dtype=int)):
            total = 0.0
            for v2 in self.neighbors_[v]:
                v2 = int(v2)
                sim = self.sims_[v, v2]
                if not np.isfinite(sim) or sim <= 0 or v2 not in history:
                    continue
                total += sim * _cosine(query, history[v2])
            scores[i] = total
        return scores


def _tag_frequency_profiles(dataset: Dataset, split: SplitDataset, by: str) -> np.ndarray:
    n = dataset.n_users if by == "user" else dataset.n_tracks
    profiles = np.zeros((n, dataset.n_tags))
    col = 0 if by == "user" else 2
    for row in split.train:
        profiles[row[col], row[1]] += 1.0
    return profiles


class UserCFPlusEmotionScorer(UserCFScorer):
    """User CF with the similarity blended against emotion-profile cosine:
    (1 - w) * interaction cosine + w * tag-frequency cosine."""

    def __init__(self, m_neighbors: int = DEFAULT_NEIGHBORS, blend: float = 0.5):
        super().__init__(m_neighbors)
        self.blend = blend

    def _similarity(self, dataset: Dataset, split: SplitDataset) -> np.ndarray:
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError("blend weight must lie in [0, 1]")
        inter = super()._similarity(dataset, split)
        profiles = _row_normalize(_tag_frequency_profiles(dataset, split, "user"))
        return (1.0 - self.blend) * inter + self.blend * (profiles @ profiles.T)


class ItemCFPlusEmotionScorer(ItemCFScorer):
    """Item CF with the similarity blended against emotion-profile cosine."""

    def __init__(self, m_neighbors: int = DEFAULT_NEIGHBORS, blend: float = 0.5):
        super().__init__(m_neighbors)
        self.blend = blend

    def _similarity(self, dataset: Dataset, split: SplitDataset) -> np.ndarray:
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError("blend weight must lie in [0, 1]")
        inter = super()._similarity(dataset, split)
        profiles = _row_normalize(_tag_frequency_profiles(dataset, split, "item"))
        return (1.0 - self.blend) * inter + self.blend * (profiles @ profiles.T)


class MatrixFactorizationBPR(BaseEstimator):
    """Matrix factorization trained on the pairwise ranking loss alone.

    Scores are user-item embedding dot products; training uses the same
    negative sampler as the main model.
    """

    def __init__(
        self,
        embed_dim: int = 64,
        lr: float = 0.05,
        epochs: int = 40,
        neg_k: int = 10,
        batch_size: int = 512,
        seed: int = 0,
    ):
        self.embed_dim = embed_dim
        self.lr = lr
        self.epochs = epochs
        self.neg_k = neg_k
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, dataset: Dataset, split: SplitDataset):
        rng = Rng(self.seed).split("mf-bpr")
        init = rng.split("embedding-init")
        emb_u = init.uniform(-0.05, 0.05, (dataset.n_users, self.embed_dim))
        emb_v = init.uniform(-0.05, 0.05, (dataset.n_tracks, self.embed_dim))
        sampler = NegativeSampler(dataset.n_tracks, split.listened, rng.split("negative-sampling"))
        order_rng = rng.split("batch-order")
        train = split.train
        n = train.shape[0]
        history = []
        for epoch in range(self.epochs):
            negs = np.empty((n, self.neg_k), dtype=int)
            for i, (u, _, v) in enumerate(train):
                drawn = sampler.sample(int(u), int(v), self.neg_k)
                negs[i] = np.resize(drawn, self.neg_k)
            order = order_rng.permutation(n)
            total, batches = 0.0, 0
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                users = train[idx, 0]
                pos = train[idx, 2]
                neg = negs[idx]
                ru = emb_u[users]
                x = (ru * emb_v[pos]).sum(axis=1)[:, None] - np.einsum(
                    "bd,bkd->bk", ru, emb_v[neg]
                )
                total += float(np.mean(np.logaddexp(0.0, -x)))
                batches += 1
                g = sigmoid(-x) / x.size  # (B, k)
                d_ru = -(g.sum(axis=1)[:, None] * emb_v[pos]) + np.einsum(
                    "bk,bkd->bd", g, emb_v[neg]
                )
                d_pos = -g.sum(axis=1)[:, None] * ru
                d_neg = g[..., None] * ru[:, None, :]
                np.add.at(emb_u, users, -self.lr * d_ru)
                np.add.at(emb_v, pos, -self.lr * d_pos)
                np.add.at(emb_v, neg.reshape(-1), -self.lr * d_neg.reshape(-1, self.embed_dim))
            history.append({"epoch": epoch, "rec": total / max(batches, 1)})
        self.emb_user_ = emb_u
        self.emb_item_ = emb_v
        self.history_ = history
        return self

    def score_candidates(self, user_id: int, tag_id: int, candidates: np.ndarray):
        check_is_fitted(self, "emb_user_")
        cands = np.asarray(candidates, dtype=int)
        return self.emb_item_[cands] @ self.emb_user_[user_id]


class ModelScorer:
    """Adapter exposing a trained model state under the scorer protocol."""

    def __init__(self, state, mode: str = "deterministic", rng: Rng | None = None):
        self.state = state
        self.mode = mode
        self.rng = rng

    def score_candidates(self, user_id: int, tag_id: int, candidates: np.ndarray):
        from .model import score_candidates

        return score_candidates(self.state, user_id, tag_id, candidates, self.mode, self.rng)


BASELINE_NAMES = (
    "random",
    "pop",
    "ucf",
    "icf",
    "ucfe",
    "icfe",
    "ucf+e",
    "icf+e",
    "mf_bpr",
)


def make_baseline(
    name: str,
    dataset: Dataset,
    split: SplitDataset,
    seed: int = 0,
    m_neighbors: int = DEFAULT_NEIGHBORS,
    blend: float = 0.5,
    mf_params: dict | None = None,
):
    """Construct and fit a baseline scorer by name."""
    key = name.lower()
    if key == "random":
        scorer = RandomScorer(seed)
    elif key == "pop":
        scorer = PopScorer()
    elif key == "ucf":
        scorer = UserCFScorer(m_neighbors)
    elif key == "icf":
        scorer = ItemCFScorer(m_neighbors)
    elif key == "ucfe":
        scorer = UserCFEmotionScorer(m_neighbors)
    elif key == "icfe":
        scorer = ItemCFEmotionScorer(m_neighbors)
    elif key == "ucf+e":
        scorer = UserCFPlusEmotionScorer(m_neighbors, blend)
    elif key == "icf+e":
        scorer = ItemCFPlusEmotionScorer(m_neighbors, blend)
    elif key == "mf_bpr":
        scorer = MatrixFactorizationBPR(seed=seed, **(mf_params or {}))
    else:
        raise ValueError(f"unknown baseline {name!r} (choose from {BASELINE_NAMES})")
    return scorer.fit(dataset, split)
