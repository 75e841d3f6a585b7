"""High-level estimator running the whole pipeline: user grouping,
global mood-net pretraining, per-group fine-tuning, and the ranking
phase, behind a single fit/recommend surface.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import Dataset, SplitDataset, split_8_1_1
from .grouping import assign_groups, elbow_select, genre_profiles
from .model import (
    AblationFlags,
    HyperParams,
    ModelState,
    rank_top,
    score_candidates,
    train_phase2,
)
from .mood import MoodTrainConfig, finetune_group, pretrain
from .numerics import Rng
from .validation import check_is_fitted


def phase1_pairs(dataset: Dataset, records: np.ndarray):
    """(emotion vector, music mood) training pairs for the mood net."""
    s = dataset.emotion_vocab.vectors[records[:, 1]]
    o = dataset.music.moods[records[:, 2]]
    return s, o


def run_phase1(
    dataset: Dataset,
    split: SplitDataset,
    group_of: np.ndarray,
    n_groups: int,
    hp: HyperParams,
    rng: Rng,
    ablation: AblationFlags,
    history: dict | None = None,
):
    """Pretrain the global mood net, then fine-tune one copy per group.

    With weight sampling ablated the nets train as deterministic
    networks (no weight noise, no weight-KL).
    """
    s, o = phase1_pairs(dataset, split.train)
    pre_cfg = MoodTrainConfig(
        lr=hp.pre_lr,
        batch_size=hp.pre_batch_size,
        alpha=hp.alpha,
        epochs=hp.pre_epochs,
        sample_weights=ablation.pref_within,
    )
    pre_hist = [] if history is not None else None
    global_post = pretrain(s, o, pre_cfg, rng.split("pretrain"), pre_hist)
    ft_cfg = MoodTrainConfig(
        lr=hp.ft_lr,
        batch_size=hp.ft_batch_size,
        alpha=hp.alpha,
        epochs=hp.ft_epochs,
        sample_weights=ablation.pref_within,
    )
    groups = []
    ft_hists = []
    for g in range(n_groups):
        mask = group_of[split.train[:, 0]] == g
        hist = [] if history is not None else None
        groups.append(
            finetune_group(global_post, s[mask], o[mask], ft_cfg, rng.split(f"finetune-{g}"), hist)
        )
        ft_hists.append(hist)
    if history is not None:
        history["pretrain"] = pre_hist
        history["finetune"] = ft_hists
    return global_post, groups


class EmotionAwareRecommender(BaseEstimator):
    """Emotion-aware recommender with heterogeneity switches.

    ``n_groups=None`` selects the group count by the elbow rule over
    ``group_candidates``. Heterogeneity switches correspond to the four
    ablation variants; all on is the full model.
    """

    def __init__(
        self,
        n_groups: int | None = None,
        group_candidates: tuple = (1, 2, 3, 4, 5, 6, 8, 10),
        neg_k: int = 10,
        batch_size: int = 512,
        lr: float = 0.05,
        alpha: float = 1e-5,
        lambda_kl_prior: float = 0.01,
        lambda_kl_post: float = 0.05,
        lambda_mse_user: float = 1e-6,
        lambda_mse_emo: float = 1e-4,
        epochs: int = 50,
        patience: int = 5,
        pre_lr: float = 0.01,
        pre_batch_size: int = 1024,
        pre_epochs: int = 30,
        ft_lr: float = 0.001,
        ft_batch_size: int = 64,
        ft_epochs: int = 20,
        use_emotion_across: bool = True,
        use_emotion_within: bool = True,
        use_pref_across: bool = True,
        use_pref_within: bool = True,
        joint_bnn_finetune: bool = False,
        val_cap: int = 2000,
        seed: int = 0,
    ):
        self.n_groups = n_groups
        self.group_candidates = group_candidates
        self.neg_k = neg_k
        self.batch_size = batch_size
        self.lr = lr
        self.alpha = alpha
        self.lambda_kl_prior = lambda_kl_prior
        self.lambda_kl_post = lambda_kl_post
        self.lambda_mse_user = lambda_mse_user
        self.lambda_mse_emo = lambda_mse_emo
        self.epochs = epochs
        self.patience = patience
        self.pre_lr = pre_lr
        self.pre_batch_size = pre_batch_size
        self.pre_epochs = pre_epochs
        self.ft_lr = ft_lr
        self.ft_batch_size = ft_batch_size
        self.ft_epochs = ft_epochs
        self.use_emotion_across = use_emotion_across
        self.use_emotion_within = use_emotion_within
        self.use_pref_across = use_pref_across
        self.use_pref_within = use_pref_within
        self.joint_bnn_finetune = joint_bnn_finetune
        self.val_cap = val_cap
        self.seed = seed

    def _hyper_params(self, n_groups: int) -> HyperParams:
        return HyperParams(
            n_groups=n_groups,
            neg_k=self.neg_k,
            batch_size=self.batch_size,
            lr=self.lr,
            alpha=self.alpha,
            lambda_kl_prior=self.lambda_kl_prior,
            lambda_kl_post=self.lambda_kl_post,
            lambda_mse_user=self.lambda_mse_user,
            lambda_mse_emo=self.lambda_mse_emo,
            epochs=self.epochs,
            patience=self.patience,
            pre_lr=self.pre_lr,
            pre_batch_size=self.pre_batch_size,
            pre_epochs=self.pre_epochs,
            ft_lr=self.ft_lr,
            ft_batch_size=self.ft_batch_size,
            ft_epochs=self.ft_epochs,
            joint_bnn_finetune=self.joint_bnn_finetune,
            val_cap=self.val_cap,
        )

    def _ablation(self) -> AblationFlags:
        return AblationFlags(
            emotion_across=self.use_emotion_across,
            emotion_within=self.use_emotion_within,
            pref_across=self.use_pref_across,
            pref_within=self.use_pref_within,
        )

    def fit(self, dataset: Dataset, split: SplitDataset | None = None):
        if split is None:
            split = split_8_1_1(dataset, self.seed)
        rng = Rng(self.seed)
        ablation = self._ablation()

        if self.n_groups is not None:
            n_groups = int(self.n_groups)
            self.elbow_curve_ = None
        else:
            _, profiles = genre_profiles(dataset, split)
            candidates = [g for g in self.group_candidates if g <= profiles.shape[0]]
            curve, n_groups = elbow_select(profiles, candidates, self.seed)
            self.elbow_curve_ = (list(candidates), curve.tolist())
        assignment = assign_groups(dataset, split, n_groups, self.seed)
        self.group_assignment_ = assignment

        hp = self._hyper_params(n_groups)
        phase1_history: dict = {}
        bnn_global, bnn_groups = run_phase1(
            dataset, split, assignment.group_of, n_groups, hp, rng, ablation, phase1_history
        )
        state = ModelState.init(
            dataset, split, bnn_global, bnn_groups, assignment.group_of, hp, ablation, self.seed
        )
        phase2_history: list = []
        train_phase2(state, split, rng, phase2_history)
        self.model_state_ = state
        self.split_ = split
        self.history_ = {"phase1": phase1_history, "phase2": phase2_history}
        return self

    def recommend(self, user_id: int, tag_id: int, top_n: int = 10, mode: str = "deterministic", rng=None):
        check_is_fitted(self, "model_state_")
        return rank_top(self.model_state_, user_id, tag_id, top_n, mode, rng)

    def score_candidates(self, user_id: int, tag_id: int, candidates):
        check_is_fitted(self, "model_state_")
        return score_candidates(self.model_state_, user_id, tag_id, candidates)
