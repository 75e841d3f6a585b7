"""Emotion-aware music recommender with latent emotion distributions,
grouped Bayesian mood-preference nets, and pairwise ranking training."""

from .data import (
    Dataset,
    EmotionVocab,
    Interaction,
    MusicTable,
    NegativeSampler,
    SplitDataset,
    load_dataset,
    split_8_1_1,
)
from .grouping import GenreKMeans, assign_groups, elbow_select, genre_profiles, kmeans
from .model import (
    AblationFlags,
    HyperParams,
    ModelState,
    RankedList,
    bpr_loss,
    load_model,
    match_score,
    rank_top,
    save_model,
    train_phase2,
)
from .mood import BnnPosterior, finetune_group, predict_mood, predict_mood_mean, pretrain
from .evaluation import EvalProtocol, MetricsReport, evaluate, score_record
from .numerics import Rng, categorical_kl, gaussian_kl, gaussian_kl_to_std, softmax
from .recommender import EmotionAwareRecommender
from .synth import SynthConfig, synth_generate

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "BnnPosterior",
    "Dataset",
    "EmotionAwareRecommender",
    "EmotionVocab",
    "EvalProtocol",
    "GenreKMeans",
    "HyperParams",
    "Interaction",
    "MetricsReport",
    "ModelState",
    "MusicTable",
    "NegativeSampler",
    "RankedList",
    "Rng",
    "SplitDataset",
    "SynthConfig",
    "assign_groups",
    "bpr_loss",
    "categorical_kl",
    "elbow_select",
    "evaluate",
    "finetune_group",
    "gaussian_kl",
    "gaussian_kl_to_std",
    "genre_profiles",
    "kmeans",
    "load_dataset",
    "load_model",
    "match_score",
    "predict_mood",
    "predict_mood_mean",
    "pretrain",
    "rank_top",
    "save_model",
    "score_record",
    "softmax",
    "split_8_1_1",
    "synth_generate",
    "train_phase2",
]
