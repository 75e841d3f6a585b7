"""Synthetic desk-scale dataset generator.

Users belong to latent groups; each group maps emotion tags to preferred
mood corners, with configurable heterogeneity:

    pref_across    group-level divergence of tag->mood targets
    emotion_across per-user drift of what a tag means
    emotion_within per-event drift of what a tag means
    pref_within    choice temperature (flatter picks when high)

Groups also concentrate on their own genre, so genre profiles recover
the latent grouping. A ``truth`` sidecar records the generating group
map and mood targets for directional tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import MusicTable, N_MOODS, build_dataset
from .numerics import Rng


@dataclass
class SynthConfig:
    n_users: int = 200
    n_tracks: int = 60
    n_tags: int = 8
    n_groups: int = 2
    n_genres: int = 0  # 0 -> one genre per group
    events_per_user: int = 25
    pref_across: float = 1.0
    emotion_across: float = 0.2
    emotion_within: float = 0.1
    pref_within: float = 0.2
    genre_mix: float = 0.15
    mood_sharpness: float = 4.0
    choice_sharpness: float = 10.0
    # explicit per-group mood corner (index into the 9 moods) applied to
    # every tag; overrides the seeded per-tag corners when set
    group_corners: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_genres <= 0:
            self.n_genres = self.n_groups
        if self.n_groups > self.n_users:
            raise ValueError("more groups than users")
        if self.n_groups < 1 or self.n_users < 1 or self.n_tracks < 2:
            raise ValueError("invalid synth sizes")
        if self.group_corners and len(self.group_corners) != self.n_groups:
            raise ValueError("group_corners must list one corner per group")
        for strength in (
            self.pref_across,
            self.emotion_across,
            self.emotion_within,
            self.pref_within,
            self.genre_mix,
        ):
            if not 0.0 <= strength <= 1.0:
                raise ValueError("heterogeneity strengths must lie in [0, 1]")


def corner_distribution(corner: int, sharpness: float) -> np.ndarray:
    """Mood simplex point concentrated on one category."""
    logits = np.zeros(N_MOODS)
    logits[corner] = sharpness
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / x.sum(axis=-1, keepdims=True)


def synth_generate(config: SynthConfig, seed: int):
    """Generate (dataset, truth). Deterministic in (config, seed)."""
    rng = Rng(seed).split("synth")
    cfg = config

    group_of_user = rng.integers(0, cfg.n_groups, size=cfg.n_users)
    # ensure every group is populated
    group_of_user[: cfg.n_groups] = np.arange(cfg.n_groups)

    genre_of_track = np.arange(cfg.n_tracks) % cfg.n_genres
    preferred_genre = np.arange(cfg.n_groups) % cfg.n_genres

    track_corner = rng.integers(0, N_MOODS, size=cfg.n_tracks)
    moods = np.stack(
        [corner_distribution(c, cfg.mood_sharpness) for c in track_corner]
    )
    jitter = rng.uniform(0.0, 0.02, moods.shape)
    moods = _normalize_rows(moods + jitter)

    # tag -> mood target, per group
    base_corner = rng.integers(0, N_MOODS, size=cfg.n_tags)
    if cfg.group_corners:
        alt_corner = np.tile(
            np.asarray(cfg.group_corners, dtype=int)[:, None], (1, cfg.n_tags)
        )
    else:
        alt_corner = rng.integers(0, N_MOODS, size=(cfg.n_groups, cfg.n_tags))
    group_target = np.empty((cfg.n_groups, cfg.n_tags, N_MOODS))
    for g in range(cfg.n_groups):
        for t in range(cfg.n_tags):
            shared = corner_distribution(base_corner[t], cfg.mood_sharpness)
            own = corner_distribution(alt_corner[g, t], cfg.mood_sharpness)
            group_target[g, t] = (1 - cfg.pref_across) * shared + cfg.pref_across * own
    group_target = _normalize_rows(group_target)

    # per-user tag meaning drift
    user_corner = rng.integers(0, N_MOODS, size=(cfg.n_users, cfg.n_tags))
    user_target = np.empty((cfg.n_users, cfg.n_tags, N_MOODS))
    for u in range(cfg.n_users):
        g = group_of_user[u]
        drift = np.stack(
            [corner_distribution(c, cfg.mood_sharpness) for c in user_corner[u]]
        )
        user_target[u] = (
            1 - cfg.emotion_across
        ) * group_target[g] + cfg.emotion_across * drift
    user_target = _normalize_rows(user_target)

    beta = cfg.choice_sharpness * (1.0 - 0.9 * cfg.pref_within)
    track_ids = np.arange(cfg.n_tracks)
    events = np.empty((cfg.n_users * cfg.events_per_user, 3), dtype=int)
    row = 0
    for u in range(cfg.n_users):
        g = group_of_user[u]
        own_pool = track_ids[genre_of_track == preferred_genre[g]]
        for _ in range(cfg.events_per_user):
            tag = int(rng.integers(0, cfg.n_tags))
            target = user_target[u, tag]
            if cfg.emotion_within > 0:
                event_corner = int(rng.integers(0, N_MOODS))
                target = (1 - cfg.emotion_within) * target + (
                    cfg.emotion_within
                ) * corner_distribution(event_corner, cfg.mood_sharpness)
                target = target / target.sum()
            pool = own_pool
            if cfg.genre_mix > 0 and rng.uniform(0.0, 1.0, ()) < cfg.genre_mix:
                pool = track_ids
            match = moods[pool] @ target
            weights = np.exp(beta * (match - match.max()))
            weights /= weights.sum()
            track = int(rng.choice(pool, p=weights))
            events[row] = (u, tag, track)
            row += 1

    users = [f"u{i}" for i in range(cfg.n_users)]
    tags = [f"tag{i}" for i in range(cfg.n_tags)]
    tracks = [f"m{i}" for i in range(cfg.n_tracks)]
    genres = [f"genre{i}" for i in range(cfg.n_genres)]
    artists = [f"artist{i}" for i in range(max(cfg.n_tracks // 4, 1))]
    music = MusicTable(
        genre_ids=genre_of_track,
        years=2000 + (track_ids % 20),
        artist_ids=track_ids % len(artists),
        moods=moods,
        genres=genres,
        artists=artists,
    )
    dataset = build_dataset(events, users, tags, tracks, music, seed)
    truth = {
        "group_of_user": group_of_user.tolist(),
        "preferred_genre_of_group": preferred_genre.tolist(),
        "genre_of_track": genre_of_track.tolist(),
        "track_corner": track_corner.tolist(),
        "tag_base_corner": base_corner.tolist(),
        "group_tag_target": group_target.tolist(),
        "mood_names_order": list(range(N_MOODS)),
    }
    return dataset, truth
