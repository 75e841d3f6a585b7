"""Dataset ingestion: interaction triplets, music metadata with mood
distributions, emotion-tag encoding, the 8:1:1 split, and negative
sampling for pairwise ranking.

File formats (UTF-8 CSV with header):
    interactions: user,emotion,music
    music meta:   music,genre,year,artist,m1..m9
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng
from .validation import check_index, check_simplex

MOOD_NAMES = (
    "amazement",
    "solemnity",
    "tenderness",
    "nostalgia",
    "calmness",
    "power",
    "joyful activation",
    "tension",
    "sadness",
)
N_MOODS = len(MOOD_NAMES)

# Emotion tags are encoded as fixed seeded unit-norm rows of this width,
# equal to the latent emotion dimension so the mood net accepts either.
TAG_DIM = 16


class DataFormatError(ValueError):
    """Malformed input file; message carries the offending line number."""


@dataclass
class Interaction:
    """One (user, emotion tag, music) listening event."""

    user_id: int
    emotion_tag_id: int
    music_id: int


class EmotionVocab:
    """Emotion tag vocabulary with a frozen seeded encoding table.

    Row i of ``vectors`` is a unit-norm embedding for tag i, fixed at
    construction (not trainable): a stable input representation and
    reconstruction target for the latent emotion machinery.
    """

    def __init__(self, tags: list[str], seed: int, dim: int = TAG_DIM):
        self.tags = list(tags)
        self.dim = dim
        rng = Rng(seed).split("emotion-vocab")
        raw = rng.normal(len(self.tags), dim)
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        self.vectors = raw / np.maximum(norms, 1e-12)
        self.vectors.setflags(write=False)

    def __len__(self):
        return len(self.tags)

    def vector(self, tag_id: int) -> np.ndarray:
        return self.vectors[check_index(tag_id, len(self.tags), "tag id")]


@dataclass
class MusicTable:
    """Per-track metadata, row-aligned with music ids."""

    genre_ids: np.ndarray
    years: np.ndarray
    artist_ids: np.ndarray
    moods: np.ndarray  # (V, 9) simplex rows
    genres: list[str] = field(default_factory=list)
    artists: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.moods = check_simplex(self.moods, "music mood")

    @property
    def n_tracks(self) -> int:
        return self.moods.shape[0]


@dataclass
class Dataset:
    """Vocabulary-mapped interactions plus music metadata.

    ``interactions`` is an (N, 3) int array of (user, tag, music)
    indices; string vocabularies keep first-seen order.
    """

    interactions: np.ndarray
    users: list[str]
    tags: list[str]
    tracks: list[str]
    music: MusicTable
    emotion_vocab: EmotionVocab

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_tracks(self) -> int:
        return len(self.tracks)

    @property
    def n_tags(self) -> int:
        return len(self.tags)

    def stats(self) -> dict:
        return {
            "n_interactions": int(self.interactions.shape[0]),
            "n_users": self.n_users,
            "n_music": self.n_tracks,
            "n_emotion_tags": self.n_tags,
            "n_genres": len(self.music.genres),
            "n_years": int(len(np.unique(self.music.years))),
            "n_artists": len(self.music.artists),
            "sparsity": 1.0 - self.interactions.shape[0] / max(self.n_users * self.n_tracks, 1),
        }


def _vocab_id(table: dict, names: list, key: str) -> int:
    if key not in table:
        table[key] = len(names)
        names.append(key)
    return table[key]


def load_interactions(path) -> tuple[list[Interaction], list[str], list[str], list[str]]:
    """Read user,emotion,music rows; ids assigned in first-seen order."""
    users: list[str] = []
    tags: list[str] = []
    tracks: list[str] = []
    u_idx: dict = {}
    t_idx: dict = {}
    m_idx: dict = {}
    records: list[Interaction] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != 3:
            raise DataFormatError(f"{path}: expected 3-column header user,emotion,music")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            user, tag, track = (cell.strip() for cell in row)
            if not user or not tag or not track:
                raise DataFormatError(f"{path}:{lineno}: empty field")
            records.append(
                Interaction(
                    _vocab_id(u_idx, users, user),
                    _vocab_id(t_idx, tags, tag),
                    _vocab_id(m_idx, tracks, track),
                )
            )
    if not records:
        raise DataFormatError(f"{path}: no interaction records")
    return records, users, tags, tracks


def load_music_meta(path, tracks: list[str]) -> MusicTable:
    """Read music,genre,year,artist,m1..m9 rows for the given track vocab."""
    n = len(tracks)
    track_pos = {t: i for i, t in enumerate(tracks)}
    genre_ids = np.full(n, -1, dtype=int)
    years = np.zeros(n, dtype=int)
    artist_ids = np.full(n, -1, dtype=int)
    moods = np.full((n, N_MOODS), np.nan)
    genres: list[str] = []
    artists: list[str] = []
    g_idx: dict = {}
    a_idx: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != 4 + N_MOODS:
            raise DataFormatError(
                f"{path}: expected {4 + N_MOODS}-column header music,genre,year,artist,m1..m9"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4 + N_MOODS:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {4 + N_MOODS} columns, got {len(row)}"
                )
            track = row[0].strip()
            if track not in track_pos:
                continue  # meta for tracks outside the interaction vocab is ignored
            i = track_pos[track]
            genre_ids[i] = _vocab_id(g_idx, genres, row[1].strip())
            try:
                years[i] = int(row[2])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad year {row[2]!r}") from exc
            artist_ids[i] = _vocab_id(a_idx, artists, row[3].strip())
            try:
                mood = np.array([float(c) for c in row[4:]])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad mood value") from exc
            try:
                moods[i] = check_simplex(mood, f"{path}:{lineno}: mood")
            except ValueError as exc:
                raise DataFormatError(str(exc)) from exc
    missing = np.where(genre_ids < 0)[0]
    if missing.size:
        raise DataFormatError(
            f"{path}: missing metadata for {missing.size} tracks (first: {tracks[missing[0]]!r})"
        )
    return MusicTable(genre_ids, years, artist_ids, moods, genres, artists)


def load_dataset(interactions_path, music_path, seed: int) -> Dataset:
    records, users, tags, tracks = load_interactions(interactions_path)
    music = load_music_meta(music_path, tracks)
    arr = np.array(
        [(r.user_id, r.emotion_tag_id, r.music_id) for r in records], dtype=int
    )
    return Dataset(arr, users, tags, tracks, music, EmotionVocab(tags, seed))


def build_dataset(
    interactions: np.ndarray,
    users: list[str],
    tags: list[str],
    tracks: list[str],
    music: MusicTable,
    seed: int,
) -> Dataset:
    interactions = np.asarray(interactions, dtype=int)
    if interactions.size == 0:
        raise ValueError("dataset is empty")
    return Dataset(interactions, users, tags, tracks, music, EmotionVocab(tags, seed))


def save_dataset_npz(dataset: Dataset, path, seed: int) -> None:
    """Canonical binary form of a validated dataset."""
    import json

    meta = {
        "users": dataset.users,
        "tags": dataset.tags,
        "tracks": dataset.tracks,
        "genres": dataset.music.genres,
        "artists": dataset.music.artists,
        "seed": seed,
    }
    np.savez(
        path,
        interactions=dataset.interactions,
        genre_ids=dataset.music.genre_ids,
        years=dataset.music.years,
        artist_ids=dataset.music.artist_ids,
        moods=dataset.music.moods,
        __meta__=np.array(json.dumps(meta)),
    )


def load_dataset_npz(path) -> Dataset:
    import json

    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["__meta__"]))
        music = MusicTable(
            blob["genre_ids"],
            blob["years"],
            blob["artist_ids"],
            blob["moods"],
            meta["genres"],
            meta["artists"],
        )
        return build_dataset(
            blob["interactions"],
            meta["users"],
            meta["tags"],
            meta["tracks"],
            music,
            meta["seed"],
        )


# ---------------------------------------------------------------------------
# Splitting


@dataclass
class SplitDataset:
    """Train/validation/test partition with the train listened-set index.

    The split is record-level; validation/test records of users with no
    train history are dropped (cold-start is out of scope) and counted
    in ``dropped_val`` / ``dropped_test``.
    """

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    listened: list[set]
    dropped_val: int = 0
    dropped_test: int = 0


def split_sizes(n: int) -> tuple[int, int, int]:
    """Integer 8:1:1 partition sizes (val/test rounded, train gets the rest)."""
    n_val = round(n / 10)
    n_test = round(n / 10)
    return n - n_val - n_test, n_val, n_test


def split_8_1_1(dataset: Dataset, seed: int) -> SplitDataset:
    """Random record-level 8:1:1 split, deterministic in ``seed``."""
    data = dataset.interactions
    n = data.shape[0]
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    order = Rng(seed).split("split").permutation(n)
    n_train, n_val, _ = split_sizes(n)
    train = data[order[:n_train]]
    val = data[order[n_train : n_train + n_val]]
    test = data[order[n_train + n_val :]]

    listened: list[set] = [set() for _ in range(dataset.n_users)]
    for u, _, v in train:
        listened[u].add(int(v))
    has_train = np.array([len(s) > 0 for s in listened])

    keep_val = has_train[val[:, 0]] if val.size else np.zeros(0, dtype=bool)
    keep_test = has_train[test[:, 0]] if test.size else np.zeros(0, dtype=bool)
    return SplitDataset(
        train=train,
        val=val[keep_val],
        test=test[keep_test],
        listened=listened,
        dropped_val=int((~keep_val).sum()),
        dropped_test=int((~keep_test).sum()),
    )


# ---------------------------------------------------------------------------
# Negative sampling


class NegativeSampler:
    """Uniform sampling of unheard tracks for pairwise ranking.

    Draws k distinct tracks outside the user's train listened set and
    different from the positive item. If the eligible pool is smaller
    than k the full pool is returned and a warning issued.
    """

    def __init__(self, n_tracks: int, listened: list[set], rng: Rng):
        self.n_tracks = n_tracks
        self.listened = listened
        self.rng = rng

    def sample(self, user_id: int, pos_item: int, k: int) -> np.ndarray:
        if k < 1:
            raise ValueError("k must be >= 1")
        banned = self.listened[user_id] | {int(pos_item)}
        pool_size = self.n_tracks - len(banned)
        if pool_size <= 0:
            raise ValueError(f"user {user_id} has no eligible negative tracks")
        if pool_size <= k:
            pool = np.array(
                [v for v in range(self.n_tracks) if v not in banned], dtype=int
            )
            if pool_size < k:
                warnings.warn(
                    f"negative pool for user {user_id} has only {pool_size} tracks (k={k})",
                    stacklevel=2,
                )
            return pool
        # rejection sampling; pools are large relative to k in practice
        chosen: set[int] = set()
        out = np.empty(k, dtype=int)
        filled = 0
        while filled < k:
            cand = int(self.rng.integers(0, self.n_tracks))
            if cand in banned or cand in chosen:
                continue
            chosen.add(cand)
            out[filled] = cand
            filled += 1
        return out
