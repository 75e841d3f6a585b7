import time
import warnings

import numpy as np
import pytest
from scipy import stats

from moodrec.data import (
    DataFormatError,
    EmotionVocab,
    NegativeSampler,
    load_dataset,
    load_dataset_npz,
    load_interactions,
    save_dataset_npz,
    split_8_1_1,
    split_sizes,
)
from moodrec.numerics import Rng
from moodrec.synth import SynthConfig, synth_generate


def write_toy_files(tmp_path, rows=None):
    interactions = tmp_path / "interactions.csv"
    rows = rows or [
        "alice,happy,trackA",
        "bob,sad,trackB",
        "alice,happy,trackB",
    ]
    interactions.write_text("user,emotion,music\n" + "\n".join(rows) + "\n")
    music = tmp_path / "music.csv"
    mood = ",".join(["0.5", "0.5"] + ["0"] * 7)
    music.write_text(
        "music,genre,year,artist,m1,m2,m3,m4,m5,m6,m7,m8,m9\n"
        f"trackA,rock,1999,artist1,{mood}\n"
        f"trackB,jazz,2005,artist2,{mood}\n"
    )
    return interactions, music


class TestLoadInteractions:
    def test_three_rows_two_users(self, tmp_path):
        path, _ = write_toy_files(tmp_path)
        records, users, tags, tracks = load_interactions(path)
        assert len(records) == 3
        assert users == ["alice", "bob"]
        assert tags == ["happy", "sad"]
        assert tracks == ["trackA", "trackB"]
        assert records[0].user_id == 0 and records[1].user_id == 1

    def test_empty_tag_rejected_with_line(self, tmp_path):
        path, _ = write_toy_files(tmp_path, ["alice,happy,trackA", "bob,,trackB"])
        with pytest.raises(DataFormatError, match=":3"):
            load_interactions(path)

    def test_wrong_column_count(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("user,emotion,music\nalice,happy,trackA,extra\n")
        with pytest.raises(DataFormatError, match="3 columns"):
            load_interactions(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("user,emotion,music\n")
        with pytest.raises(DataFormatError, match="no interaction"):
            load_interactions(path)


class TestLoadDataset:
    def test_toy_round_trip(self, tmp_path):
        inter, music = write_toy_files(tmp_path)
        dataset = load_dataset(inter, music, seed=1)
        assert dataset.stats()["n_users"] == 2
        assert dataset.music.genres == ["rock", "jazz"]
        np.testing.assert_allclose(dataset.music.moods.sum(axis=1), 1.0)

    def test_simplex_violation_rejected(self, tmp_path):
        inter, music = write_toy_files(tmp_path)
        bad = ",".join(["0.9", "0.9"] + ["0"] * 7)
        music.write_text(
            "music,genre,year,artist,m1,m2,m3,m4,m5,m6,m7,m8,m9\n"
            f"trackA,rock,1999,a,{bad}\n"
            f"trackB,jazz,2005,b,{bad}\n"
        )
        with pytest.raises(DataFormatError, match="sum to 1"):
            load_dataset(inter, music, seed=1)

    def test_missing_meta_rejected(self, tmp_path):
        inter, music = write_toy_files(tmp_path)
        mood = ",".join(["1"] + ["0"] * 8)
        music.write_text(
            "music,genre,year,artist,m1,m2,m3,m4,m5,m6,m7,m8,m9\n"
            f"trackA,rock,1999,a,{mood}\n"
        )
        with pytest.raises(DataFormatError, match="missing metadata"):
            load_dataset(inter, music, seed=1)

    def test_npz_round_trip(self, tmp_path):
        inter, music = write_toy_files(tmp_path)
        dataset = load_dataset(inter, music, seed=3)
        save_dataset_npz(dataset, tmp_path / "dataset.npz", seed=3)
        loaded = load_dataset_npz(tmp_path / "dataset.npz")
        np.testing.assert_array_equal(loaded.interactions, dataset.interactions)
        np.testing.assert_array_equal(loaded.music.moods, dataset.music.moods)
        np.testing.assert_array_equal(
            loaded.emotion_vocab.vectors, dataset.emotion_vocab.vectors
        )


class TestEmotionVocab:
    def test_rows_unit_norm(self):
        vocab = EmotionVocab([f"t{i}" for i in range(20)], seed=5)
        np.testing.assert_allclose(np.linalg.norm(vocab.vectors, axis=1), 1.0, atol=1e-12)

    def test_deterministic_from_seed(self):
        a = EmotionVocab(["x", "y"], seed=9)
        b = EmotionVocab(["x", "y"], seed=9)
        np.testing.assert_array_equal(a.vectors, b.vectors)

    def test_frozen(self):
        vocab = EmotionVocab(["x"], seed=0)
        with pytest.raises(ValueError):
            vocab.vectors[0, 0] = 1.0


class TestSplit:
    def test_ten_records(self):
        dataset, _ = synth_generate(
            SynthConfig(n_users=2, n_tracks=5, n_tags=2, n_groups=1, events_per_user=5),
            seed=0,
        )
        split = split_8_1_1(dataset, seed=0)
        total_val_test = split.val.shape[0] + split.dropped_val
        total_test = split.test.shape[0] + split.dropped_test
        assert split.train.shape[0] == 8
        assert total_val_test == 1
        assert total_test == 1

    def test_same_seed_identical(self):
        dataset, _ = synth_generate(SynthConfig(n_users=20, n_tracks=15), seed=1)
        a = split_8_1_1(dataset, seed=7)
        b = split_8_1_1(dataset, seed=7)
        np.testing.assert_array_equal(a.train, b.train)
        np.testing.assert_array_equal(a.test, b.test)

    def test_paper_scale_sizes(self):
        # integer arithmetic on the published interaction count
        assert split_sizes(157_472) == (125_978, 15_747, 15_747)
        assert split_sizes(10) == (8, 1, 1)

    def test_partition_property(self):
        dataset, _ = synth_generate(SynthConfig(n_users=30, n_tracks=20), seed=2)
        split = split_8_1_1(dataset, seed=3)
        # reassemble before the cold-user drop using sizes only
        n = dataset.interactions.shape[0]
        n_train, n_val, n_test = split_sizes(n)
        assert split.train.shape[0] == n_train
        assert split.val.shape[0] + split.dropped_val == n_val
        assert split.test.shape[0] + split.dropped_test == n_test
        combined = np.vstack([split.train, split.val, split.test])
        all_rows = {tuple(r) for r in dataset.interactions}
        assert all(tuple(r) in all_rows for r in combined)

    def test_every_test_user_in_train(self):
        dataset, _ = synth_generate(SynthConfig(n_users=40, n_tracks=25), seed=5)
        split = split_8_1_1(dataset, seed=5)
        train_users = set(split.train[:, 0].tolist())
        assert all(int(u) in train_users for u in split.test[:, 0])


class TestNegativeSampler:
    def test_single_remaining_track(self):
        listened = [{0, 1}]
        sampler = NegativeSampler(3, listened, Rng(0))
        # positive item 1 already listened; only track 2 remains
        got = sampler.sample(0, 1, 1)
        assert got.tolist() == [2]

    def test_never_hits_listened(self):
        dataset, _ = synth_generate(SynthConfig(n_users=10, n_tracks=30), seed=4)
        split = split_8_1_1(dataset, seed=4)
        sampler = NegativeSampler(30, split.listened, Rng(1))
        u, _, v = split.train[0]
        banned = split.listened[int(u)] | {int(v)}
        for _ in range(10_000):
            for track in sampler.sample(int(u), int(v), 3):
                assert int(track) not in banned

    def test_uniform_over_pool(self):
        listened = [set(range(5))]  # tracks 0..4 heard, pool = 20 tracks (5..24)
        sampler = NegativeSampler(25, listened, Rng(7))
        counts = np.zeros(25, dtype=int)
        for _ in range(50_000):
            for track in sampler.sample(0, 0, 2):
                counts[track] += 1
        pool_counts = counts[5:]
        assert counts[:5].sum() == 0
        result = stats.chisquare(pool_counts)
        assert result.pvalue > 0.01

    def test_small_pool_returns_all_with_warning(self):
        sampler = NegativeSampler(4, [{0}], Rng(0))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            got = sampler.sample(0, 1, 5)
        assert sorted(got.tolist()) == [2, 3]
        assert any("negative pool" in str(w.message) for w in caught)


class TestSynth:
    def test_zero_heterogeneity_shares_mapping(self):
        cfg = SynthConfig(
            n_users=30,
            n_tracks=20,
            n_groups=3,
            pref_across=0.0,
            emotion_across=0.0,
            emotion_within=0.0,
            pref_within=0.0,
        )
        _, truth = synth_generate(cfg, seed=0)
        targets = np.array(truth["group_tag_target"])
        for g in range(1, 3):
            np.testing.assert_allclose(targets[g], targets[0], atol=1e-12)

    def test_group_recovery_by_genre_kmeans(self):
        from moodrec.grouping import genre_profiles, kmeans

        from oracles import rand_index

        cfg = SynthConfig(
            n_users=80,
            n_tracks=40,
            n_groups=2,
            group_corners=[4, 6],  # calmness vs joyful activation
            genre_mix=0.1,
        )
        dataset, truth = synth_generate(cfg, seed=11)
        split = split_8_1_1(dataset, seed=11)
        user_ids, profiles = genre_profiles(dataset, split)
        labels, _, _ = kmeans(profiles, 2, seed=1)
        true_labels = [truth["group_of_user"][int(u)] for u in user_ids]
        assert rand_index(labels.tolist(), true_labels) > 0.95

    def test_generation_speed(self):
        start = time.monotonic()
        synth_generate(SynthConfig(n_users=200, n_tracks=50, n_tags=8), seed=0)
        assert time.monotonic() - start < 1.0

    def test_moods_are_simplex(self):
        dataset, _ = synth_generate(SynthConfig(n_users=10, n_tracks=12), seed=2)
        moods = dataset.music.moods
        assert np.all(moods >= 0)
        np.testing.assert_allclose(moods.sum(axis=1), 1.0, atol=1e-9)

    def test_inconsistent_config_rejected(self):
        with pytest.raises(ValueError, match="groups"):
            SynthConfig(n_users=3, n_groups=5)

    def test_deterministic(self):
        cfg = SynthConfig(n_users=15, n_tracks=10)
        a, _ = synth_generate(cfg, seed=3)
        b, _ = synth_generate(cfg, seed=3)
        np.testing.assert_array_equal(a.interactions, b.interactions)
        np.testing.assert_array_equal(a.music.moods, b.music.moods)
