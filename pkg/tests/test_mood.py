import numpy as np
import pytest

from moodrec.data import N_MOODS
from moodrec.mood import (
    ARCH,
    BnnPosterior,
    MoodTrainConfig,
    bnn_loss,
    bnn_loss_and_grads,
    data_kl_loss,
    finetune_group,
    load_posterior,
    mean_data_kl,
    posterior_to_json,
    predict_mood,
    predict_mood_mean,
    pretrain,
    save_posterior,
    softplus_inv,
)
from moodrec.numerics import Rng, gaussian_kl, gaussian_kl_to_std, grad_check, softmax
from moodrec.synth import corner_distribution


def tiny_posterior(seed=0, init_sigma=0.05):
    return BnnPosterior.init(Rng(seed).split("weights-init"), init_sigma=init_sigma)


class TestSampling:
    def test_zero_sigma_returns_means(self):
        post = tiny_posterior()
        for i in range(post.n_layers):
            post.rho_w[i][:] = softplus_inv(1e-12)
            post.rho_b[i][:] = softplus_inv(1e-12)
        sampled = post.sample_weights(Rng(1))
        means = post.mean_weights()
        for (w_s, b_s), (w_m, b_m) in zip(sampled, means):
            np.testing.assert_allclose(w_s, w_m, atol=1e-10)
            np.testing.assert_allclose(b_s, b_m, atol=1e-10)

    def test_different_draws_differ(self):
        post = tiny_posterior()
        rng = Rng(2)
        a = post.sample_weights(rng)
        b = post.sample_weights(rng)
        assert not np.allclose(a[0][0], b[0][0])

    def test_sample_mean_approaches_mu(self):
        post = tiny_posterior()
        rng = Rng(3)
        total = np.zeros_like(post.mu_w[0])
        n = 10_000
        for _ in range(n):
            total += post.mu_w[0] + post.sigma_w(0) * rng.normal(*post.mu_w[0].shape)
        sample_mean = total / n
        stderr = post.sigma_w(0) / np.sqrt(n)
        assert np.all(np.abs(sample_mean - post.mu_w[0]) < 3.5 * stderr + 1e-12)


class TestPredictMood:
    def test_zero_network_uniform(self):
        post = tiny_posterior()
        for i in range(post.n_layers):
            post.mu_w[i][:] = 0.0
            post.mu_b[i][:] = 0.0
            post.rho_w[i][:] = softplus_inv(1e-9)
            post.rho_b[i][:] = softplus_inv(1e-9)
        out = predict_mood(post, np.zeros(ARCH[0]), Rng(0))
        np.testing.assert_allclose(out, np.full(N_MOODS, 1 / 9), atol=1e-6)

    def test_output_is_simplex(self):
        post = tiny_posterior(4)
        rng = Rng(5)
        for _ in range(1000):
            out = predict_mood(post, rng.normal(ARCH[0]), rng)
            assert abs(out.sum() - 1.0) < 1e-9
            assert np.all(out >= 0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            predict_mood_mean(tiny_posterior(), np.zeros(5))


class TestWeightKl:
    def test_matches_per_weight_sum(self):
        post = tiny_posterior(6)
        rng = Rng(7)
        for i in range(post.n_layers):
            post.mu_w[i][:] = rng.normal(*post.mu_w[i].shape) * 0.3
            post.rho_w[i][:] = rng.normal(*post.rho_w[i].shape) * 0.2 - 2.0
        total = 0.0
        for i in range(post.n_layers):
            for mu, sigma in (
                (post.mu_w[i], post.sigma_w(i)),
                (post.mu_b[i], post.sigma_b(i)),
            ):
                for m, s in zip(mu.ravel(), sigma.ravel()):
                    total += gaussian_kl_to_std([m], [s])
        assert post.weight_kl_to_std() == pytest.approx(total, abs=1e-9)

    def test_anchor_form_matches_per_weight_sum(self):
        post = tiny_posterior(8)
        anchor = tiny_posterior(9)
        total = 0.0
        for i in range(post.n_layers):
            for mu, sigma, amu, asig in (
                (post.mu_w[i], post.sigma_w(i), anchor.mu_w[i], anchor.sigma_w(i)),
                (post.mu_b[i], post.sigma_b(i), anchor.mu_b[i], anchor.sigma_b(i)),
            ):
                for m, s, am, a_s in zip(
                    mu.ravel(), sigma.ravel(), amu.ravel(), asig.ravel()
                ):
                    total += gaussian_kl([m], [s], [am], [a_s])
        assert post.weight_kl_to(anchor) == pytest.approx(total, abs=1e-9)

    def test_zero_against_self(self):
        post = tiny_posterior(10)
        assert post.weight_kl_to(post) == pytest.approx(0.0, abs=1e-12)


class TestGradients:
    # alpha at the production scale keeps the constant weight-KL bulk
    # from drowning the finite differences in cancellation noise

    def test_pretrain_loss_gradient(self):
        post = tiny_posterior(11)
        rng = Rng(12)
        s = rng.normal(16, ARCH[0])
        o = softmax(rng.normal(16, N_MOODS), axis=1)
        eps = post.draw_eps(rng.split("eps"))
        params = post.params()

        def loss(ps):
            value, _, _, grads = bnn_loss_and_grads(post, s, o, eps, alpha=1e-4, anchor=None)
            return value, {f"bnn.{k}": v for k, v in grads.items()}

        report = grad_check(
            loss, params, eps=1e-5, loss_only=lambda ps: bnn_loss(post, s, o, eps, 1e-4, None)
        )
        assert report.max_rel_error < 1e-4, str(report)

    def test_finetune_loss_gradient_with_anchor(self):
        post = tiny_posterior(13)
        anchor = tiny_posterior(14)
        rng = Rng(15)
        s = rng.normal(16, ARCH[0])
        o = softmax(rng.normal(16, N_MOODS), axis=1)
        eps = post.draw_eps(rng.split("eps"))
        params = post.params()

        def loss(ps):
            value, _, _, grads = bnn_loss_and_grads(post, s, o, eps, alpha=1e-4, anchor=anchor)
            return value, {f"bnn.{k}": v for k, v in grads.items()}

        report = grad_check(
            loss, params, eps=1e-5, loss_only=lambda ps: bnn_loss(post, s, o, eps, 1e-4, anchor)
        )
        assert report.max_rel_error < 1e-4, str(report)


class TestTraining:
    def test_constant_target_converges(self):
        target = corner_distribution(4, 4.0)
        rng = Rng(16)
        s = rng.normal(64, ARCH[0])
        o = np.tile(target, (64, 1))
        cfg = MoodTrainConfig(lr=0.1, batch_size=16, alpha=1e-6, epochs=200)
        history = []
        pretrain(s, o, cfg, Rng(17), history)
        assert min(row["data_kl"] for row in history) < 0.01
        assert np.mean([row["data_kl"] for row in history[-10:]]) < 0.02

    def test_huge_alpha_pins_posterior_to_prior(self):
        rng = Rng(18)
        s = rng.normal(128, ARCH[0])
        o = softmax(rng.normal(128, N_MOODS), axis=1)
        cfg = MoodTrainConfig(lr=0.001, batch_size=64, alpha=1e3, epochs=5)
        post = pretrain(s, o, cfg, Rng(19))
        # the prior term dominates: posterior stays near N(0, 1)
        assert post.weight_kl_to_std() < 0.01 * sum(
            post.mu_w[i].size + post.mu_b[i].size for i in range(post.n_layers)
        )

    def test_history_records_both_terms(self):
        rng = Rng(20)
        s = rng.normal(32, ARCH[0])
        o = softmax(rng.normal(32, N_MOODS), axis=1)
        history = []
        pretrain(s, o, MoodTrainConfig(epochs=3, batch_size=16), Rng(21), history)
        assert len(history) == 3
        assert all({"epoch", "data_kl", "weight_kl"} <= set(row) for row in history)

    def test_finetune_does_not_mutate_global(self):
        rng = Rng(22)
        s = rng.normal(48, ARCH[0])
        o = softmax(rng.normal(48, N_MOODS), axis=1)
        global_post = pretrain(s, o, MoodTrainConfig(epochs=2, batch_size=16), Rng(23))
        before = [a.copy() for a in global_post.mu_w]
        finetune_group(global_post, s, o, MoodTrainConfig(epochs=3, batch_size=16), Rng(24))
        for a, b in zip(global_post.mu_w, before):
            np.testing.assert_array_equal(a, b)

    def test_empty_group_returns_copy_with_warning(self):
        global_post = tiny_posterior(25)
        with pytest.warns(UserWarning, match="empty group"):
            copy = finetune_group(
                global_post,
                np.zeros((0, ARCH[0])),
                np.zeros((0, N_MOODS)),
                MoodTrainConfig(epochs=1),
                Rng(26),
            )
        assert copy is not global_post
        np.testing.assert_array_equal(copy.mu_w[0], global_post.mu_w[0])

    def test_matched_distribution_no_shift(self):
        # group data drawn from the same generator as the full data:
        # fine-tuning should not be much worse than the global net
        rng = Rng(27)
        target = corner_distribution(2, 4.0)
        s = rng.normal(256, ARCH[0])
        o = np.tile(target, (256, 1))
        global_post = pretrain(s, o, MoodTrainConfig(epochs=60, batch_size=64), Rng(28))
        group = finetune_group(
            global_post, s[:128], o[:128], MoodTrainConfig(lr=0.001, epochs=10, batch_size=64), Rng(29)
        )
        global_kl = mean_data_kl(global_post, s[:128], o[:128])
        group_kl = mean_data_kl(group, s[:128], o[:128])
        assert group_kl <= global_kl + 0.01


class TestPersistence:
    def test_round_trip(self, tmp_path):
        post = tiny_posterior(30)
        save_posterior(post, tmp_path / "bnn.npz", {"note": "test"}, seed=30)
        loaded = load_posterior(tmp_path / "bnn.npz")
        for i in range(post.n_layers):
            np.testing.assert_array_equal(loaded.mu_w[i], post.mu_w[i])
            np.testing.assert_array_equal(loaded.rho_w[i], post.rho_w[i])

    def test_json_dump_parses(self):
        import json

        payload = json.loads(posterior_to_json(tiny_posterior(31)))
        assert payload["arch"] == list(ARCH)
        assert "mu_w0" in payload


class TestDataKl:
    def test_zero_when_equal(self):
        o = softmax(Rng(0).normal(4, N_MOODS), axis=1)
        assert data_kl_loss(o, o) == pytest.approx(0.0, abs=1e-12)

    def test_mean_over_records(self):
        o = np.array([[1.0] + [0.0] * 8, [1.0] + [0.0] * 8])
        l = np.array([[0.5] + [0.5 / 8] * 8, [1.0] + [0.0] * 8])
        assert data_kl_loss(o, l) == pytest.approx(np.log(2.0) / 2, abs=1e-9)
