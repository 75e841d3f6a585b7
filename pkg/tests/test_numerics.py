import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moodrec.numerics import (
    Dense,
    GaussianEncoder,
    Mlp,
    Rng,
    categorical_kl,
    gaussian_kl,
    gaussian_kl_to_std,
    grad_check,
    mse,
    reparam_sample,
    softmax,
)

from oracles import (
    kl_categorical_loop,
    kl_gaussian_quadrature,
    mse_loop,
    softmax_loop,
)


class TestGaussianKlToStd:
    def test_identical_distributions(self):
        assert gaussian_kl_to_std([0.0], [1.0]) == 0.0

    def test_unit_mean_shift(self):
        assert gaussian_kl_to_std([1.0], [1.0]) == pytest.approx(0.5, abs=1e-15)

    def test_matches_quadrature_oracle(self):
        # frozen from the quadrature oracle at span 10, 4001 points
        assert gaussian_kl_to_std([0.3, -0.7], [0.8, 1.2]) == pytest.approx(
            0.3708219945202551, abs=1e-6
        )
        got = gaussian_kl_to_std([0.3, -0.7], [0.8, 1.2])
        ref = kl_gaussian_quadrature([0.3, -0.7], [0.8, 1.2], [0, 0], [1, 1])
        assert got == pytest.approx(ref, abs=1e-6)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            gaussian_kl_to_std([0.0], [0.0])
        with pytest.raises(ValueError):
            gaussian_kl_to_std([0.0], [-1.0])

    def test_equals_general_form_exactly(self):
        rng = Rng(7)
        for _ in range(20):
            mu = rng.normal(6)
            sigma = np.abs(rng.normal(6)) + 0.1
            assert gaussian_kl_to_std(mu, sigma) == gaussian_kl(
                mu, sigma, np.zeros(6), np.ones(6)
            )


class TestGaussianKl:
    def test_zero_iff_equal(self):
        mu = np.array([0.4, -1.2])
        sigma = np.array([0.5, 2.0])
        assert gaussian_kl(mu, sigma, mu, sigma) == 0.0

    def test_reduces_to_std_case(self):
        assert gaussian_kl([1.0], [1.0], [0.0], [1.0]) == pytest.approx(0.5, abs=1e-15)

    def test_matches_quadrature_oracle_5dim(self):
        rng = Rng(11)
        q_mu = rng.normal(5)
        q_sigma = np.abs(rng.normal(5)) + 0.3
        p_mu = rng.normal(5)
        p_sigma = np.abs(rng.normal(5)) + 0.3
        got = gaussian_kl(q_mu, q_sigma, p_mu, p_sigma)
        ref = kl_gaussian_quadrature(q_mu, q_sigma, p_mu, p_sigma)
        assert got == pytest.approx(ref, abs=1e-6)

    @settings(max_examples=60, deadline=None)
    @given(
        dim=st.integers(min_value=1, max_value=32),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    def test_nonnegative_and_zero_on_self(self, dim, seed):
        rng = Rng(seed)
        q_mu = rng.normal(dim)
        q_sigma = np.abs(rng.normal(dim)) + 0.05
        p_mu = rng.normal(dim)
        p_sigma = np.abs(rng.normal(dim)) + 0.05
        assert gaussian_kl(q_mu, q_sigma, p_mu, p_sigma) >= 0.0
        assert gaussian_kl(q_mu, q_sigma, q_mu, q_sigma) == 0.0


class TestCategoricalKl:
    def test_identical_uniform(self):
        u = np.full(4, 0.25)
        assert categorical_kl(u, u) == 0.0

    def test_single_support_term(self):
        assert categorical_kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(
            math.log(2.0), abs=1e-12
        )

    def test_matches_loop_oracle(self):
        rng = Rng(3)
        for _ in range(50):
            o = softmax(rng.normal(9))
            l = softmax(rng.normal(9))
            assert categorical_kl(o, l) == pytest.approx(
                kl_categorical_loop(o, l), abs=1e-12
            )

    def test_floor_handles_underflow(self):
        # numerically-zero predicted mass gives a large finite value
        o = np.array([1.0, 0.0])
        l = np.array([0.0, 1.0])
        value = categorical_kl(o, l)
        assert np.isfinite(value) and value > 20.0

    def test_strict_mode_rejects_zero(self):
        with pytest.raises(ValueError):
            categorical_kl([1.0, 0.0], [0.0, 1.0], floor=0.0)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2**31))
    def test_nonnegative_zero_iff_equal(self, seed):
        rng = Rng(seed)
        o = softmax(rng.normal(9))
        l = softmax(rng.normal(9))
        assert categorical_kl(o, l) >= 0.0
        assert categorical_kl(o, o) <= 1e-12


class TestSoftmax:
    def test_uniform_on_constant(self):
        np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), np.full(3, 1 / 3), atol=1e-15)

    def test_log2_ratio(self):
        out = softmax([5.0, 5.0 + math.log(2.0)])
        np.testing.assert_allclose(out, [1 / 3, 2 / 3], atol=1e-12)

    def test_matches_naive_oracle(self):
        rng = Rng(5)
        v = rng.normal(9)
        np.testing.assert_allclose(softmax(v), softmax_loop(v), atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2**31), shift=st.floats(-50, 50))
    def test_simplex_and_shift_invariance(self, seed, shift):
        v = Rng(seed).normal(9)
        out = softmax(v)
        assert abs(out.sum() - 1.0) < 1e-9
        assert np.all(out >= 0)
        np.testing.assert_allclose(out, softmax(v + shift), atol=1e-9)
        assert np.argmax(out) == np.argmax(v)


class TestReparamSample:
    def test_zero_sigma_returns_mu(self):
        mu = np.array([1.5, -2.0])
        out = reparam_sample(mu, np.zeros(2), Rng(0))
        np.testing.assert_array_equal(out, mu)

    def test_law_of_large_numbers(self):
        rng = Rng(42)
        samples = np.stack(
            [reparam_sample(np.zeros(3), np.ones(3), rng) for _ in range(100_000)]
        )
        assert np.all(np.abs(samples.mean(axis=0)) < 0.02)
        assert np.all(np.abs(samples.var(axis=0) - 1.0) < 0.05)

    def test_fixed_seed_reproducible(self):
        a = reparam_sample(np.zeros(4), np.ones(4), Rng(9).split("x"))
        b = reparam_sample(np.zeros(4), np.ones(4), Rng(9).split("x"))
        np.testing.assert_array_equal(a, b)


class TestMse:
    def test_zero_on_equal(self):
        assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_per_element_mean(self):
        assert mse([1.0, 0.0], [0.0, 0.0]) == pytest.approx(0.5)

    def test_matches_loop_oracle(self):
        rng = Rng(13)
        a = rng.normal(17)
        b = rng.normal(17)
        assert mse(a, b) == pytest.approx(mse_loop(a, b), abs=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mse([1.0], [1.0, 2.0])


class TestRng:
    def test_same_seed_same_stream(self):
        assert np.array_equal(Rng(123).normal(10), Rng(123).normal(10))

    def test_splits_are_independent_of_order(self):
        root = Rng(123)
        a_first = root.split("a").normal(5)
        root2 = Rng(123)
        _ = root2.split("b").normal(5)
        a_second = root2.split("a").normal(5)
        np.testing.assert_array_equal(a_first, a_second)

    def test_different_labels_differ(self):
        root = Rng(1)
        assert not np.array_equal(root.split("x").normal(8), root.split("y").normal(8))


class TestGradCheck:
    def test_quadratic_loss(self):
        params = {"p": Rng(2).normal(7)}

        def loss(ps):
            return 0.5 * float(np.sum(ps["p"] ** 2)), {"p": ps["p"].copy()}

        report = grad_check(loss, params, eps=1e-5)
        assert report.max_rel_error < 1e-8

    def test_two_layer_net_with_categorical_kl(self):
        rng = Rng(21)
        net = Mlp.init(rng, (6, 12, 4), ("relu", "identity"))
        x = rng.normal(5, 6)
        target = softmax(rng.normal(5, 4), axis=1)
        params = net.params("net")

        def loss(ps):
            logits, caches = net.forward(x)
            probs = softmax(logits, axis=1)
            value = float(
                np.sum(target * (np.log(target) - np.log(probs))) / x.shape[0]
            )
            dlogits = (probs - target) / x.shape[0]
            _, grads = net.backward(dlogits, caches)
            return value, net.grads_dict("net", grads)

        report = grad_check(loss, params, eps=1e-5)
        assert report.max_rel_error < 1e-4

    def test_gaussian_encoder_heads(self):
        rng = Rng(31)
        enc = GaussianEncoder.init(rng, 8, 10, 4)
        x = rng.normal(6, 8)
        params = enc.params("enc")

        def loss(ps):
            mu, sigma, cache = enc.forward(x)
            value = float(np.sum(mu**2) + np.sum((sigma - 1.0) ** 2))
            dmu = 2 * mu
            dsigma = 2 * (sigma - 1.0)
            _, grads = enc.backward(dmu, dsigma, cache)
            return value, enc.grads_dict("enc", grads)

        report = grad_check(loss, params, eps=1e-5)
        assert report.max_rel_error < 1e-4


class TestDense:
    def test_forward_matches_matmul(self):
        layer = Dense(np.array([[1.0, 2.0], [0.0, -1.0]]), np.array([0.5, 0.0]))
        out, _ = layer.forward(np.array([[1.0, 1.0]]))
        np.testing.assert_allclose(out, [[3.5, -1.0]])

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            Dense(np.zeros((2, 3)), np.zeros(3))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Dense(np.full((1, 1), np.nan), np.zeros(1))
