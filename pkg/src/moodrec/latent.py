"""Latent emotion machinery: the prior encoder (user representation ->
per-user latent Gaussian), the posterior encoder (emotion vector ->
per-event latent Gaussian), the two reconstruction networks, and their
KL / reconstruction loss terms.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .mood import bnn_forward
from .numerics import GaussianEncoder, Mlp, Rng, softmax

LATENT_DIM = 16
EMBED_DIM = 64
HIDDEN = 64


class LatentGaussian(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray


class InferenceNets:
    """The four networks around the latent emotion space.

    prior_net:  user embedding (64) -> (mu, sigma) of the user prior
    post_net:   emotion vector (16) -> (mu, sigma) of the event posterior
    user_dec:   latent sample (16)  -> reconstructed user embedding (64)
    emo_dec:    latent sample (16)  -> reconstructed emotion vector (16)
    """

    def __init__(self, prior_net, post_net, user_dec, emo_dec):
        self.prior_net = prior_net
        self.post_net = post_net
        self.user_dec = user_dec
        self.emo_dec = emo_dec

    @classmethod
    def init(cls, rng: Rng) -> "InferenceNets":
        return cls(
            GaussianEncoder.init(rng.split("prior-net"), EMBED_DIM, HIDDEN, LATENT_DIM),
            GaussianEncoder.init(rng.split("post-net"), LATENT_DIM, HIDDEN, LATENT_DIM),
            Mlp.init(rng.split("user-dec"), (LATENT_DIM, HIDDEN, EMBED_DIM), ("relu", "identity")),
            Mlp.init(rng.split("emo-dec"), (LATENT_DIM, HIDDEN, LATENT_DIM), ("relu", "identity")),
        )

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(self.prior_net.params("prior"))
        out.update(self.post_net.params("post"))
        out.update(self.user_dec.params("udec"))
        out.update(self.emo_dec.params("edec"))
        return out

    def copy(self) -> "InferenceNets":
        return InferenceNets(
            self.prior_net.copy(),
            self.post_net.copy(),
            self.user_dec.copy(),
            self.emo_dec.copy(),
        )


def infer_prior(nets: InferenceNets, r_u: np.ndarray) -> LatentGaussian:
    """Per-user prior latent Gaussian from the user embedding."""
    r_u = np.asarray(r_u, dtype=float)
    if r_u.shape[-1] != EMBED_DIM:
        raise ValueError(f"user embedding must have dim {EMBED_DIM}")
    mu, sigma, _ = nets.prior_net.forward(np.atleast_2d(r_u))
    if r_u.ndim == 1:
        return LatentGaussian(mu[0], sigma[0])
    return LatentGaussian(mu, sigma)


def infer_posterior(nets: InferenceNets, s: np.ndarray) -> LatentGaussian:
    """Per-event posterior latent Gaussian from the emotion vector."""
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != LATENT_DIM:
        raise ValueError(f"emotion vector must have dim {LATENT_DIM}")
    mu, sigma, _ = nets.post_net.forward(np.atleast_2d(s))
    if s.ndim == 1:
        return LatentGaussian(mu[0], sigma[0])
    return LatentGaussian(mu, sigma)


def led_losses(nets: InferenceNets, r_u: np.ndarray, s: np.ndarray, eps_u, eps_z):
    """The four latent-loss terms for a batch pairing one user embedding
    with one emotion vector per row.

    kl_prior:  mean over rows of KL(prior || N(0, I)), summed over dims
    kl_post:   mean over rows of KL(posterior || that row's prior)
    mse_emo:   mean squared error reconstructing s from a posterior sample
    mse_user:  mean squared error reconstructing r_u from a prior sample
    """
    r_u = np.atleast_2d(np.asarray(r_u, dtype=float))
    s = np.atleast_2d(np.asarray(s, dtype=float))
    if r_u.shape[0] != s.shape[0]:
        raise ValueError("r_u and s must have the same number of rows")
    n = r_u.shape[0]
    mu1, sig1, _ = nets.prior_net.forward(r_u)
    mu2, sig2, _ = nets.post_net.forward(s)
    kl_prior = float(
        (0.5 * (mu1**2 + sig1**2 - np.log(sig1**2) - 1.0)).sum(axis=1).mean()
    )
    kl_post = float(
        (
            0.5
            * (
                np.log(sig1**2 / sig2**2)
                + sig2**2 / sig1**2
                + (mu2 - mu1) ** 2 / sig1**2
                - 1.0
            )
        )
        .sum(axis=1)
        .mean()
    )
    z_u = mu1 + sig1 * eps_u
    z_uv = mu2 + sig2 * eps_z
    r_rec, _ = nets.user_dec.forward(z_u)
    s_rec, _ = nets.emo_dec.forward(z_uv)
    mse_user = float(np.mean((r_u - r_rec) ** 2))
    mse_emo = float(np.mean((s - s_rec) ** 2))
    return {
        "kl_prior": kl_prior,
        "kl_post": kl_post,
        "mse_emo": mse_emo,
        "mse_user": mse_user,
    }


def sweep_led_dimension(nets: InferenceNets, posterior, s: np.ndarray, dim: int, grid):
    """Vary one latent dimension on a fixed posterior mean and record the
    mood trajectories: returns an (len(grid), 9) array of simplex rows.

    ``posterior`` is the mood net for the user's group; sampling is off
    (posterior mean latents, mean weights).
    """
    if not 0 <= dim < LATENT_DIM:
        raise ValueError(f"dim must be in [0, {LATENT_DIM})")
    grid = np.asarray(grid, dtype=float)
    mu, _, _ = nets.post_net.forward(np.atleast_2d(np.asarray(s, dtype=float)))
    z = np.repeat(mu[:1], len(grid), axis=0)
    z[:, dim] = grid
    logits, _ = bnn_forward(posterior.mean_weights(), z)
    return softmax(logits)
