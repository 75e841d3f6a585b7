"""Bayesian mood-preference network: a fixed 16 -> 64 -> 64 -> 9
architecture whose weights are diagonal Gaussian posteriors, trained by
reparameterized gradient descent (one weight-noise draw per minibatch).

Two training entry points: ``pretrain`` fits the global posterior
against the standard-normal prior; ``finetune_group`` specializes a copy
per user group with the global posterior as the KL anchor.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import (
    PROB_FLOOR,
    Rng,
    sigmoid,
    softmax,
    softplus,
)
from .validation import check_length

ARCH = (16, 64, 64, 9)
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


def softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


class BnnPosterior:
    """Per-weight Gaussian posterior over the fixed architecture.

    Stores (mu, rho) per weight matrix and bias vector; sigma =
    softplus(rho) keeps standard deviations positive. The architecture
    is immutable after construction.
    """

    def __init__(self, mu_w, rho_w, mu_b, rho_b, arch=ARCH):
        self.arch = tuple(arch)
        self.mu_w = [np.asarray(a, dtype=float) for a in mu_w]
        self.rho_w = [np.asarray(a, dtype=float) for a in rho_w]
        self.mu_b = [np.asarray(a, dtype=float) for a in mu_b]
        self.rho_b = [np.asarray(a, dtype=float) for a in rho_b]
        for i, (n_in, n_out) in enumerate(zip(self.arch[:-1], self.arch[1:])):
            if self.mu_w[i].shape != (n_out, n_in) or self.mu_b[i].shape != (n_out,):
                raise ValueError("posterior arrays do not match the architecture")

    @classmethod
    def init(cls, rng: Rng, arch=ARCH, init_sigma: float = 0.05) -> "BnnPosterior":
        rho0 = softplus_inv(init_sigma)
        mu_w, rho_w, mu_b, rho_b = [], [], [], []
        for n_in, n_out in zip(arch[:-1], arch[1:]):
            bound = 1.0 / np.sqrt(n_in)
            mu_w.append(rng.uniform(-bound, bound, (n_out, n_in)))
            rho_w.append(np.full((n_out, n_in), rho0))
            mu_b.append(np.zeros(n_out))
            rho_b.append(np.full(n_out, rho0))
        return cls(mu_w, rho_w, mu_b, rho_b, arch)

    @property
    def n_layers(self) -> int:
        return len(self.arch) - 1

    def sigma_w(self, i: int) -> np.ndarray:
        return softplus(self.rho_w[i])

    def sigma_b(self, i: int) -> np.ndarray:
        return softplus(self.rho_b[i])

    def copy(self) -> "BnnPosterior":
        return BnnPosterior(
            [a.copy() for a in self.mu_w],
            [a.copy() for a in self.rho_w],
            [a.copy() for a in self.mu_b],
            [a.copy() for a in self.rho_b],
            self.arch,
        )

    def params(self, prefix: str = "bnn") -> dict[str, np.ndarray]:
        out = {}
        for i in range(self.n_layers):
            out[f"{prefix}.mu_w{i}"] = self.mu_w[i]
            out[f"{prefix}.rho_w{i}"] = self.rho_w[i]
            out[f"{prefix}.mu_b{i}"] = self.mu_b[i]
            out[f"{prefix}.rho_b{i}"] = self.rho_b[i]
        return out

    def draw_eps(self, rng: Rng):
        """One noise draw matching every parameter array."""
        return [
            (rng.normal(*self.mu_w[i].shape), rng.normal(*self.mu_b[i].shape))
            for i in range(self.n_layers)
        ]

    def realize(self, eps=None):
        """Concrete weights mu + sigma * eps (or the means when eps is None)."""
        weights = []
        for i in range(self.n_layers):
            if eps is None:
                weights.append((self.mu_w[i].copy(), self.mu_b[i].copy()))
            else:
                ew, eb = eps[i]
                weights.append(
                    (
                        self.mu_w[i] + self.sigma_w(i) * ew,
                        self.mu_b[i] + self.sigma_b(i) * eb,
                    )
                )
        return weights

    def sample_weights(self, rng: Rng):
        return self.realize(self.draw_eps(rng))

    def mean_weights(self):
        return self.realize(None)

    def weight_kl_to_std(self) -> float:
        """KL(q(weights) || N(0, I)) summed over every scalar weight."""
        total = 0.0
        for i in range(self.n_layers):
            for mu, sigma in (
                (self.mu_w[i], self.sigma_w(i)),
                (self.mu_b[i], self.sigma_b(i)),
            ):
                total += 0.5 * float(
                    np.sum(mu**2 + sigma**2 - np.log(sigma**2) - 1.0)
                )
        return total

    def weight_kl_to(self, anchor: "BnnPosterior") -> float:
        """KL(q(self) || q(anchor)) summed over every scalar weight."""
        total = 0.0
        for i in range(self.n_layers):
            for mu, sigma, amu, asig in (
                (self.mu_w[i], self.sigma_w(i), anchor.mu_w[i], anchor.sigma_w(i)),
                (self.mu_b[i], self.sigma_b(i), anchor.mu_b[i], anchor.sigma_b(i)),
            ):
                total += 0.5 * float(
                    np.sum(
                        np.log(asig**2 / sigma**2)
                        + sigma**2 / asig**2
                        + (mu - amu) ** 2 / asig**2
                        - 1.0
                    )
                )
        return total


# ---------------------------------------------------------------------------
# Forward/backward through concrete weights


def bnn_forward(weights, x: np.ndarray):
    """Relu hidden layers, linear output logits. Returns (logits, caches)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    caches = []
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(weights):
        pre = h @ w.T + b
        caches.append((h, pre))
        h = pre if i == last else np.maximum(pre, 0.0)
    return h, caches


def bnn_backward(weights, caches, dlogits: np.ndarray, want_weight_grads: bool = True):
    """Backprop to the input and optionally to the concrete weights."""
    grads = [None] * len(weights) if want_weight_grads else None
    dh = dlogits
    last = len(weights) - 1
    for i in reversed(range(len(weights))):
        x, pre = caches[i]
        da = dh if i == last else dh * (pre > 0)
        if want_weight_grads:
            grads[i] = (da.T @ x, da.sum(axis=0))
        dh = da @ weights[i][0]
    return dh, grads


def predict_mood(posterior: BnnPosterior, s, rng: Rng) -> np.ndarray:
    """Sampled mood preference: fresh weight noise per call."""
    s = check_length(s, posterior.arch[0], "emotion vector")
    logits, _ = bnn_forward(posterior.sample_weights(rng), s)
    return softmax(logits)[0] if logits.shape[0] == 1 else softmax(logits)

def predict_mood_mean(posterior: BnnPosterior, s) -> np.ndarray:
    """Deterministic mood preference using the posterior means."""
    s = check_length(s, posterior.arch[0], "emotion vector")
    logits, _ = bnn_forward(posterior.mean_weights(), s)
    return softmax(logits)[0] if logits.shape[0] == 1 else softmax(logits)


# ---------------------------------------------------------------------------
# Training


@dataclass
class MoodTrainConfig:
    lr: float = 0.01
    batch_size: int = 1024
    alpha: float = 1e-5
    epochs: int = 30
    sample_weights: bool = True  # off = deterministic network, no weight KL


def data_kl_loss(o: np.ndarray, l: np.ndarray) -> float:
    """Mean over records of KL(o || l), summed over mood categories."""
    l = np.maximum(l, PROB_FLOOR)
    mask = o > 0
    terms = np.where(mask, o * np.log(np.where(mask, o, 1.0) / l), 0.0)
    return float(terms.sum(axis=1).mean())


def mean_data_kl(posterior: BnnPosterior, s: np.ndarray, o: np.ndarray) -> float:
    """Deterministic-mode data KL over a full table of (s, o) pairs."""
    logits, _ = bnn_forward(posterior.mean_weights(), s)
    return data_kl_loss(o, softmax(logits))


def _weight_kl_grads(posterior, anchor):
    """Gradients of the weight KL wrt (mu, rho); anchor None means N(0,1)."""
    grads = {}
    for i in range(posterior.n_layers):
        for kind in ("w", "b"):
            mu = getattr(posterior, f"mu_{kind}")[i]
            rho = getattr(posterior, f"rho_{kind}")[i]
            sigma = softplus(rho)
            if anchor is None:
                dmu = mu
                dsig = sigma - 1.0 / sigma
            else:
                amu = getattr(anchor, f"mu_{kind}")[i]
                asig = softplus(getattr(anchor, f"rho_{kind}")[i])
                dmu = (mu - amu) / asig**2
                dsig = sigma / asig**2 - 1.0 / sigma
            grads[f"mu_{kind}{i}"] = dmu
            grads[f"rho_{kind}{i}"] = dsig * sigmoid(rho)
    return grads


def bnn_loss(
    posterior: BnnPosterior,
    s: np.ndarray,
    o: np.ndarray,
    eps,
    alpha: float,
    anchor: BnnPosterior | None,
) -> float:
    """Forward-only value of the phase-one objective (for checking)."""
    logits, _ = bnn_forward(posterior.realize(eps), s)
    value = data_kl_loss(o, softmax(logits))
    if eps is not None and alpha > 0:
        kl = posterior.weight_kl_to_std() if anchor is None else posterior.weight_kl_to(anchor)
        value += alpha * kl
    return value


def bnn_loss_and_grads(
    posterior: BnnPosterior,
    s: np.ndarray,
    o: np.ndarray,
    eps,
    alpha: float,
    anchor: BnnPosterior | None,
):
    """Loss = mean data KL + alpha * weight KL, with gradients wrt (mu, rho).

    ``eps`` is the frozen weight-noise draw (None for deterministic
    weights, which also drops the weight-KL term).
    """
    n = s.shape[0]
    weights = posterior.realize(eps)
    logits, caches = bnn_forward(weights, s)
    l = softmax(logits)
    data_term = data_kl_loss(o, l)
    # d(mean KL)/d logits = (l - o)/n when each o row sums to 1
    dlogits = (l - o) / n
    _, wgrads = bnn_backward(weights, caches, dlogits)
    grads = {}
    for i, (dw, db) in enumerate(wgrads):
        grads[f"mu_w{i}"] = dw
        grads[f"mu_b{i}"] = db
        if eps is not None:
            ew, eb = eps[i]
            grads[f"rho_w{i}"] = dw * ew * sigmoid(posterior.rho_w[i])
            grads[f"rho_b{i}"] = db * eb * sigmoid(posterior.rho_b[i])
        else:
            grads[f"rho_w{i}"] = np.zeros_like(posterior.rho_w[i])
            grads[f"rho_b{i}"] = np.zeros_like(posterior.rho_b[i])
    if eps is not None and alpha > 0:
        kl = posterior.weight_kl_to_std() if anchor is None else posterior.weight_kl_to(anchor)
        for name, g in _weight_kl_grads(posterior, anchor).items():
            grads[name] = grads[name] + alpha * g
    else:
        kl = 0.0
    return data_term + alpha * kl, data_term, kl, grads


def _sgd_posterior(posterior: BnnPosterior, grads: dict, lr: float) -> None:
    for i in range(posterior.n_layers):
        posterior.mu_w[i] -= lr * grads[f"mu_w{i}"]
        posterior.mu_b[i] -= lr * grads[f"mu_b{i}"]
        posterior.rho_w[i] -= lr * grads[f"rho_w{i}"]
        posterior.rho_b[i] -= lr * grads[f"rho_b{i}"]


def _train(posterior, s, o, config, rng, anchor, history):
    n = s.shape[0]
    order_rng = rng.split("batch-order")
    eps_rng = rng.split("eps-weights")
    for epoch in range(config.epochs):
        order = order_rng.permutation(n)
        epoch_data, epoch_kl, n_batches = 0.0, 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            eps = posterior.draw_eps(eps_rng) if config.sample_weights else None
            loss, data_term, kl, grads = bnn_loss_and_grads(
                posterior, s[idx], o[idx], eps, config.alpha, anchor
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch} (data={data_term}, kl={kl})"
                )
            _sgd_posterior(posterior, grads, config.lr)
            epoch_data += data_term
            epoch_kl += kl
            n_batches += 1
        if history is not None:
            history.append(
                {
                    "epoch": epoch,
                    "data_kl": epoch_data / n_batches,
                    "weight_kl": epoch_kl / n_batches,
                }
            )
    return posterior


def pretrain(
    s: np.ndarray,
    o: np.ndarray,
    config: MoodTrainConfig,
    rng: Rng,
    history: list | None = None,
) -> BnnPosterior:
    """Fit the global posterior on all (emotion vector, music mood) pairs."""
    if s.shape[0] == 0:
        raise ValueError("empty training data")
    posterior = BnnPosterior.init(rng.split("weights-init"))
    return _train(posterior, s, o, config, rng, None, history)


def finetune_group(
    global_posterior: BnnPosterior,
    s: np.ndarray,
    o: np.ndarray,
    config: MoodTrainConfig,
    rng: Rng,
    history: list | None = None,
) -> BnnPosterior:
    """Specialize a copy of the global posterior on one group's records.

    The copy starts at the global parameters and is pulled back toward
    the (frozen) global posterior by the weight-KL term.
    """
    if s.shape[0] == 0:
        warnings.warn("empty group: returning a copy of the global posterior", stacklevel=2)
        return global_posterior.copy()
    posterior = global_posterior.copy()
    return _train(posterior, s, o, config, rng, global_posterior, history)


# ---------------------------------------------------------------------------
# Persistence


def posterior_state(posterior: BnnPosterior) -> dict[str, np.ndarray]:
    out = {}
    for i in range(posterior.n_layers):
        out[f"mu_w{i}"] = posterior.mu_w[i]
        out[f"rho_w{i}"] = posterior.rho_w[i]
        out[f"mu_b{i}"] = posterior.mu_b[i]
        out[f"rho_b{i}"] = posterior.rho_b[i]
    return out


def posterior_from_state(state, arch=ARCH) -> BnnPosterior:
    n = len(arch) - 1
    return BnnPosterior(
        [np.asarray(state[f"mu_w{i}"]) for i in range(n)],
        [np.asarray(state[f"rho_w{i}"]) for i in range(n)],
        [np.asarray(state[f"mu_b{i}"]) for i in range(n)],
        [np.asarray(state[f"rho_b{i}"]) for i in range(n)],
        arch,
    )


def save_posterior(posterior: BnnPosterior, path, config: dict | None = None, seed=None):
    meta = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "arch": list(posterior.arch),
            "config": config or {},
            "seed": seed,
        }
    )
    np.savez(path, __meta__=np.array(meta), **posterior_state(posterior))


def load_posterior(path) -> BnnPosterior:
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["__meta__"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint version {meta['version']} != supported {CHECKPOINT_VERSION}"
            )
        return posterior_from_state(blob, tuple(meta["arch"]))


def posterior_to_json(posterior: BnnPosterior) -> str:
    """Inspection dump: every posterior array as nested lists."""
    payload = {"arch": list(posterior.arch)}
    for name, arr in posterior_state(posterior).items():
        payload[name] = arr.tolist()
    return json.dumps(payload)
