"""Dense numerics substrate: seeded RNG, linear layers with explicit
gradients, Gaussian/categorical divergences, and a finite-difference
gradient checker.

Everything here is plain float64 numpy. Layers carry their own backward
pass; there is no general autodiff. All stochastic code draws from an
``Rng``, which is splittable into independent labeled substreams so each
subsystem can be seeded and tested in isolation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

# Floor added to softplus sigma heads so standard deviations stay
# strictly positive even for very negative raw outputs.
SIGMA_FLOOR = 1e-6

# Floor applied to predicted categorical probabilities before log;
# softmax outputs can underflow to exactly 0.0.
PROB_FLOOR = 1e-12


class Rng:
    """Deterministic random stream, splittable by label.

    The same (seed, call sequence) always yields the same outputs.
    ``split(label)`` derives an independent child stream whose seed
    depends only on (seed, label), never on draw position, so modules
    can own their noise without perturbing each other.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.default_rng(np.random.SeedSequence(self.seed))

    def split(self, label: str) -> "Rng":
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child._gen = np.random.default_rng(
            np.random.SeedSequence([self.seed, int.from_bytes(digest, "little")])
        )
        return child

    def normal(self, *shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)


def as_vec(x) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains NaN or Inf")
    return v


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax (max-subtracted); rows sum to 1."""
    v = np.asarray(v, dtype=float)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(np.asarray(x, dtype=float))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gaussian_kl_to_std(mu, sigma) -> float:
    """KL(N(mu, sigma^2) || N(0, I)) for a diagonal Gaussian.

    Closed form: 0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1); evaluated
    through the general two-Gaussian form so the two agree bit-exactly.
    """
    mu = as_vec(mu)
    sigma = as_vec(sigma)
    return gaussian_kl(mu, sigma, np.zeros_like(mu), np.ones_like(sigma))


def gaussian_kl(q_mu, q_sigma, p_mu, p_sigma) -> float:
    """KL between two diagonal Gaussians q and p.

    Closed form: 0.5 * sum(log(p_s^2/q_s^2) + q_s^2/p_s^2
    + (q_mu - p_mu)^2 / p_s^2 - 1). Zero iff q == p elementwise.
    """
    q_mu, q_sigma = as_vec(q_mu), as_vec(q_sigma)
    p_mu, p_sigma = as_vec(p_mu), as_vec(p_sigma)
    if np.any(q_sigma <= 0) or np.any(p_sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    return 0.5 * float(
        np.sum(
            np.log(p_sigma**2 / q_sigma**2)
            + q_sigma**2 / p_sigma**2
            + (q_mu - p_mu) ** 2 / p_sigma**2
            - 1.0
        )
    )


def categorical_kl(o, l, floor: float = PROB_FLOOR) -> float:
    """KL(o || l) = sum_i o_i log(o_i / l_i) over a shared support.

    ``l`` is clamped at ``floor`` before the log so numerically-zero
    predicted probabilities give a large finite value instead of inf.
    Pass ``floor=0`` to reject exact zeros instead.
    """
    o = as_vec(o)
    l = as_vec(l)
    if o.shape != l.shape:
        raise ValueError("distributions must have equal length")
    if np.any(o < 0) or np.any(l < 0):
        raise ValueError("probabilities must be nonnegative")
    if floor > 0:
        l = np.maximum(l, floor)
    support = o > 0
    if np.any(l[support] == 0):
        raise ValueError("infinite divergence: l is zero where o has mass")
    out = float(np.sum(o[support] * np.log(o[support] / l[support])))
    return out


def reparam_sample(mu, sigma, rng: Rng) -> np.ndarray:
    """Draw mu + sigma * eps with eps ~ N(0, I) from ``rng``."""
    mu = as_vec(mu)
    sigma = as_vec(sigma)
    return mu + sigma * rng.normal(*mu.shape)


def mse(a, b) -> float:
    """Mean of squared differences over all entries."""
    a = as_vec(a)
    b = as_vec(b)
    if a.shape != b.shape:
        raise ValueError("shape mismatch: %s vs %s" % (a.shape, b.shape))
    return float(np.mean((a - b) ** 2))


# ---------------------------------------------------------------------------
# Layers


def _activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "identity":
        return a
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "softplus":
        return softplus(a)
    raise ValueError("unknown activation %r" % name)


def _activate_grad(name: str, a: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(a)
    if name == "relu":
        return (a > 0).astype(float)
    if name == "softplus":
        return sigmoid(a)
    raise ValueError("unknown activation %r" % name)


class Dense:
    """Fully connected layer y = act(x @ w.T + b) with explicit backward."""

    def __init__(self, w: np.ndarray, b: np.ndarray, activation: str = "identity"):
        self.w = np.asarray(w, dtype=float)
        self.b = np.asarray(b, dtype=float)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValueError("weight (out,in) and bias (out,) shapes required")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.b))):
            raise ValueError("non-finite layer parameters")
        self.activation = activation

    @classmethod
    def init(cls, rng: Rng, n_in: int, n_out: int, activation: str = "identity") -> "Dense":
        # fan-in scaled uniform keeps pre-activations O(1)
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, (n_out, n_in))
        b = np.zeros(n_out)
        return cls(w, b, activation)

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        pre = x @ self.w.T + self.b
        return _activate(self.activation, pre), (x, pre)

    def backward(self, dy: np.ndarray, cache):
        x, pre = cache
        da = dy * _activate_grad(self.activation, pre)
        dw = da.T @ x
        db = da.sum(axis=0)
        dx = da @ self.w
        return dx, dw, db

    def copy(self) -> "Dense":
        return Dense(self.w.copy(), self.b.copy(), self.activation)


class Mlp:
    """A stack of Dense layers with chained forward/backward."""

    def __init__(self, layers: list[Dense]):
        self.layers = layers

    @classmethod
    def init(cls, rng: Rng, sizes, activations) -> "Mlp":
        layers = [
            Dense.init(rng, n_in, n_out, act)
            for (n_in, n_out), act in zip(zip(sizes[:-1], sizes[1:]), activations)
        ]
        return cls(layers)

    def forward(self, x: np.ndarray):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, dy: np.ndarray, caches):
        grads = [None] * len(self.layers)
        for i in reversed(range(len(self.layers))):
            dy, dw, db = self.layers[i].backward(dy, caches[i])
            grads[i] = (dw, db)
        return dy, grads

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.w{i}"] = layer.w
            out[f"{prefix}.b{i}"] = layer.b
        return out

    def grads_dict(self, prefix: str, grads) -> dict[str, np.ndarray]:
        out = {}
        for i, (dw, db) in enumerate(grads):
            out[f"{prefix}.w{i}"] = dw
            out[f"{prefix}.b{i}"] = db
        return out

    def copy(self) -> "Mlp":
        return Mlp([layer.copy() for layer in self.layers])


class GaussianEncoder:
    """Hidden relu trunk with (mu, sigma) heads; sigma = softplus(raw) + floor."""

    def __init__(self, trunk: Dense, mu_head: Dense, sig_head: Dense):
        self.trunk = trunk
        self.mu_head = mu_head
        self.sig_head = sig_head

    @classmethod
    def init(cls, rng: Rng, n_in: int, n_hidden: int, n_out: int) -> "GaussianEncoder":
        return cls(
            Dense.init(rng, n_in, n_hidden, "relu"),
            Dense.init(rng, n_hidden, n_out, "identity"),
            Dense.init(rng, n_hidden, n_out, "identity"),
        )

    def forward(self, x: np.ndarray):
        h, c_trunk = self.trunk.forward(x)
        mu, c_mu = self.mu_head.forward(h)
        raw, c_raw = self.sig_head.forward(h)
        sigma = softplus(raw) + SIGMA_FLOOR
        return mu, sigma, (c_trunk, c_mu, c_raw, raw)

    def backward(self, dmu: np.ndarray, dsigma: np.ndarray, cache):
        c_trunk, c_mu, c_raw, raw = cache
        draw = dsigma * sigmoid(raw)
        dh_mu, dw_mu, db_mu = self.mu_head.backward(dmu, c_mu)
        dh_raw, dw_raw, db_raw = self.sig_head.backward(draw, c_raw)
        dx, dw_t, db_t = self.trunk.backward(dh_mu + dh_raw, c_trunk)
        grads = {
            "trunk.w": dw_t,
            "trunk.b": db_t,
            "mu.w": dw_mu,
            "mu.b": db_mu,
            "sig.w": dw_raw,
            "sig.b": db_raw,
        }
        return dx, grads

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.trunk.w": self.trunk.w,
            f"{prefix}.trunk.b": self.trunk.b,
            f"{prefix}.mu.w": self.mu_head.w,
            f"{prefix}.mu.b": self.mu_head.b,
            f"{prefix}.sig.w": self.sig_head.w,
            f"{prefix}.sig.b": self.sig_head.b,
        }

    def grads_dict(self, prefix: str, grads) -> dict[str, np.ndarray]:
        return {f"{prefix}.{k}": v for k, v in grads.items()}

    def copy(self) -> "GaussianEncoder":
        return GaussianEncoder(self.trunk.copy(), self.mu_head.copy(), self.sig_head.copy())


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
    """In-place SGD update; grads may cover a subset of params."""
    for name, g in grads.items():
        params[name] -= lr * g


def add_grads(into: dict[str, np.ndarray], new: dict[str, np.ndarray]) -> None:
    for name, g in new.items():
        if name in into:
            into[name] = into[name] + g
        else:
            into[name] = g


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]

    def __str__(self):
        return "grad_check max_rel_error=%.3e (worst: %s)" % (
            self.max_rel_error,
            self.worst_param,
        )


def grad_check(
    loss_fn, params: dict[str, np.ndarray], eps: float = 1e-5, loss_only=None
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn(params) -> (loss, grads)`` must be deterministic (any
    sampling noise frozen outside). ``loss_only(params) -> loss``, when
    given, is used for the finite-difference evaluations (skipping the
    backward pass there). Relative error per entry is
    |a - n| / max(|a| + |n|, 1e-6); the report carries the max over all
    entries of all parameter arrays.
    """
    if loss_only is None:
        def loss_only(ps):
            return loss_fn(ps)[0]

    _, analytic = loss_fn(params)
    per_param: dict[str, float] = {}
    worst = 0.0
    worst_name = ""
    for name, p in params.items():
        a = np.asarray(analytic[name], dtype=float)
        n = np.zeros_like(p, dtype=float)
        flat_p = p.reshape(-1)
        flat_n = n.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            lp = loss_only(params)
            flat_p[i] = orig - eps
            lm = loss_only(params)
            flat_p[i] = orig
            flat_n[i] = (lp - lm) / (2 * eps)
        rel = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-6)
        err = float(rel.max()) if rel.size else 0.0
        per_param[name] = err
        if err > worst:
            worst = err
            worst_name = name
    return GradCheckReport(worst, worst_name, per_param)


def grad_check_components(
    losses_fn,
    analytic_fn,
    params: dict[str, np.ndarray],
    components: list[str],
    eps: float = 1e-5,
) -> dict[str, GradCheckReport]:
    """Check several loss components against finite differences at once.

    ``losses_fn(params) -> dict[component, loss]`` runs one shared
    forward pass; each (+eps, -eps) evaluation therefore yields finite
    differences for every component simultaneously.
    ``analytic_fn(params, component) -> grads`` supplies the analytic
    side per component.
    """
    analytic = {c: analytic_fn(params, c) for c in components}
    numeric = {
        c: {name: np.zeros_like(p, dtype=float) for name, p in params.items()}
        for c in components
    }
    for name, p in params.items():
        flat_p = p.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            lp = losses_fn(params)
            flat_p[i] = orig - eps
            lm = losses_fn(params)
            flat_p[i] = orig
            for c in components:
                numeric[c][name].reshape(-1)[i] = (lp[c] - lm[c]) / (2 * eps)
    reports = {}
    for c in components:
        per_param = {}
        worst, worst_name = 0.0, ""
        for name in params:
            a = np.asarray(analytic[c][name], dtype=float)
            n = numeric[c][name]
            rel = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-6)
            err = float(rel.max()) if rel.size else 0.0
            per_param[name] = err
            if err > worst:
                worst, worst_name = err, name
        reports[c] = GradCheckReport(worst, worst_name, per_param)
    return reports
