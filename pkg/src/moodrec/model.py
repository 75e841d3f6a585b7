"""End-to-end recommender: matching score, pairwise ranking loss, the
ranking-phase training loop (alternating latent computation and
inference-network/embedding updates per batch), ablation switches,
top-T ranking, and checkpoint persistence.

The ranking phase trains the two encoders, the two decoders, and the
user/music embeddings against the combined objective

    rec + w1 * kl_prior + w2 * kl_post + w3 * mse_user + w4 * mse_emo

with the mood networks frozen (their phase-one terms carry zero weight
here; ``joint_bnn_finetune`` optionally routes ranking gradients into
the active mood net).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, NegativeSampler, SplitDataset
from .latent import EMBED_DIM, LATENT_DIM, InferenceNets
from .mood import (
    ARCH,
    BnnPosterior,
    TrainingDiverged,
    bnn_backward,
    bnn_forward,
    posterior_from_state,
    posterior_state,
)
from .numerics import Rng, add_grads, sigmoid, softmax
from .validation import check_index, check_length

MODEL_VERSION = 1

LOSS_COMPONENTS = ("rec", "kl_prior", "kl_post", "mse_emo", "mse_user")


class CheckpointError(RuntimeError):
    pass


@dataclass
class AblationFlags:
    """Pipeline switches; all True is the full model.

    emotion_across: personalized prior anchors the event-posterior KL
                    (off: standard-normal anchor)
    emotion_within: sample event latents from the posterior
                    (off: feed the raw emotion vector, drop its losses)
    pref_across:    per-group mood nets (off: the global net)
    pref_within:    sample mood-net weights per call (off: mean weights)
    """

    emotion_across: bool = True
    emotion_within: bool = True
    pref_across: bool = True
    pref_within: bool = True


@dataclass
class HyperParams:
    """All training knobs; defaults follow the large-dataset regime."""

    latent_dim: int = LATENT_DIM
    embed_dim: int = EMBED_DIM
    n_groups: int = 2
    neg_k: int = 10
    batch_size: int = 512
    lr: float = 0.05
    alpha: float = 1e-5
    lambda_kl_prior: float = 0.01
    lambda_kl_post: float = 0.05
    lambda_mse_user: float = 1e-6
    lambda_mse_emo: float = 1e-4
    lambda_pretrain: float = 0.0
    lambda_finetune: float = 0.0
    epochs: int = 50
    patience: int = 5
    pre_lr: float = 0.01
    pre_batch_size: int = 1024
    pre_epochs: int = 30
    ft_lr: float = 0.001
    ft_batch_size: int = 64
    ft_epochs: int = 20
    joint_bnn_finetune: bool = False
    val_cap: int = 2000

    def __post_init__(self):
        if self.lambda_pretrain != 0.0 or self.lambda_finetune != 0.0:
            # the ranking phase freezes the mood nets by contract
            raise ValueError("phase-one loss weights must be zero in the ranking phase")


@dataclass
class RankedList:
    """Top-T recommendation: strictly descending scores, id-ascending ties."""

    music_ids: np.ndarray
    scores: np.ndarray


class ModelState:
    """The persistable unit: embeddings, inference nets, mood nets,
    group map, tag encodings, and hyperparameters."""

    def __init__(
        self,
        emb_user: np.ndarray,
        emb_item: np.ndarray,
        nets: InferenceNets,
        bnn_global: BnnPosterior,
        bnn_groups: list[BnnPosterior],
        group_of: np.ndarray,
        tag_vectors: np.ndarray,
        moods: np.ndarray,
        listened: list[set],
        hp: HyperParams,
        ablation: AblationFlags,
        seed: int,
        users: list[str],
        tags: list[str],
        tracks: list[str],
    ):
        self.emb_user = np.asarray(emb_user, dtype=float)
        self.emb_item = np.asarray(emb_item, dtype=float)
        self.nets = nets
        self.bnn_global = bnn_global
        self.bnn_groups = bnn_groups
        self.group_of = np.asarray(group_of, dtype=int)
        self.tag_vectors = np.asarray(tag_vectors, dtype=float)
        self.moods = np.asarray(moods, dtype=float)
        self.listened = listened
        self.hp = hp
        self.ablation = ablation
        self.seed = int(seed)
        self.users = list(users)
        self.tags = list(tags)
        self.tracks = list(tracks)
        if self.group_of.max(initial=-1) >= len(self.bnn_groups):
            raise ValueError("group map references a missing mood net")

    @property
    def n_users(self) -> int:
        return self.emb_user.shape[0]

    @property
    def n_tracks(self) -> int:
        return self.emb_item.shape[0]

    def mood_net_for(self, user_id: int) -> BnnPosterior:
        if not self.ablation.pref_across:
            return self.bnn_global
        return self.bnn_groups[self.group_of[user_id]]

    def params(self) -> dict[str, np.ndarray]:
        out = {"emb_user": self.emb_user, "emb_item": self.emb_item}
        out.update(self.nets.params())
        if self.hp.joint_bnn_finetune:
            if self.ablation.pref_across:
                for g, post in enumerate(self.bnn_groups):
                    out.update(post.params(f"bnn_group{g}"))
            else:
                out.update(self.bnn_global.params("bnn_global"))
        return out

    @classmethod
    def init(
        cls,
        dataset: Dataset,
        split: SplitDataset,
        bnn_global: BnnPosterior,
        bnn_groups: list[BnnPosterior],
        group_of: np.ndarray,
        hp: HyperParams,
        ablation: AblationFlags,
        seed: int,
    ) -> "ModelState":
        rng = Rng(seed)
        emb_rng = rng.split("embedding-init")
        emb_user = emb_rng.uniform(-0.05, 0.05, (dataset.n_users, hp.embed_dim))
        emb_item = emb_rng.uniform(-0.05, 0.05, (dataset.n_tracks, hp.embed_dim))
        nets = InferenceNets.init(rng.split("inference-nets"))
        return cls(
            emb_user,
            emb_item,
            nets,
            bnn_global,
            bnn_groups,
            group_of,
            dataset.emotion_vocab.vectors,
            dataset.music.moods,
            split.listened,
            hp,
            ablation,
            seed,
            dataset.users,
            dataset.tags,
            dataset.tracks,
        )


# ---------------------------------------------------------------------------
# Scores and losses


def match_score(l, r_u, o_v, r_v) -> float:
    """Dot product of the concatenated (preference, user) and (mood, music)
    vectors: l . o_v + r_u . r_v."""
    l = check_length(l, 9, "mood preference")
    o_v = check_length(o_v, 9, "music mood")
    r_u = np.asarray(r_u, dtype=float)
    r_v = np.asarray(r_v, dtype=float)
    if r_u.shape != r_v.shape:
        raise ValueError("user and music embeddings must have equal length")
    return float(l @ o_v + r_u @ r_v)


def bpr_loss(m_pos, m_neg) -> float:
    """Mean -ln sigmoid(m_pos - m_neg) over all pairs (log1p-stable)."""
    diff = np.asarray(m_pos, dtype=float) - np.asarray(m_neg, dtype=float)
    return float(np.mean(np.logaddexp(0.0, -diff)))


@dataclass
class PairBatch:
    users: np.ndarray  # (B,)
    tags: np.ndarray  # (B,)
    pos: np.ndarray  # (B,)
    negs: np.ndarray  # (B, k)


def draw_batch_noise(state: ModelState, batch: PairBatch, rng: Rng) -> dict:
    """Frozen noise for one batch: user-level and event-level latent
    draws plus one weight draw per active mood net."""
    uu = np.unique(batch.users)
    noise = {
        "eps_u": rng.normal(uu.size, state.hp.latent_dim),
        "eps_z": rng.normal(batch.users.size, state.hp.latent_dim),
        "weight_eps": {},
    }
    ab = state.ablation
    if ab.pref_within:
        if ab.pref_across:
            for g in np.unique(state.group_of[batch.users]):
                noise["weight_eps"][int(g)] = state.bnn_groups[int(g)].draw_eps(rng)
        else:
            noise["weight_eps"]["global"] = state.bnn_global.draw_eps(rng)
    return noise


def phase2_forward(state: ModelState, batch: PairBatch, noise: dict) -> dict:
    """One latent-computation pass (inference nets applied, latents and
    preferences realized) plus all loss values; returns the cache the
    update step consumes."""
    ab = state.ablation
    hp = state.hp
    users, tags_arr, pos, negs = batch.users, batch.tags, batch.pos, batch.negs
    n = users.size
    k = negs.shape[1]

    uu, inv_u = np.unique(users, return_inverse=True)
    xu = state.emb_user[uu]
    mu1, sig1, c_prior = state.nets.prior_net.forward(xu)
    eps_u = noise["eps_u"]
    zu = mu1 + sig1 * eps_u
    r_rec, c_udec = state.nets.user_dec.forward(zu)
    mse_user = float(np.mean((xu - r_rec) ** 2))
    kl_prior = float(
        (0.5 * (mu1**2 + sig1**2 - np.log(sig1**2) - 1.0)).sum(axis=1).mean()
    )

    s = state.tag_vectors[tags_arr]
    mu2, sig2, c_post = state.nets.post_net.forward(s)
    if ab.emotion_within:
        eps_z = noise["eps_z"]
        z = mu2 + sig2 * eps_z
        if ab.emotion_across:
            pm, ps = mu1[inv_u], sig1[inv_u]
            kl_post = float(
                (
                    0.5
                    * (
                        np.log(ps**2 / sig2**2)
                        + sig2**2 / ps**2
                        + (mu2 - pm) ** 2 / ps**2
                        - 1.0
                    )
                )
                .sum(axis=1)
                .mean()
            )
        else:
            kl_post = float(
                (0.5 * (mu2**2 + sig2**2 - np.log(sig2**2) - 1.0)).sum(axis=1).mean()
            )
        s_rec, c_edec = state.nets.emo_dec.forward(z)
        mse_emo = float(np.mean((s - s_rec) ** 2))
    else:
        z = s
        kl_post = 0.0
        mse_emo = 0.0
        s_rec, c_edec = None, None

    # preferred mood per record through the (frozen) group mood net
    weight_eps = noise.get("weight_eps", {})
    logits = np.empty((n, 9))
    bnn_rows: list[tuple] = []
    if ab.pref_across:
        groups = state.group_of[users]
        for g in np.unique(groups):
            rows = np.where(groups == g)[0]
            post = state.bnn_groups[int(g)]
            eps = weight_eps.get(int(g)) if ab.pref_within else None
            weights = post.realize(eps)
            lg, caches = bnn_forward(weights, z[rows])
            logits[rows] = lg
            bnn_rows.append((int(g), rows, post, eps, weights, caches))
    else:
        post = state.bnn_global
        eps = weight_eps.get("global") if ab.pref_within else None
        weights = post.realize(eps)
        lg, caches = bnn_forward(weights, z)
        logits[:] = lg
        bnn_rows.append(("global", np.arange(n), post, eps, weights, caches))
    l = softmax(logits)

    o_pos = state.moods[pos]
    o_neg = state.moods[negs]
    rv_pos = state.emb_item[pos]
    rv_neg = state.emb_item[negs]
    ru = xu[inv_u]
    m_pos = (l * o_pos).sum(axis=1) + (ru * rv_pos).sum(axis=1)
    m_neg = np.einsum("bm,bkm->bk", l, o_neg) + np.einsum("bd,bkd->bk", ru, rv_neg)
    diff = m_pos[:, None] - m_neg
    rec = float(np.mean(np.logaddexp(0.0, -diff)))

    return {
        "losses": {
            "rec": rec,
            "kl_prior": kl_prior,
            "kl_post": kl_post,
            "mse_emo": mse_emo,
            "mse_user": mse_user,
        },
        "uu": uu,
        "inv_u": inv_u,
        "xu": xu,
        "mu1": mu1,
        "sig1": sig1,
        "c_prior": c_prior,
        "zu": zu,
        "r_rec": r_rec,
        "c_udec": c_udec,
        "s": s,
        "mu2": mu2,
        "sig2": sig2,
        "c_post": c_post,
        "z": z,
        "s_rec": s_rec,
        "c_edec": c_edec,
        "l": l,
        "bnn_rows": bnn_rows,
        "o_pos": o_pos,
        "o_neg": o_neg,
        "rv_pos": rv_pos,
        "rv_neg": rv_neg,
        "ru": ru,
        "diff": diff,
        "eps_u": noise["eps_u"],
        "eps_z": noise.get("eps_z"),
    }


def zero_grads(state: ModelState) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p) for name, p in state.params().items()}


def phase2_backward(
    state: ModelState,
    batch: PairBatch,
    cache: dict,
    weights: dict[str, float],
) -> dict[str, np.ndarray]:
    """Gradients of sum_c weights[c] * loss_c for every trainable array.

    Passing a single unit weight gives per-component gradients; passing
    the objective's coefficients gives the training gradient.
    """
    ab = state.ablation
    users, pos, negs = batch.users, batch.pos, batch.negs
    n = users.size
    k = negs.shape[1]
    uu, inv_u = cache["uu"], cache["inv_u"]
    n_u = uu.size
    mu1, sig1 = cache["mu1"], cache["sig1"]
    mu2, sig2 = cache["mu2"], cache["sig2"]
    l = cache["l"]

    w_rec = weights.get("rec", 0.0)
    w_kl1 = weights.get("kl_prior", 0.0)
    w_kl2 = weights.get("kl_post", 0.0)
    w_me = weights.get("mse_emo", 0.0)
    w_mu = weights.get("mse_user", 0.0)

    grads = zero_grads(state)
    d_emb_user = grads["emb_user"]
    d_emb_item = grads["emb_item"]
    dxu = np.zeros((n_u, state.hp.embed_dim))
    dmu1 = np.zeros_like(mu1)
    dsig1 = np.zeros_like(sig1)
    dmu2 = np.zeros_like(mu2)
    dsig2 = np.zeros_like(sig2)
    dz = np.zeros((n, state.hp.latent_dim))
    dzu = np.zeros_like(cache["zu"])

    if w_rec != 0.0:
        g = sigmoid(-cache["diff"]) * (w_rec / (n * k))  # (B, k)
        dm_pos = -g.sum(axis=1)
        dm_neg = g
        dl = dm_pos[:, None] * cache["o_pos"] + np.einsum(
            "bk,bkm->bm", dm_neg, cache["o_neg"]
        )
        dru = dm_pos[:, None] * cache["rv_pos"] + np.einsum(
            "bk,bkd->bd", dm_neg, cache["rv_neg"]
        )
        np.add.at(dxu, inv_u, dru)
        np.add.at(d_emb_item, pos, dm_pos[:, None] * cache["ru"])
        np.add.at(
            d_emb_item,
            negs.reshape(-1),
            (dm_neg[..., None] * cache["ru"][:, None, :]).reshape(-1, state.hp.embed_dim),
        )
        dlogits = l * (dl - (dl * l).sum(axis=1, keepdims=True))
        for key, rows, post, eps, wts, caches in cache["bnn_rows"]:
            dz_rows, wgrads = bnn_backward(
                wts, caches, dlogits[rows], want_weight_grads=state.hp.joint_bnn_finetune
            )
            dz[rows] += dz_rows
            if state.hp.joint_bnn_finetune:
                prefix = "bnn_global" if key == "global" else f"bnn_group{key}"
                for i, (dw, db) in enumerate(wgrads):
                    grads[f"{prefix}.mu_w{i}"] += dw
                    grads[f"{prefix}.mu_b{i}"] += db
                    if eps is not None:
                        ew, eb = eps[i]
                        grads[f"{prefix}.rho_w{i}"] += dw * ew * sigmoid(post.rho_w[i])
                        grads[f"{prefix}.rho_b{i}"] += db * eb * sigmoid(post.rho_b[i])

    if ab.emotion_within and w_me != 0.0:
        ds_rec = (2.0 * w_me / cache["s_rec"].size) * (cache["s_rec"] - cache["s"])
        dz_e, g_edec = state.nets.emo_dec.backward(ds_rec, cache["c_edec"])
        dz += dz_e
        add_grads(grads, state.nets.emo_dec.grads_dict("edec", g_edec))

    if ab.emotion_within:
        dmu2 += dz
        dsig2 += dz * cache["eps_z"]

    if ab.emotion_within and w_kl2 != 0.0:
        c = w_kl2 / n
        if ab.emotion_across:
            pm, ps = mu1[inv_u], sig1[inv_u]
            dmu2 += c * (mu2 - pm) / ps**2
            dsig2 += c * (sig2 / ps**2 - 1.0 / sig2)
            np.add.at(dmu1, inv_u, -c * (mu2 - pm) / ps**2)
            np.add.at(
                dsig1,
                inv_u,
                c * (1.0 / ps - sig2**2 / ps**3 - (mu2 - pm) ** 2 / ps**3),
            )
        else:
            dmu2 += c * mu2
            dsig2 += c * (sig2 - 1.0 / sig2)

    if w_kl1 != 0.0:
        dmu1 += (w_kl1 / n_u) * mu1
        dsig1 += (w_kl1 / n_u) * (sig1 - 1.0 / sig1)

    if w_mu != 0.0:
        scale = 2.0 * w_mu / cache["r_rec"].size
        dr_rec = scale * (cache["r_rec"] - cache["xu"])
        dzu_c, g_udec = state.nets.user_dec.backward(dr_rec, cache["c_udec"])
        dzu += dzu_c
        add_grads(grads, state.nets.user_dec.grads_dict("udec", g_udec))
        dxu += scale * (cache["xu"] - cache["r_rec"])

    dmu1 += dzu
    dsig1 += dzu * cache["eps_u"]

    dx_prior, g_prior = state.nets.prior_net.backward(dmu1, dsig1, cache["c_prior"])
    dxu += dx_prior
    add_grads(grads, state.nets.prior_net.grads_dict("prior", g_prior))

    if ab.emotion_within:
        _, g_post = state.nets.post_net.backward(dmu2, dsig2, cache["c_post"])
        add_grads(grads, state.nets.post_net.grads_dict("post", g_post))

    np.add.at(d_emb_user, uu, dxu)
    return grads


# ---------------------------------------------------------------------------
# Single-record pipeline


def forward(state: ModelState, user_id: int, tag_id: int, music_id: int, rng: Rng):
    """Full single-record pipeline; returns (score, intermediates).

    Stochastic branches (event latent, weight draw) consume ``rng``;
    ablation flags on the state reroute exactly as during training.
    """
    u = check_index(user_id, state.n_users, "user id")
    t = check_index(tag_id, state.tag_vectors.shape[0], "tag id")
    v = check_index(music_id, state.n_tracks, "music id")
    ab = state.ablation
    r_u = state.emb_user[u]
    s = state.tag_vectors[t]
    mu1, sig1, _ = state.nets.prior_net.forward(r_u[None, :])
    mu2, sig2, _ = state.nets.post_net.forward(s[None, :])
    if ab.emotion_within:
        z = mu2[0] + sig2[0] * rng.normal(state.hp.latent_dim)
    else:
        z = s
    post = state.mood_net_for(u)
    wts = post.sample_weights(rng) if ab.pref_within else post.mean_weights()
    logits, _ = bnn_forward(wts, z[None, :])
    l = softmax(logits)[0]
    o_v = state.moods[v]
    r_v = state.emb_item[v]
    m = match_score(l, r_u, o_v, r_v)
    intermediates = {
        "prior_mu": mu1[0],
        "prior_sigma": sig1[0],
        "post_mu": mu2[0],
        "post_sigma": sig2[0],
        "z": z,
        "mood_pref": l,
        "score": m,
    }
    return m, intermediates


# ---------------------------------------------------------------------------
# Ranking


def event_preference(
    state: ModelState, user_id: int, tag_id: int, mode: str = "deterministic", rng: Rng | None = None
) -> np.ndarray:
    """The 9-way mood preference for one (user, emotion) query.

    Deterministic mode uses posterior-mean latents and mean weights;
    stochastic mode draws each once from ``rng``.
    """
    if mode not in ("deterministic", "stochastic"):
        raise ValueError("mode must be 'deterministic' or 'stochastic'")
    if mode == "stochastic" and rng is None:
        raise ValueError("stochastic mode needs an rng")
    ab = state.ablation
    s = state.tag_vectors[check_index(tag_id, state.tag_vectors.shape[0], "tag id")]
    if ab.emotion_within:
        mu2, sig2, _ = state.nets.post_net.forward(s[None, :])
        z = mu2[0]
        if mode == "stochastic":
            z = z + sig2[0] * rng.normal(state.hp.latent_dim)
    else:
        z = s
    post = state.mood_net_for(user_id)
    if mode == "stochastic" and ab.pref_within:
        wts = post.sample_weights(rng)
    else:
        wts = post.mean_weights()
    logits, _ = bnn_forward(wts, z[None, :])
    return softmax(logits)[0]


def score_candidates(
    state: ModelState,
    user_id: int,
    tag_id: int,
    candidates: np.ndarray,
    mode: str = "deterministic",
    rng: Rng | None = None,
) -> np.ndarray:
    u = check_index(user_id, state.n_users, "user id")
    l = event_preference(state, u, tag_id, mode, rng)
    cand = np.asarray(candidates, dtype=int)
    return state.moods[cand] @ l + state.emb_item[cand] @ state.emb_user[u]


def rank_top(
    state: ModelState,
    user_id: int,
    tag_id: int,
    top_n: int,
    mode: str = "deterministic",
    rng: Rng | None = None,
) -> RankedList:
    """Top-``top_n`` unheard tracks by descending score (ids break ties)."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    u = check_index(user_id, state.n_users, "user id")
    banned = state.listened[u]
    candidates = np.array(
        [v for v in range(state.n_tracks) if v not in banned], dtype=int
    )
    scores = score_candidates(state, u, tag_id, candidates, mode, rng)
    order = np.lexsort((candidates, -scores))
    take = order[: min(top_n, candidates.size)]
    return RankedList(candidates[take], scores[take])


# ---------------------------------------------------------------------------
# Training loop


def _objective_weights(hp: HyperParams) -> dict[str, float]:
    return {
        "rec": 1.0,
        "kl_prior": hp.lambda_kl_prior,
        "kl_post": hp.lambda_kl_post,
        "mse_user": hp.lambda_mse_user,
        "mse_emo": hp.lambda_mse_emo,
    }


def validation_hr(state: ModelState, split: SplitDataset, top_n: int = 10) -> float:
    """HR@top_n on the (capped) validation split, deterministic mode."""
    records = split.val[: state.hp.val_cap]
    if records.shape[0] == 0:
        return 0.0
    hits = 0
    for u, t, v in records:
        ranked = rank_top(state, int(u), int(t), top_n)
        hits += int(v in ranked.music_ids)
    return hits / records.shape[0]


def _resample_negatives(
    split: SplitDataset, n_tracks: int, neg_k: int, sampler: NegativeSampler
) -> np.ndarray:
    out = np.empty((split.train.shape[0], neg_k), dtype=int)
    for i, (u, _, v) in enumerate(split.train):
        drawn = sampler.sample(int(u), int(v), neg_k)
        if drawn.size < neg_k:  # tiny pool: cycle it to keep the batch shape
            drawn = np.resize(drawn, neg_k)
        out[i] = drawn
    return out


def train_phase2(
    state: ModelState,
    split: SplitDataset,
    rng: Rng,
    history: list | None = None,
) -> ModelState:
    """Alternating latent-computation / update epochs over pairwise data.

    Negatives are resampled each epoch; stops at the epoch budget or
    when validation HR@10 fails to improve for ``patience`` epochs.
    On a non-finite loss the last epoch-start parameters are restored
    and the run aborts.
    """
    hp = state.hp
    n_train = split.train.shape[0]
    if n_train == 0:
        raise ValueError("empty train split")
    sampler = NegativeSampler(state.n_tracks, split.listened, rng.split("negative-sampling"))
    order_rng = rng.split("rank-batch-order")
    noise_rng = rng.split("rank-noise")
    params = state.params()
    obj = _objective_weights(hp)
    best_hr = -1.0
    stall = 0
    for epoch in range(hp.epochs):
        snapshot = {name: p.copy() for name, p in params.items()}
        negs = _resample_negatives(split, state.n_tracks, hp.neg_k, sampler)
        order = order_rng.permutation(n_train)
        sums = dict.fromkeys(LOSS_COMPONENTS, 0.0)
        n_batches = 0
        for start in range(0, n_train, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            batch = PairBatch(
                split.train[idx, 0], split.train[idx, 1], split.train[idx, 2], negs[idx]
            )
            noise = draw_batch_noise(state, batch, noise_rng)
            cache = phase2_forward(state, batch, noise)
            losses = cache["losses"]
            if not all(np.isfinite(v) for v in losses.values()):
                for name, p in params.items():
                    p[...] = snapshot[name]
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}: {losses} (restored last-good parameters)"
                )
            grads = phase2_backward(state, batch, cache, obj)
            for name, g in grads.items():
                params[name] -= hp.lr * g
            for name in LOSS_COMPONENTS:
                sums[name] += losses[name]
            n_batches += 1
        val_hr = validation_hr(state, split)
        if history is not None:
            row = {"epoch": epoch}
            row.update({name: sums[name] / n_batches for name in LOSS_COMPONENTS})
            row["val_hr10"] = val_hr
            history.append(row)
        if val_hr > best_hr + 1e-12:
            best_hr = val_hr
            stall = 0
        else:
            stall += 1
            if stall >= hp.patience:
                break
    return state


# ---------------------------------------------------------------------------
# Persistence


def save_model(state: ModelState, path) -> None:
    arrays: dict[str, np.ndarray] = {
        "emb_user": state.emb_user,
        "emb_item": state.emb_item,
        "group_of": state.group_of,
        "tag_vectors": state.tag_vectors,
        "moods": state.moods,
    }
    for name, p in state.nets.params().items():
        arrays[f"nets.{name}"] = p
    for name, p in posterior_state(state.bnn_global).items():
        arrays[f"bnn_global.{name}"] = p
    for g, post in enumerate(state.bnn_groups):
        for name, p in posterior_state(post).items():
            arrays[f"bnn_group{g}.{name}"] = p
    flat = []
    offsets = [0]
    for listened in state.listened:
        flat.extend(sorted(listened))
        offsets.append(len(flat))
    arrays["listened_flat"] = np.array(flat, dtype=int)
    arrays["listened_offsets"] = np.array(offsets, dtype=int)
    meta = {
        "version": MODEL_VERSION,
        "seed": state.seed,
        "n_groups_trained": len(state.bnn_groups),
        "hp": asdict(state.hp),
        "ablation": asdict(state.ablation),
        "users": state.users,
        "tags": state.tags,
        "tracks": state.tracks,
        "arch": list(ARCH),
    }
    arrays["__meta__"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)


def _encoder_from(blob, prefix: str):
    from .numerics import Dense, GaussianEncoder

    return GaussianEncoder(
        Dense(blob[f"{prefix}.trunk.w"], blob[f"{prefix}.trunk.b"], "relu"),
        Dense(blob[f"{prefix}.mu.w"], blob[f"{prefix}.mu.b"], "identity"),
        Dense(blob[f"{prefix}.sig.w"], blob[f"{prefix}.sig.b"], "identity"),
    )


def _mlp_from(blob, prefix: str):
    from .numerics import Dense, Mlp

    return Mlp(
        [
            Dense(blob[f"{prefix}.w0"], blob[f"{prefix}.b0"], "relu"),
            Dense(blob[f"{prefix}.w1"], blob[f"{prefix}.b1"], "identity"),
        ]
    )


def load_model(path) -> ModelState:
    try:
        blob = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with blob:
        try:
            meta = json.loads(str(blob["__meta__"]))
        except KeyError as exc:
            raise CheckpointError(f"{path} is not a model checkpoint") from exc
        if meta["version"] != MODEL_VERSION:
            raise CheckpointError(
                f"checkpoint version {meta['version']} != supported {MODEL_VERSION}"
            )
        arch = tuple(meta["arch"])
        nets = InferenceNets(
            _encoder_from(blob, "nets.prior"),
            _encoder_from(blob, "nets.post"),
            _mlp_from(blob, "nets.udec"),
            _mlp_from(blob, "nets.edec"),
        )
        bnn_global = posterior_from_state(
            {k[len("bnn_global.") :]: blob[k] for k in blob.files if k.startswith("bnn_global.")},
            arch,
        )
        bnn_groups = []
        for g in range(meta["n_groups_trained"]):
            prefix = f"bnn_group{g}."
            bnn_groups.append(
                posterior_from_state(
                    {k[len(prefix) :]: blob[k] for k in blob.files if k.startswith(prefix)},
                    arch,
                )
            )
        flat = blob["listened_flat"]
        offsets = blob["listened_offsets"]
        listened = [
            set(flat[offsets[i] : offsets[i + 1]].tolist())
            for i in range(offsets.size - 1)
        ]
        return ModelState(
            blob["emb_user"],
            blob["emb_item"],
            nets,
            bnn_global,
            bnn_groups,
            blob["group_of"],
            blob["tag_vectors"],
            blob["moods"],
            listened,
            HyperParams(**meta["hp"]),
            AblationFlags(**meta["ablation"]),
            meta["seed"],
            meta["users"],
            meta["tags"],
            meta["tracks"],
        )
