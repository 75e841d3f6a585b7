"""Command-line pipeline: ingest/synth data, group users, train the
mood nets and the recommender, evaluate against baselines, and export
interpretability reports.

Exit codes: 0 success, 1 usage error, 2 data validation failure,
3 numerical failure. Output files are write-once; every JSON artifact
embeds the config hash and seed, CSV artifacts carry them in a leading
comment line.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .baselines import BASELINE_NAMES, ModelScorer, make_baseline
from .config import ExperimentConfig, config_hash, load_config, serialize_config
from .data import (
    DataFormatError,
    Dataset,
    load_dataset,
    save_dataset_npz,
    split_8_1_1,
)
from .evaluation import case_study_rows, evaluate, reports_table
from .grouping import assign_groups, elbow_select, genre_profiles
from .latent import sweep_led_dimension
from .model import (
    AblationFlags,
    HyperParams,
    ModelState,
    load_model,
    rank_top,
    save_model,
    train_phase2,
)
from .mood import (
    MoodTrainConfig,
    TrainingDiverged,
    finetune_group,
    load_posterior,
    posterior_from_state,
    posterior_state,
    pretrain,
    save_posterior,
)
from .numerics import Rng
from .recommender import phase1_pairs
from .synth import SynthConfig, synth_generate


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Artifact plumbing


class ArtifactWriter:
    """Write-once output directory with config/seed stamping."""

    def __init__(self, config: ExperimentConfig):
        self.dir = Path(config.out_dir)
        self.hash = config_hash(config)
        self.seed = config.seed

    def path(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        target = self.dir / name
        if target.exists():
            raise UsageError(f"refusing to overwrite existing artifact {target}")
        return target

    def write_json(self, name: str, payload: dict) -> Path:
        target = self.path(name)
        body = dict(payload)
        body["config_hash"] = self.hash
        body["seed"] = self.seed
        target.write_text(json.dumps(body, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return target

    def write_csv(self, name: str, rows: list) -> Path:
        target = self.path(name)
        with open(target, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# config_hash={self.hash} seed={self.seed}\n")
            writer = csv.writer(fh)
            writer.writerows(rows)
        return target


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing artifact {path}; run `moodrec {produced_by}` first")
    return path


def _load_data(config: ExperimentConfig) -> Dataset:
    if config.uses_synthetic_data():
        dataset, _ = synth_generate(_synth_config(config), config.seed)
        return dataset
    return load_dataset(config.interactions_csv, config.music_csv, config.seed)


def _synth_config(config: ExperimentConfig) -> SynthConfig:
    return SynthConfig(
        n_users=config.synth_users,
        n_tracks=config.synth_tracks,
        n_tags=config.synth_tags,
        n_groups=config.synth_groups,
        n_genres=config.synth_genres,
        events_per_user=config.synth_events_per_user,
        pref_across=config.synth_pref_across,
        emotion_across=config.synth_emotion_across,
        emotion_within=config.synth_emotion_within,
        pref_within=config.synth_pref_within,
        genre_mix=config.synth_genre_mix,
        group_corners=config.group_corner_list(),
    )


def _hyper_params(config: ExperimentConfig, n_groups: int) -> HyperParams:
    return HyperParams(
        n_groups=n_groups,
        neg_k=config.neg_k,
        batch_size=config.batch_size,
        lr=config.lr,
        alpha=config.alpha,
        lambda_kl_prior=config.lambda_kl_prior,
        lambda_kl_post=config.lambda_kl_post,
        lambda_mse_user=config.lambda_mse_user,
        lambda_mse_emo=config.lambda_mse_emo,
        epochs=config.epochs,
        patience=config.patience,
        pre_lr=config.pre_lr,
        pre_batch_size=config.pre_batch_size,
        pre_epochs=config.pre_epochs,
        ft_lr=config.ft_lr,
        ft_batch_size=config.ft_batch_size,
        ft_epochs=config.ft_epochs,
        val_cap=config.val_cap,
    )


def _ablation(config: ExperimentConfig) -> AblationFlags:
    return AblationFlags(
        emotion_across=config.use_emotion_across,
        emotion_within=config.use_emotion_within,
        pref_across=config.use_pref_across,
        pref_within=config.use_pref_within,
    )


def _resolve_groups(config: ExperimentConfig, dataset, split, writer=None):
    if config.n_groups > 0:
        n_groups = config.n_groups
        curve_rows = None
    else:
        _, profiles = genre_profiles(dataset, split)
        candidates = [g for g in config.group_candidate_list() if g <= profiles.shape[0]]
        curve, n_groups = elbow_select(profiles, candidates, config.seed)
        curve_rows = [["G", "inertia"]] + [
            [g, f"{v:.10g}"] for g, v in zip(candidates, curve)
        ]
    assignment = assign_groups(dataset, split, n_groups, config.seed)
    if writer is not None and curve_rows is not None:
        writer.write_csv("elbow_curve.csv", curve_rows)
    return assignment, n_groups


# ---------------------------------------------------------------------------
# Commands


def cmd_ingest(config: ExperimentConfig) -> int:
    if config.uses_synthetic_data():
        raise UsageError("ingest needs interactions_csv and music_csv in the config")
    dataset = load_dataset(config.interactions_csv, config.music_csv, config.seed)
    writer = ArtifactWriter(config)
    save_dataset_npz(dataset, writer.path("dataset.npz"), config.seed)
    writer.write_json("ingest.json", {"stats": dataset.stats()})
    print(json.dumps(dataset.stats(), sort_keys=True))
    return 0


def cmd_synth(config: ExperimentConfig) -> int:
    dataset, truth = synth_generate(_synth_config(config), config.seed)
    writer = ArtifactWriter(config)
    inter_rows = [["user", "emotion", "music"]] + [
        [dataset.users[u], dataset.tags[t], dataset.tracks[v]]
        for u, t, v in dataset.interactions
    ]
    writer.write_csv("interactions.csv", inter_rows)
    music_rows = [["music", "genre", "year", "artist"] + [f"m{i+1}" for i in range(9)]]
    for v in range(dataset.n_tracks):
        music_rows.append(
            [
                dataset.tracks[v],
                dataset.music.genres[dataset.music.genre_ids[v]],
                int(dataset.music.years[v]),
                dataset.music.artists[dataset.music.artist_ids[v]],
            ]
            + [f"{x:.10g}" for x in dataset.music.moods[v]]
        )
    writer.write_csv("music.csv", music_rows)
    writer.write_json("truth.json", {"truth": truth})
    writer.write_json("synth.json", {"stats": dataset.stats()})
    print(json.dumps(dataset.stats(), sort_keys=True))
    return 0


def cmd_group(config: ExperimentConfig) -> int:
    dataset = _load_data(config)
    split = split_8_1_1(dataset, config.seed)
    writer = ArtifactWriter(config)
    assignment, n_groups = _resolve_groups(config, dataset, split, writer)
    rows = [["user", "group"]] + [
        [dataset.users[u], int(g)] for u, g in enumerate(assignment.group_of)
    ]
    writer.write_csv("group_assignment.csv", rows)
    writer.write_json(
        "group.json",
        {"n_groups": int(n_groups), "inertia": assignment.inertia},
    )
    print(f"groups: {n_groups} (inertia {assignment.inertia:.4f})")
    return 0


def _read_groups(path: Path, dataset: Dataset) -> np.ndarray:
    index = {name: i for i, name in enumerate(dataset.users)}
    group_of = np.zeros(dataset.n_users, dtype=int)
    with open(path, encoding="utf-8") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    for user, group in rows[1:]:
        if user in index:
            group_of[index[user]] = int(group)
    return group_of


def cmd_pretrain(config: ExperimentConfig) -> int:
    dataset = _load_data(config)
    split = split_8_1_1(dataset, config.seed)
    s, o = phase1_pairs(dataset, split.train)
    cfg = MoodTrainConfig(
        lr=config.pre_lr,
        batch_size=config.pre_batch_size,
        alpha=config.alpha,
        epochs=config.pre_epochs,
        sample_weights=config.use_pref_within,
    )
    history: list = []
    posterior = pretrain(s, o, cfg, Rng(config.seed).split("pretrain"), history)
    writer = ArtifactWriter(config)
    save_posterior(posterior, writer.path("bnn_global.npz"), {"phase": "pretrain"}, config.seed)
    writer.write_json("pretrain.json", {"history": history})
    print(f"pretrain data_kl: {history[-1]['data_kl']:.4f}")
    return 0


def cmd_finetune(config: ExperimentConfig) -> int:
    out = Path(config.out_dir)
    dataset = _load_data(config)
    split = split_8_1_1(dataset, config.seed)
    global_post = load_posterior(_require(out / "bnn_global.npz", "pretrain"))
    group_of = _read_groups(_require(out / "group_assignment.csv", "group"), dataset)
    n_groups = int(group_of.max()) + 1
    s, o = phase1_pairs(dataset, split.train)
    cfg = MoodTrainConfig(
        lr=config.ft_lr,
        batch_size=config.ft_batch_size,
        alpha=config.alpha,
        epochs=config.ft_epochs,
        sample_weights=config.use_pref_within,
    )
    rng = Rng(config.seed)
    arrays = {}
    history = []
    for g in range(n_groups):
        mask = group_of[split.train[:, 0]] == g
        hist: list = []
        post = finetune_group(global_post, s[mask], o[mask], cfg, rng.split(f"finetune-{g}"), hist)
        for name, arr in posterior_state(post).items():
            arrays[f"g{g}.{name}"] = arr
        history.append({"group": g, "records": int(mask.sum()), "history": hist})
    writer = ArtifactWriter(config)
    target = writer.path("bnn_groups.npz")
    meta = {"n_groups": n_groups, "arch": list(global_post.arch)}
    np.savez(target, __meta__=np.array(json.dumps(meta)), **arrays)
    writer.write_json("finetune.json", {"history": history})
    print(f"fine-tuned {n_groups} group nets")
    return 0


def _load_group_posteriors(path: Path):
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["__meta__"]))
        arch = tuple(meta["arch"])
        out = []
        for g in range(meta["n_groups"]):
            prefix = f"g{g}."
            state = {k[len(prefix) :]: blob[k] for k in blob.files if k.startswith(prefix)}
            out.append(posterior_from_state(state, arch))
        return out


def cmd_train(config: ExperimentConfig) -> int:
    out = Path(config.out_dir)
    dataset = _load_data(config)
    split = split_8_1_1(dataset, config.seed)
    global_post = load_posterior(_require(out / "bnn_global.npz", "pretrain"))
    group_of = _read_groups(_require(out / "group_assignment.csv", "group"), dataset)
    bnn_groups = _load_group_posteriors(_require(out / "bnn_groups.npz", "finetune"))
    hp = _hyper_params(config, len(bnn_groups))
    state = ModelState.init(
        dataset, split, global_post, bnn_groups, group_of, hp, _ablation(config), config.seed
    )
    history: list = []
    train_phase2(state, split, Rng(config.seed), history)
    writer = ArtifactWriter(config)
    save_model(state, writer.path("model.npz"))
    log_rows = [["epoch", "rec", "kl_prior", "kl_post", "mse_emo", "mse_user", "val_hr10"]]
    for row in history:
        log_rows.append(
            [row["epoch"]]
            + [f"{row[k]:.10g}" for k in ("rec", "kl_prior", "kl_post", "mse_emo", "mse_user")]
            + [f"{row['val_hr10']:.10g}"]
        )
    writer.write_csv("training_log.csv", log_rows)
    writer.write_json("train.json", {"epochs_run": len(history)})
    print(f"trained {len(history)} epochs (final val HR@10 {history[-1]['val_hr10']:.4f})")
    return 0


def _evaluate_methods(config: ExperimentConfig, dataset, split, state=None):
    reports = []
    max_records = config.max_eval_records or None
    for method in config.method_list():
        if method == "hdbn":
            if state is None:
                raise UsageError("evaluating the model needs a trained model.npz")
            scorer = ModelScorer(state)
        elif method in BASELINE_NAMES:
            scorer = make_baseline(
                method,
                dataset,
                split,
                seed=config.seed,
                m_neighbors=config.m_neighbors,
                blend=config.blend,
            )
        else:
            raise UsageError(f"unknown method {method!r}")
        reports.append(
            evaluate(
                scorer,
                dataset,
                split,
                config.t_list(),
                method=method,
                max_records=max_records,
            )
        )
    return reports


def cmd_evaluate(config: ExperimentConfig) -> int:
    out = Path(config.out_dir)
    dataset = _load_data(config)
    split = split_8_1_1(dataset, config.seed)
    state = None
    if "hdbn" in config.method_list():
        state = load_model(_require(out / "model.npz", "train"))
    reports = _evaluate_methods(config, dataset, split, state)
    writer = ArtifactWriter(config)
    writer.write_json(
        "evaluate.json", {"reports": {r.method: r.to_dict() for r in reports}}
    )
    writer.write_csv("evaluate.csv", reports_table(reports))
    for report in reports:
        print(
            f"{report.method}: HR@10={report.hr.get(10, float('nan')):.4f} "
            f"NDCG@10={report.ndcg.get(10, float('nan')):.4f} ({report.n_records} records)"
        )
    return 0


def cmd_recommend(config: ExperimentConfig, user: str, emotion: str, top_n: int) -> int:
    out = Path(config.out_dir)
    dataset = _load_data(config)
    state = load_model(_require(out / "model.npz", "train"))
    try:
        user_id = dataset.users.index(user)
        tag_id = dataset.tags.index(emotion)
    except ValueError as exc:
        raise UsageError(f"unknown user or emotion: {exc}") from exc
    ranked = rank_top(state, user_id, tag_id, top_n)
    writer = ArtifactWriter(config)
    rows = [["rank", "music", "score"]]
    for i, (v, score) in enumerate(zip(ranked.music_ids, ranked.scores), start=1):
        rows.append([i, dataset.tracks[int(v)], f"{score:.10g}"])
    writer.write_csv("recommend.csv", rows)
    for row in rows[1:]:
        print(f"{row[0]:>3} {row[1]} ({row[2]})")
    return 0


VARIANTS = {
    "full": {},
    "no_emotion_across": {"use_emotion_across": False},
    "no_emotion_within": {"use_emotion_within": False},
    "no_pref_across": {"use_pref_across": False},
    "no_pref_within": {"use_pref_within": False},
}


def run_pipeline(config: ExperimentConfig, dataset=None, split=None):
    """Group + pretrain + finetune + ranking phase, in memory."""
    if dataset is None:
        dataset = _load_data(config)
    if split is None:
        split = split_8_1_1(dataset, config.seed)
    assignment, n_groups = _resolve_groups(config, dataset, split)
    from .recommender import run_phase1

    hp = _hyper_params(config, n_groups)
    ablation = _ablation(config)
    rng = Rng(config.seed)
    global_post, groups = run_phase1(
        dataset, split, assignment.group_of, n_groups, hp, rng, ablation
    )
    state = ModelState.init(
        dataset, split, global_post, groups, assignment.group_of, hp, ablation, config.seed
    )
    train_phase2(state, split, rng)
    return dataset, split, state


def cmd_ablate(config: ExperimentConfig) -> int:
    dataset = _load_data(config)
    split = split_8_1_1(dataset, config.seed)
    reports = []
    for name, flags in VARIANTS.items():
        variant = replace(config, **flags)
        _, _, state = run_pipeline(variant, dataset, split)
        report = evaluate(
            ModelScorer(state),
            dataset,
            split,
            config.t_list(),
            method=name,
            max_records=config.max_eval_records or None,
        )
        reports.append(report)
        print(f"{name}: HR@10={report.hr.get(10, float('nan')):.4f}")
    writer = ArtifactWriter(config)
    writer.write_csv("ablate.csv", reports_table(reports))
    writer.write_json("ablate.json", {"reports": {r.method: r.to_dict() for r in reports}})
    return 0


def cmd_sweep_led(config: ExperimentConfig, user: str, emotion: str, dims, grid) -> int:
    out = Path(config.out_dir)
    dataset = _load_data(config)
    state = load_model(_require(out / "model.npz", "train"))
    try:
        user_id = dataset.users.index(user)
        tag_id = dataset.tags.index(emotion)
    except ValueError as exc:
        raise UsageError(f"unknown user or emotion: {exc}") from exc
    s = state.tag_vectors[tag_id]
    posterior = state.mood_net_for(user_id)
    rows = [["dim", "grid_value"] + [f"m{i+1}" for i in range(9)]]
    for dim in dims:
        curves = sweep_led_dimension(state.nets, posterior, s, dim, grid)
        for value, mood in zip(grid, curves):
            rows.append([dim, f"{value:.10g}"] + [f"{x:.10g}" for x in mood])
    writer = ArtifactWriter(config)
    writer.write_csv("sweep_led.csv", rows)
    print(f"swept {len(dims)} dimensions over {len(grid)} grid points")
    return 0


def cmd_case_study(config: ExperimentConfig, user: str, top_n: int) -> int:
    out = Path(config.out_dir)
    dataset = _load_data(config)
    split = split_8_1_1(dataset, config.seed)
    state = load_model(_require(out / "model.npz", "train"))
    try:
        user_id = dataset.users.index(user)
    except ValueError as exc:
        raise UsageError(f"unknown user {user!r}") from exc
    history, recommended = case_study_rows(state, dataset, split, user_id, top_n)
    rows = [["section", "rank", "track", "tag", "score"] + [f"m{i+1}" for i in range(9)]]
    for item in history:
        rows.append(
            ["history", "", item["track"], item["tag"], ""] + [f"{x:.10g}" for x in item["mood"]]
        )
    for item in recommended:
        rows.append(
            ["recommended", item["rank"], item["track"], "", f"{item['score']:.10g}"]
            + [f"{x:.10g}" for x in item["mood"]]
        )
    writer = ArtifactWriter(config)
    writer.write_csv("case_study.csv", rows)
    writer.write_json(
        "case_study.json", {"history": history, "recommended": recommended, "user": user}
    )
    print(f"{len(history)} history rows, {len(recommended)} recommendations")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> _Parser:
    parser = _Parser(prog="moodrec", description=__doc__)
    parser.add_argument("--config", default="", help="path to a key = value config file")
    parser.add_argument("--preset", default="", help="named preset: large or small")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("ingest", "synth", "group", "pretrain", "finetune", "train", "evaluate", "ablate"):
        sub.add_parser(name)
    p_rec = sub.add_parser("recommend")
    p_rec.add_argument("--user", required=True)
    p_rec.add_argument("--emotion", required=True)
    p_rec.add_argument("--top", type=int, default=10)
    p_sweep = sub.add_parser("sweep-led")
    p_sweep.add_argument("--user", required=True)
    p_sweep.add_argument("--emotion", required=True)
    p_sweep.add_argument("--dims", default="0,1,2")
    p_sweep.add_argument("--grid-min", type=float, default=-3.0)
    p_sweep.add_argument("--grid-max", type=float, default=3.0)
    p_sweep.add_argument("--grid-steps", type=int, default=13)
    p_case = sub.add_parser("case-study")
    p_case.add_argument("--user", required=True)
    p_case.add_argument("--top", type=int, default=5)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_config(args.config or None, args.set, args.preset or None)
        if args.command == "ingest":
            return cmd_ingest(config)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "group":
            return cmd_group(config)
        if args.command == "pretrain":
            return cmd_pretrain(config)
        if args.command == "finetune":
            return cmd_finetune(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "evaluate":
            return cmd_evaluate(config)
        if args.command == "ablate":
            return cmd_ablate(config)
        if args.command == "recommend":
            return cmd_recommend(config, args.user, args.emotion, args.top)
        if args.command == "sweep-led":
            dims = [int(d) for d in args.dims.split(",") if d.strip()]
            grid = np.linspace(args.grid_min, args.grid_max, args.grid_steps)
            return cmd_sweep_led(config, args.user, args.emotion, dims, grid)
        if args.command == "case-study":
            return cmd_case_study(config, args.user, args.top)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataFormatError as exc:
        print(f"data validation error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"data validation error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
