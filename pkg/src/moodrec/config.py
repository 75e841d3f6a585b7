"""Experiment configuration: flat key = value text files, CLI overrides,
named presets, and a content hash embedded in every emitted artifact.

The hash covers the experiment-defining keys only (inputs, sizes,
hyperparameters, seed), never output locations, so reruns into
different directories stay byte-comparable.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields

# keys excluded from the config hash
NON_SEMANTIC_KEYS = {"out_dir"}


@dataclass
class ExperimentConfig:
    # data source: CSV paths, or a synthetic spec when both are empty
    interactions_csv: str = ""
    music_csv: str = ""
    out_dir: str = "out"
    seed: int = 0

    # synthetic dataset spec
    synth_users: int = 200
    synth_tracks: int = 60
    synth_tags: int = 8
    synth_groups: int = 2
    synth_genres: int = 0
    synth_events_per_user: int = 25
    synth_pref_across: float = 1.0
    synth_emotion_across: float = 0.2
    synth_emotion_within: float = 0.1
    synth_pref_within: float = 0.2
    synth_genre_mix: float = 0.15
    synth_group_corners: str = ""  # comma-separated mood indices, optional

    # grouping
    n_groups: int = 0  # 0 -> elbow selection over the candidates below
    group_candidates: str = "1,2,3,4,5,6,8,10"

    # mood-net training
    alpha: float = 1e-5
    pre_lr: float = 0.01
    pre_batch_size: int = 1024
    pre_epochs: int = 30
    ft_lr: float = 0.001
    ft_batch_size: int = 64
    ft_epochs: int = 20

    # ranking-phase training
    neg_k: int = 10
    batch_size: int = 512
    lr: float = 0.05
    lambda_kl_prior: float = 0.01
    lambda_kl_post: float = 0.05
    lambda_mse_user: float = 1e-6
    lambda_mse_emo: float = 1e-4
    epochs: int = 50
    patience: int = 5
    val_cap: int = 2000

    # ablation switches (full model: all true)
    use_emotion_across: bool = True
    use_emotion_within: bool = True
    use_pref_across: bool = True
    use_pref_within: bool = True

    # evaluation
    t_set: str = "5,10,15,20"
    methods: str = "hdbn"
    m_neighbors: int = 50
    blend: float = 0.5
    max_eval_records: int = 0  # 0 -> all

    def group_candidate_list(self) -> list[int]:
        return [int(x) for x in self.group_candidates.split(",") if x.strip()]

    def t_list(self) -> list[int]:
        return [int(x) for x in self.t_set.split(",") if x.strip()]

    def method_list(self) -> list[str]:
        return [m.strip() for m in self.methods.split(",") if m.strip()]

    def group_corner_list(self) -> list[int]:
        return [int(x) for x in self.synth_group_corners.split(",") if x.strip()]

    def uses_synthetic_data(self) -> bool:
        return not (self.interactions_csv and self.music_csv)


# §-style presets matching the two shipped training regimes
PRESETS = {
    "large": {
        "n_groups": 50,
        "alpha": 1e-5,
        "pre_batch_size": 1024,
        "neg_k": 10,
        "lambda_kl_prior": 0.01,
        "lambda_kl_post": 0.05,
        "lambda_mse_user": 1e-6,
        "lambda_mse_emo": 1e-4,
    },
    "small": {
        "n_groups": 10,
        "alpha": 1e-6,
        "pre_batch_size": 512,
        "neg_k": 7,
        "lambda_kl_prior": 0.005,
        "lambda_kl_post": 0.005,
        "lambda_mse_user": 5e-6,
        "lambda_mse_emo": 5e-5,
    },
}


def _coerce(value: str, target_type):
    if target_type is bool:
        low = value.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return target_type(value.strip())


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys error."""
    config = base or ExperimentConfig()
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    concrete = {f.name: type(getattr(config, f.name)) for f in fields(ExperimentConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        setattr(config, key, _coerce(value, concrete[key]))
    return config


def load_config(path, overrides: list[str] | None = None, preset: str | None = None) -> ExperimentConfig:
    config = ExperimentConfig()
    if preset:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r} (choose from {sorted(PRESETS)})")
        for key, value in PRESETS[preset].items():
            setattr(config, key, value)
    if path:
        with open(path, encoding="utf-8") as fh:
            config = parse_config_text(fh.read(), config)
    for item in overrides or []:
        config = parse_config_text(item, config)
    return config


def serialize_config(config: ExperimentConfig, include_non_semantic: bool = True) -> str:
    lines = []
    for key, value in sorted(asdict(config).items()):
        if not include_non_semantic and key in NON_SEMANTIC_KEYS:
            continue
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(config: ExperimentConfig) -> str:
    canonical = serialize_config(config, include_non_semantic=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
