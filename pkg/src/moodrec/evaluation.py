"""Top-T ranking metrics and the shared test protocol.

For every test record the candidate set is all tracks minus the user's
train-listened set (the ground-truth track always kept). Each scorer is
evaluated on identical candidate sets; reported numbers are means over
the same records for every method.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, SplitDataset

DEFAULT_T_SET = (5, 10, 15, 20)


def score_record(ranked_ids, target, top_t: int):
    """Metrics for one record: (hr, precision, ndcg, mrr).

    A miss scores all zeros; a hit at 1-based position t within the
    first ``top_t`` entries scores (1, 1/T, 1/log2(t+1), 1/t).
    """
    limit = min(top_t, len(ranked_ids))
    for i in range(limit):
        if ranked_ids[i] == target:
            t = i + 1
            return 1.0, 1.0 / top_t, 1.0 / math.log2(t + 1), 1.0 / t
    return 0.0, 0.0, 0.0, 0.0


@dataclass
class MetricsReport:
    """Mean HR/Precision/NDCG/MRR at each T over one test record set."""

    method: str
    t_set: tuple
    hr: dict
    precision: dict
    ndcg: dict
    mrr: dict
    n_records: int
    n_skipped: int = 0
    config: dict = field(default_factory=dict)

    def metric(self, name: str, top_t: int) -> float:
        return getattr(self, name)[top_t]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "t_set": list(self.t_set),
            "hr": {str(t): self.hr[t] for t in self.t_set},
            "precision": {str(t): self.precision[t] for t in self.t_set},
            "ndcg": {str(t): self.ndcg[t] for t in self.t_set},
            "mrr": {str(t): self.mrr[t] for t in self.t_set},
            "n_records": self.n_records,
            "n_skipped": self.n_skipped,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricsReport":
        t_set = tuple(payload["t_set"])
        return cls(
            method=payload["method"],
            t_set=t_set,
            hr={t: payload["hr"][str(t)] for t in t_set},
            precision={t: payload["precision"][str(t)] for t in t_set},
            ndcg={t: payload["ndcg"][str(t)] for t in t_set},
            mrr={t: payload["mrr"][str(t)] for t in t_set},
            n_records=payload["n_records"],
            n_skipped=payload.get("n_skipped", 0),
            config=payload.get("config", {}),
        )


class EvalProtocol:
    """Candidate-set construction shared by every evaluated method."""

    def __init__(self, dataset: Dataset, split: SplitDataset):
        self.dataset = dataset
        self.split = split
        self._all = np.arange(dataset.n_tracks)

    def candidates(self, user_id: int, target: int) -> np.ndarray:
        banned = self.split.listened[user_id] - {int(target)}
        if not banned:
            return self._all
        mask = np.ones(self.dataset.n_tracks, dtype=bool)
        mask[list(banned)] = False
        return self._all[mask]


def rank_candidates(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Canonical order: descending score, ascending id on ties."""
    order = np.lexsort((candidates, -np.asarray(scores, dtype=float)))
    return candidates[order]


def evaluate(
    scorer,
    dataset: Dataset,
    split: SplitDataset,
    t_set=DEFAULT_T_SET,
    method: str = "",
    config: dict | None = None,
    protocol: EvalProtocol | None = None,
    max_records: int | None = None,
) -> MetricsReport:
    """Score every test record and average the four metrics per T.

    ``scorer`` must expose ``score_candidates(user_id, tag_id,
    candidates) -> scores``. Records on which the scorer raises are
    skipped and counted.
    """
    protocol = protocol or EvalProtocol(dataset, split)
    t_set = tuple(t_set)
    t_max = max(t_set)
    records = split.test if max_records is None else split.test[:max_records]
    sums = {name: dict.fromkeys(t_set, 0.0) for name in ("hr", "precision", "ndcg", "mrr")}
    n_scored = 0
    n_skipped = 0
    for u, tag, v in records:
        cands = protocol.candidates(int(u), int(v))
        try:
            scores = scorer.score_candidates(int(u), int(tag), cands)
        except Exception:
            n_skipped += 1
            continue
        ranked = rank_candidates(scores, cands)[:t_max]
        for t in t_set:
            hr, prec, ndcg, mrr = score_record(ranked, int(v), t)
            sums["hr"][t] += hr
            sums["precision"][t] += prec
            sums["ndcg"][t] += ndcg
            sums["mrr"][t] += mrr
        n_scored += 1
    denom = max(n_scored, 1)
    return MetricsReport(
        method=method or type(scorer).__name__,
        t_set=t_set,
        hr={t: sums["hr"][t] / denom for t in t_set},
        precision={t: sums["precision"][t] / denom for t in t_set},
        ndcg={t: sums["ndcg"][t] / denom for t in t_set},
        mrr={t: sums["mrr"][t] / denom for t in t_set},
        n_records=n_scored,
        n_skipped=n_skipped,
        config=config or {},
    )


def reports_table(reports: list[MetricsReport]) -> list[list]:
    """Method-by-metric rows (one per method, 16 metric columns)."""
    if not reports:
        return []
    t_set = reports[0].t_set
    header = ["method"]
    for name in ("hr", "precision", "ndcg", "mrr"):
        header.extend([f"{name}@{t}" for t in t_set])
    rows = [header]
    for report in reports:
        if report.t_set != t_set:
            raise ValueError("reports use mismatched T sets")
        row = [report.method]
        for name in ("hr", "precision", "ndcg", "mrr"):
            row.extend([f"{report.metric(name, t):.6f}" for t in t_set])
        rows.append(row)
    return rows


def case_study_rows(state, dataset: Dataset, split: SplitDataset, user_id: int, top_t: int = 5):
    """Mood distributions of a user's train history and their top-T list.

    Returns (history_rows, recommended_rows); history rows carry the tag
    string and the track's mood distribution, recommendation rows the
    rank, score, and mood distribution.
    """
    from .model import rank_top

    if not 0 <= user_id < dataset.n_users:
        raise ValueError(f"unknown user id {user_id}")
    history = []
    last_tag = 0
    for u, tag, v in split.train:
        if int(u) != user_id:
            continue
        last_tag = int(tag)
        history.append(
            {
                "track": dataset.tracks[int(v)],
                "tag": dataset.tags[int(tag)],
                "mood": dataset.music.moods[int(v)].tolist(),
            }
        )
    ranked = rank_top(state, user_id, last_tag, top_t)
    recommended = [
        {
            "rank": i + 1,
            "track": dataset.tracks[int(v)],
            "score": float(s),
            "mood": dataset.music.moods[int(v)].tolist(),
        }
        for i, (v, s) in enumerate(zip(ranked.music_ids, ranked.scores))
    ]
    return history, recommended
