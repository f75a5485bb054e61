"""Leave-one-out evaluation: splits, next-item examples, Recall/NDCG.

Per user the last interaction is the test target, the second-to-last the
validation target, and everything before is training history. Metrics use the
full catalog as candidates (no sampled negatives); with a single relevant
item NDCG@K reduces to 1/log2(rank+1) for a hit and 0 otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .beam import RankedList, beam_search
from .catalog import Catalog, InteractionDataset
from .model import ScorerParams, TrainExample, flatten_history


@dataclass
class Split:
    train: dict[str, list[str]]
    valid: dict[str, str]
    test: dict[str, str]

    @property
    def user_ids(self) -> list[str]:
        return list(self.train)


def leave_one_out(dataset: InteractionDataset) -> Split:
    """Chronological leave-one-out; every sequence must have >= 3 items."""
    train: dict[str, list[str]] = {}
    valid: dict[str, str] = {}
    test: dict[str, str] = {}
    for user, seq in dataset.sequences.items():
        if len(seq) < 3:
            raise ValueError(f"user {user!r}: sequence of {len(seq)} is too short to split")
        train[user] = list(seq[:-2])
        valid[user] = seq[-2]
        test[user] = seq[-1]
    return Split(train=train, valid=valid, test=test)


def build_examples(catalog: Catalog, split: Split) -> tuple[list[TrainExample], list[TrainExample]]:
    """Next-item examples: all in-train prefixes, plus one validation example per user."""
    train_examples: list[TrainExample] = []
    valid_examples: list[TrainExample] = []
    for user in split.user_ids:
        seq = split.train[user]
        for k in range(1, len(seq)):
            train_examples.append(
                TrainExample(
                    history=flatten_history(catalog, seq[:k]),
                    target_item=seq[k],
                    target_sid=catalog.sid_of(seq[k]),
                )
            )
        valid_examples.append(
            TrainExample(
                history=flatten_history(catalog, seq),
                target_item=split.valid[user],
                target_sid=catalog.sid_of(split.valid[user]),
            )
        )
    return train_examples, valid_examples


def eval_history(split: Split, user: str, mode: str = "test") -> list[str]:
    """Items the model may condition on when predicting the held-out target."""
    if mode == "test":
        return split.train[user] + [split.valid[user]]
    if mode == "valid":
        return list(split.train[user])
    raise ValueError(f"unknown mode {mode!r}; use 'test' or 'valid'")


def recall_at_k(ranked: RankedList, target: str, k: int) -> float:
    """1 when the target sits in the top k, else 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rank = ranked.rank_of(target)
    return 1.0 if rank is not None and rank <= k else 0.0


def ndcg_at_k(ranked: RankedList, target: str, k: int) -> float:
    """Single-target NDCG: 1/log2(rank+1) within the cutoff, else 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rank = ranked.rank_of(target)
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


@dataclass
class MetricsReport:
    model_tag: str
    seed: int
    ks: list[int]
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users: int

    def csv_rows(self) -> list[list]:
        rows: list[list] = [["model_tag", "seed", "K", "recall", "ndcg", "n_users"]]
        for k in self.ks:
            rows.append([self.model_tag, self.seed, k, self.recall[k], self.ndcg[k], self.n_users])
        return rows


def evaluate(
    params: ScorerParams,
    struct,
    catalog: Catalog,
    split: Split,
    ks: tuple[int, ...] = (5, 10),
    beam_size: int = 50,
    agg: str = "sum",
    mode: str = "test",
    model_tag: str = "model",
    seed: int = 0,
    collect_rankings: bool = False,
) -> tuple[MetricsReport, dict[str, RankedList]]:
    """Beam-decode every user and average Recall@K / NDCG@K over users."""
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks:
        raise ValueError("need at least one cutoff K")
    totals_r = {k: 0.0 for k in ks}
    totals_n = {k: 0.0 for k in ks}
    rankings: dict[str, RankedList] = {}
    users = split.user_ids
    if not users:
        raise ValueError("empty split")
    for user in users:
        history = flatten_history(catalog, eval_history(split, user, mode))
        ranked = beam_search(params, struct, history, beam_size=beam_size, agg=agg)
        target = split.test[user] if mode == "test" else split.valid[user]
        for k in ks:
            totals_r[k] += recall_at_k(ranked, target, k)
            totals_n[k] += ndcg_at_k(ranked, target, k)
        if collect_rankings:
            rankings[user] = ranked
    n = len(users)
    report = MetricsReport(
        model_tag=model_tag,
        seed=seed,
        ks=list(ks),
        recall={k: totals_r[k] / n for k in ks},
        ndcg={k: totals_n[k] / n for k in ks},
        n_users=n,
    )
    return report, rankings
