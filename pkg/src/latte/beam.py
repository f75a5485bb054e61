"""Constrained beam decoding over the trie, and exhaustive full ranking.

One beam process covers the whole generation: with latent tokens enabled the
first expansion is over the latent vocabulary, after which each hypothesis
extends along its own (possibly permuted) trie. Completed hypotheses that
de-permute to the same item are aggregated exactly like
:func:`latte.model.item_log_prob`, so a saturating beam reproduces
``full_rank`` scores bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (
    ScorerParams,
    _path_log_prob,
    _sid_step_logits,
    encode_user,
    forest_view,
    latent_log_probs,
    logsumexp,
    masked_log_probs,
)
from .trie import depermute_sid, permute_sid

FULL_RANK_LEAF_PATH_LIMIT = 100_000


@dataclass(frozen=True)
class Hypothesis:
    """Partial decode: latent token (if any), permuted prefix, accumulated log-prob."""

    latent: int | None
    prefix: tuple[int, ...]
    log_prob: float


@dataclass
class RankedList:
    """Items sorted by score (desc), ties broken by item_id; no duplicates."""

    entries: list[tuple[str, float]]

    def __post_init__(self):
        ids = [item for item, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate items in ranked list")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def item_ids(self) -> list[str]:
        return [item for item, _ in self.entries]

    def rank_of(self, item_id: str) -> int | None:
        """1-based rank, or None when the item is absent."""
        for rank, (item, _) in enumerate(self.entries, start=1):
            if item == item_id:
                return rank
        return None

    def csv_rows(self, user_id: str) -> list[list]:
        return [
            [user_id, rank, item, score]
            for rank, (item, score) in enumerate(self.entries, start=1)
        ]


def _hyp_sort_key(hyp: Hypothesis):
    # score desc, then lower latent, then lexicographic prefix
    return (-hyp.log_prob, -1 if hyp.latent is None else hyp.latent, hyp.prefix)


def _ranked(per_item: dict[str, list[tuple[int, float]]], agg: str) -> RankedList:
    entries = []
    for item, scored in per_item.items():
        scored.sort(key=lambda pair: pair[0])  # ascending latent order
        values = np.asarray([v for _, v in scored])
        if agg == "sum":
            score = logsumexp(values)
        elif agg == "max":
            score = float(values.max())
        else:
            raise ValueError(f"unknown aggregation {agg!r}; use 'sum' or 'max'")
        entries.append((item, score))
    entries.sort(key=lambda pair: (-pair[1], pair[0]))
    return RankedList(entries)


def beam_search(
    params: ScorerParams,
    struct,
    history,
    beam_size: int = 50,
    agg: str = "sum",
) -> RankedList:
    """Top items by beam decoding; deterministic tie-breaks throughout.

    Every kept hypothesis is expanded to all valid children before pruning
    back to ``beam_size``; ties at the cutoff prefer the lower latent token
    and then the lexicographically smaller prefix.
    """
    cfg = params.config
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    forest = forest_view(struct, cfg)
    h_u = encode_user(params, history)

    if cfg.latent_count > 0:
        ll = latent_log_probs(params, h_u)
        beams = [Hypothesis(lat, (), float(ll[lat])) for lat in range(cfg.latent_count)]
        beams.sort(key=_hyp_sort_key)
        beams = beams[:beam_size]
    else:
        beams = [Hypothesis(None, (), 0.0)]

    for s in range(cfg.m):
        candidates: list[Hypothesis] = []
        for hyp in beams:
            perm, trie = forest.for_latent(hyp.latent)
            valid = trie.valid_children(hyp.prefix)
            logits = _sid_step_logits(params, h_u, hyp.prefix, s, perm, hyp.latent)
            logs = masked_log_probs(logits, valid)
            for tok in valid:
                candidates.append(
                    Hypothesis(hyp.latent, hyp.prefix + (tok,), hyp.log_prob + logs[tok])
                )
        candidates.sort(key=_hyp_sort_key)
        beams = candidates[:beam_size]

    per_item: dict[str, list[tuple[int, float]]] = {}
    for hyp in beams:
        perm, trie = forest.for_latent(hyp.latent)
        item = trie.item_at(hyp.prefix)
        key = 0 if hyp.latent is None else hyp.latent
        per_item.setdefault(item, []).append((key, hyp.log_prob))
    return _ranked(per_item, agg)


def full_rank(params: ScorerParams, struct, history, agg: str = "sum") -> RankedList:
    """Score every item exactly; guarded against large catalogs.

    The number of scored leaf paths is n_items * max(latent_count, 1); above
    ``FULL_RANK_LEAF_PATH_LIMIT`` this raises and beam_search should be used.
    """
    cfg = params.config
    forest = forest_view(struct, cfg)
    n_paths = forest.n_items * max(cfg.latent_count, 1)
    if n_paths > FULL_RANK_LEAF_PATH_LIMIT:
        raise ValueError(
            f"full_rank would score {n_paths} leaf paths "
            f"(limit {FULL_RANK_LEAF_PATH_LIMIT}); use beam_search instead"
        )
    h_u = encode_user(params, history)
    per_item: dict[str, list[tuple[int, float]]] = {}
    if cfg.latent_count == 0:
        perm, trie = forest.for_latent(None)
        for item, base_sid in forest.base_sids.items():
            psid = permute_sid(base_sid, perm)
            per_item[item] = [(0, float(_path_log_prob(params, h_u, trie, perm, psid, None)))]
    else:
        ll = latent_log_probs(params, h_u)
        for lat in range(cfg.latent_count):
            perm, trie = forest.for_latent(lat)
            for item, base_sid in forest.base_sids.items():
                psid = permute_sid(base_sid, perm)
                score = float(
                    _path_log_prob(params, h_u, trie, perm, psid, lat, start=float(ll[lat]))
                )
                per_item.setdefault(item, []).append((lat, score))
    return _ranked(per_item, agg)


def depermute(psid: tuple[int, ...], perm: tuple[int, ...]) -> tuple[int, ...]:
    """Recover the canonical SID from a permuted decode; inverse of permute_sid."""
    return depermute_sid(psid, perm)


def save_rankings_csv(rankings: dict[str, RankedList], path: str | Path, top_k: int | None = None) -> None:
    lines = ["user_id,rank,item_id,log_score"]
    for user, ranked in rankings.items():
        rows = ranked.csv_rows(user)
        if top_k is not None:
            rows = rows[:top_k]
        for user_id, rank, item, score in rows:
            lines.append(f"{user_id},{rank},{item},{score!r}")
    Path(path).write_text("\n".join(lines) + "\n")
