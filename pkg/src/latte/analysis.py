"""Structural analyses: correlation-vs-distance, rank reversals, transitivity.

Works on a probability matrix (items x users) extracted from a trained
scorer. The statistics here quantify how strongly the decoding tree couples
item probabilities: Pearson correlations per tree-distance stratum, the
Kendall association between distance and similarity, the reversal-rate
decomposition 2*p*(1-p), the one-sided Cantelli bound on reversal rates, and
correlation-transitivity audits against the ultrametric structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (
    ScorerParams,
    encode_user,
    forest_view,
    latent_path_scores,
)
from .trie import DecodingTrie, TrieForest

REVERSAL_SLACK_FACTOR = 3.0  # sampling slack = 3 / sqrt(n_users)


# ---------------------------------------------------------------------------
# scalar statistics

def pearson(x, y) -> float:
    """Pearson correlation; rejects constant inputs outright."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two equal-length 1-D vectors with at least 2 entries")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("zero variance input")
    return float(dx @ dy) / math.sqrt(sxx * syy)


def kendall_tau_b(x, y) -> float:
    """Kendall rank correlation with tie correction (tau-b).

    tau_b = (C - D) / sqrt((n0 - n1) * (n0 - n2)) with n0 = n(n-1)/2 and
    n1, n2 the tied-pair counts of x and y.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two equal-length 1-D vectors with at least 2 entries")
    n = x.size
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(n, k=1)
    s = float((sx[iu] * sy[iu]).sum())
    n0 = n * (n - 1) / 2
    n1 = float((sx[iu] == 0).sum())
    n2 = float((sy[iu] == 0).sum())
    denom = math.sqrt((n0 - n1) * (n0 - n2))
    if denom == 0.0:
        raise ValueError("all pairs tied in one input")
    return s / denom


def cantelli_bound(mu: float, sigma2: float, rho: float) -> float:
    """One-sided bound on the reversal rate, clamped to 1.

    For preference difference D with |E[D]| = mu and pooled per-item variance
    sigma2 under correlation rho: 4*sigma2*(1-rho) / (mu^2 + 2*sigma2*(1-rho)),
    capped at 1.
    """
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    if not -1.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [-1, 1], got {rho}")
    v = 2.0 * sigma2 * (1.0 - rho)
    if v == 0.0:
        return 0.0 if mu != 0 else 1.0
    return min(4.0 * sigma2 * (1.0 - rho) / (mu * mu + v), 1.0)


def latte_effective_correlation(rho: float, rho_low: float, latent_count: int) -> float:
    """Correlation after splitting one path into latent_count routes.

    Mixes the structural correlation rho (shared dominant route, weight
    1/latent_count) with the decoupled correlation rho_low.
    """
    if latent_count < 1:
        raise ValueError("latent_count must be >= 1")
    for name, val in (("rho", rho), ("rho_low", rho_low)):
        if not -1.0 <= val <= 1.0:
            raise ValueError(f"{name} must lie in [-1, 1], got {val}")
    if rho_low > rho:
        raise ValueError(f"rho_low={rho_low} must not exceed rho={rho}")
    out = (1.0 / latent_count) * rho + (1.0 - 1.0 / latent_count) * rho_low
    assert not (latent_count > 1 and rho_low < rho) or out < rho
    return out


def effective_distance(
    params: ScorerParams, forest: TrieForest, history, item_a: str, item_b: str
) -> int:
    """Tree distance as the aggregated model sees it for this user.

    When both items share the dominant latent l* = argmax_l P(l|u)P(i|l,u)
    (ties to the lower latent) the effective distance is the plain tree
    distance; otherwise the paths split at the latent step and the distance is
    2*(m+1).
    """
    cfg = params.config
    if cfg.latent_count < 1:
        raise ValueError("effective_distance needs a model with latent tokens")
    forest = forest_view(forest, cfg)
    h_u = encode_user(params, history)
    dom_a = int(np.argmax(latent_path_scores(params, forest, h_u, item_a)))
    dom_b = int(np.argmax(latent_path_scores(params, forest, h_u, item_b)))
    if dom_a == dom_b:
        return forest.base_distance(item_a, item_b)
    return 2 * (forest.m + 1)


# ---------------------------------------------------------------------------
# probability matrix

@dataclass(eq=False)
class ProbMatrix:
    """P(item | user) for a user sample; rows are items, columns users."""

    item_ids: list[str]
    user_ids: list[str]
    log_values: np.ndarray  # (n_items, n_users)

    def __post_init__(self):
        self.log_values = np.asarray(self.log_values, dtype=float)
        if self.log_values.shape != (len(self.item_ids), len(self.user_ids)):
            raise ValueError("log_values shape does not match id lists")
        self._index = {item: i for i, item in enumerate(self.item_ids)}
        self._values: np.ndarray | None = None

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            self._values = np.exp(self.log_values)
        return self._values

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    def row(self, item_id: str, source: str = "prob") -> np.ndarray:
        try:
            i = self._index[item_id]
        except KeyError:
            raise ValueError(f"unknown item {item_id!r}") from None
        if source == "prob":
            return self.values[i]
        if source == "logprob":
            return self.log_values[i]
        raise ValueError(f"unknown prob_source {source!r}; use 'prob' or 'logprob'")


def build_prob_matrix(
    params: ScorerParams,
    struct,
    histories: dict[str, np.ndarray],
    agg: str = "sum",
) -> ProbMatrix:
    """Score the whole catalog for every user by a batched trie sweep.

    Matches full_rank scores up to floating-point associativity (tested to
    1e-12); column sums are 1 under sum aggregation.
    """
    cfg = params.config
    forest = forest_view(struct, cfg)
    if agg not in ("sum", "max"):
        raise ValueError(f"unknown aggregation {agg!r}; use 'sum' or 'max'")
    if not histories:
        raise ValueError("no users given")
    user_ids = list(histories)
    H = np.stack([encode_user(params, histories[u]) for u in user_ids])
    U = H.shape[0]
    item_ids = forest.item_ids
    row_of = {item: i for i, item in enumerate(item_ids)}
    n_latents = max(cfg.latent_count, 1)
    stack = np.full((n_latents, len(item_ids), U), -np.inf)

    w1h = params.w1[:, : cfg.d]
    w1p = params.w1[:, cfg.d :]
    base_h = H @ w1h.T + params.b1  # (U, hidden), reused at every node

    if cfg.latent_count > 0:
        z0 = np.maximum(base_h + w1p @ params.step_emb[0], 0.0)
        lat_logits = z0 @ params.lat_head_w.T + params.lat_head_b
        mx = lat_logits.max(axis=1, keepdims=True)
        lat_lp = lat_logits - (mx + np.log(np.exp(lat_logits - mx).sum(axis=1, keepdims=True)))

    off = 1 if cfg.latent_count > 0 else 0
    for lat in range(n_latents):
        latent = lat if cfg.latent_count > 0 else None
        perm, trie = forest.for_latent(latent)
        lat_vec = params.lat_emb[lat] if latent is not None else 0.0

        def descend(prefix: tuple[int, ...], acc: np.ndarray, prefix_sum: np.ndarray):
            depth = len(prefix)
            if depth == cfg.m:
                stack[lat, row_of[trie.item_at(prefix)]] = acc
                return
            p = prefix_sum + params.step_emb[depth + off]
            z = np.maximum(base_h + w1p @ p, 0.0)
            pos = perm[depth]
            logits = z @ params.head_w[pos].T + params.head_b[pos]
            valid = trie.valid_children(prefix)
            sel = logits[:, list(valid)]
            mx = sel.max(axis=1, keepdims=True)
            logz = mx[:, 0] + np.log(np.exp(sel - mx).sum(axis=1))
            for j, tok in enumerate(valid):
                descend(prefix + (tok,), acc + (sel[:, j] - logz), prefix_sum + params.emb[pos, tok])

        start = np.zeros(U) if latent is None else lat_lp[:, lat].copy()
        descend((), start, np.zeros(cfg.d) + lat_vec)

    if cfg.latent_count == 0:
        log_values = stack[0]
    elif agg == "sum":
        mx = stack.max(axis=0)
        log_values = mx + np.log(np.exp(stack - mx).sum(axis=0))
    else:
        log_values = stack.max(axis=0)
    return ProbMatrix(item_ids=item_ids, user_ids=user_ids, log_values=log_values)


def latent_usage_distribution(
    params: ScorerParams, struct, histories: dict[str, np.ndarray]
) -> np.ndarray:
    """Mean latent-step distribution over users; sums to one."""
    cfg = params.config
    if cfg.latent_count < 1:
        raise ValueError("model has no latent tokens")
    forest_view(struct, cfg)
    if not histories:
        raise ValueError("no users given")
    H = np.stack([encode_user(params, h) for h in histories.values()])
    w1h = params.w1[:, : cfg.d]
    w1p = params.w1[:, cfg.d :]
    z0 = np.maximum(H @ w1h.T + params.b1 + w1p @ params.step_emb[0], 0.0)
    logits = z0 @ params.lat_head_w.T + params.lat_head_b
    mx = logits.max(axis=1, keepdims=True)
    probs = np.exp(logits - mx)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs.mean(axis=0)


def latent_usage_study(
    params: ScorerParams,
    struct,
    histories: dict[str, np.ndarray],
    agg: str = "sum",
    seed: int = 0,
) -> StudyReport:
    """Per-latent usage: mean step distribution plus greedy-decode frequency."""
    mean_dist = latent_usage_distribution(params, struct, histories)
    dominant = dominant_latent_usage(params, struct, histories, agg=agg)
    n = len(histories)
    groups = [
        GroupStat(
            key=str(lat),
            n=n,
            mean=float(mean_dist[lat]),
            std=0.0,
            extra={"dominant_frequency": float(dominant[lat])},
        )
        for lat in range(params.config.latent_count)
    ]
    return StudyReport(
        study="latent_usage",
        seed=seed,
        config={"agg": agg, "n_users": n},
        groups=groups,
        scalars={
            "latent_count": float(params.config.latent_count),
            "uniform": 1.0 / params.config.latent_count,
        },
    )


def dominant_latent_usage(
    params: ScorerParams, struct, histories: dict[str, np.ndarray], agg: str = "sum"
) -> np.ndarray:
    """Frequency of each latent being generated, one count per user.

    For every user, rank the catalog (aggregated), take the top item, and
    count the latent with the highest joint score P(l|u)P(item|l,u) for it;
    ties go to the lower latent. This is the distribution of latent tokens a
    greedy decode would emit.
    """
    cfg = params.config
    if cfg.latent_count < 1:
        raise ValueError("model has no latent tokens")
    forest = forest_view(struct, cfg)
    pm = build_prob_matrix(params, forest, histories, agg=agg)
    counts = np.zeros(cfg.latent_count)
    top_rows = pm.log_values.argmax(axis=0)  # ties: lowest item index
    for col, user in enumerate(pm.user_ids):
        item = pm.item_ids[int(top_rows[col])]
        h_u = encode_user(params, histories[user])
        scores = latent_path_scores(params, forest, h_u, item)
        counts[int(np.argmax(scores))] += 1
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# pair sampling and studies

@dataclass
class StratifiedPairs:
    """Item pairs grouped by tree distance, sampled without replacement."""

    pairs: list[tuple[str, str, int]]  # (item_a, item_b, distance)
    requested: int
    available: dict[int, int]
    exhausted: dict[int, bool]


def sample_pairs_by_distance(
    trie: DecodingTrie,
    distances: list[int],
    pairs_per_stratum: int,
    seed: int = 0,
) -> StratifiedPairs:
    """Uniform per-stratum pair sample, reproducible from the seed.

    Strata with fewer pairs than requested return everything and are flagged
    exhausted. Distance 0 denotes (item, item) self-pairs.
    """
    if pairs_per_stratum < 1:
        raise ValueError("pairs_per_stratum must be >= 1")
    ids = trie.item_ids
    sid_mat = np.asarray([trie.sids[i] for i in ids])
    n, m = sid_mat.shape
    eq = sid_mat[:, None, :] == sid_mat[None, :, :]
    D = 2 * (m - np.cumprod(eq, axis=2).sum(axis=2))
    rng = np.random.default_rng(seed)
    pairs: list[tuple[str, str, int]] = []
    available: dict[int, int] = {}
    exhausted: dict[int, bool] = {}
    iu = np.triu_indices(n, k=1)
    for dist in distances:
        if dist == 0:
            idx = np.arange(n)
            available[0] = n
            take = min(pairs_per_stratum, n)
            chosen = np.sort(rng.choice(n, size=take, replace=False))
            pairs.extend((ids[i], ids[i], 0) for i in idx[chosen])
            exhausted[0] = n < pairs_per_stratum
            continue
        hits = np.nonzero(D[iu] == dist)[0]
        available[dist] = len(hits)
        exhausted[dist] = len(hits) < pairs_per_stratum
        if len(hits) == 0:
            continue
        take = min(pairs_per_stratum, len(hits))
        chosen = np.sort(rng.choice(len(hits), size=take, replace=False))
        for k in hits[chosen]:
            pairs.append((ids[iu[0][k]], ids[iu[1][k]], dist))
    return StratifiedPairs(
        pairs=pairs, requested=pairs_per_stratum, available=available, exhausted=exhausted
    )


@dataclass
class GroupStat:
    key: str
    n: int
    mean: float
    std: float
    extra: dict[str, float] = field(default_factory=dict)


@dataclass
class StudyReport:
    """Uniform study output: per-group stats plus free-form scalars."""

    study: str
    seed: int
    config: dict
    groups: list[GroupStat]
    scalars: dict[str, float]

    def to_json_dict(self) -> dict:
        return {
            "study": self.study,
            "seed": self.seed,
            "config": self.config,
            "groups": [
                {"key": g.key, "n": g.n, "mean": g.mean, "std": g.std, **g.extra}
                for g in self.groups
            ],
            "scalars": self.scalars,
        }

    def write_json(self, path: str | Path) -> None:
        import json

        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: str | Path) -> None:
        extra_keys = sorted({k for g in self.groups for k in g.extra})
        header = ["key", "n", "mean", "std", *extra_keys]
        lines = [",".join(header)]
        for g in self.groups:
            row = [g.key, str(g.n), repr(g.mean), repr(g.std)]
            row += [repr(g.extra[k]) if k in g.extra else "" for k in extra_keys]
            lines.append(",".join(row))
        Path(path).write_text("\n".join(lines) + "\n")


def _group_stats(values: dict[int, list[float]], extra: dict[int, dict] | None = None) -> list[GroupStat]:
    out = []
    for key in sorted(values):
        arr = np.asarray(values[key], dtype=float)
        out.append(
            GroupStat(
                key=str(key),
                n=arr.size,
                mean=float(arr.mean()) if arr.size else float("nan"),
                std=float(arr.std()) if arr.size else float("nan"),
                extra=(extra or {}).get(key, {}),
            )
        )
    return out


def correlation_study(
    pm: ProbMatrix,
    trie: DecodingTrie,
    pairs: StratifiedPairs,
    prob_source: str = "prob",
    seed: int = 0,
) -> StudyReport:
    """Mean Pearson correlation of item probability rows per distance stratum."""
    by_dist: dict[int, list[float]] = {}
    skipped = 0
    for a, b, dist in pairs.pairs:
        xa = pm.row(a, prob_source)
        xb = pm.row(b, prob_source)
        try:
            r = pearson(xa, xb)
        except ValueError:
            skipped += 1
            continue
        by_dist.setdefault(dist, []).append(r)
    extras = {
        dist: {"exhausted": float(pairs.exhausted.get(dist, False))} for dist in by_dist
    }
    return StudyReport(
        study="correlation",
        seed=seed,
        config={"prob_source": prob_source, "pairs_per_stratum": pairs.requested},
        groups=_group_stats(by_dist, extras),
        scalars={"n_pairs": float(len(pairs.pairs)), "n_skipped_degenerate": float(skipped)},
    )


def kendall_structure_study(
    pm: ProbMatrix,
    trie: DecodingTrie,
    pairs: StratifiedPairs,
    prob_source: str = "prob",
    seed: int = 0,
) -> StudyReport:
    """Kendall tau-b between tree distance and probability-row similarity."""
    dists: list[float] = []
    sims: list[float] = []
    by_dist: dict[int, list[float]] = {}
    skipped = 0
    for a, b, dist in pairs.pairs:
        try:
            r = pearson(pm.row(a, prob_source), pm.row(b, prob_source))
        except ValueError:
            skipped += 1
            continue
        dists.append(float(dist))
        sims.append(r)
        by_dist.setdefault(dist, []).append(r)
    tau = kendall_tau_b(dists, sims)
    return StudyReport(
        study="kendall_structure",
        seed=seed,
        config={"prob_source": prob_source, "pairs_per_stratum": pairs.requested},
        groups=_group_stats(by_dist),
        scalars={
            "tau_b": tau,
            "n_pairs": float(len(dists)),
            "n_skipped_degenerate": float(skipped),
        },
    )


def rank_reversal_rate(pm: ProbMatrix, item_a: str, item_b: str) -> tuple[float, float]:
    """Reversal rate 2*p*(1-p) between two items, and the raw p.

    p is the fraction of users strictly preferring item_a among users with a
    strict preference either way; tied users drop out of both sides.
    """
    diff = pm.row(item_a) - pm.row(item_b)
    greater = int((diff > 0).sum())
    less = int((diff < 0).sum())
    if greater + less == 0:
        raise ValueError(f"all users tie {item_a!r} and {item_b!r}")
    p = greater / (greater + less)
    return 2.0 * p * (1.0 - p), p


def reversal_bound_audit(
    pm: ProbMatrix,
    pairs: list[tuple[str, str]],
    seed: int = 0,
) -> StudyReport:
    """Check empirical reversal rates against the Cantelli bound per pair.

    The bound uses |mean difference|, the pooled variance (mean of the two row
    variances), and the rows' Pearson correlation; a pair violates when its
    empirical rate exceeds bound + 3/sqrt(n_users).
    """
    if not pairs:
        raise ValueError("no pairs to audit")
    slack = REVERSAL_SLACK_FACTOR / math.sqrt(pm.n_users)
    groups: list[GroupStat] = []
    violations = 0
    skipped = 0
    for a, b in pairs:
        xa, xb = pm.row(a), pm.row(b)
        try:
            rate, p = rank_reversal_rate(pm, a, b)
            rho = pearson(xa, xb)
        except ValueError:
            skipped += 1
            continue
        mu = abs(float(xa.mean() - xb.mean()))
        va, vb = float(xa.var()), float(xb.var())
        sigma2 = 0.5 * (va + vb)
        bound = cantelli_bound(mu, sigma2, rho) if sigma2 > 0 else 1.0
        violated = rate > bound + slack
        violations += int(violated)
        lo = min(va, vb)
        imbalance = float("inf") if lo == 0 else max(va, vb) / lo
        groups.append(
            GroupStat(
                key=f"{a}|{b}",
                n=pm.n_users,
                mean=rate,
                std=0.0,
                extra={
                    "p": p,
                    "mu": mu,
                    "sigma2": sigma2,
                    "rho": rho,
                    "bound": bound,
                    "violated": float(violated),
                    "variance_imbalance": imbalance,
                },
            )
        )
    return StudyReport(
        study="reversal_bound",
        seed=seed,
        config={"slack": slack},
        groups=groups,
        scalars={
            "n_pairs": float(len(pairs)),
            "n_violations": float(violations),
            "n_skipped_degenerate": float(skipped),
        },
    )


def _pairwise_pearson(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Correlation matrix over rows; degenerate (constant) rows get NaN."""
    centered = values - values.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=1))
    degenerate = norms == 0
    safe = np.where(degenerate, 1.0, norms)
    z = centered / safe[:, None]
    R = z @ z.T
    R[degenerate, :] = np.nan
    R[:, degenerate] = np.nan
    np.clip(R, -1.0, 1.0, out=R)
    return R, degenerate


def transitivity_audit(
    pm: ProbMatrix,
    trie: DecodingTrie,
    tau_threshold: float,
    delta: int,
    seed: int = 0,
) -> StudyReport:
    """Correlation transitivity vs the structural (ultrametric) guarantee.

    Correlation side: over triples (i1, i2, i3) with rho(i1,i2) > tau and
    rho(i2,i3) > tau, the fraction with rho(i1,i3) > tau and the fraction
    with d(i1,i3) <= delta. Structural side: over triples with d(i1,i2) <=
    delta and d(i2,i3) <= delta, the fraction with d(i1,i3) <= delta, which
    the ultrametric makes exactly 1.
    """
    ids = pm.item_ids
    n = len(ids)
    if n < 3:
        raise ValueError("need at least 3 items")
    R, degenerate = _pairwise_pearson(pm.values)
    sid_mat = np.asarray([trie.sid_of(i) for i in ids])
    eq = sid_mat[:, None, :] == sid_mat[None, :, :]
    D = 2 * (sid_mat.shape[1] - np.cumprod(eq, axis=2).sum(axis=2))

    corr_premise = 0
    corr_conclusion = 0
    corr_near = 0
    with np.errstate(invalid="ignore"):
        high = R > tau_threshold
    np.fill_diagonal(high, False)
    close = D <= delta
    np.fill_diagonal(close, False)
    dist_premise = 0
    dist_conclusion = 0
    for center in range(n):
        s = np.nonzero(high[center])[0]
        if s.size >= 2:
            sub_r = R[np.ix_(s, s)]
            sub_d = D[np.ix_(s, s)]
            iu = np.triu_indices(s.size, k=1)
            corr_premise += iu[0].size
            with np.errstate(invalid="ignore"):
                corr_conclusion += int((sub_r[iu] > tau_threshold).sum())
            corr_near += int((sub_d[iu] <= delta).sum())
        t = np.nonzero(close[center])[0]
        if t.size >= 2:
            sub_d = D[np.ix_(t, t)]
            iu = np.triu_indices(t.size, k=1)
            dist_premise += iu[0].size
            dist_conclusion += int((sub_d[iu] <= delta).sum())

    scalars = {
        "n_corr_triples": float(corr_premise),
        "frac_corr_transitive": corr_conclusion / corr_premise if corr_premise else float("nan"),
        "frac_corr_within_delta": corr_near / corr_premise if corr_premise else float("nan"),
        "n_dist_triples": float(dist_premise),
        "frac_dist_transitive": dist_conclusion / dist_premise if dist_premise else 1.0,
        "n_degenerate_items": float(int(degenerate.sum())),
    }
    return StudyReport(
        study="transitivity",
        seed=seed,
        config={"tau": tau_threshold, "delta": delta},
        groups=[],
        scalars=scalars,
    )
