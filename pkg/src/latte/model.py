"""Sequence scorer over semantic-ID tokens, with optional latent tokens.

An item's probability factorizes over its SID tokens:

    P(item | u) = prod_s P(c_s | c_<s, u)

with each conditional a softmax over the trie's valid children at that
prefix. With a latent vocabulary (latent_count > 0) a latent token is
generated first and the item probability aggregates over it,

    P(item | u) = sum_l P(l | u) * P(item | l, u)      (agg="sum")
    or             max_l P(l | u) * P(item | l, u)      (agg="max").

The backbone is deliberately small and deterministic: a recency-weighted bag
over history token embeddings, one shared ReLU layer over [h_u ; p] where p
sums prefix/step embeddings, and per-step linear output heads. Everything is
float64 and gradients are exact reverse-mode, so training is bit-reproducible
from a seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .trie import DecodingTrie, TrieForest, permute_sid, single_trie_forest

INIT_SCALE = 0.1
# Latent embeddings start an order of magnitude larger than other weights.
# Near-identical starts make the latent-conditioned paths collapse into
# redundant copies of one another; well-separated offsets put each latent in
# its own ReLU region so the paths can specialize from the first epoch.
LATENT_INIT_SCALE = 1.0
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class ScorerConfig:
    m: int
    M: int
    latent_count: int = 0  # 0 disables latent tokens
    d: int = 32
    hidden: int = 64
    gamma: float = 0.8  # recency decay for the history encoder
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.M < 2:
            raise ValueError(f"need m >= 1 and M >= 2, got m={self.m}, M={self.M}")
        if self.latent_count < 0:
            raise ValueError("latent_count must be >= 0")
        if self.d < 1 or self.hidden < 1:
            raise ValueError("d and hidden must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")

    @property
    def n_steps(self) -> int:
        return self.m + (1 if self.latent_count > 0 else 0)


@dataclass(eq=False)
class ScorerParams:
    """Parameter bundle; array layout is fixed by the config."""

    config: ScorerConfig
    emb: np.ndarray        # (m, M, d) per-position input embeddings
    lat_emb: np.ndarray    # (latent_count, d)
    step_emb: np.ndarray   # (m + 1, d)
    w1: np.ndarray         # (hidden, 2d)
    b1: np.ndarray         # (hidden,)
    lat_head_w: np.ndarray  # (latent_count, hidden)
    lat_head_b: np.ndarray  # (latent_count,)
    head_w: np.ndarray     # (m, M, hidden)
    head_b: np.ndarray     # (m, M)

    ARRAY_FIELDS = (
        "emb", "lat_emb", "step_emb", "w1", "b1",
        "lat_head_w", "lat_head_b", "head_w", "head_b",
    )

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.ARRAY_FIELDS}

    def copy(self) -> "ScorerParams":
        return ScorerParams(self.config, **{k: v.copy() for k, v in self.arrays().items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays().items()}

    @property
    def param_count(self) -> int:
        return sum(v.size for v in self.arrays().values())


def expected_shapes(config: ScorerConfig) -> dict[str, tuple[int, ...]]:
    m, M, L, d, h = config.m, config.M, config.latent_count, config.d, config.hidden
    return {
        "emb": (m, M, d),
        "lat_emb": (L, d),
        "step_emb": (m + 1, d),
        "w1": (h, 2 * d),
        "b1": (h,),
        "lat_head_w": (L, h),
        "lat_head_b": (L,),
        "head_w": (m, M, h),
        "head_b": (m, M),
    }


def init_params(config: ScorerConfig) -> ScorerParams:
    """Uniform [-0.1, 0.1] weights from the config seed; biases zero.

    Latent embeddings use the larger LATENT_INIT_SCALE, see its comment.
    """
    rng = np.random.default_rng(config.seed)
    shapes = expected_shapes(config)

    def u(name, scale=INIT_SCALE):
        return rng.uniform(-scale, scale, size=shapes[name])

    L, d = shapes["lat_emb"]
    if 0 < L <= d:
        # orthonormal rows: equal pairwise separation of the latent offsets
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        lat = LATENT_INIT_SCALE * q[:, :L].T
    else:
        lat = u("lat_emb", LATENT_INIT_SCALE)

    return ScorerParams(
        config=config,
        emb=u("emb"),
        lat_emb=lat,
        step_emb=u("step_emb"),
        w1=u("w1"),
        b1=np.zeros(shapes["b1"]),
        lat_head_w=u("lat_head_w"),
        lat_head_b=np.zeros(shapes["lat_head_b"]),
        head_w=u("head_w"),
        head_b=np.zeros(shapes["head_b"]),
    )


def zero_params(config: ScorerConfig) -> ScorerParams:
    shapes = expected_shapes(config)
    return ScorerParams(config=config, **{k: np.zeros(s) for k, s in shapes.items()})


@dataclass
class TrainExample:
    """One next-item prediction instance.

    ``history`` is the flattened token sequence of the preceding items
    (oldest first, m tokens per item in canonical SID order); ``latent`` is
    populated per epoch during training when latent tokens are enabled.
    """

    history: np.ndarray
    target_item: str
    target_sid: tuple[int, ...]
    latent: int | None = None


def flatten_history(catalog, item_ids: list[str]) -> np.ndarray:
    """Expand an item sequence into its SID tokens, oldest first."""
    if not item_ids:
        raise ValueError("empty history")
    tokens: list[int] = []
    for item in item_ids:
        tokens.extend(catalog.sid_of(item))
    return np.asarray(tokens, dtype=np.int64)


def forest_view(struct, config: ScorerConfig) -> TrieForest:
    """Accept a trie or forest; validate it against the model config."""
    if isinstance(struct, DecodingTrie):
        forest = single_trie_forest(struct)
    elif isinstance(struct, TrieForest):
        forest = struct
    else:
        raise ValueError(f"expected a DecodingTrie or TrieForest, got {type(struct).__name__}")
    if forest.m != config.m:
        raise ValueError(f"trie depth {forest.m} != model m={config.m}")
    n = len(forest.tries)
    if config.latent_count == 0:
        if n != 1:
            raise ValueError("base model (latent_count=0) needs a single trie")
    elif n not in (1, config.latent_count):
        raise ValueError(
            f"forest of {n} tries does not fit latent_count={config.latent_count}"
        )
    return forest


# ---------------------------------------------------------------------------
# encoding and single-step scoring

def encode_user(params: ScorerParams, history) -> np.ndarray:
    """Recency-weighted bag of history token embeddings.

    Token t (0-based, oldest first) gets weight gamma^(T-1-t), normalized to
    sum to one; position tables cycle with t mod m.
    """
    cfg = params.config
    tokens = np.asarray(history, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("empty history")
    if tokens.min() < 0 or tokens.max() >= cfg.M:
        raise ValueError(f"history tokens outside [0, {cfg.M})")
    T = tokens.size
    w = cfg.gamma ** np.arange(T - 1, -1.0, -1.0)
    w /= w.sum()
    pos = np.arange(T) % cfg.m
    return (w[:, None] * params.emb[pos, tokens]).sum(axis=0)


def _hidden(params: ScorerParams, h_u: np.ndarray, p: np.ndarray) -> np.ndarray:
    x = np.concatenate([h_u, p])
    return np.maximum(params.w1 @ x + params.b1, 0.0)


def _prefix_vector(
    params: ScorerParams,
    prefix: tuple[int, ...],
    step_emb_index: int,
    positions: tuple[int, ...],
    latent: int | None,
) -> np.ndarray:
    p = params.step_emb[step_emb_index].copy()
    if latent is not None:
        p += params.lat_emb[latent]
    for t, tok in enumerate(prefix):
        p += params.emb[positions[t], tok]
    return p


def _sid_step_logits(
    params: ScorerParams,
    h_u: np.ndarray,
    prefix: tuple[int, ...],
    slot: int,
    positions: tuple[int, ...],
    latent: int | None,
) -> np.ndarray:
    """Raw logits for SID decode slot ``slot`` (0-based)."""
    off = 1 if params.config.latent_count > 0 else 0
    p = _prefix_vector(params, prefix, slot + off, positions, latent)
    z = _hidden(params, h_u, p)
    pos = positions[slot]
    return params.head_w[pos] @ z + params.head_b[pos]


def _latent_step_logits(params: ScorerParams, h_u: np.ndarray) -> np.ndarray:
    p = params.step_emb[0]
    z = _hidden(params, h_u, p)
    return params.lat_head_w @ z + params.lat_head_b


def step_logits(
    params: ScorerParams,
    h_u: np.ndarray,
    prefix_tokens: tuple[int, ...],
    step_index: int,
    positions: tuple[int, ...] | None = None,
    latent: int | None = None,
) -> np.ndarray:
    """Raw logits for one decode step.

    With latent tokens enabled, step 0 is the latent step (empty prefix, no
    latent yet) and SID slot s is step s+1; without them SID slot s is step s.
    ``positions`` gives the original SID position decoded at each slot and
    defaults to the identity order.
    """
    cfg = params.config
    prefix = tuple(int(t) for t in prefix_tokens)
    off = 1 if cfg.latent_count > 0 else 0
    if not 0 <= step_index < cfg.m + off:
        raise ValueError(f"step_index {step_index} outside [0, {cfg.m + off})")
    positions = tuple(range(cfg.m)) if positions is None else tuple(positions)
    if cfg.latent_count > 0 and step_index == 0:
        if prefix or latent is not None:
            raise ValueError("latent step takes an empty prefix and no latent")
        return _latent_step_logits(params, h_u)
    slot = step_index - off
    if len(prefix) != slot:
        raise ValueError(f"prefix length {len(prefix)} does not match step_index {step_index}")
    if cfg.latent_count > 0 and (latent is None or not 0 <= latent < cfg.latent_count):
        raise ValueError(f"SID steps need a latent token in [0, {cfg.latent_count})")
    if cfg.latent_count == 0 and latent is not None:
        raise ValueError("base model takes no latent token")
    return _sid_step_logits(params, h_u, prefix, slot, positions, latent)


def masked_log_probs(logits: np.ndarray, valid) -> np.ndarray:
    """Log-softmax restricted to ``valid`` indices; -inf elsewhere."""
    valid = np.asarray(list(valid), dtype=np.int64)
    if valid.size == 0:
        raise ValueError("empty valid-token set")
    sel = logits[valid]
    mx = sel.max()
    logz = mx + np.log(np.exp(sel - mx).sum())
    out = np.full(logits.shape, -np.inf)
    out[valid] = sel - logz
    return out


def masked_distribution(logits: np.ndarray, valid) -> np.ndarray:
    """Probability vector with support exactly on ``valid``; sums to one."""
    lp = masked_log_probs(logits, valid)
    out = np.zeros(logits.shape)
    finite = lp > -np.inf
    out[finite] = np.exp(lp[finite])
    return out


def logsumexp(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    mx = values.max()
    if not np.isfinite(mx):
        return float(mx)
    return float(mx + np.log(np.exp(values - mx).sum()))


def sample_latent(rng: np.random.Generator, latent_count: int) -> int:
    if latent_count < 1:
        raise ValueError("latent_count must be >= 1 to sample a latent token")
    return int(rng.integers(latent_count))


# ---------------------------------------------------------------------------
# item scoring

def latent_log_probs(params: ScorerParams, h_u: np.ndarray) -> np.ndarray:
    """log P(l | u) over the full latent vocabulary."""
    cfg = params.config
    if cfg.latent_count < 1:
        raise ValueError("model has no latent tokens")
    logits = _latent_step_logits(params, h_u)
    return masked_log_probs(logits, range(cfg.latent_count))


def _path_log_prob(
    params: ScorerParams,
    h_u: np.ndarray,
    trie: DecodingTrie,
    perm: tuple[int, ...],
    psid: tuple[int, ...],
    latent: int | None,
    start: float = 0.0,
) -> float:
    """Sum of masked log conditionals along one root-to-leaf path.

    Accumulates left to right starting from ``start`` so that every caller
    (path scoring, beam search) produces bit-identical totals.
    """
    total = start
    for s in range(params.config.m):
        prefix = psid[:s]
        valid = trie.valid_children(prefix)
        logits = _sid_step_logits(params, h_u, prefix, s, perm, latent)
        total = total + masked_log_probs(logits, valid)[psid[s]]
    return total


def latent_path_scores(
    params: ScorerParams, forest: TrieForest, h_u: np.ndarray, item_id: str
) -> np.ndarray:
    """Joint scores log P(l|u) + log P(item|l,u) for every latent token."""
    cfg = params.config
    ll = latent_log_probs(params, h_u)
    base_sid = forest.base_sids.get(item_id)
    if base_sid is None:
        raise ValueError(f"unknown item {item_id!r}")
    scores = np.empty(cfg.latent_count)
    for lat in range(cfg.latent_count):
        perm, trie = forest.for_latent(lat)
        psid = permute_sid(base_sid, perm)
        scores[lat] = _path_log_prob(params, h_u, trie, perm, psid, lat, start=float(ll[lat]))
    return scores


def item_log_prob(
    params: ScorerParams,
    struct,
    history,
    item_id: str,
    latent: int | None = None,
    agg: str = "sum",
) -> float:
    """log P(item | u), optionally for a fixed latent token.

    The base model scores the single trie path. With latent tokens the score
    is log P(l|u) + log P(item|l,u) when ``latent`` is given, else the
    aggregation over the latent vocabulary (sum in probability space, or max).
    """
    cfg = params.config
    forest = forest_view(struct, cfg)
    h_u = encode_user(params, history)
    if cfg.latent_count == 0:
        if latent is not None:
            raise ValueError("base model takes no latent token")
        perm, trie = forest.for_latent(None)
        psid = permute_sid(trie_base_sid(forest, item_id), perm)
        return float(_path_log_prob(params, h_u, trie, perm, psid, None))
    if latent is not None:
        if not 0 <= latent < cfg.latent_count:
            raise ValueError(f"latent {latent} outside [0, {cfg.latent_count})")
        ll = latent_log_probs(params, h_u)
        perm, trie = forest.for_latent(latent)
        psid = permute_sid(trie_base_sid(forest, item_id), perm)
        return float(
            _path_log_prob(params, h_u, trie, perm, psid, latent, start=float(ll[latent]))
        )
    scores = latent_path_scores(params, forest, h_u, item_id)
    if agg == "sum":
        return logsumexp(scores)
    if agg == "max":
        return float(scores.max())
    raise ValueError(f"unknown aggregation {agg!r}; use 'sum' or 'max'")


def trie_base_sid(forest: TrieForest, item_id: str) -> tuple[int, ...]:
    sid = forest.base_sids.get(item_id)
    if sid is None:
        raise ValueError(f"unknown item {item_id!r}")
    return sid


# ---------------------------------------------------------------------------
# batched loss and exact gradients

def _batch_encode(params: ScorerParams, examples: list[TrainExample]):
    """Pad histories and return (H, pos_pad, tok_pad, w_pad) for reuse in backprop."""
    cfg = params.config
    B = len(examples)
    lens = [ex.history.size for ex in examples]
    if min(lens) == 0:
        raise ValueError("empty history in batch")
    T = max(lens)
    tok = np.zeros((B, T), dtype=np.int64)
    w = np.zeros((B, T))
    pos = np.zeros((B, T), dtype=np.int64)
    for b, ex in enumerate(examples):
        t = ex.history.size
        tok[b, :t] = ex.history
        raw = cfg.gamma ** np.arange(t - 1, -1.0, -1.0)
        w[b, :t] = raw / raw.sum()
        pos[b, :t] = np.arange(t) % cfg.m
    H = (w[:, :, None] * params.emb[pos, tok]).sum(axis=1)
    return H, pos, tok, w


def loss_and_gradients(
    params: ScorerParams, examples: list[TrainExample], struct
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean masked cross-entropy over all (example, step) pairs, with grads.

    Exact reverse-mode gradients for every parameter array; verified against
    central finite differences in the tests.
    """
    cfg = params.config
    forest = forest_view(struct, cfg)
    if not examples:
        raise ValueError("empty batch")
    B = len(examples)
    off = 1 if cfg.latent_count > 0 else 0
    S = cfg.m + off
    d = cfg.d

    perms: list[tuple[int, ...]] = []
    tries: list[DecodingTrie] = []
    psids = np.empty((B, cfg.m), dtype=np.int64)
    lats = np.zeros(B, dtype=np.int64)
    for b, ex in enumerate(examples):
        if cfg.latent_count > 0:
            if ex.latent is None or not 0 <= ex.latent < cfg.latent_count:
                raise ValueError(f"example {b}: latent token missing or out of range")
            lats[b] = ex.latent
            perm, trie = forest.for_latent(ex.latent)
        else:
            if ex.latent is not None:
                raise ValueError(f"example {b}: base model takes no latent token")
            perm, trie = forest.for_latent(None)
        perms.append(perm)
        tries.append(trie)
        psids[b] = permute_sid(ex.target_sid, perm)

    H, hist_pos, hist_tok, hist_w = _batch_encode(params, examples)
    grads = params.zeros_like()
    scale = 1.0 / (B * S)
    loss = 0.0

    # forward, keeping per-step tensors for the backward pass
    steps = []
    prefix_sum = np.zeros((B, d))
    if off:
        P = np.broadcast_to(params.step_emb[0], (B, d)).copy()
        X = np.concatenate([H, P], axis=1)
        A = X @ params.w1.T + params.b1
        Z = np.maximum(A, 0.0)
        logits = Z @ params.lat_head_w.T + params.lat_head_b
        mask = np.ones((B, cfg.latent_count), dtype=bool)
        steps.append(("latent", 0, None, X, A, Z, logits, mask, lats))
        prefix_sum = prefix_sum + params.lat_emb[lats]
    for s in range(cfg.m):
        P = prefix_sum + params.step_emb[s + off]
        X = np.concatenate([H, P], axis=1)
        A = X @ params.w1.T + params.b1
        Z = np.maximum(A, 0.0)
        pos = np.asarray([perm[s] for perm in perms], dtype=np.int64)
        Wg = params.head_w[pos]  # (B, M, hidden)
        logits = np.einsum("bmh,bh->bm", Wg, Z) + params.head_b[pos]
        mask = np.zeros((B, cfg.M), dtype=bool)
        for b in range(B):
            mask[b, list(tries[b].valid_children(tuple(psids[b, :s])))] = True
        steps.append(("sid", s, pos, X, A, Z, logits, mask, psids[:, s]))
        prefix_sum = prefix_sum + params.emb[pos, psids[:, s]]

    rows = np.arange(B)
    dH = np.zeros((B, d))
    dP_sid: list[np.ndarray] = [None] * cfg.m  # type: ignore[list-item]
    dP_latent = None
    for kind, s, pos, X, A, Z, logits, mask, targets in steps:
        neg = np.where(mask, logits, -np.inf)
        mx = neg.max(axis=1, keepdims=True)
        ex = np.where(mask, np.exp(neg - mx), 0.0)
        logz = mx[:, 0] + np.log(ex.sum(axis=1))
        loss += float((logz - logits[rows, targets]).sum()) * scale

        dlogits = ex / ex.sum(axis=1, keepdims=True) * scale
        dlogits[rows, targets] -= scale
        if kind == "latent":
            grads["lat_head_w"] += dlogits.T @ Z
            grads["lat_head_b"] += dlogits.sum(axis=0)
            dZ = dlogits @ params.lat_head_w
        else:
            Wg = params.head_w[pos]
            np.add.at(grads["head_w"], pos, dlogits[:, :, None] * Z[:, None, :])
            np.add.at(grads["head_b"], pos, dlogits)
            dZ = np.einsum("bm,bmh->bh", dlogits, Wg)
        dA = dZ * (A > 0)
        grads["w1"] += dA.T @ X
        grads["b1"] += dA.sum(axis=0)
        dX = dA @ params.w1
        dH += dX[:, :d]
        if kind == "latent":
            dP_latent = dX[:, d:]
        else:
            dP_sid[s] = dX[:, d:]

    # step embeddings
    if off:
        grads["step_emb"][0] += dP_latent.sum(axis=0)
    for s in range(cfg.m):
        grads["step_emb"][s + off] += dP_sid[s].sum(axis=0)

    # prefix-token embeddings: token at slot t feeds every later slot
    G = np.zeros((B, d))
    for s in range(cfg.m - 1, 0, -1):
        G += dP_sid[s]
        pos = np.asarray([perm[s - 1] for perm in perms], dtype=np.int64)
        np.add.at(grads["emb"], (pos, psids[:, s - 1]), G)
    if off:
        G += dP_sid[0]
        np.add.at(grads["lat_emb"], lats, G)

    # history embeddings through the encoder
    np.add.at(grads["emb"], (hist_pos, hist_tok), hist_w[:, :, None] * dH[:, None, :])
    return loss, grads


def _batch_path_log_probs(
    params: ScorerParams,
    H: np.ndarray,
    trie: DecodingTrie,
    perm: tuple[int, ...],
    psids: np.ndarray,
    latent: int | None,
) -> np.ndarray:
    """Forward-only path log-probs for a batch sharing one trie and latent."""
    cfg = params.config
    B = H.shape[0]
    off = 1 if cfg.latent_count > 0 else 0
    prefix_sum = np.zeros((B, cfg.d))
    if latent is not None:
        prefix_sum += params.lat_emb[latent]
    total = np.zeros(B)
    rows = np.arange(B)
    for s in range(cfg.m):
        P = prefix_sum + params.step_emb[s + off]
        X = np.concatenate([H, P], axis=1)
        Z = np.maximum(X @ params.w1.T + params.b1, 0.0)
        pos = perm[s]
        logits = Z @ params.head_w[pos].T + params.head_b[pos]
        mask = np.zeros((B, cfg.M), dtype=bool)
        for b in range(B):
            mask[b, list(trie.valid_children(tuple(psids[b, :s])))] = True
        neg = np.where(mask, logits, -np.inf)
        mx = neg.max(axis=1, keepdims=True)
        exl = np.where(mask, np.exp(neg - mx), 0.0)
        logz = mx[:, 0] + np.log(exl.sum(axis=1))
        total += logits[rows, psids[:, s]] - logz
        prefix_sum = prefix_sum + params.emb[pos, psids[:, s]]
    return total


def batch_marginal_nll(
    params: ScorerParams, examples: list[TrainExample], struct, agg: str = "sum"
) -> float:
    """Mean -log P(target item | u) under the configured aggregation."""
    cfg = params.config
    forest = forest_view(struct, cfg)
    if not examples:
        raise ValueError("no examples")
    H, _, _, _ = _batch_encode(params, examples)
    B = len(examples)
    base = np.asarray([forest.base_sids[ex.target_item] for ex in examples], dtype=np.int64)
    if cfg.latent_count == 0:
        perm, trie = forest.for_latent(None)
        psids = base[:, list(perm)]
        lp = _batch_path_log_probs(params, H, trie, perm, psids, None)
        return float(-lp.mean())
    # latent case: latent-step log-probs once, then one pass per latent
    P0 = np.broadcast_to(params.step_emb[0], (B, cfg.d))
    X0 = np.concatenate([H, P0], axis=1)
    Z0 = np.maximum(X0 @ params.w1.T + params.b1, 0.0)
    lat_logits = Z0 @ params.lat_head_w.T + params.lat_head_b
    mx = lat_logits.max(axis=1, keepdims=True)
    lat_lp = lat_logits - (mx + np.log(np.exp(lat_logits - mx).sum(axis=1, keepdims=True)))
    joint = np.empty((cfg.latent_count, B))
    for lat in range(cfg.latent_count):
        perm, trie = forest.for_latent(lat)
        psids = base[:, list(perm)]
        joint[lat] = lat_lp[:, lat] + _batch_path_log_probs(params, H, trie, perm, psids, lat)
    if agg == "sum":
        m2 = joint.max(axis=0)
        lp = m2 + np.log(np.exp(joint - m2).sum(axis=0))
    elif agg == "max":
        lp = joint.max(axis=0)
    else:
        raise ValueError(f"unknown aggregation {agg!r}; use 'sum' or 'max'")
    return float(-lp.mean())


# ---------------------------------------------------------------------------
# training

def adam_init(params: ScorerParams) -> dict:
    return {
        "m": params.zeros_like(),
        "v": params.zeros_like(),
        "t": 0,
    }


def adam_step(params: ScorerParams, grads: dict[str, np.ndarray], state: dict, lr: float) -> None:
    state["t"] += 1
    t = state["t"]
    for name, arr in params.arrays().items():
        g = grads[name]
        state["m"][name] = ADAM_BETA1 * state["m"][name] + (1 - ADAM_BETA1) * g
        state["v"][name] = ADAM_BETA2 * state["v"][name] + (1 - ADAM_BETA2) * g * g
        mhat = state["m"][name] / (1 - ADAM_BETA1**t)
        vhat = state["v"][name] / (1 - ADAM_BETA2**t)
        arr -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def train(
    params: ScorerParams,
    train_examples: list[TrainExample],
    valid_examples: list[TrainExample],
    struct,
    epochs: int = 60,
    lr: float = 1e-2,
    batch_size: int = 64,
    seed: int = 0,
    patience: int = 10,
    agg: str = "sum",
) -> tuple[ScorerParams, list[tuple[int, float, float]]]:
    """Adam training with per-epoch latent resampling and early stopping.

    Returns the parameters at the best validation loss and the loss curve
    [(epoch, train_loss, valid_loss)]. Bit-deterministic for a fixed seed.
    """
    cfg = params.config
    if not train_examples or not valid_examples:
        raise ValueError("need non-empty train and validation example lists")
    if epochs < 0 or patience < 1 or batch_size < 1:
        raise ValueError("epochs >= 0, patience >= 1, batch_size >= 1 required")
    rng = np.random.default_rng(seed)
    work = params.copy()
    state = adam_init(work)
    n = len(train_examples)
    best_loss = np.inf
    best_params = work.copy()
    best_epoch = -1
    curve: list[tuple[int, float, float]] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        if cfg.latent_count > 0:
            drawn = rng.integers(cfg.latent_count, size=n)  # fresh latents each epoch
            for i, example in enumerate(train_examples):
                example.latent = int(drawn[i])
        else:
            for example in train_examples:
                example.latent = None  # examples may be shared with a latent run
        total = 0.0
        for lo in range(0, n, batch_size):
            batch = [train_examples[i] for i in order[lo : lo + batch_size]]
            loss, grads = loss_and_gradients(work, batch, struct)
            adam_step(work, grads, state, lr)
            total += loss * len(batch)
        train_loss = total / n
        valid_loss = batch_marginal_nll(work, valid_examples, struct, agg=agg)
        curve.append((epoch, train_loss, valid_loss))
        if valid_loss < best_loss:
            best_loss = valid_loss
            best_params = work.copy()
            best_epoch = epoch
        elif epoch - best_epoch >= patience:
            break
    return best_params, curve


# ---------------------------------------------------------------------------
# persistence

def save_params(params: ScorerParams, path: str | Path) -> None:
    cfg = params.config
    doc = {
        "config": {
            "m": cfg.m, "M": cfg.M, "latent_count": cfg.latent_count,
            "d": cfg.d, "hidden": cfg.hidden, "gamma": cfg.gamma, "seed": cfg.seed,
        },
        "params": {name: arr.tolist() for name, arr in params.arrays().items()},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_params(path: str | Path) -> ScorerParams:
    doc = json.loads(Path(path).read_text())
    if "config" not in doc or "params" not in doc:
        raise ValueError(f"{path}: params document missing config or params")
    cfg = ScorerConfig(**doc["config"])
    shapes = expected_shapes(cfg)
    arrays = {}
    for name, shape in shapes.items():
        if name not in doc["params"]:
            raise ValueError(f"{path}: missing parameter array {name!r}")
        arr = np.asarray(doc["params"][name], dtype=float)
        if arr.shape != shape:
            # zero-size arrays lose their shape through JSON round-trips
            if arr.size == 0 and int(np.prod(shape)) == 0:
                arr = np.zeros(shape)
            else:
                raise ValueError(f"{path}: {name} has shape {arr.shape}, expected {shape}")
        arrays[name] = arr
    return ScorerParams(config=cfg, **arrays)


def save_loss_curve(curve: list[tuple[int, float, float]], path: str | Path) -> None:
    lines = ["epoch,train_loss,valid_loss"]
    for epoch, tr, va in curve:
        lines.append(f"{epoch},{tr!r},{va!r}")
    Path(path).write_text("\n".join(lines) + "\n")
