"""Synthetic preference worlds with controllable latent group structure.

A world couples three things: group-wise item affinities that induce per-user
preference distributions (softmax over affinity plus per-user Gaussian logit
noise), item features derived from the same affinities (so the tokenizer
co-locates co-preferred items), and interaction sequences sampled i.i.d. from
each user's preferences. Adversarial variants pin specific items into chosen
tree positions through SID overrides after tokenization.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .catalog import (
    Catalog,
    InteractionDataset,
    ItemFeatures,
    _kmeans,
    _sq_dists,
    build_catalog,
    override_sids,
    resolve_collisions,
)

DEFAULT_USER_NOISE = 0.5


@dataclass
class WorldSpec:
    n_users: int
    n_items: int
    n_groups: int
    affinity: np.ndarray  # (n_groups, n_items)
    group_probs: np.ndarray  # (n_groups,)
    seq_len_range: tuple[int, int] = (6, 12)
    feature_noise: float = 0.1
    user_noise: float = DEFAULT_USER_NOISE
    balanced_groups: bool = False  # deterministic quota assignment instead of sampling
    feature_affinity: np.ndarray | None = None  # feature basis when features must not see all of affinity
    seed: int = 0

    def __post_init__(self):
        self.affinity = np.asarray(self.affinity, dtype=float)
        self.group_probs = np.asarray(self.group_probs, dtype=float)
        if self.affinity.shape != (self.n_groups, self.n_items):
            raise ValueError(
                f"affinity shape {self.affinity.shape} != ({self.n_groups}, {self.n_items})"
            )
        if self.group_probs.shape != (self.n_groups,) or not np.isclose(self.group_probs.sum(), 1.0):
            raise ValueError("group_probs must be a distribution over groups")
        if self.feature_affinity is not None:
            self.feature_affinity = np.asarray(self.feature_affinity, dtype=float)
            if self.feature_affinity.ndim != 2 or self.feature_affinity.shape[1] != self.n_items:
                raise ValueError(
                    f"feature_affinity must be (k, {self.n_items}), got {self.feature_affinity.shape}"
                )
        lo, hi = self.seq_len_range
        if lo < 3 or hi < lo:
            raise ValueError("sequence lengths must satisfy 3 <= lo <= hi")
        if self.n_users < 1 or self.n_items < 2:
            raise ValueError("need at least 1 user and 2 items")


@dataclass(eq=False)
class GroundTruth:
    """What the generator knows: group labels and exact preference rows."""

    user_ids: list[str]
    item_ids: list[str]
    groups: np.ndarray  # (n_users,)
    preferences: np.ndarray  # (n_users, n_items), rows sum to 1

    def preference_correlation(self, item_a: str, item_b: str) -> float:
        from .analysis import pearson

        ia = self.item_ids.index(item_a)
        ib = self.item_ids.index(item_b)
        return pearson(self.preferences[:, ia], self.preferences[:, ib])

    def reversal_rate(self, item_a: str, item_b: str) -> tuple[float, float]:
        ia = self.item_ids.index(item_a)
        ib = self.item_ids.index(item_b)
        diff = self.preferences[:, ia] - self.preferences[:, ib]
        greater = int((diff > 0).sum())
        less = int((diff < 0).sum())
        if greater + less == 0:
            raise ValueError("all users tie the pair")
        p = greater / (greater + less)
        return 2.0 * p * (1.0 - p), p

    def to_json_dict(self) -> dict:
        return {
            "user_ids": self.user_ids,
            "item_ids": self.item_ids,
            "groups": self.groups.tolist(),
            "preferences": self.preferences.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "GroundTruth":
        return cls(
            user_ids=list(doc["user_ids"]),
            item_ids=list(doc["item_ids"]),
            groups=np.asarray(doc["groups"], dtype=int),
            preferences=np.asarray(doc["preferences"], dtype=float),
        )


@dataclass(eq=False)
class World:
    """A generated world plus the metadata the pipeline needs downstream."""

    features: list[ItemFeatures]
    interactions: InteractionDataset
    truth: GroundTruth
    spec: WorldSpec
    special: dict[str, str] = field(default_factory=dict)
    sibling_groups: list[list[str]] = field(default_factory=list)
    modality_blocks: list[tuple[int, int]] | None = None
    recommended: dict = field(default_factory=dict)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    return e / e.sum(axis=1, keepdims=True)


def _assign_groups(spec: WorldSpec, rng: np.random.Generator) -> np.ndarray:
    if not spec.balanced_groups:
        return rng.choice(spec.n_groups, size=spec.n_users, p=spec.group_probs)
    # quota assignment: largest-remainder rounding, then round-robin interleave
    quota = spec.group_probs * spec.n_users
    counts = np.floor(quota).astype(int)
    for _ in range(spec.n_users - counts.sum()):
        counts[int(np.argmax(quota - counts))] += 1
    out = np.empty(spec.n_users, dtype=int)
    remaining = counts.copy()
    g = 0
    for u in range(spec.n_users):
        while remaining[g] == 0:
            g = (g + 1) % spec.n_groups
        out[u] = g
        remaining[g] -= 1
        g = (g + 1) % spec.n_groups
    return out


def generate_world(spec: WorldSpec) -> tuple[list[ItemFeatures], InteractionDataset, GroundTruth]:
    """Sample features, interactions, and ground truth from a world spec."""
    rng = np.random.default_rng(spec.seed)
    groups = _assign_groups(spec, rng)
    noise = rng.normal(0.0, spec.user_noise, size=(spec.n_users, spec.n_items))
    logits = spec.affinity[groups] + noise
    prefs = _softmax_rows(logits)

    item_ids = [f"i{i:04d}" for i in range(spec.n_items)]
    user_ids = [f"u{u:05d}" for u in range(spec.n_users)]
    basis = spec.feature_affinity if spec.feature_affinity is not None else spec.affinity
    base = basis.T  # (n_items, k): the item's visible affinity profile
    feats_mat = base + rng.normal(0.0, spec.feature_noise, size=base.shape)
    features = [ItemFeatures(item_ids[i], feats_mat[i].copy()) for i in range(spec.n_items)]

    lo, hi = spec.seq_len_range
    lengths = rng.integers(lo, hi + 1, size=spec.n_users)
    sequences: dict[str, list[str]] = {}
    for u in range(spec.n_users):
        picks = rng.choice(spec.n_items, size=lengths[u], p=prefs[u])
        sequences[user_ids[u]] = [item_ids[i] for i in picks]
    truth = GroundTruth(
        user_ids=user_ids, item_ids=item_ids, groups=groups.astype(int), preferences=prefs
    )
    return features, InteractionDataset(sequences), truth


# ---------------------------------------------------------------------------
# named worlds

def make_benchmark_world(seed: int = 0, n_users: int = 2000, n_items: int = 256,
                         n_groups: int = 8, taste_split: float = 1.3) -> World:
    """Group-structured benchmark: ~2k users over 256 items in 8 item blocks.

    Each block is strongly preferred by two user subcultures (so there are
    2 * n_groups user groups). Within a block, items split into sub-blocks
    that each carry one of a few shared cross-block "style" offsets; the item
    hierarchy is block > style > item, and because the style directions
    repeat across blocks a residual tokenizer with a shared per-level
    codebook can peel the hierarchy off level by level.

    Inside every style sub-block the two subcultures disagree: alternating
    items are tilted +taste_split for one subculture and -taste_split for
    the other, mirror-fashion. Item features are derived from the
    subculture-pair MEAN affinity, so the tilt cancels and the tokenizer
    cannot see it. The disagreement therefore lives entirely below the
    resolution of the tree: co-located items whose audiences split.
    """
    rng = np.random.default_rng(seed + 7_654_321)  # world shape, separate from sampling
    per = n_items // n_groups
    sub = 1
    for cand in (8, 4, 2):
        if cand <= n_groups and per % cand == 0 and per // cand >= 2:
            sub = cand
            break
    per_sub = per // sub
    # orthogonal style directions: equal pairwise separation, so a shared
    # per-level codebook recovers them regardless of seed
    q, _ = np.linalg.qr(rng.normal(size=(n_groups, n_groups)))
    style = 1.2 * q[:sub]
    visible = rng.normal(0.0, 0.15, size=(n_groups, n_items))
    for g in range(n_groups):
        for b in range(sub):
            cols = slice(g * per + b * per_sub, g * per + (b + 1) * per_sub)
            visible[:, cols] += style[b][:, None]
        visible[g, g * per:(g + 1) * per] += 3.0
    # two subcultures per block share the visible profile and add a mirrored,
    # feature-invisible tilt alternating over items within each sub-block
    n_user_groups = 2 * n_groups
    affinity = np.repeat(visible, 2, axis=0)
    tilt = np.where(np.arange(n_items) % 2 == 0, taste_split, -taste_split)
    for g in range(n_groups):
        cols = slice(g * per, (g + 1) * per)
        affinity[2 * g, cols] += tilt[cols]
        affinity[2 * g + 1, cols] -= tilt[cols]
    spec = WorldSpec(
        n_users=n_users,
        n_items=n_items,
        n_groups=n_user_groups,
        affinity=affinity,
        group_probs=np.full(n_user_groups, 1.0 / n_user_groups),
        seq_len_range=(6, 12),
        feature_noise=0.1,
        user_noise=0.5,
        feature_affinity=visible,
        seed=seed,
    )
    features, interactions, truth = generate_world(spec)
    return World(
        features=features,
        interactions=interactions,
        truth=truth,
        spec=spec,
        recommended={"m": 3, "M": 8, "latent_count": 4},
    )


def make_reversal_pair_world(seed: int = 0, n_users: int = 800, n_items: int = 24) -> World:
    """Two equal groups with opposite order on one item pair.

    The pair items sit moderately above the shared background, so most but
    not all histories contain them; every other item has a shared affinity,
    making group membership visible only through the pair itself. Keeping the
    pair signal weak matters: it is what lets structural smoothing win in a
    single-tree model while a latent forest can still express the split. The
    ground-truth reversal rate for the pair is 0.5 by the mirror
    construction. The pair is meant to be placed as trie siblings via
    :func:`apply_sibling_overrides` after tokenization.
    """
    rng = np.random.default_rng(seed + 1_234_567)
    shared = rng.normal(0.0, 0.7, size=n_items)
    affinity = np.stack([shared.copy(), shared.copy()])
    affinity[0, 0], affinity[0, 1] = 1.5, 0.5
    affinity[1, 0], affinity[1, 1] = 0.5, 1.5
    spec = WorldSpec(
        n_users=n_users,
        n_items=n_items,
        n_groups=2,
        affinity=affinity,
        group_probs=np.array([0.5, 0.5]),
        seq_len_range=(8, 14),
        feature_noise=0.15,
        user_noise=0.3,
        balanced_groups=True,
        seed=seed,
    )
    features, interactions, truth = generate_world(spec)
    return World(
        features=features,
        interactions=interactions,
        truth=truth,
        spec=spec,
        special={"item_a": "i0000", "item_b": "i0001"},
        sibling_groups=[["i0000", "i0001"]],
        recommended={"m": 3, "M": 8, "latent_count": 4},
    )


def make_intransitive_world(seed: int = 0, n_users: int = 900, n_items: int = 24) -> World:
    """Three items whose ground-truth correlations are intransitive.

    i0 is liked by group A only, i1 by groups A and B, i2 by group B only; a
    larger background group C likes neither. Over the user population this
    yields rho(i0,i1) > 0.5 and rho(i1,i2) > 0.5 with rho(i0,i2) < 0. All
    three are meant to become trie siblings via overrides.
    """
    rng = np.random.default_rng(seed + 2_222_333)
    affinity = np.zeros((3, n_items))
    affinity[0, 0], affinity[1, 0], affinity[2, 0] = 3.2, -2.0, -2.0
    affinity[0, 1], affinity[1, 1], affinity[2, 1] = 3.2, 3.2, -2.0
    affinity[0, 2], affinity[1, 2], affinity[2, 2] = -2.0, 3.2, -2.0
    for i in range(3, n_items):
        affinity[2, i] = 2.0 + rng.normal(0.0, 0.4)
        jitter = rng.normal(0.0, 0.3)
        affinity[0, i] = jitter
        affinity[1, i] = jitter
    spec = WorldSpec(
        n_users=n_users,
        n_items=n_items,
        n_groups=3,
        affinity=affinity,
        group_probs=np.array([0.2, 0.2, 0.6]),
        seq_len_range=(8, 14),
        feature_noise=0.15,
        user_noise=0.3,
        balanced_groups=True,
        seed=seed,
    )
    features, interactions, truth = generate_world(spec)
    return World(
        features=features,
        interactions=interactions,
        truth=truth,
        spec=spec,
        special={"item_1": "i0000", "item_2": "i0001", "item_3": "i0002"},
        sibling_groups=[["i0000", "i0001", "i0002"]],
        recommended={"m": 3, "M": 8, "latent_count": 4},
    )


def make_modality_world(
    seed: int = 0,
    n_users: int = 800,
    n_groups: int = 4,
    grid_codes: int = 6,
    predictiveness: tuple[float, ...] = (1.0, 0.0, 0.0),
) -> World:
    """Multi-modal features: one block per modality, one SID position each.

    The modality with the largest predictiveness weight carries the
    preference-driving affinity profile (scaled by that weight, plus noise),
    so its k-means codes align with taste groups. Every other modality
    carries a taste-free layout grid of well-separated clusters.

    Catalog occupancy makes modality order matter: every grid-code
    combination hosts exactly one item, whose taste group is a bitwise-XOR
    function of the grid codes. Decoding the taste code first makes every
    later step easy (the trie mask plus the user's group pins the remaining
    codes); decoding it late forces the model to reproduce the XOR from a
    sum of grid-token embeddings, which the additive prefix conditioning
    fits poorly. Orders that lead with the taste modality therefore reach
    genuinely higher sequence likelihood, which is what permutation-bound
    latents are meant to discover. Tokenize with
    :func:`build_modality_catalog`; bind permutations with latent_count = m!.
    """
    m = len(predictiveness)
    if m < 2:
        raise ValueError("need at least 2 modalities")
    dominant = int(np.argmax(predictiveness))
    n_items = grid_codes ** (m - 1)

    # item = one grid combo (a, b, ...); its group = XOR-fold of the codes
    item_combos = list(itertools.product(range(grid_codes), repeat=m - 1))
    group_of_item: list[int] = []
    for combo in item_combos:
        acc = 0
        for c in combo:
            acc ^= c
        group_of_item.append(acc % n_groups)
    groups_arr = np.asarray(group_of_item)

    rng = np.random.default_rng(seed + 9_876_543)
    affinity = rng.normal(0.0, 0.3, size=(n_groups, n_items))
    for g in range(n_groups):
        own = np.nonzero(groups_arr == g)[0]
        affinity[g, own] = 3.0 + rng.normal(0.0, 0.5, size=own.size)
    spec = WorldSpec(
        n_users=n_users,
        n_items=n_items,
        n_groups=n_groups,
        affinity=affinity,
        group_probs=np.full(n_groups, 1.0 / n_groups),
        seq_len_range=(8, 14),
        feature_noise=0.0,  # block features are built below instead
        user_noise=0.4,
        seed=seed,
    )
    features, interactions, truth = generate_world(spec)
    # replace the default features with per-modality blocks
    frng = np.random.default_rng(seed + 31_415)
    base = affinity.T  # (n_items, n_groups)
    mats = []
    blocks: list[tuple[int, int]] = []
    lo = 0
    grid_block = 0
    for j, w in enumerate(predictiveness):
        if j == dominant:
            mat = max(w, 1e-9) * base + frng.normal(0.0, 0.35, size=base.shape)
        else:
            codes = np.asarray([combo[grid_block] for combo in item_combos])
            mat = 3.0 * np.eye(grid_codes)[codes]
            mat = mat + frng.normal(0.0, 0.1, size=mat.shape)
            grid_block += 1
        mats.append(mat)
        blocks.append((lo, lo + mat.shape[1]))
        lo += mat.shape[1]
    full = np.concatenate(mats, axis=1)
    features = [ItemFeatures(f.item_id, full[i].copy()) for i, f in enumerate(features)]
    import math

    return World(
        features=features,
        interactions=interactions,
        truth=truth,
        spec=spec,
        modality_blocks=blocks,
        recommended={
            "m": m,
            "M": grid_codes,
            "latent_count": math.factorial(m),
            "bind_permutations": True,
        },
    )


# ---------------------------------------------------------------------------
# tokenization helpers for adversarial/modality worlds

def apply_sibling_overrides(catalog: Catalog, sibling_groups: list[list[str]]) -> Catalog:
    """Force each listed item group to share an (m-1)-token prefix.

    The first item of a group anchors the prefix; the rest move to the lowest
    free final codes under it. Raises when a prefix cannot host the group.
    """
    overrides: dict[str, tuple[int, ...]] = {}
    taken = set(catalog.sids.values())
    for group in sibling_groups:
        if len(group) < 2:
            raise ValueError("sibling group needs at least 2 items")
        anchor = group[0]
        prefix = catalog.sid_of(anchor)[:-1]
        for item in group[1:]:
            old = catalog.sid_of(item)
            taken.discard(old)
            placed = False
            for code in range(catalog.M):
                cand = prefix + (code,)
                if cand not in taken:
                    overrides[item] = cand
                    taken.add(cand)
                    placed = True
                    break
            if not placed:
                raise ValueError(f"vocabulary exhausted: cannot place {item!r} under {prefix}")
    return override_sids(catalog, overrides)


def build_modality_catalog(
    features: list[ItemFeatures],
    blocks: list[tuple[int, int]],
    M: int,
    max_iters: int = 50,
    seed: int = 0,
) -> Catalog:
    """One independent k-means per feature block; block j fills SID position j.

    Codebook centroids are zero-padded to the full feature dimension so the
    standard catalog schema and collision resolver apply unchanged.
    """
    from .catalog import _feature_matrix

    X = _feature_matrix(features)
    m = len(blocks)
    if m < 1:
        raise ValueError("need at least one block")
    for lo, hi in blocks:
        if not 0 <= lo < hi <= X.shape[1]:
            raise ValueError(f"block ({lo}, {hi}) outside feature dim {X.shape[1]}")
    if len(features) < M:
        raise ValueError(f"insufficient items: need at least M={M}, got {len(features)}")
    rng = np.random.default_rng(seed)
    codebooks = np.zeros((m, M, X.shape[1]))
    codes = np.empty((len(features), m), dtype=int)
    for j, (lo, hi) in enumerate(blocks):
        sub = X[:, lo:hi]
        centers = _kmeans(sub, M, max_iters, rng)
        codebooks[j, :, lo:hi] = centers
        codes[:, j] = _sq_dists(sub, centers).argmin(axis=1)
    sids = {f.item_id: tuple(int(c) for c in codes[i]) for i, f in enumerate(features)}
    sids = resolve_collisions(features, codebooks, sids)
    return Catalog(m=m, M=M, codebooks=codebooks, sids=sids, items=list(features))


def tokenize_world(world: World, m: int, M: int, max_iters: int = 50, seed: int = 0) -> Catalog:
    """Tokenize a world's features and apply its structural overrides."""
    if world.modality_blocks is not None:
        catalog = build_modality_catalog(
            world.features, world.modality_blocks, M, max_iters=max_iters, seed=seed
        )
    else:
        catalog = build_catalog(world.features, m, M, max_iters=max_iters, seed=seed)
    if world.sibling_groups:
        catalog = apply_sibling_overrides(catalog, world.sibling_groups)
    return catalog
