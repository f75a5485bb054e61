"""Decoding trie over semantic IDs, plus the permutation forest.

The trie's leaves biject with catalog items; tree distance between items is
the number of edges on the leaf-to-leaf path, which for leaves at uniform
depth m with a longest common prefix of k tokens is 2*(m - k). That distance
is an ultrametric, audited here directly.
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field

import numpy as np


class DecodingTrie:
    """Immutable prefix tree; every root-to-leaf path is one item's SID."""

    __slots__ = ("m", "sids", "_children", "_leaf_item")

    def __init__(self, m: int, sids: dict[str, tuple[int, ...]]):
        if not sids:
            raise ValueError("cannot build a trie over an empty catalog")
        self.m = m
        self.sids = {item: tuple(sid) for item, sid in sids.items()}
        children: dict[tuple[int, ...], set[int]] = {}
        leaf_item: dict[tuple[int, ...], str] = {}
        for item, sid in self.sids.items():
            if len(sid) != m:
                raise ValueError(f"item {item}: SID length {len(sid)} != m={m}")
            if sid in leaf_item:
                raise ValueError(f"duplicate SID {sid} for {item!r} and {leaf_item[sid]!r}")
            leaf_item[sid] = item
            for k in range(m):
                children.setdefault(sid[:k], set()).add(sid[k])
            children.setdefault(sid, set())
        self._children = {p: tuple(sorted(c)) for p, c in children.items()}
        self._leaf_item = leaf_item

    @property
    def item_ids(self) -> list[str]:
        return list(self.sids)

    @property
    def n_items(self) -> int:
        return len(self.sids)

    def valid_children(self, prefix: tuple[int, ...]) -> tuple[int, ...]:
        """Tokens that extend ``prefix`` toward at least one leaf (sorted)."""
        try:
            return self._children[tuple(prefix)]
        except KeyError:
            raise ValueError(f"prefix {tuple(prefix)} is not a node of the trie") from None

    def item_at(self, sid: tuple[int, ...]) -> str:
        try:
            return self._leaf_item[tuple(sid)]
        except KeyError:
            raise ValueError(f"no item at leaf {tuple(sid)}") from None

    def sid_of(self, item_id: str) -> tuple[int, ...]:
        try:
            return self.sids[item_id]
        except KeyError:
            raise ValueError(f"unknown item {item_id!r}") from None

    def tree_distance(self, item_a: str, item_b: str) -> int:
        """Leaf-to-leaf path length: 2*(m - longest common prefix)."""
        sa, sb = self.sid_of(item_a), self.sid_of(item_b)
        k = 0
        while k < self.m and sa[k] == sb[k]:
            k += 1
        return 2 * (self.m - k)


def build_trie(catalog) -> DecodingTrie:
    return DecodingTrie(catalog.m, catalog.sids)


def path_edge_count(trie: DecodingTrie, item_a: str, item_b: str) -> int:
    """Edge count of the leaf-to-leaf path, by explicitly walking the tree.

    Independent of the closed form: ascends from one leaf collecting its
    ancestor set, then ascends from the other until it meets it.
    """
    pa, pb = trie.sid_of(item_a), trie.sid_of(item_b)
    ancestors = {pa[:k] for k in range(trie.m + 1)}
    steps_b = 0
    node = pb
    while node not in ancestors:
        node = node[:-1]
        steps_b += 1
    steps_a = trie.m - len(node)
    return steps_a + steps_b


@dataclass
class UltrametricAudit:
    n_triples: int
    n_violations: int
    witnesses: list[tuple[str, str, str]]
    exhaustive: bool

    @property
    def ok_fraction(self) -> float:
        if self.n_triples == 0:
            return 1.0
        return 1.0 - self.n_violations / self.n_triples


def _distance_matrix(trie: DecodingTrie) -> tuple[list[str], np.ndarray]:
    ids = trie.item_ids
    sid_mat = np.asarray([trie.sids[i] for i in ids])
    n, m = sid_mat.shape
    # lcp via cumulative products of positionwise equality
    eq = sid_mat[:, None, :] == sid_mat[None, :, :]
    lcp = np.cumprod(eq, axis=2).sum(axis=2)
    return ids, 2 * (m - lcp)


def ultrametric_audit(
    trie: DecodingTrie,
    triple_budget: int = 200_000,
    seed: int = 0,
    exhaustive_limit: int = 200,
) -> UltrametricAudit:
    """Check d(i,k) <= max(d(i,j), d(j,k)) over item triples.

    Exhaustive over all triples when the catalog has at most
    ``exhaustive_limit`` items, else over ``triple_budget`` sampled triples.
    A triple satisfies the inequality in every orientation iff its two largest
    pairwise distances are equal, which is what gets checked.
    """
    ids, D = _distance_matrix(trie)
    n = len(ids)
    if n < 3:
        return UltrametricAudit(0, 0, [], True)
    witnesses: list[tuple[str, str, str]] = []
    violations = 0
    if n <= exhaustive_limit:
        total = n * (n - 1) * (n - 2) // 6
        for i in range(n - 2):
            for j in range(i + 1, n - 1):
                a = D[i, j]
                b = D[i, j + 1 :]
                c = D[j, j + 1 :]
                top = np.maximum(a, np.maximum(b, c))
                hits = (a == top).astype(int) + (b == top) + (c == top)
                bad = np.nonzero(hits < 2)[0]
                violations += len(bad)
                for kk in bad[:3]:
                    if len(witnesses) < 10:
                        witnesses.append((ids[i], ids[j], ids[j + 1 + kk]))
        return UltrametricAudit(total, violations, witnesses, True)

    rng = np.random.default_rng(seed)
    checked = 0
    while checked < triple_budget:
        want = triple_budget - checked
        cand = rng.integers(0, n, size=(max(want * 2, 1024), 3))
        distinct = (
            (cand[:, 0] != cand[:, 1]) & (cand[:, 0] != cand[:, 2]) & (cand[:, 1] != cand[:, 2])
        )
        cand = cand[distinct][:want]
        if cand.size == 0:
            continue
        a = D[cand[:, 0], cand[:, 1]]
        b = D[cand[:, 0], cand[:, 2]]
        c = D[cand[:, 1], cand[:, 2]]
        top = np.maximum(a, np.maximum(b, c))
        hits = (a == top).astype(int) + (b == top) + (c == top)
        bad = np.nonzero(hits < 2)[0]
        violations += len(bad)
        for kk in bad:
            if len(witnesses) < 10:
                witnesses.append(tuple(ids[x] for x in cand[kk]))
        checked += len(cand)
    return UltrametricAudit(checked, violations, witnesses, False)


@dataclass
class DistanceCensus:
    """Per-target distribution of the other items over tree distances."""

    m: int
    counts: dict[str, dict[int, int]]  # target -> {distance: n_items}
    fraction_with_sibling: float  # targets with >= 1 item at distance 2

    def csv_rows(self) -> list[list]:
        dists = [2 * (k + 1) for k in range(self.m)]
        rows: list[list] = [["target_item"] + [f"dist_{d}" for d in dists]]
        for target, cnt in self.counts.items():
            rows.append([target] + [cnt.get(d, 0) for d in dists])
        return rows


def distance_census(trie: DecodingTrie, targets: list[str] | None = None) -> DistanceCensus:
    targets = trie.item_ids if targets is None else list(targets)
    prefix_counts = [Counter(sid[:k] for sid in trie.sids.values()) for k in range(trie.m + 1)]
    counts: dict[str, dict[int, int]] = {}
    with_sibling = 0
    for target in targets:
        sid = trie.sid_of(target)
        row: dict[int, int] = {}
        for k in range(trie.m):
            exact = prefix_counts[k][sid[:k]] - prefix_counts[k + 1][sid[: k + 1]]
            row[2 * (trie.m - k)] = exact
        counts[target] = row
        if row.get(2, 0) > 0:
            with_sibling += 1
    frac = with_sibling / len(targets) if targets else 0.0
    return DistanceCensus(m=trie.m, counts=counts, fraction_with_sibling=frac)


# ---------------------------------------------------------------------------
# permutations and the trie forest

def permute_sid(sid: tuple[int, ...], perm: tuple[int, ...]) -> tuple[int, ...]:
    """Reorder a SID so slot s carries the token of original position perm[s]."""
    return tuple(sid[p] for p in perm)


def depermute_sid(psid: tuple[int, ...], perm: tuple[int, ...]) -> tuple[int, ...]:
    """Invert :func:`permute_sid`."""
    out = [0] * len(psid)
    for s, p in enumerate(perm):
        out[p] = psid[s]
    return tuple(out)


def all_position_permutations(m: int) -> list[tuple[int, ...]]:
    """All m! position orders, lexicographic; index = latent token id."""
    return [tuple(p) for p in itertools.permutations(range(m))]


def _check_permutation(perm: tuple[int, ...], m: int) -> tuple[int, ...]:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(m)):
        raise ValueError(f"{perm} is not a permutation of positions 0..{m - 1}")
    return perm


@dataclass(eq=False)
class TrieForest:
    """One decoding trie per permutation, indexed by latent token.

    With permutation binding there are as many tries as latent tokens; without
    it a single identity trie is shared by every latent. ``base_sids`` keeps
    the canonical (unpermuted) IDs for tree-distance queries.
    """

    m: int
    permutations: list[tuple[int, ...]]
    tries: list[DecodingTrie]
    base_sids: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.permutations) != len(self.tries) or not self.tries:
            raise ValueError("forest needs one trie per permutation, at least one")

    @property
    def bound(self) -> bool:
        return len(self.tries) > 1

    @property
    def item_ids(self) -> list[str]:
        return self.tries[0].item_ids

    @property
    def n_items(self) -> int:
        return self.tries[0].n_items

    def for_latent(self, latent: int | None) -> tuple[tuple[int, ...], DecodingTrie]:
        if len(self.tries) == 1:
            return self.permutations[0], self.tries[0]
        if latent is None or not 0 <= latent < len(self.tries):
            raise ValueError(f"latent {latent} has no trie in a forest of {len(self.tries)}")
        return self.permutations[latent], self.tries[latent]

    def base_distance(self, item_a: str, item_b: str) -> int:
        for item in (item_a, item_b):
            if item not in self.base_sids:
                raise ValueError(f"unknown item {item!r}")
        sa, sb = self.base_sids[item_a], self.base_sids[item_b]
        k = 0
        while k < self.m and sa[k] == sb[k]:
            k += 1
        return 2 * (self.m - k)


def build_forest(catalog, permutations: list[tuple[int, ...]]) -> TrieForest:
    """Build permuted tries over the catalog; leaves map permuted SIDs to items."""
    if not permutations:
        raise ValueError("need at least one permutation")
    perms = [_check_permutation(p, catalog.m) for p in permutations]
    tries = []
    for perm in perms:
        permuted = {item: permute_sid(sid, perm) for item, sid in catalog.sids.items()}
        tries.append(DecodingTrie(catalog.m, permuted))
    return TrieForest(
        m=catalog.m, permutations=perms, tries=tries, base_sids=dict(catalog.sids)
    )


def single_trie_forest(trie: DecodingTrie) -> TrieForest:
    """Wrap one identity-order trie as a forest (the unbound case)."""
    return TrieForest(
        m=trie.m,
        permutations=[tuple(range(trie.m))],
        tries=[trie],
        base_sids=dict(trie.sids),
    )
