"""Decoding-trie structure: distances, ultrametricity, permutations."""

import itertools

import numpy as np
import pytest

from latte.trie import (
    DecodingTrie,
    all_position_permutations,
    build_forest,
    depermute_sid,
    distance_census,
    path_edge_count,
    permute_sid,
    single_trie_forest,
    ultrametric_audit,
)


def test_tree_distance_hand_values(tiny_trie):
    assert tiny_trie.tree_distance("a0", "a1") == 2
    assert tiny_trie.tree_distance("a0", "a2") == 4
    assert tiny_trie.tree_distance("a0", "b0") == 6
    assert tiny_trie.tree_distance("a0", "a0") == 0


def test_tree_distance_symmetric(tiny_trie):
    ids = tiny_trie.item_ids
    for a, b in itertools.combinations(ids, 2):
        assert tiny_trie.tree_distance(a, b) == tiny_trie.tree_distance(b, a)


def random_sid_trie(n: int, m: int, M: int, seed: int) -> DecodingTrie:
    """n distinct random SIDs; any such set is a valid decoding tree."""
    rng = np.random.default_rng(seed)
    space = np.asarray(list(itertools.product(range(M), repeat=m)))
    chosen = rng.choice(len(space), size=n, replace=False)
    return DecodingTrie(m, {f"i{k:04d}": tuple(int(c) for c in space[j]) for k, j in enumerate(chosen)})


def test_tree_distance_matches_edge_walk_exhaustive():
    """Closed form 2(m-k) equals the explicit leaf-to-leaf walk on every pair."""
    trie = random_sid_trie(200, 3, 6, seed=3)
    for a, b in itertools.combinations(trie.item_ids, 2):
        assert trie.tree_distance(a, b) == path_edge_count(trie, a, b)


def test_ultrametric_no_violations():
    trie = random_sid_trie(200, 3, 6, seed=5)
    audit = ultrametric_audit(trie)
    assert audit.n_violations == 0
    assert audit.ok_fraction == 1.0


def test_ultrametric_inequality_brute_force(tiny_trie):
    # d(i,k) <= max(d(i,j), d(j,k)) in every orientation of every triple
    ids = tiny_trie.item_ids
    for i, j, k in itertools.combinations(ids, 3):
        d = tiny_trie.tree_distance
        assert d(i, k) <= max(d(i, j), d(j, k))
        assert d(i, j) <= max(d(i, k), d(k, j))
        assert d(j, k) <= max(d(j, i), d(i, k))


def test_trie_rejects_duplicate_sids():
    with pytest.raises(ValueError):
        DecodingTrie(2, {"x": (0, 0), "y": (0, 0)})


def test_trie_rejects_bad_length():
    with pytest.raises(ValueError):
        DecodingTrie(3, {"x": (0, 0)})


def test_valid_children(tiny_trie):
    assert tiny_trie.valid_children(()) == (0, 1)
    assert tiny_trie.valid_children((0,)) == (0, 1)
    assert tiny_trie.valid_children((0, 0)) == (0, 1)
    with pytest.raises(ValueError):
        tiny_trie.valid_children((5,))


def test_item_at_roundtrip(tiny_trie):
    for item in tiny_trie.item_ids:
        assert tiny_trie.item_at(tiny_trie.sid_of(item)) == item


def test_distance_census_tiny(tiny_trie):
    census = distance_census(tiny_trie)
    # every leaf: 1 sibling at distance 2, 2 cousins at 4, 4 at 6
    for item in tiny_trie.item_ids:
        assert census.counts[item] == {2: 1, 4: 2, 6: 4}
    assert census.fraction_with_sibling == 1.0


def test_permute_depermute_roundtrip():
    rng = np.random.default_rng(0)
    for m in (2, 3, 4):
        for perm in all_position_permutations(m):
            sid = tuple(int(c) for c in rng.integers(0, 7, size=m))
            assert depermute_sid(permute_sid(sid, perm), perm) == sid


def test_all_position_permutations_lexicographic():
    perms = all_position_permutations(3)
    assert perms == sorted(itertools.permutations(range(3)))
    assert len(all_position_permutations(4)) == 24


def test_permuted_trie_leaves(tiny_trie, tiny_catalog):
    perm = (2, 0, 1)
    forest = build_forest(tiny_catalog, [perm])
    got_perm, trie = forest.for_latent(0)
    assert got_perm == perm
    for item in tiny_trie.item_ids:
        psid = permute_sid(tiny_trie.sid_of(item), perm)
        assert trie.item_at(psid) == item


def test_forest_bound_flag(tiny_trie, tiny_catalog):
    assert not single_trie_forest(tiny_trie).bound
    forest = build_forest(tiny_catalog, all_position_permutations(3))
    assert forest.bound
    assert len(forest.tries) == 6


def test_forest_base_distance_ignores_permutations(tiny_catalog):
    forest = build_forest(tiny_catalog, all_position_permutations(3))
    trie = DecodingTrie(3, dict(tiny_catalog.sids))
    assert forest.base_distance("a0", "b0") == trie.tree_distance("a0", "b0")
    assert forest.base_distance("a0", "a1") == 2
