"""Shared fixtures: small deterministic worlds and hand-built catalogs.

Everything here is cheap (no training). The expensive trained models used by
the acceptance tests live in module-scoped fixtures inside
test_acceptance.py so that unit-test runs never pay for them.
"""

import numpy as np
import pytest

from latte.catalog import Catalog, ItemFeatures, build_catalog
from latte.evaluation import build_examples, leave_one_out
from latte.model import ScorerConfig, ScorerParams, expected_shapes
from latte.synth import make_benchmark_world, tokenize_world
from latte.trie import DecodingTrie


@pytest.fixture(scope="session")
def tiny_trie() -> DecodingTrie:
    # two 4-leaf subtrees; distances 2, 4, 6 all realized
    sids = {
        "a0": (0, 0, 0),
        "a1": (0, 0, 1),
        "a2": (0, 1, 0),
        "a3": (0, 1, 1),
        "b0": (1, 0, 0),
        "b1": (1, 0, 1),
        "b2": (1, 1, 0),
        "b3": (1, 1, 1),
    }
    return DecodingTrie(3, sids)


@pytest.fixture(scope="session")
def tiny_catalog(tiny_trie) -> Catalog:
    codebooks = np.zeros((3, 2, 4))
    items = [ItemFeatures(i, np.zeros(4)) for i in tiny_trie.item_ids]
    return Catalog(m=3, M=2, codebooks=codebooks, sids=dict(tiny_trie.sids), items=items)


def random_features(n: int, dim: int, seed: int) -> list[ItemFeatures]:
    rng = np.random.default_rng(seed)
    return [ItemFeatures(f"i{k:04d}", rng.normal(size=dim)) for k in range(n)]


def clustered_features(
    n: int, dim: int, seed: int, supers: int = 8, subs: int = 6
) -> list[ItemFeatures]:
    """Two-level cluster hierarchy so residual levels each find real structure.

    Coarse centers dominate, sub-centers perturb them at a smaller scale;
    residual quantization then spends level 1 on the coarse split and level 2
    on the sub-split, keeping every (c0, c1) prefix lightly loaded.
    """
    rng = np.random.default_rng(seed)
    coarse = rng.normal(0.0, 6.0, size=(supers, dim))
    fine = rng.normal(0.0, 1.5, size=(supers, subs, dim))
    out = []
    for k in range(n):
        s = k % supers
        u = (k // supers) % subs
        out.append(ItemFeatures(f"i{k:04d}", coarse[s] + fine[s, u] + rng.normal(0.0, 0.1, size=dim)))
    return out


@pytest.fixture(scope="session")
def clustered_catalog() -> Catalog:
    """64 items in 8 well-separated feature clusters, tokenized at m=3, M=8."""
    rng = np.random.default_rng(11)
    centers = rng.normal(0.0, 4.0, size=(8, 6))
    feats = [
        ItemFeatures(f"i{k:04d}", centers[k % 8] + rng.normal(0.0, 0.3, size=6))
        for k in range(64)
    ]
    return build_catalog(feats, m=3, M=8, seed=0)


@pytest.fixture(scope="session")
def small_world():
    return make_benchmark_world(seed=0, n_users=240, n_items=32)


@pytest.fixture(scope="session")
def small_catalog(small_world):
    return tokenize_world(small_world, 3, 8, seed=0)


@pytest.fixture(scope="session")
def small_split(small_world):
    return leave_one_out(small_world.interactions)


@pytest.fixture(scope="session")
def small_examples(small_catalog, small_split):
    return build_examples(small_catalog, small_split)


def rand_params(config: ScorerConfig, seed: int = 0) -> ScorerParams:
    """Random normal parameters, NOT init_params; for property tests."""
    rng = np.random.default_rng(seed)
    shapes = expected_shapes(config)
    arrays = {name: rng.normal(0.0, 0.5, size=shape) for name, shape in shapes.items()}
    return ScorerParams(config=config, **arrays)
