"""Tokenization: residual k-means fit, SID assignment, collision handling, IO."""

import numpy as np
import pytest

from latte.catalog import (
    Catalog,
    ItemFeatures,
    assign_sids,
    build_catalog,
    load_catalog,
    load_features,
    load_interactions,
    override_sids,
    resolve_collisions,
    rq_kmeans_fit,
    save_catalog,
)

from conftest import clustered_features


def test_rq_fit_shapes_and_determinism():
    feats = clustered_features(64, 6, seed=5)
    a = rq_kmeans_fit(feats, m=3, M=8, seed=0)
    b = rq_kmeans_fit(feats, m=3, M=8, seed=0)
    assert a.shape == (3, 8, 6)
    np.testing.assert_array_equal(a, b)


def test_rq_fit_seed_changes_codebooks():
    feats = clustered_features(64, 6, seed=5)
    a = rq_kmeans_fit(feats, m=3, M=8, seed=0)
    b = rq_kmeans_fit(feats, m=3, M=8, seed=1)
    assert not np.array_equal(a, b)


def test_rq_fit_rejects_too_few_items():
    feats = clustered_features(4, 3, seed=0)
    with pytest.raises(ValueError, match="insufficient items"):
        rq_kmeans_fit(feats, m=2, M=8)


def test_assign_sids_nearest_centroid():
    # one level, centroids at -1 and +1 on the line: sign decides the code
    codebooks = np.array([[[-1.0], [1.0]]])
    feats = [
        ItemFeatures("lo", np.array([-0.9])),
        ItemFeatures("hi", np.array([0.8])),
        ItemFeatures("mid", np.array([0.01])),
    ]
    sids = assign_sids(feats, codebooks)
    assert sids == {"lo": (0,), "hi": (1,), "mid": (1,)}


def test_assign_sids_residual_chaining():
    """Level 2 quantizes the residual left by level 1, not the raw vector."""
    codebooks = np.array(
        [
            [[0.0], [10.0]],
            [[-1.0], [1.0]],
        ]
    )
    feats = [ItemFeatures("x", np.array([10.9]))]  # level 1 -> code 1, residual 0.9 -> code 1
    assert assign_sids(feats, codebooks)["x"] == (1, 1)


def test_resolve_collisions_moves_final_code_only():
    codebooks = np.zeros((2, 3, 1))
    codebooks[1] = np.array([[0.0], [1.0], [2.0]])
    feats = [ItemFeatures("a", np.array([0.1])), ItemFeatures("b", np.array([1.9]))]
    sids = {"a": (0, 0), "b": (0, 0)}
    out = resolve_collisions(feats, codebooks, sids)
    assert out["a"] == (0, 0)  # first owner keeps the slot
    assert out["b"] == (0, 2)  # nearest free final centroid to b's residual
    assert out["b"][:-1] == (0,)


def test_resolve_collisions_exhaustion_raises():
    codebooks = np.zeros((2, 2, 1))
    feats = [ItemFeatures(f"i{k}", np.array([0.0])) for k in range(3)]
    sids = {f.item_id: (0, 0) for f in feats}
    with pytest.raises(ValueError, match="vocabulary exhausted"):
        resolve_collisions(feats, codebooks, sids)


def test_build_catalog_bijective(clustered_catalog):
    sids = list(clustered_catalog.sids.values())
    assert len(set(sids)) == len(sids) == 64
    for sid in sids:
        assert len(sid) == 3
        assert all(0 <= c < 8 for c in sid)


def test_build_catalog_deterministic():
    feats = clustered_features(48, 5, seed=2)
    a = build_catalog(feats, m=2, M=8, seed=4)
    b = build_catalog(feats, m=2, M=8, seed=4)
    assert a.sids == b.sids
    np.testing.assert_array_equal(a.codebooks, b.codebooks)


def test_catalog_rejects_duplicate_sids():
    with pytest.raises(ValueError, match="not unique"):
        Catalog(m=2, M=2, codebooks=np.zeros((2, 2, 1)), sids={"x": (0, 0), "y": (0, 0)})


def test_override_sids_validates():
    cat = Catalog(m=2, M=2, codebooks=np.zeros((2, 2, 1)), sids={"x": (0, 0), "y": (0, 1)})
    out = override_sids(cat, {"y": (1, 1)})
    assert out.sid_of("y") == (1, 1)
    with pytest.raises(ValueError, match="unknown item"):
        override_sids(cat, {"z": (1, 1)})
    with pytest.raises(ValueError, match="collide"):
        override_sids(cat, {"y": (0, 0)})
    with pytest.raises(ValueError, match="not a valid SID"):
        override_sids(cat, {"y": (0, 5)})


def test_catalog_roundtrip(tmp_path, clustered_catalog):
    path = tmp_path / "catalog.json"
    save_catalog(clustered_catalog, path)
    loaded = load_catalog(path)
    assert loaded.m == clustered_catalog.m
    assert loaded.M == clustered_catalog.M
    assert loaded.sids == clustered_catalog.sids
    np.testing.assert_array_equal(loaded.codebooks, clustered_catalog.codebooks)
    # byte stability: saving the loaded catalog reproduces the file exactly
    path2 = tmp_path / "catalog2.json"
    save_catalog(
        Catalog(m=loaded.m, M=loaded.M, codebooks=loaded.codebooks, sids=loaded.sids),
        path2,
    )
    assert path.read_bytes() == path2.read_bytes()


def test_load_features_rejects_bad_rows(tmp_path):
    p = tmp_path / "f.jsonl"
    p.write_text('{"item_id": "a"}\n')
    with pytest.raises(ValueError):
        load_features(p)


def test_load_interactions_unknown_item(tmp_path):
    p = tmp_path / "i.jsonl"
    p.write_text('{"user_id": "u1", "items": ["a", "b", "a"]}\n')
    ds = load_interactions(p)
    assert ds.sequences["u1"] == ["a", "b", "a"]
    with pytest.raises(ValueError):
        load_interactions(p, known_items={"a"})
