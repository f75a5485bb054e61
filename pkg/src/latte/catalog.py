"""Item catalog: feature ingestion, residual k-means tokenization, persistence.

Every item gets a fixed-length semantic ID of m tokens, each drawn from a
per-position vocabulary of size M. Level 1 runs k-means over the raw feature
vectors; each later level runs k-means over the residuals left after
subtracting the centroids chosen so far. Items that end up with identical IDs
are disambiguated by moving all but one of them to spare codes in the final
position, scanning candidate centroids by distance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# A residual set with total variance below this is treated as degenerate:
# the level gets an all-zero codebook and every item receives code 0.
DEGENERATE_VARIANCE = 1e-12


@dataclass(eq=False)
class ItemFeatures:
    """One item's identifier and raw feature vector."""

    item_id: str
    vector: np.ndarray


@dataclass(eq=False)
class Catalog:
    """Tokenized item set.

    ``sids`` maps item_id to its m-token semantic ID; the mapping is a
    bijection after collision resolution. ``items`` holds the source features
    when the catalog was built in-process; a catalog loaded from JSON carries
    only what the persisted document stores and has an empty ``items`` list.
    """

    m: int
    M: int
    codebooks: np.ndarray  # (m, M, d_f)
    sids: dict[str, tuple[int, ...]]
    items: list[ItemFeatures] = field(default_factory=list)

    def __post_init__(self):
        self.codebooks = np.asarray(self.codebooks, dtype=float)
        if self.codebooks.shape[:2] != (self.m, self.M):
            raise ValueError(
                f"codebooks shape {self.codebooks.shape} does not match "
                f"m={self.m}, M={self.M}"
            )
        for item, sid in self.sids.items():
            if len(sid) != self.m:
                raise ValueError(f"item {item}: SID length {len(sid)} != m={self.m}")
            if any(not 0 <= c < self.M for c in sid):
                raise ValueError(f"item {item}: SID {sid} has codes outside [0, {self.M})")
        if len(set(self.sids.values())) != len(self.sids):
            raise ValueError("catalog SIDs are not unique")

    @property
    def item_ids(self) -> list[str]:
        return list(self.sids)

    @property
    def n_items(self) -> int:
        return len(self.sids)

    def sid_of(self, item_id: str) -> tuple[int, ...]:
        try:
            return self.sids[item_id]
        except KeyError:
            raise ValueError(f"unknown item {item_id!r}") from None


@dataclass(eq=False)
class InteractionDataset:
    """Per-user chronological item sequences, oldest first."""

    sequences: dict[str, list[str]]

    @property
    def user_ids(self) -> list[str]:
        return list(self.sequences)

    @property
    def n_users(self) -> int:
        return len(self.sequences)


def _feature_matrix(features: list[ItemFeatures]) -> np.ndarray:
    if not features:
        raise ValueError("no items given")
    dims = {np.asarray(f.vector).shape for f in features}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ValueError(f"feature vectors disagree on shape: {sorted(dims)}")
    X = np.stack([np.asarray(f.vector, dtype=float) for f in features])
    if not np.isfinite(X).all():
        bad = [f.item_id for f in features if not np.isfinite(f.vector).all()]
        raise ValueError(f"non-finite feature vector for item(s) {bad[:5]}")
    ids = [f.item_id for f in features]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate item_id in features")
    return X


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances, chunked to bound memory."""
    n = points.shape[0]
    out = np.empty((n, centers.shape[0]))
    step = max(1, (1 << 22) // max(1, centers.size))
    for lo in range(0, n, step):
        diff = points[lo : lo + step, None, :] - centers[None, :, :]
        out[lo : lo + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _kmeans(points: np.ndarray, M: int, max_iters: int, rng: np.random.Generator) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding.

    Ties in nearest-centroid assignment go to the lowest index. Stops when no
    assignment changes or after max_iters passes. Emptied clusters are revived
    with the currently worst-fit points.
    """
    n = points.shape[0]
    centers = np.empty((M, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    n_candidates = 2 + int(np.log(M))  # greedy k-means++: try several, keep the best
    for j in range(1, M):
        total = closest.sum()
        if total > 0:
            cand = rng.choice(n, size=n_candidates, p=closest / total)
        else:
            cand = rng.integers(n, size=n_candidates)
        best_idx = -1
        best_closest = None
        best_potential = np.inf
        for idx in cand:
            trial = np.minimum(closest, ((points - points[idx]) ** 2).sum(axis=1))
            potential = trial.sum()
            if potential < best_potential:
                best_idx, best_closest, best_potential = idx, trial, potential
        centers[j] = points[best_idx]
        closest = best_closest

    assign = np.full(n, -1)
    for _ in range(max_iters):
        dists = _sq_dists(points, centers)
        new_assign = dists.argmin(axis=1)
        if (new_assign == assign).all():
            break
        assign = new_assign
        for j in range(M):
            mask = assign == j
            if mask.any():
                centers[j] = points[mask].mean(axis=0)
        empties = [j for j in range(M) if not (assign == j).any()]
        if empties:
            err = dists[np.arange(n), assign]
            order = np.argsort(-err, kind="stable")
            for j, pick in zip(empties, order):
                centers[j] = points[pick]
                assign[pick] = j
    return centers


def rq_kmeans_fit(
    features: list[ItemFeatures], m: int, M: int, max_iters: int = 50, seed: int = 0
) -> np.ndarray:
    """Fit m levels of residual k-means codebooks, shape (m, M, d_f)."""
    X = _feature_matrix(features)
    if len(features) < M:
        raise ValueError(f"insufficient items: need at least M={M}, got {len(features)}")
    if m < 1 or M < 1:
        raise ValueError(f"m={m} and M={M} must be positive")
    rng = np.random.default_rng(seed)
    codebooks = np.zeros((m, M, X.shape[1]))
    residual = X.copy()
    for level in range(m):
        if residual.var(axis=0).sum() < DEGENERATE_VARIANCE:
            continue  # degenerate level: zero codebook, residual passes through
        centers = _kmeans(residual, M, max_iters, rng)
        codebooks[level] = centers
        codes = _sq_dists(residual, centers).argmin(axis=1)
        residual = residual - centers[codes]
    return codebooks


def assign_sids(features: list[ItemFeatures], codebooks: np.ndarray) -> dict[str, tuple[int, ...]]:
    """Greedy nearest-centroid assignment, level by level on residuals."""
    X = _feature_matrix(features)
    m, M, d_f = codebooks.shape
    if X.shape[1] != d_f:
        raise ValueError(f"feature dim {X.shape[1]} != codebook dim {d_f}")
    codes = np.empty((len(features), m), dtype=int)
    residual = X.copy()
    for level in range(m):
        idx = _sq_dists(residual, codebooks[level]).argmin(axis=1)
        codes[:, level] = idx
        residual = residual - codebooks[level][idx]
    return {f.item_id: tuple(int(c) for c in codes[i]) for i, f in enumerate(features)}


def resolve_collisions(
    features: list[ItemFeatures],
    codebooks: np.ndarray,
    sids: dict[str, tuple[int, ...]],
) -> dict[str, tuple[int, ...]]:
    """Make the SID assignment injective by editing final-position codes only.

    For each set of items sharing one SID the first keeps it; every other item
    moves to the nearest not-yet-taken centroid of the last level, measured
    from that item's last-level residual (ties to the lower code). Raises when
    a prefix runs out of codes.
    """
    m, M, _ = codebooks.shape
    order = [f.item_id for f in features]
    if set(order) != set(sids):
        raise ValueError("features and sids list different items")
    groups: dict[tuple[int, ...], list[str]] = {}
    for item in order:
        groups.setdefault(sids[item], []).append(item)

    resolved = dict(sids)
    taken = set(groups)  # each distinct SID stays claimed by its first owner
    vectors = {f.item_id: np.asarray(f.vector, dtype=float) for f in features}
    for sid, members in groups.items():
        prefix = sid[:-1]
        for item in members[1:]:
            residual = vectors[item].copy()
            for level in range(m - 1):
                residual -= codebooks[level][sids[item][level]]
            dist = ((codebooks[m - 1] - residual) ** 2).sum(axis=1)
            for code in np.argsort(dist, kind="stable"):
                candidate = prefix + (int(code),)
                if candidate not in taken:
                    resolved[item] = candidate
                    taken.add(candidate)
                    break
            else:
                raise ValueError(
                    f"vocabulary exhausted: no free final code under prefix {prefix}"
                )
    return resolved


def build_catalog(
    features: list[ItemFeatures], m: int, M: int, max_iters: int = 50, seed: int = 0
) -> Catalog:
    """Fit codebooks, assign SIDs, resolve collisions; returns the catalog."""
    codebooks = rq_kmeans_fit(features, m, M, max_iters=max_iters, seed=seed)
    sids = assign_sids(features, codebooks)
    sids = resolve_collisions(features, codebooks, sids)
    return Catalog(m=m, M=M, codebooks=codebooks, sids=sids, items=list(features))


def override_sids(catalog: Catalog, overrides: dict[str, tuple[int, ...]]) -> Catalog:
    """Return a catalog with selected SIDs replaced; the result must stay a bijection."""
    new_sids = dict(catalog.sids)
    for item, sid in overrides.items():
        if item not in new_sids:
            raise ValueError(f"unknown item {item!r} in overrides")
        sid = tuple(int(c) for c in sid)
        if len(sid) != catalog.m or any(not 0 <= c < catalog.M for c in sid):
            raise ValueError(f"override for {item!r} is not a valid SID: {sid}")
        new_sids[item] = sid
    seen: dict[tuple[int, ...], str] = {}
    for item, sid in new_sids.items():
        if sid in seen:
            raise ValueError(f"override makes {item!r} collide with {seen[sid]!r} on {sid}")
        seen[sid] = item
    return Catalog(
        m=catalog.m, M=catalog.M, codebooks=catalog.codebooks, sids=new_sids,
        items=list(catalog.items),
    )


# ---------------------------------------------------------------------------
# persistence

def save_catalog(catalog: Catalog, path: str | Path) -> None:
    doc = {
        "m": catalog.m,
        "M": catalog.M,
        "codebooks": catalog.codebooks.tolist(),
        "sids": {item: list(sid) for item, sid in catalog.sids.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


def load_catalog(path: str | Path) -> Catalog:
    doc = json.loads(Path(path).read_text())
    for key in ("m", "M", "codebooks", "sids"):
        if key not in doc:
            raise ValueError(f"{path}: catalog document missing key {key!r}")
    return Catalog(
        m=int(doc["m"]),
        M=int(doc["M"]),
        codebooks=np.asarray(doc["codebooks"], dtype=float),
        sids={item: tuple(int(c) for c in sid) for item, sid in doc["sids"].items()},
    )


def load_features(path: str | Path) -> list[ItemFeatures]:
    """Read JSONL records {"item_id", "vector"}; errors point at the line."""
    features: list[ItemFeatures] = []
    seen: set[str] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON: {exc}") from None
            if not isinstance(obj, dict) or "item_id" not in obj or "vector" not in obj:
                raise ValueError(f"{path}:{lineno}: record needs item_id and vector")
            item_id = str(obj["item_id"])
            if item_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate item_id {item_id!r}")
            seen.add(item_id)
            vec = np.asarray(obj["vector"], dtype=float)
            if vec.ndim != 1 or vec.size == 0 or not np.isfinite(vec).all():
                raise ValueError(f"{path}:{lineno}: vector for {item_id!r} is not a finite 1-D array")
            features.append(ItemFeatures(item_id=item_id, vector=vec))
    if not features:
        raise ValueError(f"{path}: no records")
    _feature_matrix(features)  # uniform-dimension check
    return features


def save_features_jsonl(features: list[ItemFeatures], path: str | Path) -> None:
    with open(path, "w") as fh:
        for f in features:
            fh.write(json.dumps({"item_id": f.item_id, "vector": np.asarray(f.vector).tolist()}) + "\n")


def load_interactions(path: str | Path, known_items: set[str] | None = None) -> InteractionDataset:
    """Read JSONL records {"user_id", "items"}; validates length and membership."""
    sequences: dict[str, list[str]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON: {exc}") from None
            if not isinstance(obj, dict) or "user_id" not in obj or "items" not in obj:
                raise ValueError(f"{path}:{lineno}: record needs user_id and items")
            user = str(obj["user_id"])
            if user in sequences:
                raise ValueError(f"{path}:{lineno}: duplicate user_id {user!r}")
            items = [str(i) for i in obj["items"]]
            if len(items) < 3:
                raise ValueError(
                    f"{path}:{lineno}: user {user!r} has {len(items)} interactions, need >= 3"
                )
            if known_items is not None:
                unknown = [i for i in items if i not in known_items]
                if unknown:
                    raise ValueError(
                        f"{path}:{lineno}: user {user!r} references unknown item {unknown[0]!r}"
                    )
            sequences[user] = items
    if not sequences:
        raise ValueError(f"{path}: no records")
    return InteractionDataset(sequences=sequences)


def save_interactions_jsonl(dataset: InteractionDataset, path: str | Path) -> None:
    with open(path, "w") as fh:
        for user, items in dataset.sequences.items():
            fh.write(json.dumps({"user_id": user, "items": items}) + "\n")
