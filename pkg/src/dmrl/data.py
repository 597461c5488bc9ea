"""Interaction-log ingestion, ID mapping, splitting, and feature tables.

File formats:
  * interactions: UTF-8 TSV, ``user_key<TAB>item_key`` per line, extra
    columns ignored, ``#`` lines are comments;
  * features (text): UTF-8, ``item_key<TAB>v1,v2,...,vD`` per line;
  * features (binary): magic ``DMRLFT01``, little-endian u32 item count,
    u32 dim, then per item u16 key length, key bytes, dim float32 values;
  * split manifest: TSV ``user_key<TAB>item_key<TAB>{train|val|test}``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"DMRLFT01"
SPLIT_LABELS = ("train", "val", "test")


@dataclass
class InteractionDataset:
    """Immutable user/item index maps plus disjoint train/val/test positives."""

    user_ids: dict[str, int]
    item_ids: dict[str, int]
    train_positives: list[set[int]]   # indexed by user index
    val_positives: list[set[int]]
    test_positives: list[set[int]]
    rng_seed: int | None = None
    dropped_users: int = 0

    def __post_init__(self):
        if not self.user_ids or not self.item_ids:
            raise ValueError("dataset must contain at least one user and one item")
        for u in range(self.num_users):
            overlaps = (self.train_positives[u] & self.val_positives[u]
                        | self.train_positives[u] & self.test_positives[u]
                        | self.val_positives[u] & self.test_positives[u])
            if overlaps:
                raise ValueError(f"split sets overlap for user index {u}: {sorted(overlaps)}")

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def user_keys(self) -> list[str]:
        keys = [""] * self.num_users
        for key, idx in self.user_ids.items():
            keys[idx] = key
        return keys

    @property
    def item_keys(self) -> list[str]:
        keys = [""] * self.num_items
        for key, idx in self.item_ids.items():
            keys[idx] = key
        return keys

    def excluded_items(self, user: int) -> set[int]:
        """Items never offered as ranking candidates or negatives: train + val."""
        return self.train_positives[user] | self.val_positives[user]

    def train_pairs(self) -> np.ndarray:
        """All (user, item) training positives, sorted, as an (n, 2) int array."""
        pairs = [(u, i) for u in range(self.num_users) for i in sorted(self.train_positives[u])]
        return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


@dataclass
class FeatureTable:
    """Dense per-item feature matrix for one modality; missing items are zero."""

    modality: str
    dim: int
    matrix: np.ndarray                # (num_items, dim) float64
    missing_count: int = 0
    missing_items: list[str] = field(default_factory=list)

    def vector(self, item: int) -> np.ndarray:
        return self.matrix[item]


def parse_interactions(path, min_interactions: int = 5) -> list[tuple[str, str]]:
    """Read an interaction TSV and iteratively k-core filter it.

    Duplicate (user, item) pairs collapse to one. Users and items with fewer
    than `min_interactions` interactions are removed until a fixpoint; an
    empty survivor set is an error.
    """
    path = Path(path)
    seen: set[tuple[str, str]] = set()
    pairs: list[tuple[str, str]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 2 or not cols[0] or not cols[1]:
                raise ValueError(f"{path}:{lineno}: expected 'user<TAB>item', got {line!r}")
            pair = (cols[0], cols[1])
            if pair not in seen:
                seen.add(pair)
                pairs.append(pair)

    while True:
        user_deg: dict[str, int] = {}
        item_deg: dict[str, int] = {}
        for u, i in pairs:
            user_deg[u] = user_deg.get(u, 0) + 1
            item_deg[i] = item_deg.get(i, 0) + 1
        kept = [(u, i) for u, i in pairs
                if user_deg[u] >= min_interactions and item_deg[i] >= min_interactions]
        if len(kept) == len(pairs):
            break
        pairs = kept
    if not pairs:
        raise ValueError(f"{path}: no interactions survive the {min_interactions}-core filter")
    return pairs


def split_dataset(interactions, seed: int = 0,
                  test_fraction: float = 0.2, val_fraction: float = 0.1) -> InteractionDataset:
    """Per-user split: floor(test_fraction * n) test items, then a validation
    carve-out of round(val_fraction * pool) from the remaining train pool.

    Deterministic under `seed`. Users with a single interaction keep it in
    train (warning counted); every kept user retains >= 1 training positive.
    """
    by_user: dict[str, list[str]] = {}
    items_seen: set[str] = set()
    for u, i in interactions:
        by_user.setdefault(u, []).append(i)
        items_seen.add(i)

    user_ids = {key: idx for idx, key in enumerate(sorted(by_user))}
    item_ids = {key: idx for idx, key in enumerate(sorted(items_seen))}

    n_users = len(user_ids)
    train = [set() for _ in range(n_users)]
    val = [set() for _ in range(n_users)]
    test = [set() for _ in range(n_users)]
    singletons = 0
    for key in sorted(by_user):
        u = user_ids[key]
        items = sorted({item_ids[i] for i in by_user[key]})
        rng = np.random.default_rng(np.random.SeedSequence([seed, u]))
        order = [items[j] for j in rng.permutation(len(items))]
        if len(order) == 1:
            singletons += 1
            train[u].add(order[0])
            continue
        n_test = int(len(order) * test_fraction)
        pool = order[n_test:]
        test[u].update(order[:n_test])
        n_val = int(np.floor(val_fraction * len(pool) + 0.5))
        n_val = min(n_val, len(pool) - 1)   # keep at least one train positive
        val[u].update(pool[:n_val])
        train[u].update(pool[n_val:])
    if singletons:
        logger.warning("%d users had a single interaction; assigned to train only", singletons)
    return InteractionDataset(user_ids=user_ids, item_ids=item_ids,
                              train_positives=train, val_positives=val,
                              test_positives=test, rng_seed=seed,
                              dropped_users=0)


def write_split_manifest(dataset: InteractionDataset, path) -> None:
    """Serialize the split as canonical TSV (sorted by user key, item key)."""
    user_keys = dataset.user_keys
    item_keys = dataset.item_keys
    rows = []
    for u in range(dataset.num_users):
        for items, label in ((dataset.train_positives[u], "train"),
                             (dataset.val_positives[u], "val"),
                             (dataset.test_positives[u], "test")):
            rows.extend((user_keys[u], item_keys[i], label) for i in items)
    rows.sort()
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write("\t".join(row) + "\n")


def load_split_manifest(path) -> InteractionDataset:
    """Rebuild an InteractionDataset from a split manifest TSV."""
    path = Path(path)
    triples: list[tuple[str, str, str]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 3 or cols[2] not in SPLIT_LABELS:
                raise ValueError(f"{path}:{lineno}: expected 'user<TAB>item<TAB>{{train|val|test}}'")
            triples.append((cols[0], cols[1], cols[2]))
    if not triples:
        raise ValueError(f"{path}: empty split manifest")
    user_ids = {k: n for n, k in enumerate(sorted({t[0] for t in triples}))}
    item_ids = {k: n for n, k in enumerate(sorted({t[1] for t in triples}))}
    sets = {label: [set() for _ in user_ids] for label in SPLIT_LABELS}
    for u, i, label in triples:
        sets[label][user_ids[u]].add(item_ids[i])
    return InteractionDataset(user_ids=user_ids, item_ids=item_ids,
                              train_positives=sets["train"], val_positives=sets["val"],
                              test_positives=sets["test"], rng_seed=None)


def _parse_text_features(path: Path, id_map: dict[str, int]):
    vectors: dict[int, np.ndarray] = {}
    dim = None
    first_key = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise ValueError(f"{path}:{lineno}: expected 'item_key<TAB>v1,v2,...'")
            key = cols[0]
            try:
                vec = np.asarray([float(v) for v in cols[1].split(",")], dtype=np.float64)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad float in feature row for {key!r}: {exc}") from None
            if dim is None:
                dim, first_key = len(vec), key
            elif len(vec) != dim:
                raise ValueError(
                    f"{path}: item {key!r} has {len(vec)} values, expected {dim} (from {first_key!r})")
            if key in id_map:
                vectors[id_map[key]] = vec
    return vectors, dim


def _parse_binary_features(path: Path, id_map: dict[str, int]):
    raw = path.read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad magic for binary feature file")
    count, dim = struct.unpack_from("<II", raw, 8)
    offset = 16
    vectors: dict[int, np.ndarray] = {}
    for _ in range(count):
        if offset + 2 > len(raw):
            raise ValueError(f"{path}: truncated binary feature file")
        (key_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        key = raw[offset:offset + key_len].decode("utf-8")
        offset += key_len
        end = offset + 4 * dim
        if end > len(raw):
            raise ValueError(f"{path}: truncated feature payload for {key!r}")
        vec = np.frombuffer(raw[offset:end], dtype="<f4").astype(np.float64)
        offset = end
        if key in id_map:
            vectors[id_map[key]] = vec
    return vectors, dim


def write_binary_features(path, vectors: dict[str, np.ndarray]) -> None:
    """Write the binary feature container (keys in sorted order)."""
    keys = sorted(vectors)
    dim = len(next(iter(vectors.values()))) if keys else 0
    with Path(path).open("wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", len(keys), dim))
        for key in keys:
            raw_key = key.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_key)))
            fh.write(raw_key)
            fh.write(np.asarray(vectors[key], dtype="<f4").tobytes())


def load_feature_table(path, modality: str, id_map: dict[str, int]) -> FeatureTable:
    """Load a feature file (text or binary, sniffed by magic bytes).

    Rows are aligned to the dense item indices of `id_map`; items without a
    row get a zero vector and are counted in `missing_count`.
    """
    path = Path(path)
    with path.open("rb") as fh:
        is_binary = fh.read(8) == FEATURE_MAGIC
    if is_binary:
        vectors, dim = _parse_binary_features(path, id_map)
    else:
        vectors, dim = _parse_text_features(path, id_map)
    if dim is None:
        raise ValueError(f"{path}: feature file contains no rows")
    matrix = np.zeros((len(id_map), dim), dtype=np.float64)
    missing = []
    index_to_key = {idx: key for key, idx in id_map.items()}
    for idx in range(len(id_map)):
        if idx in vectors:
            matrix[idx] = vectors[idx]
        else:
            missing.append(index_to_key[idx])
    if missing:
        logger.warning("%s features: %d of %d items missing, zero-filled",
                       modality, len(missing), len(id_map))
    return FeatureTable(modality=modality, dim=dim, matrix=matrix,
                        missing_count=len(missing), missing_items=missing)


def sample_negative_candidates(user: int, n: int, rng: np.random.Generator,
                               dataset: InteractionDataset) -> np.ndarray:
    """Draw up to `n` distinct items outside the user's train+val positives.

    Test positives stay eligible (the sampler must not see test knowledge).
    Returns fewer than `n` only when the catalog is nearly exhausted.
    """
    excluded = dataset.excluded_items(user)
    n_items = dataset.num_items
    eligible_count = n_items - len(excluded)
    if eligible_count <= 0:
        raise ValueError(f"user {user} has no eligible negative items")
    if eligible_count <= n:
        return np.asarray(sorted(set(range(n_items)) - excluded), dtype=np.int64)
    # Rejection sampling is fast while positives are sparse; fall back to an
    # explicit eligible array when the draw keeps colliding.
    picked: list[int] = []
    picked_set: set[int] = set()
    for _ in range(8):
        draws = rng.integers(0, n_items, size=2 * (n - len(picked)) + 4)
        for item in draws:
            item = int(item)
            if item in excluded or item in picked_set:
                continue
            picked.append(item)
            picked_set.add(item)
            if len(picked) == n:
                return np.asarray(picked, dtype=np.int64)
    eligible = np.asarray(sorted(set(range(n_items)) - excluded), dtype=np.int64)
    extra = rng.choice(eligible[~np.isin(eligible, picked)], size=n - len(picked), replace=False)
    return np.concatenate([np.asarray(picked, dtype=np.int64), extra])
