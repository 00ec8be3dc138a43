"""Per-scale hash tables over learned keys.

A table stores descriptor ids grouped by bucket in CSR form: bucket ``v``
holds ``ids[offsets[v]:offsets[v + 1]]``, ascending.  Tables never copy
descriptor bits; matching fetches templates from the scale's store.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from hashview.descriptor import DEFAULT_SPREAD_RADIUS, FIELD_BITS, BinaryDescriptor, DescriptorSet
from hashview.errors import InvalidInputError, InvariantViolation
from hashview.keyselect import HashKey, ProximityConfig, Strategy, key_length, learn_key

DEFAULT_OVERLAP = 0.5


def extract_key(bits, key: HashKey):
    """Read ``key``'s positions from ``bits`` (``(..., d)`` booleans) into integers.

    The bit at ``key.positions[j]`` becomes bit ``j`` of the result.
    """
    bits = np.asarray(bits, dtype=bool)
    d = bits.shape[-1]
    pos = np.asarray(key.positions, dtype=np.intp)
    if pos.size and pos.max() >= d:
        raise InvalidInputError(f"key position {int(pos.max())} out of range for d={d}")
    weights = np.left_shift(np.int64(1), np.arange(pos.size, dtype=np.int64))
    value = (bits[..., pos].astype(np.int64) * weights).sum(axis=-1)
    return int(value) if np.ndim(value) == 0 else value


def extract_key_from_fields(fields: np.ndarray, key: HashKey) -> np.ndarray:
    """Same as :func:`extract_key` on ``(..., cells)`` uint16 fields."""
    fields = np.asarray(fields, dtype=np.uint16)
    pos = np.asarray(key.positions, dtype=np.int64)
    if pos.size and pos.max() >= fields.shape[-1] * FIELD_BITS:
        raise InvalidInputError("key position out of range")
    value = np.zeros(fields.shape[:-1], dtype=np.int64)
    for j, p in enumerate(pos):
        bit = (fields[..., p // FIELD_BITS] >> np.uint16(p % FIELD_BITS)) & np.uint16(1)
        value |= bit.astype(np.int64) << j
    return value


@dataclass(eq=False)
class HashTable:
    key: HashKey
    offsets: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(self.offsets) != self.n_buckets + 1:
            raise InvariantViolation("bucket directory must have 2^b + 1 offsets")
        if self.offsets[0] != 0 or self.offsets[-1] != len(self.ids) or np.any(np.diff(self.offsets) < 0):
            raise InvariantViolation("bucket offsets are inconsistent")

    @property
    def b(self) -> int:
        return self.key.b

    @property
    def n_buckets(self) -> int:
        return 1 << self.key.b

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def bucket(self, value: int) -> np.ndarray:
        return self.ids[self.offsets[value]:self.offsets[value + 1]]

    @property
    def buckets(self) -> dict[int, np.ndarray]:
        """Non-empty buckets only."""
        return {int(v): self.bucket(v) for v in np.flatnonzero(self.sizes)}

    @property
    def source_ids(self) -> np.ndarray:
        return np.sort(self.ids)

    def __len__(self) -> int:
        return len(self.ids)


def build_table(subset: DescriptorSet, key: HashKey) -> HashTable:
    """Fill ``2^b`` buckets with the ids of ``subset`` (stable, ascending id)."""
    values = extract_key_from_fields(subset.fields, key)
    order = np.lexsort((subset.ids, values))
    counts = np.bincount(values, minlength=1 << key.b)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return HashTable(key=key, offsets=offsets, ids=subset.ids[order])


def make_overlapping_subsets(ids, k: int, overlap: float = DEFAULT_OVERLAP, seed: int = 0) -> list[np.ndarray]:
    """Split ``ids`` into ``k`` random subsets that overlap and cover everything.

    Each subset is a disjoint share of a random permutation topped up with
    random ids from outside that share, up to
    ``round(n * (1 + overlap * (k - 1)) / k)`` members.
    """
    if isinstance(ids, DescriptorSet):
        ids = ids.ids
    ids = np.asarray(ids, dtype=np.int64)
    if k < 1:
        raise InvalidInputError("need at least one subset")
    if not 0.0 <= overlap < 1.0:
        raise InvalidInputError("overlap fraction must lie in [0, 1)")
    if k == 1:
        return [np.sort(ids)]
    n = len(ids)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    target = min(n, int(round(n * (1.0 + overlap * (k - 1)) / k)))
    subsets = []
    for share in np.array_split(perm, k):
        extra = max(0, target - len(share))
        others = np.setdiff1d(perm, share, assume_unique=True)
        top_up = rng.choice(others, size=min(extra, len(others)), replace=False) if extra else others[:0]
        subsets.append(np.sort(ids[np.concatenate([share, top_up])]))
    return subsets


@dataclass(eq=False)
class ScaleIndex:
    """All tables of one scale cluster plus its unspread template store."""

    scale_cluster: int
    width: int
    height: int
    tables: list[HashTable]
    store: DescriptorSet | None = field(default=None, repr=False)
    spread_radius: int = DEFAULT_SPREAD_RADIUS

    @property
    def d(self) -> int:
        return self.width * self.height * FIELD_BITS

    @property
    def k(self) -> int:
        return len(self.tables)


def build_scale_index(
    templates: DescriptorSet,
    strategy: Strategy | str,
    tables: int = 1,
    overlap: float = DEFAULT_OVERLAP,
    prox: ProximityConfig = ProximityConfig(),
    seed: int = 0,
    spread_radius: int = DEFAULT_SPREAD_RADIUS,
    keys: Sequence[HashKey] | None = None,
) -> ScaleIndex:
    """Learn ``tables`` keys on overlapping subsets of the spread templates and fill them.

    Keys are learned and tables are filled on spread descriptors; the
    unspread ``templates`` stay attached for scoring.  Passing ``keys``
    skips learning and only fills the tables.
    """
    if templates.spread_radius:
        raise InvalidInputError("templates must be unspread; the index spreads them itself")
    if keys is not None:
        if len(keys) != tables:
            raise InvalidInputError(f"got {len(keys)} keys for {tables} tables")
        if any(p >= templates.d for key in keys for p in key.positions):
            raise InvalidInputError("key position outside the descriptor")
    spread_set = templates.spread(spread_radius)
    subset_seed, *key_seeds = np.random.SeedSequence([seed, 0x5EED]).generate_state(tables + 1)
    built = []
    subsets = make_overlapping_subsets(templates.ids, tables, overlap, int(subset_seed))
    for t, (ids, key_seed) in enumerate(zip(subsets, key_seeds)):
        sub = spread_set.subset(ids)
        if keys is not None:
            key = keys[t]
        else:
            b = key_length(len(sub)) if len(sub) >= 2 else 0
            key = learn_key(sub, strategy, b, prox, seed=int(key_seed))
        built.append(build_table(sub, key))
    return ScaleIndex(
        scale_cluster=templates.scale_cluster,
        width=templates.width,
        height=templates.height,
        tables=built,
        store=templates,
        spread_radius=spread_radius,
    )


def retrieve(index: ScaleIndex, window) -> np.ndarray:
    """Ascending, deduplicated ids retrieved by ``window`` over all tables.

    ``window`` is a spread :class:`BinaryDescriptor` or its ``(d,)`` bits.
    """
    if isinstance(window, BinaryDescriptor):
        bits = window.bits
    else:
        bits = np.asarray(window, dtype=bool).reshape(-1)
    if bits.size != index.d:
        raise InvalidInputError(f"window has {bits.size} bits, index expects {index.d}")
    found = [table.bucket(extract_key(bits, table.key)) for table in index.tables]
    if not found:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(found))


def retrieve_many(index: ScaleIndex, window_fields: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch retrieval for ``(P, cells)`` spread windows.

    Returns parallel arrays ``(window, id)`` sorted by window then id, one
    entry per distinct retrieved id per window.
    """
    n_windows = window_fields.shape[0]
    wins, found = [], []
    for table in index.tables:
        values = extract_key_from_fields(window_fields, table.key)
        lo = table.offsets[values]
        counts = table.offsets[values + 1] - lo
        total = int(counts.sum())
        if total == 0:
            continue
        win = np.repeat(np.arange(n_windows, dtype=np.int64), counts)
        # position inside each window's run, then shift to the bucket start
        run_start = np.repeat(np.cumsum(counts) - counts, counts)
        idx = np.arange(total, dtype=np.int64) - run_start + np.repeat(lo, counts)
        wins.append(win)
        found.append(table.ids[idx])
    if not wins:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    win = np.concatenate(wins)
    ids = np.concatenate(found)
    if len(index.tables) > 1:
        span = int(ids.max()) + 1
        combined = np.unique(win * span + ids)
        return combined // span, combined % span
    return win, ids


@dataclass(frozen=True)
class BucketStats:
    used_buckets: int
    max_bucket_size: int
    stddev_nonempty: float
    zero_bucket_size: int = 0
    n_buckets: int = 0

    @property
    def zero_bucket_is_largest(self) -> bool:
        return self.max_bucket_size > 0 and self.zero_bucket_size == self.max_bucket_size


def bucket_stats(table: HashTable) -> BucketStats:
    """Used buckets, largest bucket and population stddev over non-empty buckets."""
    return stats_from_sizes(table.sizes)


def stats_from_sizes(sizes) -> BucketStats:
    sizes = np.asarray(sizes, dtype=np.int64)
    nonempty = sizes[sizes > 0]
    if nonempty.size == 0:
        return BucketStats(0, 0, 0.0, 0, len(sizes))
    return BucketStats(
        used_buckets=int(nonempty.size),
        max_bucket_size=int(nonempty.max()),
        stddev_nonempty=float(nonempty.std()),
        zero_bucket_size=int(sizes[0]),
        n_buckets=len(sizes),
    )


# -----------------------------------------------------------------------------
# Index file
# -----------------------------------------------------------------------------

INDEX_MAGIC = b"HVINDEX\x00"
INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct("<8sIHHHHHH")  # magic, version, scale, k, width, height, spread, reserved
_KEY_HEAD = struct.Struct("<BxH")  # strategy code, pad, b
_STRATEGY_CODES = {s: i for i, s in enumerate(Strategy)}
_CODE_STRATEGIES = {i: s for s, i in _STRATEGY_CODES.items()}


def index_to_bytes(index: ScaleIndex) -> bytes:
    parts = [
        _INDEX_HEADER.pack(
            INDEX_MAGIC, INDEX_VERSION, index.scale_cluster, index.k,
            index.width, index.height, index.spread_radius, 0,
        )
    ]
    for table in index.tables:
        parts.append(_KEY_HEAD.pack(_STRATEGY_CODES[table.key.strategy], table.b))
        parts.append(np.asarray(table.key.positions, dtype="<u4").tobytes())
        parts.append(struct.pack("<I", len(table.ids)))
        parts.append(table.offsets[:-1].astype("<u4").tobytes())
        parts.append(table.ids.astype("<u4").tobytes())
    return b"".join(parts)


def index_from_bytes(data: bytes, store: DescriptorSet | None = None) -> ScaleIndex:
    if len(data) < _INDEX_HEADER.size:
        raise InvariantViolation("truncated index file")
    magic, version, scale, k, width, height, spread_radius, _ = _INDEX_HEADER.unpack_from(data, 0)
    if magic != INDEX_MAGIC or version != INDEX_VERSION:
        raise InvariantViolation("not an index file")
    at = _INDEX_HEADER.size
    tables = []
    try:
        for _ in range(k):
            code, b = _KEY_HEAD.unpack_from(data, at)
            at += _KEY_HEAD.size
            positions = np.frombuffer(data, "<u4", b, at)
            at += 4 * b
            (n_ids,) = struct.unpack_from("<I", data, at)
            at += 4
            starts = np.frombuffer(data, "<u4", 1 << b, at).astype(np.int64)
            at += 4 * (1 << b)
            ids = np.frombuffer(data, "<u4", n_ids, at).astype(np.int64)
            at += 4 * n_ids
            key = HashKey(tuple(positions.tolist()), _CODE_STRATEGIES[code])
            tables.append(HashTable(key, np.concatenate([starts, [n_ids]]), ids))
    except (struct.error, ValueError, KeyError) as exc:
        raise InvariantViolation(f"corrupt index file: {exc}") from exc
    if at != len(data):
        raise InvariantViolation("trailing bytes in index file")
    if store is not None and (store.width, store.height) != (width, height):
        raise InvariantViolation("template store geometry does not match the index")
    return ScaleIndex(scale, width, height, tables, store, spread_radius)


def save_index(index: ScaleIndex, path: str | Path) -> int:
    data = index_to_bytes(index)
    Path(path).write_bytes(data)
    return len(data)


def load_index(path: str | Path, store: DescriptorSet | None = None) -> ScaleIndex:
    return index_from_bytes(Path(path).read_bytes(), store)


def serialized_size(indexes: Sequence[ScaleIndex]) -> int:
    return sum(len(index_to_bytes(index)) for index in indexes)
