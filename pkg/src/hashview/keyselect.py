"""Hash-key learning: choose which descriptor bits form a table's key.

Four strategies are provided:

* RBS draws positions uniformly at random.
* PBS ranks positions by Shannon entropy and keeps the most uncertain ones.
* TBS grows a balanced binary tree level by level; at every level it picks
  the bit minimizing the summed child-size imbalance of all current nodes.
* TBV adds a penalty for pose-proximal views of the same object that land
  on the same side of a split, so that similar views scatter over buckets.

All strategies honor the same-value proximity constraint: once a bit is
chosen, bits encoding the same orientation value in nearby cells become
inadmissible.  Ties are always broken towards the lowest bit index.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from hashview.descriptor import FIELD_BITS, DescriptorSet
from hashview.errors import InvalidInputError, InvariantViolation

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.3
DEFAULT_SAME_VALUE_MIN_DISTANCE = 2

# relative tolerance under which two float objectives count as tied
OBJECTIVE_RTOL = 1e-9

# bound on temporaries in the level-wise scans (elements)
_CHUNK_ELEMS = 1 << 22


class Strategy(str, Enum):
    RBS = "rbs"
    PBS = "pbs"
    TBS = "tbs"
    TBV = "tbv"

    @classmethod
    def parse(cls, name: str | "Strategy") -> "Strategy":
        if isinstance(name, Strategy):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise InvalidInputError(f"unknown strategy {name!r}; expected one of rbs, pbs, tbs, tbv") from None


class KeySelectionWarning(UserWarning):
    """Emitted when a strategy returns fewer bits than requested."""


@dataclass(frozen=True)
class HashKey:
    """Ordered bit positions; position ``j`` becomes bit ``j`` of the bucket index."""

    positions: tuple[int, ...]
    strategy: Strategy

    def __post_init__(self):
        positions = tuple(int(p) for p in self.positions)
        if len(set(positions)) != len(positions):
            raise InvalidInputError("key positions must be distinct")
        if any(p < 0 for p in positions):
            raise InvalidInputError("key positions must be nonnegative")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))

    @property
    def b(self) -> int:
        return len(self.positions)

    def to_line(self) -> str:
        return " ".join([self.strategy.name, str(self.b), *map(str, self.positions)])

    @classmethod
    def from_line(cls, line: str) -> "HashKey":
        parts = line.split()
        if len(parts) < 2:
            raise InvariantViolation(f"malformed key line: {line!r}")
        b = int(parts[1])
        positions = [int(p) for p in parts[2:]]
        if len(positions) != b:
            raise InvariantViolation(f"key line declares b={b} but lists {len(positions)} positions")
        return cls(tuple(positions), Strategy.parse(parts[0]))


def save_keys(keys: Sequence[HashKey], path: str | Path) -> None:
    Path(path).write_text("".join(key.to_line() + "\n" for key in keys))


def load_keys(path: str | Path) -> list[HashKey]:
    lines = Path(path).read_text().splitlines()
    return [HashKey.from_line(line) for line in lines if line.strip()]


@dataclass(frozen=True)
class ProximityConfig:
    """Pose proximity ``tau`` (radians) and the same-value exclusion radius (cells)."""

    tau: float = DEFAULT_TAU
    same_value_min_distance: int = DEFAULT_SAME_VALUE_MIN_DISTANCE

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidInputError("tau must be positive")
        if self.same_value_min_distance < 0:
            raise InvalidInputError("same_value_min_distance must be >= 0")


def key_length(set_size: int) -> int:
    """``floor(log2(set_size))`` computed exactly on integers."""
    set_size = int(set_size)
    if set_size < 2:
        raise InvalidInputError("key length needs a set of at least 2 descriptors")
    return set_size.bit_length() - 1


# -----------------------------------------------------------------------------
# Pose proximity
# -----------------------------------------------------------------------------


def _unit(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4 or np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > 1e-6):
        raise InvalidInputError("expected unit quaternions")
    return q


def quat_angle(qx, qy) -> np.ndarray:
    """``arccos(|<qx, qy>|)``, insensitive to the quaternion double cover."""
    dot = np.abs(np.sum(_unit(qx) * _unit(qy), axis=-1))
    return np.arccos(np.clip(dot, -1.0, 1.0))


def quat_proximal(qx, qy, tau: float = DEFAULT_TAU) -> bool:
    return bool(quat_angle(qx, qy) < tau)


def proximal_pairs(object_ids: np.ndarray, poses: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Unordered row pairs ``(i, j)``, ``i < j``, of same-object views closer than ``tau``."""
    object_ids = np.asarray(object_ids)
    poses = _unit(poses)
    left, right = [], []
    order = np.argsort(object_ids, kind="stable")
    bounds = np.flatnonzero(np.diff(object_ids[order])) + 1
    for rows in np.split(order, bounds):
        if len(rows) < 2:
            continue
        rows = np.sort(rows)
        q = poses[rows]
        # block the Gram matrix to bound memory for large objects
        step = max(1, _CHUNK_ELEMS // len(rows))
        for a in range(0, len(rows), step):
            dots = np.abs(q[a:a + step] @ q.T)
            close = np.arccos(np.clip(dots, -1.0, 1.0)) < tau
            i, j = np.nonzero(close)
            i += a
            keep = i < j
            left.append(rows[i[keep]])
            right.append(rows[j[keep]])
    if not left:
        empty = np.zeros(0, dtype=np.intp)
        return empty, empty
    return np.concatenate(left), np.concatenate(right)


# -----------------------------------------------------------------------------
# Bit statistics and split scores
# -----------------------------------------------------------------------------


def _entropy(p1: np.ndarray) -> np.ndarray:
    p1 = np.asarray(p1, dtype=np.float64)
    p0 = 1.0 - p1
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p0 > 0, p0 * np.log(p0), 0.0) + np.where(p1 > 0, p1 * np.log(p1), 0.0))
    return h


def bit_entropies(bits: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of every column of an ``(n, d)`` bit matrix."""
    bits = np.asarray(bits, dtype=bool)
    if bits.shape[0] == 0:
        raise InvalidInputError("entropy of an empty set is undefined")
    return _entropy(bits.mean(axis=0))


def bit_entropy(data, position: int) -> float:
    bits = _bits_of(data)
    return float(bit_entropies(bits[:, [position]])[0])


def split_imbalance(bits: np.ndarray, members, position: int) -> int:
    """``| |S_L| - |S_R| |`` for the node holding rows ``members``."""
    column = np.asarray(bits, dtype=bool)[np.asarray(members, dtype=np.intp), position]
    ones = int(np.count_nonzero(column))
    return abs(len(column) - 2 * ones)


def pair_penalty(members, object_ids, poses, tau: float) -> int:
    """Ordered same-object, pose-proximal pairs inside ``members`` (self-pairs excluded)."""
    members = np.asarray(members, dtype=np.intp)
    if len(members) < 2:
        return 0
    i, _ = proximal_pairs(np.asarray(object_ids)[members], np.asarray(poses)[members], tau)
    return 2 * len(i)


def scatter_penalty(data, members, position: int, prox: ProximityConfig = ProximityConfig()) -> int:
    """Penalty of splitting ``members`` on ``position``: ``P(S_L) + P(S_R)``."""
    if not isinstance(data, DescriptorSet):
        raise InvalidInputError("scatter_penalty needs object ids and poses from a DescriptorSet")
    members = np.asarray(members, dtype=np.intp)
    column = data.bits()[members, position]
    return pair_penalty(members[~column], data.object_ids, data.poses, prox.tau) + pair_penalty(
        members[column], data.object_ids, data.poses, prox.tau
    )


# -----------------------------------------------------------------------------
# Same-value proximity constraint
# -----------------------------------------------------------------------------


def _cell_xy(position: int, grid_width: int) -> tuple[int, int]:
    cell = position // FIELD_BITS
    return cell % grid_width, cell // grid_width


def proximity_filter(
    selected: HashKey | Iterable[int],
    candidate: int,
    grid_width: int | None,
    prox: ProximityConfig = ProximityConfig(),
) -> bool:
    """True if ``candidate`` may join ``selected``.

    A candidate is rejected when it is already selected, or when a selected
    bit encodes the same orientation value in a cell closer (Chebyshev)
    than ``prox.same_value_min_distance``.  Without grid geometry only
    duplicates are rejected.
    """
    positions = selected.positions if isinstance(selected, HashKey) else tuple(selected)
    if candidate in positions:
        return False
    if grid_width is None:
        return True
    cx, cy = _cell_xy(candidate, grid_width)
    for pos in positions:
        if pos % FIELD_BITS != candidate % FIELD_BITS:
            continue
        sx, sy = _cell_xy(pos, grid_width)
        if max(abs(sx - cx), abs(sy - cy)) < prox.same_value_min_distance:
            return False
    return True


class _Admissible:
    """Boolean admissibility mask kept in sync with :func:`proximity_filter`."""

    def __init__(self, d: int, grid_width: int | None, prox: ProximityConfig):
        self.mask = np.ones(d, dtype=bool)
        self.grid_width = grid_width
        self.prox = prox
        if grid_width is not None:
            cells = d // FIELD_BITS
            if d % FIELD_BITS or cells % grid_width:
                raise InvalidInputError("bit width does not fit the grid geometry")
            self.grid_height = cells // grid_width

    def select(self, position: int) -> None:
        self.mask[position] = False
        if self.grid_width is None:
            return
        r = self.prox.same_value_min_distance - 1
        if r < 0:
            return
        value = position % FIELD_BITS
        cx, cy = _cell_xy(position, self.grid_width)
        ys = np.arange(max(cy - r, 0), min(cy + r, self.grid_height - 1) + 1)
        xs = np.arange(max(cx - r, 0), min(cx + r, self.grid_width - 1) + 1)
        cells = (ys[:, None] * self.grid_width + xs[None, :]).ravel()
        self.mask[cells * FIELD_BITS + value] = False


# -----------------------------------------------------------------------------
# Strategies
# -----------------------------------------------------------------------------


def _bits_of(data) -> np.ndarray:
    if isinstance(data, DescriptorSet):
        return data.bits()
    return np.atleast_2d(np.asarray(data, dtype=bool))


def _geometry(data, grid_width: int | None) -> int | None:
    if grid_width is not None:
        return grid_width
    return data.width if isinstance(data, DescriptorSet) else None


def _check_b(b: int, d: int) -> int:
    b = int(b)
    if b < 0:
        raise InvalidInputError("key length must be >= 0")
    if b > d:
        raise InvalidInputError(f"key length {b} exceeds descriptor width {d}")
    return b


def _short_key_warning(strategy: Strategy, got: int, wanted: int) -> None:
    warnings.warn(
        f"{strategy.name}: only {got} of {wanted} requested bits admissible",
        KeySelectionWarning,
        stacklevel=3,
    )


def select_rbs(
    data,
    b: int,
    seed: int = 0,
    prox: ProximityConfig = ProximityConfig(),
    *,
    grid_width: int | None = None,
) -> HashKey:
    """Uniformly random admissible positions, reproducible from ``seed``."""
    bits = _bits_of(data)
    d = bits.shape[1]
    b = _check_b(b, d)
    adm = _Admissible(d, _geometry(data, grid_width), prox)
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for pos in rng.permutation(d):
        if len(chosen) == b:
            break
        if adm.mask[pos]:
            chosen.append(int(pos))
            adm.select(int(pos))
    if len(chosen) < b:
        _short_key_warning(Strategy.RBS, len(chosen), b)
    return HashKey(tuple(chosen), Strategy.RBS)


def select_pbs(
    data,
    b: int,
    prox: ProximityConfig = ProximityConfig(),
    *,
    grid_width: int | None = None,
) -> HashKey:
    """Highest-entropy admissible positions in descending entropy order.

    Constant bits (zero entropy) are never selected.
    """
    bits = _bits_of(data)
    d = bits.shape[1]
    b = _check_b(b, d)
    h = bit_entropies(bits)
    adm = _Admissible(d, _geometry(data, grid_width), prox)
    chosen: list[int] = []
    for pos in np.lexsort((np.arange(d), -h)):
        if len(chosen) == b or h[pos] <= 0:
            break
        if adm.mask[pos]:
            chosen.append(int(pos))
            adm.select(int(pos))
    if len(chosen) < b:
        _short_key_warning(Strategy.PBS, len(chosen), b)
    return HashKey(tuple(chosen), Strategy.PBS)


@dataclass
class LevelTrace:
    """One level of tree growing, kept for verification and diagnostics."""

    level: int
    node_of_row: np.ndarray
    admissible: np.ndarray
    objective: np.ndarray
    chosen: int
    applied: bool


def _node_segments(node: np.ndarray, n_nodes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    order = np.argsort(node, kind="stable")
    sizes = np.bincount(node, minlength=n_nodes)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    return order, sizes, starts


def _level_ones(bits_u8: np.ndarray, order: np.ndarray, sizes: np.ndarray, starts: np.ndarray,
                consume: Callable[[slice, np.ndarray], None]) -> None:
    """Feed per-node set-bit counts to ``consume`` in chunks of consecutive nodes."""
    n_nodes = len(sizes)
    d = bits_u8.shape[1]
    max_rows = max(1, _CHUNK_ELEMS // max(d, 1))
    a = 0
    while a < n_nodes:
        z = a
        rows = 0
        while z < n_nodes and (z == a or rows + sizes[z] <= max_rows):
            rows += sizes[z]
            z += 1
        lo, hi = starts[a], starts[a] + rows
        block = bits_u8[order[lo:hi]]
        ones = np.add.reduceat(block, starts[a:z] - lo, axis=0, dtype=np.int64)
        consume(slice(a, z), ones)
        a = z


def _tbs_objective(bits_u8: np.ndarray, node: np.ndarray, n_nodes: int) -> np.ndarray:
    order, sizes, starts = _node_segments(node, n_nodes)
    total = np.zeros(bits_u8.shape[1], dtype=np.int64)

    def consume(nodes: slice, ones: np.ndarray) -> None:
        nonlocal total
        total += np.abs(sizes[nodes, None] - 2 * ones).sum(axis=0)

    _level_ones(bits_u8, order, sizes, starts, consume)
    return total


class _ScatterTerm:
    """Tracks proximal same-object pairs that still share a node."""

    def __init__(self, bits_u8: np.ndarray, object_ids, poses, tau: float):
        self.bits_u8 = bits_u8
        self.left, self.right = proximal_pairs(object_ids, poses, tau)

    def objective(self, node: np.ndarray, sizes: np.ndarray) -> np.ndarray:
        """``sum_i P_i(B) / |N_i|^2`` for every bit ``B``."""
        d = self.bits_u8.shape[1]
        if len(self.left) == 0:
            return np.zeros(d)
        w = 1.0 / sizes[node[self.left]].astype(np.float64) ** 2
        # P_i(B) = 2 * (pairs_i - xor-count_i(B)), summed with per-node weights
        base = 2.0 * w.sum()
        acc = np.zeros(d)
        step = max(1, _CHUNK_ELEMS // max(d, 1))
        for a in range(0, len(w), step):
            xor = np.bitwise_xor(self.bits_u8[self.left[a:a + step]], self.bits_u8[self.right[a:a + step]])
            acc += w[a:a + step] @ xor.astype(np.float64)
        return base - 2.0 * acc

    def split(self, node: np.ndarray) -> None:
        keep = node[self.left] == node[self.right]
        self.left = self.left[keep]
        self.right = self.right[keep]


def _tbv_objective(bits_u8, node, n_nodes, scatter: _ScatterTerm) -> np.ndarray:
    order, sizes, starts = _node_segments(node, n_nodes)
    total = np.zeros(bits_u8.shape[1])

    def consume(nodes: slice, ones: np.ndarray) -> None:
        nonlocal total
        n_i = sizes[nodes, None].astype(np.float64)
        total += (np.abs(sizes[nodes, None] - 2 * ones) / n_i).sum(axis=0)

    _level_ones(bits_u8, order, sizes, starts, consume)
    return total + scatter.objective(node, sizes)


def tie_argmin(objective: np.ndarray, admissible: np.ndarray, rtol: float = 0.0) -> int:
    """Lowest admissible index whose objective is within ``rtol`` of the minimum."""
    values = np.where(admissible, objective, np.inf)
    best = values.min()
    if not np.isfinite(best):
        return -1
    tol = rtol * max(1.0, abs(float(best)))
    return int(np.flatnonzero(values <= best + tol)[0])


def _grow_tree(
    bits: np.ndarray,
    b: int,
    strategy: Strategy,
    grid_width: int | None,
    prox: ProximityConfig,
    objective: Callable[[np.ndarray, int], np.ndarray],
    on_split: Callable[[np.ndarray], None] | None,
    rtol: float,
    trace: list | None,
) -> HashKey:
    n, d = bits.shape
    if n == 0:
        raise InvalidInputError("cannot grow a tree on an empty set")
    b = _check_b(b, d)
    adm = _Admissible(d, grid_width, prox)
    node = np.zeros(n, dtype=np.int64)
    n_nodes = 1
    chosen: list[int] = []
    for level in range(b):
        if not adm.mask.any():
            _short_key_warning(strategy, len(chosen), b)
            break
        obj = objective(node, n_nodes)
        pos = tie_argmin(obj, adm.mask, rtol)
        child = node * 2 + bits[:, pos]
        emptied = np.count_nonzero(np.bincount(child, minlength=2 * n_nodes)) < 2 * n_nodes
        if trace is not None:
            trace.append(LevelTrace(level, node.copy(), adm.mask.copy(), obj, pos, not emptied))
        if emptied:
            log.debug("%s stops at %d bits: a child would be empty", strategy.name, len(chosen))
            break
        node = child
        n_nodes *= 2
        chosen.append(pos)
        adm.select(pos)
        if on_split is not None:
            on_split(node)
    return HashKey(tuple(chosen), strategy)


def select_tbs(
    data,
    b: int,
    prox: ProximityConfig = ProximityConfig(),
    *,
    grid_width: int | None = None,
    trace: list | None = None,
) -> HashKey:
    """Greedy balanced-tree key: each level minimizes the summed split imbalance."""
    bits = _bits_of(data)
    if bits.shape[0] == 0:
        raise InvalidInputError("cannot select bits on an empty set")
    bits_u8 = bits.view(np.uint8)

    def objective(node, n_nodes):
        return _tbs_objective(bits_u8, node, n_nodes)

    return _grow_tree(bits_u8, b, Strategy.TBS, _geometry(data, grid_width), prox,
                      objective, None, 0.0, trace)


def select_tbv(
    data,
    b: int,
    prox: ProximityConfig = ProximityConfig(),
    *,
    grid_width: int | None = None,
    object_ids=None,
    poses=None,
    trace: list | None = None,
) -> HashKey:
    """Balanced-tree key that also scatters pose-proximal views of one object.

    Per node ``i`` the level objective adds ``imbalance_i / |N_i|`` and
    ``(P(S_L) + P(S_R)) / |N_i|^2``.
    """
    bits = _bits_of(data)
    if bits.shape[0] == 0:
        raise InvalidInputError("cannot select bits on an empty set")
    if isinstance(data, DescriptorSet):
        object_ids = data.object_ids if object_ids is None else object_ids
        poses = data.poses if poses is None else poses
    n = bits.shape[0]
    if object_ids is None:
        object_ids = np.arange(n)
    if poses is None:
        poses = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    bits_u8 = bits.view(np.uint8)
    scatter = _ScatterTerm(bits_u8, object_ids, poses, prox.tau)

    def objective(node, n_nodes):
        return _tbv_objective(bits_u8, node, n_nodes, scatter)

    return _grow_tree(bits_u8, b, Strategy.TBV, _geometry(data, grid_width), prox,
                      objective, scatter.split, OBJECTIVE_RTOL, trace)


def learn_key(
    dset: DescriptorSet,
    strategy: Strategy | str,
    b: int | None = None,
    prox: ProximityConfig = ProximityConfig(),
    seed: int = 0,
) -> HashKey:
    """Learn one key on ``dset`` (normally the spread copy of a scale cluster)."""
    strategy = Strategy.parse(strategy)
    if b is None:
        b = key_length(len(dset))
    if strategy is Strategy.RBS:
        return select_rbs(dset, b, seed, prox)
    if strategy is Strategy.PBS:
        return select_pbs(dset, b, prox)
    if strategy is Strategy.TBS:
        return select_tbs(dset, b, prox)
    return select_tbv(dset, b, prox)


def entropy_of_probability(p1: float) -> float:
    """Entropy in nats of a Bernoulli bit with ``P(1) = p1``."""
    if not 0.0 <= p1 <= 1.0:
        raise InvalidInputError("probability must lie in [0, 1]")
    return float(_entropy(np.array([p1]))[0])


__all__ = [
    "DEFAULT_TAU",
    "HashKey",
    "KeySelectionWarning",
    "LevelTrace",
    "ProximityConfig",
    "Strategy",
    "bit_entropies",
    "bit_entropy",
    "entropy_of_probability",
    "key_length",
    "learn_key",
    "load_keys",
    "pair_penalty",
    "proximal_pairs",
    "proximity_filter",
    "quat_angle",
    "quat_proximal",
    "save_keys",
    "scatter_penalty",
    "select_pbs",
    "select_rbs",
    "select_tbs",
    "select_tbv",
    "split_imbalance",
    "tie_argmin",
]
