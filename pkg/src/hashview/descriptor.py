"""Quantized view grids, their one-hot binary descriptors, and grid scoring.

Every grid cell carries a quantized value in 0..16: 0 means no feature,
1..8 are gradient orientation bins and 9..16 surface-normal bins.  A cell
is encoded as a 16-bit field with bit ``v - 1`` set for value ``v``, so a
descriptor of a ``width x height`` grid has ``d = width * height * 16``
bits.  Bit ``p`` of a descriptor lives in cell ``p // 16`` at field bit
``p % 16``.

Internally descriptors are stored as one ``uint16`` per cell, which keeps
spreading (OR over a neighborhood) and scoring (AND per cell) cheap.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from hashview.errors import InvalidInputError, InvariantViolation

FIELD_BITS = 16
MAX_VALUE = 16
DEFAULT_SPREAD_RADIUS = 1

IDENTITY_POSE = (1.0, 0.0, 0.0, 0.0)

# value v -> one-hot 16-bit field; value 0 -> empty field
_ONE_HOT = np.array([0] + [1 << (v - 1) for v in range(1, MAX_VALUE + 1)], dtype=np.uint16)


# -----------------------------------------------------------------------------
# Array-level helpers (used by the batch code paths)
# -----------------------------------------------------------------------------


def encode_cells(values: np.ndarray) -> np.ndarray:
    """Map quantized cell values (any shape) to one-hot ``uint16`` fields."""
    values = np.asarray(values)
    if values.size and (values.min() < 0 or values.max() > MAX_VALUE):
        raise InvalidInputError(f"cell values must lie in [0, {MAX_VALUE}]")
    return _ONE_HOT[values.astype(np.intp)]


def decode_fields(fields: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_cells` for fields holding at most one set bit."""
    fields = np.asarray(fields, dtype=np.uint16)
    if np.any(fields & (fields - 1)):
        raise InvalidInputError("cannot decode a field with more than one set bit")
    out = np.zeros(fields.shape, dtype=np.uint8)
    nz = fields != 0
    # log2 of a power of two
    out[nz] = np.log2(fields[nz]).astype(np.uint8) + 1
    return out


def fields_to_bits(fields: np.ndarray) -> np.ndarray:
    """Unpack ``(..., cells)`` uint16 fields into ``(..., cells * 16)`` booleans."""
    fields = np.ascontiguousarray(fields, dtype="<u2")
    raw = fields.view(np.uint8)
    return np.unpackbits(raw, axis=-1, bitorder="little").astype(bool)


def bits_to_fields(bits: np.ndarray) -> np.ndarray:
    """Pack ``(..., d)`` booleans (``d`` a multiple of 16) back into uint16 fields."""
    bits = np.asarray(bits, dtype=bool)
    if bits.shape[-1] % FIELD_BITS:
        raise InvalidInputError("bit width must be a multiple of 16")
    raw = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(raw).view("<u2").astype(np.uint16)


def spread_fields(fields: np.ndarray, width: int, height: int, radius: int) -> np.ndarray:
    """OR every cell's field into its Chebyshev neighborhood of ``radius`` cells.

    ``fields`` has shape ``(..., height * width)``; cells outside the grid
    contribute nothing.
    """
    if radius < 0:
        raise InvalidInputError("spread radius must be >= 0")
    fields = np.asarray(fields, dtype=np.uint16)
    if radius == 0:
        return fields.copy()
    lead = fields.shape[:-1]
    grid = fields.reshape(lead + (height, width))
    pad = [(0, 0)] * len(lead) + [(radius, radius), (radius, radius)]
    padded = np.pad(grid, pad)
    out = np.zeros_like(grid)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out |= padded[..., dy:dy + height, dx:dx + width]
    return out.reshape(fields.shape)


def match_counts(window_fields: np.ndarray, template_fields: np.ndarray) -> np.ndarray:
    """Number of cells whose AND is nonzero, broadcast over leading axes."""
    return np.count_nonzero(np.bitwise_and(window_fields, template_fields), axis=-1)


# -----------------------------------------------------------------------------
# Domain types
# -----------------------------------------------------------------------------


def _check_pose(pose) -> np.ndarray:
    q = np.asarray(pose, dtype=np.float64).reshape(-1)
    if q.shape != (4,):
        raise InvalidInputError("pose must be a quaternion (w, x, y, z)")
    if abs(np.linalg.norm(q) - 1.0) > 1e-9:
        raise InvalidInputError("pose quaternion must have unit norm")
    return q


@dataclass(frozen=True, eq=False)
class QuantizedViewGrid:
    """Per-cell quantized values of one view, shape ``(height, width)``.

    ``foreground`` defaults to the nonzero cells.
    """

    cells: np.ndarray
    foreground: np.ndarray | None = None

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.ndim != 2 or cells.size == 0:
            raise InvalidInputError("cells must be a nonempty 2-D array")
        if not np.issubdtype(cells.dtype, np.integer):
            raise InvalidInputError("cells must hold integers")
        if cells.min() < 0 or cells.max() > MAX_VALUE:
            raise InvalidInputError(f"cell values must lie in [0, {MAX_VALUE}]")
        cells = cells.astype(np.uint8)
        if self.foreground is None:
            fg = cells > 0
        else:
            fg = np.asarray(self.foreground, dtype=bool)
            if fg.shape != cells.shape:
                raise InvalidInputError("foreground mask shape must match cells")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "foreground", fg)

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]


@dataclass(frozen=True, eq=False)
class BinaryDescriptor:
    """A ``d``-bit descriptor stored as one 16-bit field per cell."""

    fields: np.ndarray
    width: int
    height: int
    object_id: int = 0
    view_id: int = 0
    pose: np.ndarray = field(default_factory=lambda: np.array(IDENTITY_POSE))
    scale_cluster: int = 0
    foreground_count: int = 1
    spread_radius: int = 0

    def __post_init__(self):
        fields = np.asarray(self.fields, dtype=np.uint16).reshape(-1)
        if fields.size != self.width * self.height:
            raise InvalidInputError("field count must equal width * height")
        if self.foreground_count < 1:
            raise InvalidInputError("foreground_count must be >= 1")
        object.__setattr__(self, "fields", fields)
        object.__setattr__(self, "pose", _check_pose(self.pose))

    @property
    def d(self) -> int:
        return self.fields.size * FIELD_BITS

    @property
    def bits(self) -> np.ndarray:
        return fields_to_bits(self.fields)

    @property
    def is_spread(self) -> bool:
        return self.spread_radius > 0

    def set_bits(self) -> np.ndarray:
        """Indices of the set bits, ascending."""
        return np.flatnonzero(self.bits)

    def same_bits(self, other: "BinaryDescriptor") -> bool:
        return self.fields.shape == other.fields.shape and bool(np.all(self.fields == other.fields))

    def to_grid(self) -> QuantizedViewGrid:
        """Decode an unspread descriptor back to its quantized grid."""
        values = decode_fields(self.fields).reshape(self.height, self.width)
        return QuantizedViewGrid(values)


# -----------------------------------------------------------------------------
# Operations
# -----------------------------------------------------------------------------


def binarize(
    grid: QuantizedViewGrid,
    *,
    object_id: int = 0,
    view_id: int = 0,
    pose=IDENTITY_POSE,
    scale_cluster: int = 0,
) -> BinaryDescriptor:
    """One-hot encode every cell of ``grid``.

    A grid without foreground cells gets ``foreground_count = 1`` so that
    scores stay defined; its descriptor scores 0 against anything.
    """
    fields = encode_cells(grid.cells).reshape(-1)
    fg = int(np.count_nonzero(grid.foreground))
    return BinaryDescriptor(
        fields=fields,
        width=grid.width,
        height=grid.height,
        object_id=object_id,
        view_id=view_id,
        pose=pose,
        scale_cluster=scale_cluster,
        foreground_count=max(fg, 1),
    )


def spread(desc: BinaryDescriptor, radius: int = DEFAULT_SPREAD_RADIUS) -> BinaryDescriptor:
    """Spread orientation bits over a Chebyshev neighborhood of ``radius`` cells."""
    fields = spread_fields(desc.fields, desc.width, desc.height, radius)
    return BinaryDescriptor(
        fields=fields,
        width=desc.width,
        height=desc.height,
        object_id=desc.object_id,
        view_id=desc.view_id,
        pose=desc.pose,
        scale_cluster=desc.scale_cluster,
        foreground_count=desc.foreground_count,
        spread_radius=max(desc.spread_radius, radius),
    )


def similarity(window: BinaryDescriptor, template: BinaryDescriptor) -> float:
    """Fraction of the template's foreground cells whose fields AND to nonzero."""
    if window.d != template.d:
        raise InvalidInputError(f"bit widths differ: {window.d} vs {template.d}")
    return int(match_counts(window.fields, template.fields)) / template.foreground_count


# -----------------------------------------------------------------------------
# Descriptor sets
# -----------------------------------------------------------------------------


@dataclass(eq=False)
class DescriptorSet:
    """Descriptors of one scale cluster stored column-wise.

    ``ids`` are strictly ascending and unique; row ``i`` holds descriptor
    ``ids[i]``.  ``spread_radius > 0`` marks a spread copy, which is only
    meant for key learning and table filling, never for scoring.
    """

    fields: np.ndarray
    width: int
    height: int
    ids: np.ndarray
    object_ids: np.ndarray
    view_ids: np.ndarray
    poses: np.ndarray
    foreground_counts: np.ndarray
    scale_cluster: int = 0
    spread_radius: int = 0

    def __post_init__(self):
        n_cells = self.width * self.height
        self.fields = np.asarray(self.fields, dtype=np.uint16).reshape(-1, n_cells)
        n = self.fields.shape[0]
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.object_ids = np.asarray(self.object_ids, dtype=np.int64).reshape(-1)
        self.view_ids = np.asarray(self.view_ids, dtype=np.int64).reshape(-1)
        self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 4)
        self.foreground_counts = np.asarray(self.foreground_counts, dtype=np.int64).reshape(-1)
        for name in ("ids", "object_ids", "view_ids", "poses", "foreground_counts"):
            if len(getattr(self, name)) != n:
                raise InvalidInputError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if n > 1 and np.any(np.diff(self.ids) <= 0):
            raise InvalidInputError("descriptor ids must be unique and ascending")
        if n and self.foreground_counts.min() < 1:
            raise InvalidInputError("foreground counts must be >= 1")
        if n and np.max(np.abs(np.linalg.norm(self.poses, axis=1) - 1.0)) > 1e-9:
            raise InvalidInputError("poses must be unit quaternions")
        self._bits = None

    # -- construction -------------------------------------------------------

    @classmethod
    def from_descriptors(
        cls, descriptors: Sequence[BinaryDescriptor], ids: Iterable[int] | None = None
    ) -> "DescriptorSet":
        if not descriptors:
            raise InvalidInputError("need at least one descriptor")
        first = descriptors[0]
        for desc in descriptors:
            if (desc.width, desc.height) != (first.width, first.height):
                raise InvalidInputError("descriptors must share grid geometry")
            if desc.scale_cluster != first.scale_cluster:
                raise InvalidInputError("descriptors must share the scale cluster")
        ids = np.arange(len(descriptors)) if ids is None else np.fromiter(ids, dtype=np.int64)
        return cls(
            fields=np.stack([desc.fields for desc in descriptors]),
            width=first.width,
            height=first.height,
            ids=ids,
            object_ids=[desc.object_id for desc in descriptors],
            view_ids=[desc.view_id for desc in descriptors],
            poses=np.stack([desc.pose for desc in descriptors]),
            foreground_counts=[desc.foreground_count for desc in descriptors],
            scale_cluster=first.scale_cluster,
            spread_radius=max(desc.spread_radius for desc in descriptors),
        )

    @classmethod
    def from_bits(cls, bits: np.ndarray, **kwargs) -> "DescriptorSet":
        """Build a set from a raw ``(n, d)`` bit matrix on a ``d/16 x 1`` grid.

        Metadata defaults to object 0, identity poses and foreground counts
        equal to the number of nonempty cells.
        """
        fields = bits_to_fields(np.atleast_2d(bits))
        n, cells = fields.shape
        kwargs.setdefault("width", cells)
        kwargs.setdefault("height", 1)
        kwargs.setdefault("ids", np.arange(n))
        kwargs.setdefault("object_ids", np.zeros(n, dtype=np.int64))
        kwargs.setdefault("view_ids", np.arange(n))
        kwargs.setdefault("poses", np.tile(IDENTITY_POSE, (n, 1)))
        kwargs.setdefault("foreground_counts", np.maximum(np.count_nonzero(fields, axis=1), 1))
        return cls(fields=fields, **kwargs)

    def _replace(self, **changes) -> "DescriptorSet":
        attrs = dict(
            fields=self.fields,
            width=self.width,
            height=self.height,
            ids=self.ids,
            object_ids=self.object_ids,
            view_ids=self.view_ids,
            poses=self.poses,
            foreground_counts=self.foreground_counts,
            scale_cluster=self.scale_cluster,
            spread_radius=self.spread_radius,
        )
        attrs.update(changes)
        return DescriptorSet(**attrs)

    def take(self, rows) -> "DescriptorSet":
        """Subset by row positions (sorted so ids stay ascending)."""
        rows = np.sort(np.asarray(rows, dtype=np.intp))
        return self._replace(
            fields=self.fields[rows],
            ids=self.ids[rows],
            object_ids=self.object_ids[rows],
            view_ids=self.view_ids[rows],
            poses=self.poses[rows],
            foreground_counts=self.foreground_counts[rows],
        )

    def subset(self, ids) -> "DescriptorSet":
        return self.take(self.rows_of(ids))

    def spread(self, radius: int = DEFAULT_SPREAD_RADIUS) -> "DescriptorSet":
        if self.spread_radius:
            raise InvalidInputError("set is already spread")
        return self._replace(
            fields=spread_fields(self.fields, self.width, self.height, radius),
            spread_radius=radius,
        )

    @staticmethod
    def concat(sets: Sequence["DescriptorSet"]) -> "DescriptorSet":
        first = sets[0]
        for other in sets[1:]:
            if (other.width, other.height, other.scale_cluster, other.spread_radius) != (
                first.width, first.height, first.scale_cluster, first.spread_radius
            ):
                raise InvalidInputError("sets must share geometry, scale and spread")
        return first._replace(
            fields=np.concatenate([s.fields for s in sets]),
            ids=np.concatenate([s.ids for s in sets]),
            object_ids=np.concatenate([s.object_ids for s in sets]),
            view_ids=np.concatenate([s.view_ids for s in sets]),
            poses=np.concatenate([s.poses for s in sets]),
            foreground_counts=np.concatenate([s.foreground_counts for s in sets]),
        )

    # -- access -------------------------------------------------------------

    def __len__(self) -> int:
        return self.fields.shape[0]

    def __getitem__(self, row: int) -> BinaryDescriptor:
        return BinaryDescriptor(
            fields=self.fields[row],
            width=self.width,
            height=self.height,
            object_id=int(self.object_ids[row]),
            view_id=int(self.view_ids[row]),
            pose=self.poses[row],
            scale_cluster=self.scale_cluster,
            foreground_count=int(self.foreground_counts[row]),
            spread_radius=self.spread_radius,
        )

    def __iter__(self) -> Iterator[BinaryDescriptor]:
        for row in range(len(self)):
            yield self[row]

    @property
    def d(self) -> int:
        return self.width * self.height * FIELD_BITS

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def bits(self) -> np.ndarray:
        """``(n, d)`` boolean bit matrix, computed once and cached."""
        if self._bits is None:
            self._bits = fields_to_bits(self.fields)
        return self._bits

    def rows_of(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        rows = np.searchsorted(self.ids, ids)
        if np.any(rows >= len(self.ids)) or np.any(self.ids[np.minimum(rows, len(self.ids) - 1)] != ids):
            raise InvalidInputError("unknown descriptor id")
        return rows

    def object_set(self) -> list[int]:
        return sorted(set(self.object_ids.tolist()))


# -----------------------------------------------------------------------------
# Database file
# -----------------------------------------------------------------------------

DB_MAGIC = b"HVDESCDB"
DB_VERSION = 1
_DB_HEADER = struct.Struct("<8sII")  # magic, version, reserved -> 16 bytes
_DB_SHAPE = struct.Struct("<IIHH")  # d, count, width, height


def _record_dtype(d: int) -> np.dtype:
    return np.dtype(
        [
            ("object_id", "<u4"),
            ("view_id", "<u4"),
            ("scale_cluster", "<u2"),
            ("foreground_count", "<u4"),
            ("pose", "<f8", (4,)),
            ("bits", "u1", ((d + 7) // 8,)),
        ]
    )


def save_descriptor_set(dset: DescriptorSet, path: str | Path) -> None:
    """Write ``dset`` in the little-endian descriptor database layout.

    Descriptor ids are implicit: the file keeps ascending id order and the
    caller restores ids through ``id_offset`` (or an explicit id list) on load.
    """
    if dset.width > 0xFFFF or dset.height > 0xFFFF:
        raise InvalidInputError("grid dimensions exceed 16 bits")
    rec = np.zeros(len(dset), dtype=_record_dtype(dset.d))
    rec["object_id"] = dset.object_ids
    rec["view_id"] = dset.view_ids
    rec["scale_cluster"] = dset.scale_cluster
    rec["foreground_count"] = dset.foreground_counts
    rec["pose"] = dset.poses
    rec["bits"] = np.ascontiguousarray(dset.fields, dtype="<u2").view(np.uint8)
    with open(path, "wb") as fh:
        fh.write(_DB_HEADER.pack(DB_MAGIC, DB_VERSION, 0))
        fh.write(_DB_SHAPE.pack(dset.d, len(dset), dset.width, dset.height))
        fh.write(rec.tobytes())


def load_descriptor_set(path: str | Path, id_offset: int = 0, ids=None) -> DescriptorSet:
    data = Path(path).read_bytes()
    if len(data) < _DB_HEADER.size + _DB_SHAPE.size:
        raise InvariantViolation(f"{path}: truncated descriptor database")
    magic, version, _ = _DB_HEADER.unpack_from(data, 0)
    if magic != DB_MAGIC or version != DB_VERSION:
        raise InvariantViolation(f"{path}: not a descriptor database (v{DB_VERSION})")
    d, count, width, height = _DB_SHAPE.unpack_from(data, _DB_HEADER.size)
    if d != width * height * FIELD_BITS:
        raise InvariantViolation(f"{path}: bit width {d} does not match {width}x{height} grid")
    dtype = _record_dtype(d)
    start = _DB_HEADER.size + _DB_SHAPE.size
    if len(data) != start + count * dtype.itemsize:
        raise InvariantViolation(f"{path}: expected {count} records")
    rec = np.frombuffer(data, dtype=dtype, offset=start, count=count)
    scales = np.unique(rec["scale_cluster"])
    if len(scales) > 1:
        raise InvariantViolation(f"{path}: mixed scale clusters")
    fields = np.ascontiguousarray(rec["bits"]).view("<u2").astype(np.uint16)
    return DescriptorSet(
        fields=fields,
        width=width,
        height=height,
        ids=np.arange(count) + id_offset if ids is None else ids,
        object_ids=rec["object_id"].astype(np.int64),
        view_ids=rec["view_id"].astype(np.int64),
        poses=rec["pose"].astype(np.float64),
        foreground_counts=rec["foreground_count"].astype(np.int64),
        scale_cluster=int(scales[0]) if count else 0,
    )
