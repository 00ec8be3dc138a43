"""Synthetic stand-in for rendered object views and test scenes.

Objects are modeled at a reference grid resolution: a fixed foreground mask
(sparse, ring-like, never touching the grid border) and, per foreground
cell, an orientation that varies smoothly with the view rotation.  The
variation speed is set by ``view_coherence``: at 1 every view is identical,
at 0 every view draws its cell values independently.

Views are sampled on hemispheres of several radii crossed with in-plane
rotations.  Radii (and optional extra scale steps) define scale levels,
which are binned into scale clusters; each cluster has its own window size
and the reference grid is resampled to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from hashview.descriptor import (
    IDENTITY_POSE,
    MAX_VALUE,
    DescriptorSet,
    QuantizedViewGrid,
    decode_fields,
    encode_cells,
    load_descriptor_set,
    save_descriptor_set,
)
from hashview.errors import InvalidInputError, InvariantViolation

DEFAULT_N_CLUSTERS = 3
DEFAULT_WINDOW_SIZES = ((8, 8), (7, 7), (6, 6))
DEFAULT_FG_DENSITY = 0.5
DEFAULT_COHERENCE = 0.7
SPARSE_FG_DENSITY = 0.2
# reference grids are sampled at this many cells per window cell (largest window)
REFERENCE_OVERSAMPLING = 2
# orientation drift per unit of the pose quadratic form at coherence 0.5
DRIFT_GAIN = 2.0
N_BINS = 8
CELL_SIZE_PX = 8


# -----------------------------------------------------------------------------
# Pose sampling
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class HemisphereSampling:
    """Viewpoint lattice: radii x scale steps x hemisphere points x in-plane steps."""

    radii: tuple[float, ...] = (0.6, 0.75, 0.9, 1.05, 1.2)
    views_per_radius: int = 89
    in_plane_steps: int = 7
    scale_steps: int = 1

    def __post_init__(self):
        if not self.radii or self.views_per_radius < 1 or self.in_plane_steps < 1 or self.scale_steps < 1:
            raise InvalidInputError("sampling needs at least one radius and one step of each kind")
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))

    @property
    def total(self) -> int:
        return len(self.radii) * self.scale_steps * self.views_per_radius * self.in_plane_steps

    @property
    def n_levels(self) -> int:
        return len(self.radii) * self.scale_steps

    @classmethod
    def with_total(cls, n: int) -> "HemisphereSampling":
        """A lattice with exactly ``n`` views (3115 gives the default lattice)."""
        if n < 1:
            raise InvalidInputError("need at least one view")
        levels = next(r for r in (5, 3, 2, 1) if n % r == 0)
        per_level = n // levels
        in_plane = next(i for i in (7, 5, 4, 3, 2, 1) if per_level % i == 0 and per_level // i >= min(8, per_level))
        radii = tuple(0.6 + 0.15 * i for i in range(levels))
        return cls(radii=radii, views_per_radius=per_level // in_plane, in_plane_steps=in_plane)


def hemisphere_points(n: int) -> np.ndarray:
    """``n`` quasi-uniform unit vectors on the upper hemisphere (spiral lattice).

    The first point is the pole.
    """
    if n < 1:
        raise InvalidInputError("need at least one point")
    i = np.arange(n)
    z = 1.0 - i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _view_rotations(points: np.ndarray, in_plane_steps: int) -> np.ndarray:
    """Quaternions (w, x, y, z) tilting the z axis onto each point, after an in-plane roll."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, points)
    norm = np.linalg.norm(axis, axis=1, keepdims=True)
    angle = np.arccos(np.clip(points[:, 2], -1.0, 1.0))[:, None]
    rotvec = np.where(norm > 1e-12, axis / np.maximum(norm, 1e-12) * angle, 0.0)
    tilt = Rotation.from_rotvec(rotvec)
    rolls = Rotation.from_euler("z", 2 * math.pi * np.arange(in_plane_steps) / in_plane_steps)
    out = []
    for t in range(len(points)):
        q = (tilt[t] * rolls).as_quat()  # x, y, z, w
        out.append(q[:, [3, 0, 1, 2]])
    quats = np.concatenate(out)
    quats[quats[:, 0] < 0] *= -1.0
    return quats / np.linalg.norm(quats, axis=1, keepdims=True)


def sample_poses(spec: HemisphereSampling = HemisphereSampling()) -> np.ndarray:
    """``(spec.total, 4)`` unit quaternions ordered radius, scale step, viewpoint, roll."""
    rotations = _view_rotations(hemisphere_points(spec.views_per_radius), spec.in_plane_steps)
    return np.tile(rotations, (spec.n_levels, 1))


def pose_levels(spec: HemisphereSampling) -> np.ndarray:
    """Scale level (radius index * scale_steps + scale step) of every sampled pose."""
    per_level = spec.views_per_radius * spec.in_plane_steps
    return np.repeat(np.arange(spec.n_levels), per_level)


def level_clusters(n_levels: int, n_clusters: int = DEFAULT_N_CLUSTERS) -> np.ndarray:
    """Bin scale levels into ``min(n_clusters, n_levels)`` contiguous clusters."""
    s = min(n_clusters, n_levels)
    return (np.arange(n_levels) * s) // n_levels


# -----------------------------------------------------------------------------
# Object models
# -----------------------------------------------------------------------------


@dataclass(eq=False)
class SyntheticObjectModel:
    """Reference-resolution appearance model of one object.

    ``cell_value_distribution`` is the per-cell marginal over values 0..16
    (uniform over the cell's 8 orientation bins on the foreground, all mass
    on 0 elsewhere); independent views draw from it.
    """

    object_id: int
    foreground: np.ndarray
    cell_offset: np.ndarray
    phase: np.ndarray
    forms: np.ndarray
    view_coherence: float = DEFAULT_COHERENCE

    def __post_init__(self):
        if not 0.0 <= self.view_coherence <= 1.0:
            raise InvalidInputError("view_coherence must lie in [0, 1]")
        self.foreground = np.asarray(self.foreground, dtype=bool)
        if not self.foreground.any():
            raise InvalidInputError("object needs at least one foreground cell")

    @property
    def shape(self) -> tuple[int, int]:
        return self.foreground.shape

    @property
    def cell_value_distribution(self) -> np.ndarray:
        fg = self.foreground.ravel()
        dist = np.zeros((fg.size, MAX_VALUE + 1))
        dist[~fg, 0] = 1.0
        for c in np.flatnonzero(fg):
            lo = 1 + self.cell_offset.ravel()[c]
            dist[c, lo:lo + N_BINS] = 1.0 / N_BINS
        return dist

    @property
    def drift(self) -> float:
        c = self.view_coherence
        if c >= 1.0:
            return 0.0
        return DRIFT_GAIN * (1.0 - c) / c

    def view_values(self, poses: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """``(n, H, W)`` quantized values for ``poses`` at reference resolution."""
        poses = np.atleast_2d(poses)
        h, w = self.shape
        fg = self.foreground.ravel()
        fg_cells = np.flatnonzero(fg)
        offset = self.cell_offset.ravel()[fg_cells]
        values = np.zeros((len(poses), h * w), dtype=np.uint8)
        if self.view_coherence <= 0.0:
            if rng is None:
                raise InvalidInputError("independent views need a random generator")
            bins = rng.integers(0, N_BINS, size=(len(poses), fg_cells.size))
        else:
            # q^T S_c q is smooth in the rotation and invariant to q -> -q
            quad = np.einsum("ni,cij,nj->nc", poses, self.forms[fg_cells], poses)
            angle = self.phase.ravel()[fg_cells] + self.drift * quad
            bins = np.floor(np.mod(angle, 2 * math.pi) / (2 * math.pi) * N_BINS).astype(np.int64)
            bins = np.minimum(bins, N_BINS - 1)
        values[:, fg_cells] = 1 + offset + bins
        return values.reshape(len(poses), h, w)


def _object_mask(h: int, w: int, density: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Contour cells plus a few interior cells, kept one cell away from the border.

    Returns the foreground mask and a per-cell flag marking contour cells,
    which carry gradient orientations; interior cells carry normals.
    """
    inner = np.zeros((h, w), dtype=bool)
    inner[1:-1, 1:-1] = True
    target = min(max(4, int(round(density * h * w))), int(inner.sum()))
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    cy = (h - 1) / 2 + rng.uniform(-0.5, 0.5)
    cx = (w - 1) / 2 + rng.uniform(-0.5, 0.5)
    ry = (h - 2) / 2 * rng.uniform(0.6, 0.95)
    rx = (w - 2) / 2 * rng.uniform(0.6, 0.95)
    radial = np.hypot((yy - cy) / ry, (xx - cx) / rx)
    contour_score = np.where(inner, -np.abs(radial - 1.0) + 0.35 * rng.random((h, w)), -np.inf).ravel()
    n_contour = max(1, int(round(0.6 * target)))
    contour = np.zeros(h * w, dtype=bool)
    contour[np.argsort(-contour_score, kind="stable")[:n_contour]] = True
    interior = np.flatnonzero(inner.ravel() & (radial.ravel() < 1.0) & ~contour)
    fill = rng.permutation(interior)[: target - n_contour]
    mask = contour.copy()
    mask[fill] = True
    if mask.sum() < target:
        # small grids: fall back to further contour-ranked cells
        rest = [c for c in np.argsort(-contour_score, kind="stable") if not mask[c] and np.isfinite(contour_score[c])]
        mask[rest[: target - int(mask.sum())]] = True
    return mask.reshape(h, w), (contour & mask).reshape(h, w)


def make_object_models(
    n_objects: int,
    seed: int = 0,
    shape: tuple[int, int] = (16, 16),
    fg_density: float = DEFAULT_FG_DENSITY,
    view_coherence: float = DEFAULT_COHERENCE,
    first_object_id: int = 0,
) -> list[SyntheticObjectModel]:
    """Random object models at reference grid ``shape`` (width, height)."""
    if n_objects < 1:
        raise InvalidInputError("need at least one object")
    w, h = shape
    models = []
    for k in range(n_objects):
        rng = np.random.default_rng([seed, first_object_id + k, 0x0B7])
        mask, contour = _object_mask(h, w, fg_density, rng)
        offset = np.where(contour, 0, N_BINS)
        phase = rng.uniform(0.0, 2 * math.pi, size=(h, w))
        a = rng.normal(size=(h * w, 4, 4))
        forms = 0.5 * (a + np.transpose(a, (0, 2, 1)))
        models.append(
            SyntheticObjectModel(
                object_id=first_object_id + k,
                foreground=mask,
                cell_offset=offset,
                phase=phase,
                forms=forms,
                view_coherence=view_coherence,
            )
        )
    return models


def place_grid(values: np.ndarray, width: int, height: int, zoom: float = 1.0) -> np.ndarray:
    """Nearest-cell sampling of ``(..., H, W)`` reference values into a window.

    ``zoom`` is the number of reference cells per window cell; the object
    stays centered and reference cells falling outside map to 0.
    """
    H, W = values.shape[-2:]
    rows = np.floor((np.arange(height) + 0.5 - height / 2) * zoom + H / 2).astype(np.intp)
    cols = np.floor((np.arange(width) + 0.5 - width / 2) * zoom + W / 2).astype(np.intp)
    inside = (rows[:, None] >= 0) & (rows[:, None] < H) & (cols[None, :] >= 0) & (cols[None, :] < W)
    out = values[..., np.clip(rows, 0, H - 1)[:, None], np.clip(cols, 0, W - 1)[None, :]]
    return np.where(inside, out, 0).astype(values.dtype)


# -----------------------------------------------------------------------------
# Databases
# -----------------------------------------------------------------------------


@dataclass(eq=False)
class ViewDatabase:
    """Unspread template sets keyed by scale cluster; ids are unique across clusters."""

    clusters: dict[int, DescriptorSet]
    sampling: HemisphereSampling = field(default_factory=HemisphereSampling)

    def __post_init__(self):
        self.clusters = dict(sorted(self.clusters.items()))
        seen = np.concatenate([s.ids for s in self.clusters.values()]) if self.clusters else np.zeros(0)
        if len(np.unique(seen)) != len(seen):
            raise InvariantViolation("descriptor ids collide across scale clusters")

    def __len__(self) -> int:
        return sum(len(s) for s in self.clusters.values())

    @property
    def object_ids(self) -> list[int]:
        return sorted(set().union(*(s.object_set() for s in self.clusters.values())))

    @property
    def max_id(self) -> int:
        return max(int(s.ids.max()) for s in self.clusters.values() if len(s))

    def locate(self, descriptor_id: int) -> tuple[int, int]:
        """``(scale_cluster, row)`` of a descriptor id."""
        for scale, dset in self.clusters.items():
            row = int(np.searchsorted(dset.ids, descriptor_id))
            if row < len(dset) and dset.ids[row] == descriptor_id:
                return scale, row
        raise InvalidInputError(f"unknown descriptor id {descriptor_id}")

    def descriptor(self, descriptor_id: int):
        scale, row = self.locate(descriptor_id)
        return self.clusters[scale][row]

    def restrict_objects(self, objects: Iterable[int]) -> "ViewDatabase":
        keep = np.asarray(sorted(set(objects)))
        clusters = {}
        for scale, dset in self.clusters.items():
            rows = np.flatnonzero(np.isin(dset.object_ids, keep))
            if len(rows):
                clusters[scale] = dset.take(rows)
        return ViewDatabase(clusters, self.sampling)

    def truncate(self, size: int) -> "ViewDatabase":
        """Keep the ``size`` lowest descriptor ids."""
        all_ids = np.sort(np.concatenate([s.ids for s in self.clusters.values()]))
        if size >= len(all_ids):
            return self
        cutoff = all_ids[size - 1]
        clusters = {}
        for scale, dset in self.clusters.items():
            rows = np.flatnonzero(dset.ids <= cutoff)
            if len(rows):
                clusters[scale] = dset.take(rows)
        return ViewDatabase(clusters, self.sampling)

    # -- files --------------------------------------------------------------

    def save(self, directory: str | Path) -> list[Path]:
        """Write one descriptor database file per cluster plus a manifest."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        lines = [f"sampling={_sampling_to_text(self.sampling)}"]
        for scale, dset in self.clusters.items():
            db_path = directory / f"descriptors_s{scale}.bin"
            ids_path = directory / f"descriptors_s{scale}.ids"
            save_descriptor_set(dset, db_path)
            ids_path.write_bytes(dset.ids.astype("<u4").tobytes())
            lines.append(f"cluster={scale} file={db_path.name} ids={ids_path.name}")
            written += [db_path, ids_path]
        manifest = directory / "database.txt"
        manifest.write_text("\n".join(lines) + "\n")
        return [manifest, *written]

    @classmethod
    def load(cls, directory: str | Path) -> "ViewDatabase":
        directory = Path(directory)
        manifest = directory / "database.txt"
        if not manifest.exists():
            raise FileNotFoundError(manifest)
        sampling = HemisphereSampling()
        clusters = {}
        for line in manifest.read_text().splitlines():
            if line.startswith("sampling="):
                sampling = _sampling_from_text(line.split("=", 1)[1])
            elif line.startswith("cluster="):
                fields = dict(part.split("=", 1) for part in line.split())
                ids = np.frombuffer((directory / fields["ids"]).read_bytes(), "<u4").astype(np.int64)
                dset = load_descriptor_set(directory / fields["file"], ids=ids)
                if dset.scale_cluster != int(fields["cluster"]):
                    raise InvariantViolation(f"{fields['file']}: scale cluster mismatch")
                clusters[dset.scale_cluster] = dset
        return cls(clusters, sampling)


def _sampling_to_text(s: HemisphereSampling) -> str:
    radii = ",".join(f"{r:g}" for r in s.radii)
    return f"{radii};{s.views_per_radius};{s.in_plane_steps};{s.scale_steps}"


def _sampling_from_text(text: str) -> HemisphereSampling:
    radii, views, in_plane, scales = text.split(";")
    return HemisphereSampling(tuple(float(r) for r in radii.split(",")), int(views), int(in_plane), int(scales))


def generate_database(
    models: Sequence[SyntheticObjectModel],
    spec: HemisphereSampling = HemisphereSampling(),
    seed: int = 0,
    window_sizes: Sequence[tuple[int, int]] = DEFAULT_WINDOW_SIZES,
    n_clusters: int = DEFAULT_N_CLUSTERS,
) -> ViewDatabase:
    """One unspread descriptor per (object, pose); ids run cluster by cluster.

    View ids index the pose list, so they are shared by all objects.
    """
    if not models:
        raise InvalidInputError("need at least one object model")
    poses = sample_poses(spec)
    cluster_of_level = level_clusters(spec.n_levels, n_clusters)
    cluster_of_view = cluster_of_level[pose_levels(spec)]
    if len(window_sizes) < cluster_of_level.max() + 1:
        raise InvalidInputError("need a window size per scale cluster")
    rng = np.random.default_rng([seed, 0xDB])
    per_object = [m.view_values(poses, rng) for m in models]
    levels = pose_levels(spec)
    radius_of_level = np.repeat(spec.radii, spec.scale_steps) * np.tile(
        1.0 + 0.1 * np.arange(spec.scale_steps), len(spec.radii)
    )

    clusters = {}
    next_id = 0
    for scale in range(int(cluster_of_level.max()) + 1):
        views = np.flatnonzero(cluster_of_view == scale)
        width, height = window_sizes[scale]
        first_radius = radius_of_level[cluster_of_level == scale].min()
        blocks = []
        for model, values in zip(models, per_object):
            grid = np.zeros((len(views), height * width), dtype=np.uint8)
            for level in np.unique(levels[views]):
                sel = levels[views] == level
                # the nearest level of a cluster fills its window, farther ones shrink
                zoom = model.shape[0] / height * radius_of_level[level] / first_radius
                grid[sel] = place_grid(values[views[sel]], width, height, zoom).reshape(int(sel.sum()), -1)
            fg = np.count_nonzero(grid, axis=1)
            blocks.append((model.object_id, grid, fg))
        n = len(views) * len(models)
        clusters[scale] = DescriptorSet(
            fields=encode_cells(np.concatenate([g for _, g, _ in blocks])),
            width=width,
            height=height,
            ids=np.arange(next_id, next_id + n),
            object_ids=np.repeat([oid for oid, _, _ in blocks], len(views)),
            view_ids=np.tile(views, len(models)),
            poses=np.tile(poses[views], (len(models), 1)),
            foreground_counts=np.maximum(np.concatenate([f for _, _, f in blocks]), 1),
            scale_cluster=scale,
        )
        next_id += n
    return ViewDatabase(clusters, spec)


def synthetic_database(
    n_objects: int,
    views: int | HemisphereSampling = 3115,
    seed: int = 0,
    fg_density: float = DEFAULT_FG_DENSITY,
    view_coherence: float = DEFAULT_COHERENCE,
    window_sizes: Sequence[tuple[int, int]] = DEFAULT_WINDOW_SIZES,
    n_clusters: int = DEFAULT_N_CLUSTERS,
) -> ViewDatabase:
    """Convenience wrapper: random models plus :func:`generate_database`."""
    spec = views if isinstance(views, HemisphereSampling) else HemisphereSampling.with_total(views)
    ref = (REFERENCE_OVERSAMPLING * window_sizes[0][0], REFERENCE_OVERSAMPLING * window_sizes[0][1])
    models = make_object_models(n_objects, seed, ref, fg_density, view_coherence)
    return generate_database(models, spec, seed, window_sizes, n_clusters)


def _value_cdf(dset: DescriptorSet) -> np.ndarray:
    values = decode_fields(dset.fields)
    counts = np.zeros((dset.n_cells, MAX_VALUE + 1))
    for v in range(MAX_VALUE + 1):
        counts[:, v] = np.count_nonzero(values == v, axis=0)
    return np.cumsum(counts / counts.sum(axis=1, keepdims=True), axis=1)


def _draw_values(cdf: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((n, cdf.shape[0]), dtype=np.uint8)
    step = max(1, (1 << 20) // cdf.shape[0])
    for a in range(0, n, step):
        u = rng.random((min(step, n - a), cdf.shape[0], 1))
        out[a:a + step] = np.minimum((u >= cdf[None, :, :]).sum(axis=2), MAX_VALUE)
    return out


def enlarge_by_bit_distribution(
    dset: DescriptorSet,
    extra_count: int,
    seed: int = 0,
    views_per_object: int | None = None,
    sampling: HemisphereSampling = HemisphereSampling(),
    first_id: int | None = None,
    first_object_id: int | None = None,
) -> DescriptorSet:
    """Append ``extra_count`` descriptors drawn cell-wise from ``dset``'s value frequencies.

    Every new cell value is drawn independently from the empirical
    distribution of that cell over the source set, which keeps the one-hot
    structure.  New descriptors belong to fresh synthetic objects of
    ``views_per_object`` views each and get poses from ``sampling``.
    """
    if len(dset) == 0:
        raise InvalidInputError("cannot estimate a distribution from an empty set")
    if extra_count < 0:
        raise InvalidInputError("extra_count must be >= 0")
    if extra_count == 0:
        return dset
    if dset.spread_radius:
        raise InvalidInputError("enlarge the unspread set")
    rng = np.random.default_rng([seed, 0xE1A])
    if views_per_object is None:
        views_per_object = max(1, round(len(dset) / len(dset.object_set())))
    first_id = int(dset.ids.max()) + 1 if first_id is None else first_id
    first_object_id = int(dset.object_ids.max()) + 1 if first_object_id is None else first_object_id
    values = _draw_values(_value_cdf(dset), extra_count, rng)
    poses = sample_poses(sampling)
    k = np.arange(extra_count)
    view = k % views_per_object
    extra = DescriptorSet(
        fields=encode_cells(values),
        width=dset.width,
        height=dset.height,
        ids=first_id + k,
        object_ids=first_object_id + k // views_per_object,
        view_ids=view,
        poses=poses[view % len(poses)],
        foreground_counts=np.maximum(np.count_nonzero(values, axis=1), 1),
        scale_cluster=dset.scale_cluster,
    )
    return DescriptorSet.concat([dset, extra])


def enlarge_database(db: ViewDatabase, extra_count: int, seed: int = 0) -> ViewDatabase:
    """Add ``extra_count`` synthetic descriptors spread over clusters like the source.

    Synthetic objects mirror the real ones: each owns one full pose lattice,
    split over clusters by scale level.
    """
    if extra_count <= 0:
        return db
    total = len(db)
    sizes = {s: len(d) for s, d in db.clusters.items()}
    # largest-remainder apportionment keeps the exact total
    quotas = {s: extra_count * n / total for s, n in sizes.items()}
    alloc = {s: int(math.floor(q)) for s, q in quotas.items()}
    for s in sorted(quotas, key=lambda s: (-(quotas[s] - alloc[s]), s))[: extra_count - sum(alloc.values())]:
        alloc[s] += 1
    n_objects = len(db.object_ids)
    first_object = max(db.object_ids) + 1
    next_id = db.max_id + 1
    clusters = {}
    for scale, dset in db.clusters.items():
        per_object = max(1, round(len(dset) / n_objects))
        view_rows = np.flatnonzero(dset.object_ids == dset.object_ids[0])
        views = dset.view_ids[view_rows]
        grown = enlarge_by_bit_distribution(
            dset, alloc[scale], seed=seed * 1000 + scale, views_per_object=per_object,
            sampling=db.sampling, first_id=next_id, first_object_id=first_object,
        )
        if alloc[scale]:
            # reuse the real objects' view ids and poses for this cluster
            tail = slice(len(dset), None)
            cycle = np.arange(alloc[scale]) % len(views)
            grown.view_ids[tail] = views[cycle]
            grown.poses[tail] = dset.poses[view_rows][cycle]
        clusters[scale] = grown
        next_id += alloc[scale]
    return ViewDatabase(clusters, db.sampling)


# -----------------------------------------------------------------------------
# Scenes
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class Plant:
    descriptor_id: int
    x: int
    y: int
    scale_cluster: int
    object_id: int
    view_id: int
    pose: tuple[float, float, float, float] = IDENTITY_POSE
    width: int = 0
    height: int = 0


@dataclass(eq=False)
class SceneInstance:
    grid: QuantizedViewGrid
    plants: list[Plant]
    clutter_density: float = 0.0
    epsilon: float = 0.0
    cell_size: int = CELL_SIZE_PX

    @property
    def width(self) -> int:
        return self.grid.width

    @property
    def height(self) -> int:
        return self.grid.height

    @property
    def pixel_size(self) -> tuple[int, int]:
        return self.width * self.cell_size, self.height * self.cell_size


def _clutter(shape, density: float, rng: np.random.Generator) -> np.ndarray:
    values = rng.integers(1, MAX_VALUE + 1, size=shape).astype(np.uint8)
    values[rng.random(shape) >= density] = 0
    return values


def corrupt_cells(
    values: np.ndarray, rate: float, rng: np.random.Generator, clutter_density: float = 0.0
) -> np.ndarray:
    """Re-draw each cell with probability ``rate``, keeping one value per cell.

    Foreground cells take a uniform value in 1..16 (so a hit may land on the
    old value); background cells take a clutter draw.
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidInputError("corruption rate must lie in [0, 1]")
    values = np.asarray(values)
    hit = rng.random(values.shape) < rate
    fg = values > 0
    noisy = values.astype(np.uint8, copy=True)
    noisy[hit & fg] = rng.integers(1, MAX_VALUE + 1, size=int(np.count_nonzero(hit & fg)))
    bg_hit = hit & ~fg
    noisy[bg_hit] = _clutter(int(np.count_nonzero(bg_hit)), clutter_density, rng)
    return noisy


def compose_scene(
    db: ViewDatabase,
    plants: Sequence[tuple[int, tuple[int, int]]],
    clutter_density: float = 0.0,
    epsilon: float = 0.0,
    seed: int = 0,
    width: int = 24,
    height: int = 18,
) -> SceneInstance:
    """Paste views into a clutter background and corrupt them cell-wise.

    Each planted footprint cell is re-drawn with probability ``epsilon``:
    foreground cells take a uniform value in 1..16, background cells a
    clutter draw.  Footprints may not overlap.
    """
    if not 0.0 <= epsilon < 0.5:
        raise InvalidInputError("epsilon must lie in [0, 0.5)")
    if not 0.0 <= clutter_density <= 1.0:
        raise InvalidInputError("clutter density must lie in [0, 1]")
    rng = np.random.default_rng([seed, 0x5CE])
    grid = _clutter((height, width), clutter_density, rng)
    taken = np.zeros((height, width), dtype=bool)
    placed = []
    for descriptor_id, (x, y) in plants:
        scale, row = db.locate(int(descriptor_id))
        dset = db.clusters[scale]
        w, h = dset.width, dset.height
        if x < 0 or y < 0 or x + w > width or y + h > height:
            raise InvalidInputError(f"plant {descriptor_id} at ({x}, {y}) leaves the scene")
        if taken[y:y + h, x:x + w].any():
            raise InvalidInputError(f"plant {descriptor_id} at ({x}, {y}) overlaps another plant")
        taken[y:y + h, x:x + w] = True
        values = decode_fields(dset.fields[row]).reshape(h, w)
        grid[y:y + h, x:x + w] = corrupt_cells(values, epsilon, rng, clutter_density)
        placed.append(
            Plant(
                int(descriptor_id), int(x), int(y), scale,
                int(dset.object_ids[row]), int(dset.view_ids[row]),
                tuple(float(v) for v in dset.poses[row]), w, h,
            )
        )
    return SceneInstance(QuantizedViewGrid(grid), placed, clutter_density, epsilon)


def random_plants(
    db: ViewDatabase,
    n_plants: int,
    rng: np.random.Generator,
    width: int = 24,
    height: int = 18,
    objects: Sequence[int] | None = None,
    max_tries: int = 200,
) -> list[tuple[int, tuple[int, int]]]:
    """Pick random views and non-overlapping lattice positions for them."""
    objects = list(db.object_ids if objects is None else objects)
    taken = np.zeros((height, width), dtype=bool)
    plants = []
    scales = list(db.clusters)
    for _ in range(n_plants):
        obj = objects[rng.integers(len(objects))]
        scale = scales[rng.integers(len(scales))]
        dset = db.clusters[scale]
        rows = np.flatnonzero(dset.object_ids == obj)
        if len(rows) == 0:
            continue
        row = rows[rng.integers(len(rows))]
        w, h = dset.width, dset.height
        if w > width or h > height:
            continue
        for _ in range(max_tries):
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            if not taken[y:y + h, x:x + w].any():
                taken[y:y + h, x:x + w] = True
                plants.append((int(dset.ids[row]), (x, y)))
                break
    return plants


def make_scenes(
    db: ViewDatabase,
    count: int,
    seed: int,
    n_plants: int = 3,
    epsilon: float = 0.0,
    clutter_density: float = 0.15,
    width: int = 24,
    height: int = 18,
    objects: Sequence[int] | None = None,
) -> list[SceneInstance]:
    """``count`` reproducible scenes with random plants."""
    scenes = []
    for i in range(count):
        rng = np.random.default_rng([seed, i, 0x5C])
        plants = random_plants(db, n_plants, rng, width, height, objects)
        scenes.append(compose_scene(db, plants, clutter_density, epsilon, seed=int(rng.integers(2**63)),
                                    width=width, height=height))
    return scenes


def save_scene(scene: SceneInstance, path: str | Path) -> tuple[Path, Path]:
    """Scene grid as a one-record descriptor database plus a ``descriptorId x y`` sidecar."""
    from hashview.descriptor import binarize

    path = Path(path)
    desc = binarize(scene.grid)
    save_descriptor_set(DescriptorSet.from_descriptors([desc]), path)
    truth = path.with_suffix(".truth.txt")
    truth.write_text("".join(f"{p.descriptor_id} {p.x} {p.y}\n" for p in scene.plants))
    return path, truth


def load_scene(path: str | Path, db: ViewDatabase) -> SceneInstance:
    path = Path(path)
    grid_set = load_descriptor_set(path)
    if len(grid_set) != 1:
        raise InvariantViolation(f"{path}: a scene file holds exactly one grid")
    grid = grid_set[0].to_grid()
    plants = []
    truth = path.with_suffix(".truth.txt")
    if truth.exists():
        for line in truth.read_text().splitlines():
            if not line.strip():
                continue
            did, x, y = (int(v) for v in line.split())
            scale, row = db.locate(did)
            dset = db.clusters[scale]
            plants.append(
                Plant(did, x, y, scale, int(dset.object_ids[row]), int(dset.view_ids[row]),
                      tuple(float(v) for v in dset.poses[row]), dset.width, dset.height)
            )
    return SceneInstance(grid, plants)


def clusters_of(db: ViewDatabase | Mapping[int, DescriptorSet]) -> dict[int, DescriptorSet]:
    return db.clusters if isinstance(db, ViewDatabase) else dict(db)
