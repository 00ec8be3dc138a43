"""Online stage: sliding-window retrieval, scoring, selection and evaluation."""

from __future__ import annotations

import csv
import io
import time
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from hashview.config import derive_seed
from hashview.descriptor import DescriptorSet, encode_cells, fields_to_bits, spread_fields
from hashview.errors import InvalidInputError
from hashview.index import ScaleIndex, build_scale_index, retrieve_many
from hashview.keyselect import DEFAULT_TAU, ProximityConfig, Strategy, quat_proximal
from hashview.synth import (
    CELL_SIZE_PX,
    SceneInstance,
    ViewDatabase,
    enlarge_database,
    make_scenes,
    synthetic_database,
)

STRIDE_PX = CELL_SIZE_PX
THRESHOLD_STEP = 0.01
CSV_COLUMNS = (
    "strategy", "tables", "objects", "descriptors", "epsilon", "seed",
    "recall", "pose_recall", "matching_ratio", "retrieved_per_window", "wall_ms",
)
_EXHAUSTIVE_CHUNK = 4096


class CalibrationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DetectionResult:
    x: int
    y: int
    scale_cluster: int
    object_id: int
    view_id: int
    descriptor_id: int
    score: float
    candidates_retrieved: int
    pose: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    @property
    def position(self) -> tuple[int, int]:
        return self.x, self.y


@dataclass(frozen=True)
class RunMetrics:
    recall: float
    pose_recall: float
    matching_ratio: float
    retrieved_per_window: float
    wall_ms: float
    exhaustive_agreement: float = float("nan")
    retrieved_total: int = 0
    windows: int = 0

    def __post_init__(self):
        if not 0.0 <= self.matching_ratio <= 1.0:
            raise InvalidInputError(f"matching ratio {self.matching_ratio} outside [0, 1]")


# -----------------------------------------------------------------------------
# Windows
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneWindows:
    """Every lattice window of one size: positions plus raw and spread fields."""

    width: int
    height: int
    xs: np.ndarray
    ys: np.ndarray
    fields: np.ndarray
    spread: np.ndarray

    def __len__(self) -> int:
        return len(self.xs)


def scene_windows(scene: SceneInstance, width: int, height: int, spread_radius: int) -> SceneWindows:
    """Cut the scene into windows at every cell (stride T = one cell).

    Spreading is done per window so a noiseless plant reproduces its
    template's spread bits exactly.
    """
    if width > scene.width or height > scene.height:
        raise InvalidInputError(
            f"window {width}x{height} does not fit a {scene.width}x{scene.height} scene"
        )
    cells = encode_cells(scene.grid.cells)
    view = sliding_window_view(cells, (height, width))
    ny, nx = view.shape[:2]
    raw = np.ascontiguousarray(view.reshape(ny * nx, height * width))
    ys, xs = np.divmod(np.arange(ny * nx), nx)
    return SceneWindows(width, height, xs, ys, raw, spread_fields(raw, width, height, spread_radius))


class _WindowCache:
    """Per-scene memo so raw and spread windows are built once per window size."""

    def __init__(self, scene: SceneInstance):
        self.scene = scene
        self._cache: dict[tuple[int, int, int], SceneWindows] = {}

    def get(self, width: int, height: int, radius: int) -> SceneWindows:
        key = (width, height, radius)
        if key not in self._cache:
            self._cache[key] = scene_windows(self.scene, width, height, radius)
        return self._cache[key]


def _check_scene(scene: SceneInstance):
    if scene.cell_size != STRIDE_PX:
        raise InvalidInputError(f"scene cell size {scene.cell_size} differs from stride {STRIDE_PX}")


# -----------------------------------------------------------------------------
# Thresholds and selection
# -----------------------------------------------------------------------------


def _row_thresholds(store: DescriptorSet, thresholds: Mapping[int, float], default: float | None) -> np.ndarray:
    objects, inverse = np.unique(store.object_ids, return_inverse=True)
    per_object = np.empty(len(objects))
    for i, obj in enumerate(objects):
        value = thresholds.get(int(obj), default)
        if value is None:
            raise InvalidInputError(f"no threshold for object {int(obj)}")
        per_object[i] = value
    return per_object[inverse]


def _results(store: DescriptorSet, windows: SceneWindows, win, rows, scores, retrieved) -> list[DetectionResult]:
    out = []
    for w, r, s in zip(win.tolist(), rows.tolist(), scores.tolist()):
        out.append(
            DetectionResult(
                x=int(windows.xs[w]), y=int(windows.ys[w]), scale_cluster=store.scale_cluster,
                object_id=int(store.object_ids[r]), view_id=int(store.view_ids[r]),
                descriptor_id=int(store.ids[r]), score=float(s),
                candidates_retrieved=int(retrieved[w]),
                pose=tuple(float(v) for v in store.poses[r]),
            )
        )
    return out


def _sort_results(results: list[DetectionResult]) -> list[DetectionResult]:
    return sorted(results, key=lambda d: (-d.score, d.scale_cluster, d.y, d.x, d.descriptor_id))


def _best_per_window(win: np.ndarray, rows: np.ndarray, scores: np.ndarray):
    """Best score per window; ties go to the lowest row (lowest id)."""
    if len(win) == 0:
        return win, rows, scores
    order = np.lexsort((rows, -scores, win))
    win, rows, scores = win[order], rows[order], scores[order]
    first = np.ones(len(win), dtype=bool)
    first[1:] = win[1:] != win[:-1]
    return win[first], rows[first], scores[first]


# -----------------------------------------------------------------------------
# Detection
# -----------------------------------------------------------------------------


def _slide_one(windows: SceneWindows, index: ScaleIndex, thresholds, default):
    store = index.store
    n_windows = len(windows)
    if store is None or len(store) == 0 or index.k == 0:
        return [], np.zeros(n_windows, dtype=np.int64)
    win, ids = retrieve_many(index, windows.spread)
    retrieved = np.bincount(win, minlength=n_windows)
    if len(win) == 0:
        return [], retrieved
    rows = store.rows_of(ids)
    counts = np.count_nonzero(np.bitwise_and(windows.fields[win], store.fields[rows]), axis=1)
    scores = counts / store.foreground_counts[rows]
    keep = scores >= _row_thresholds(store, thresholds, default)[rows]
    best = _best_per_window(win[keep], rows[keep], scores[keep])
    return _results(store, windows, *best, retrieved), retrieved


def slide_and_detect(
    scene: SceneInstance,
    index: ScaleIndex,
    thresholds: Mapping[int, float],
    default_threshold: float | None = None,
    *,
    _cache: _WindowCache | None = None,
    _retrieved: list | None = None,
) -> list[DetectionResult]:
    """Retrieve, score and select at every lattice position of one scale.

    Keys are read from the window-spread scene, scores use the raw window
    against the unspread template.  Output is sorted by score descending.
    """
    _check_scene(scene)
    cache = _cache or _WindowCache(scene)
    windows = cache.get(index.width, index.height, index.spread_radius)
    results, retrieved = _slide_one(windows, index, thresholds, default_threshold)
    if _retrieved is not None:
        _retrieved.append(retrieved)
    return _sort_results(results)


def _one_hot(fields: np.ndarray) -> np.ndarray:
    return fields_to_bits(fields).astype(np.float32)


def exhaustive_scores(windows_fields: np.ndarray, store: DescriptorSet) -> np.ndarray:
    """``(windows, templates)`` matrix of AND scores by one-hot matrix products."""
    win = _one_hot(windows_fields)
    out = np.empty((len(win), len(store)), dtype=np.float64)
    for lo in range(0, len(store), _EXHAUSTIVE_CHUNK):
        hi = min(lo + _EXHAUSTIVE_CHUNK, len(store))
        counts = win @ _one_hot(store.fields[lo:hi]).T
        out[:, lo:hi] = np.rint(counts) / store.foreground_counts[lo:hi]
    return out


def _exhaustive_one(windows: SceneWindows, store: DescriptorSet, thresholds, default):
    if len(store) == 0:
        return []
    scores = exhaustive_scores(windows.fields, store)
    scores[scores < _row_thresholds(store, thresholds, default)[None, :]] = -1.0
    rows = np.argmax(scores, axis=1)  # first maximum is the lowest id
    best = scores[np.arange(len(rows)), rows]
    hit = best >= 0.0
    win = np.flatnonzero(hit)
    retrieved = np.full(len(windows), len(store), dtype=np.int64)
    return _results(store, windows, win, rows[hit], best[hit], retrieved)


def exhaustive_detect(
    scene: SceneInstance,
    database: ViewDatabase | Mapping[int, DescriptorSet],
    thresholds: Mapping[int, float],
    default_threshold: float | None = None,
    *,
    _cache: _WindowCache | None = None,
) -> list[DetectionResult]:
    """Score every template at every window of every scale cluster."""
    _check_scene(scene)
    cache = _cache or _WindowCache(scene)
    clusters = database.clusters if isinstance(database, ViewDatabase) else database
    results = []
    for dset in clusters.values():
        if dset.width > scene.width or dset.height > scene.height:
            continue
        windows = cache.get(dset.width, dset.height, 0)
        results += _exhaustive_one(windows, dset, thresholds, default_threshold)
    return _sort_results(results)


def detect(
    scene: SceneInstance,
    indexes: Mapping[int, ScaleIndex],
    thresholds: Mapping[int, float],
    default_threshold: float | None = None,
    *,
    _cache: _WindowCache | None = None,
    _retrieved: list | None = None,
) -> list[DetectionResult]:
    """:func:`slide_and_detect` over every scale index that fits the scene."""
    _check_scene(scene)
    cache = _cache or _WindowCache(scene)
    results = []
    for index in indexes.values():
        if index.width > scene.width or index.height > scene.height:
            continue
        results += slide_and_detect(scene, index, thresholds, default_threshold,
                                    _cache=cache, _retrieved=_retrieved)
    return _sort_results(results)


def build_indexes(
    db: ViewDatabase,
    strategy: Strategy | str,
    tables: int = 1,
    seed: int = 0,
    prox: ProximityConfig = ProximityConfig(),
) -> dict[int, ScaleIndex]:
    """One :class:`ScaleIndex` per scale cluster."""
    return {
        scale: build_scale_index(dset, strategy, tables, prox=prox, seed=derive_seed(seed, "index", scale))
        for scale, dset in db.clusters.items()
    }


# -----------------------------------------------------------------------------
# Metrics
# -----------------------------------------------------------------------------


def matching_ratio(retrieved_total: float, database_size: int, width_px: int, height_px: int,
                   stride_px: int = STRIDE_PX) -> float:
    """Retrieved templates over the cost of exhaustive matching, ``N * W * H / T^2``."""
    if stride_px <= 0:
        raise InvalidInputError("stride must be positive")
    denom = database_size * width_px * height_px / (stride_px * stride_px)
    if denom <= 0:
        raise InvalidInputError("matching ratio denominator must be positive")
    return retrieved_total / denom


def _plant_hits(scene: SceneInstance, detections: Sequence[DetectionResult], tau: float):
    """Per plant: (object found at its position, pose also within tau)."""
    at = {(d.scale_cluster, d.x, d.y): d for d in detections}
    found, posed = [], []
    for p in scene.plants:
        d = at.get((p.scale_cluster, p.x, p.y))
        ok = d is not None and d.object_id == p.object_id
        found.append(ok)
        posed.append(ok and bool(quat_proximal(np.asarray(d.pose), np.asarray(p.pose), tau)))
    return found, posed


def evaluate(
    db: ViewDatabase,
    indexes: Mapping[int, ScaleIndex],
    scenes: Iterable[SceneInstance],
    thresholds: Mapping[int, float],
    default_threshold: float | None = None,
    *,
    with_exhaustive: bool = False,
    tau: float = DEFAULT_TAU,
) -> RunMetrics:
    """Run the hashed pipeline over ``scenes`` and aggregate metrics.

    Wall time covers window extraction, retrieval, scoring and selection.
    """
    found_all, posed_all, agree = [], [], []
    retrieved_total, windows_total, ratio_terms = 0, 0, []
    elapsed = 0.0
    n_scenes = 0
    for scene in scenes:
        n_scenes += 1
        retrieved: list = []
        start = time.perf_counter()
        dets = detect(scene, indexes, thresholds, default_threshold, _retrieved=retrieved)
        elapsed += time.perf_counter() - start
        found, posed = _plant_hits(scene, dets, tau)
        found_all += found
        posed_all += posed
        r = sum(int(x.sum()) for x in retrieved)
        retrieved_total += r
        windows_total += sum(len(x) for x in retrieved)
        ratio_terms.append(matching_ratio(r, len(db), *scene.pixel_size, STRIDE_PX))
        if with_exhaustive:
            oracle, _ = _plant_hits(scene, exhaustive_detect(scene, db, thresholds, default_threshold), tau)
            agree += [h for h, o in zip(found, oracle) if o]
    return RunMetrics(
        recall=float(np.mean(found_all)) if found_all else 1.0,
        pose_recall=float(np.mean(posed_all)) if posed_all else 1.0,
        matching_ratio=min(float(np.mean(ratio_terms)), 1.0) if ratio_terms else 0.0,
        retrieved_per_window=retrieved_total / windows_total if windows_total else 0.0,
        wall_ms=1000.0 * elapsed / max(n_scenes, 1),
        exhaustive_agreement=(float(np.mean(agree)) if agree else 1.0) if with_exhaustive else float("nan"),
        retrieved_total=retrieved_total,
        windows=windows_total,
    )


def exhaustive_wall_ms(db: ViewDatabase, scenes: Iterable[SceneInstance], thresholds, default=None) -> float:
    """Mean per-scene time of the linear-scan control."""
    elapsed, n = 0.0, 0
    for scene in scenes:
        start = time.perf_counter()
        exhaustive_detect(scene, db, thresholds, default)
        elapsed += time.perf_counter() - start
        n += 1
    return 1000.0 * elapsed / max(n, 1)


# -----------------------------------------------------------------------------
# Calibration
# -----------------------------------------------------------------------------


@dataclass
class Calibration:
    thresholds: dict[int, float]
    flagged: list[int] = field(default_factory=list)
    samples: dict[int, int] = field(default_factory=dict)


def plant_scores(db: ViewDatabase, scenes: Iterable[SceneInstance]) -> dict[int, list[float]]:
    """Best same-object exhaustive score at each planted position, grouped by object."""
    out: dict[int, list[float]] = {}
    for scene in scenes:
        cache = _WindowCache(scene)
        for p in scene.plants:
            dset = db.clusters[p.scale_cluster]
            windows = cache.get(dset.width, dset.height, 0)
            w = int(np.flatnonzero((windows.xs == p.x) & (windows.ys == p.y))[0])
            rows = np.flatnonzero(dset.object_ids == p.object_id)
            scores = exhaustive_scores(windows.fields[w:w + 1], dset.take(rows))[0]
            out.setdefault(p.object_id, []).append(float(scores.max()))
    return out


def sweep_threshold(scores: Sequence[float], target_recall: float, step: float = THRESHOLD_STEP):
    """Highest multiple of ``step`` in [0, 1] whose recall reaches the target, else ``None``."""
    scores = np.asarray(scores, dtype=np.float64)
    n_steps = int(round(1.0 / step))
    for k in range(n_steps, -1, -1):
        t = k / n_steps
        recall = float(np.mean(scores >= t)) if len(scores) else 1.0
        if recall >= target_recall:
            return t
    return None


def calibrate_thresholds(
    db: ViewDatabase,
    scenes: Iterable[SceneInstance],
    target_recall: float = 0.98,
    step: float = THRESHOLD_STEP,
) -> Calibration:
    """Per object, the highest threshold on a ``step`` grid reaching ``target_recall``.

    Recall here counts a plant when its best same-object template at the
    planted position scores at least the threshold under exhaustive search.
    Objects never planted get the lowest calibrated threshold and are flagged.
    """
    if not 0.0 <= target_recall <= 1.0:
        raise InvalidInputError("target recall must lie in [0, 1]")
    per_object = plant_scores(db, scenes)
    cal = Calibration({}, [], {obj: len(v) for obj, v in per_object.items()})
    for obj, scores in sorted(per_object.items()):
        t = sweep_threshold(scores, target_recall, step)
        if t is None:
            warnings.warn(f"object {obj} cannot reach recall {target_recall}", CalibrationWarning, stacklevel=2)
            cal.flagged.append(obj)
            t = 0.0
        cal.thresholds[obj] = t
    missing = [obj for obj in db.object_ids if obj not in cal.thresholds]
    if missing:
        fallback = min(cal.thresholds.values()) if cal.thresholds else 0.0
        warnings.warn(f"{len(missing)} objects absent from calibration scenes", CalibrationWarning, stacklevel=2)
        for obj in missing:
            cal.thresholds[obj] = fallback
            cal.flagged.append(obj)
    return cal


# -----------------------------------------------------------------------------
# Experiments
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentRow:
    strategy: str
    tables: int
    objects: int
    descriptors: int
    epsilon: float
    seed: int
    metrics: RunMetrics
    exhaustive_ms: float = float("nan")

    def csv_values(self) -> list[str]:
        m = self.metrics
        return [
            self.strategy, str(self.tables), str(self.objects), str(self.descriptors),
            _g(self.epsilon), str(self.seed), _g(m.recall), _g(m.pose_recall),
            _g(m.matching_ratio), _g(m.retrieved_per_window), _g(m.wall_ms),
        ]


def _g(value: float) -> str:
    return f"{value:.6g}"


def rows_to_csv(rows: Iterable[ExperimentRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(row.csv_values())
    return buf.getvalue()


def calibrated_thresholds_for(db: ViewDatabase, epsilon: float, seed: int, scenes: int = 100,
                              target_recall: float = 0.98, n_plants: int = 4) -> dict[int, float]:
    """Quietly calibrate on a dedicated scene batch."""
    batch = make_scenes(db, scenes, derive_seed(seed, "calibration"), n_plants=n_plants, epsilon=epsilon)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CalibrationWarning)
        return calibrate_thresholds(db, batch, target_recall).thresholds


def run_experiment(
    db: ViewDatabase,
    strategy: Strategy | str,
    tables: int,
    scenes: Sequence[SceneInstance],
    thresholds: Mapping[int, float],
    seed: int,
    epsilon: float,
    objects: int | None = None,
    default_threshold: float | None = None,
    with_exhaustive: bool = False,
    exhaustive_timing: bool = False,
) -> ExperimentRow:
    strategy = Strategy.parse(strategy)
    indexes = build_indexes(db, strategy, tables, seed=seed)
    metrics = evaluate(db, indexes, scenes, thresholds, default_threshold, with_exhaustive=with_exhaustive)
    ex_ms = exhaustive_wall_ms(db, scenes, thresholds, default_threshold) if exhaustive_timing else float("nan")
    return ExperimentRow(
        strategy.value, tables, objects if objects is not None else len(db.object_ids),
        len(db), epsilon, seed, metrics, ex_ms,
    )


def database_of_size(base: ViewDatabase, size: int, seed: int) -> ViewDatabase:
    """Truncate ``base`` or enlarge it by per-cell sampling to exactly ``size`` descriptors."""
    if size <= len(base):
        return base.truncate(size)
    return enlarge_database(base, size - len(base), seed=seed)


def scaling_experiment(
    database_sizes: Sequence[int],
    strategy: Strategy | str = Strategy.TBV,
    seeds: Sequence[int] = (0,),
    *,
    base_objects: int = 1,
    views: int = 3115,
    tables: int = 1,
    epsilon: float = 0.1,
    n_scenes: int = 5,
    n_plants: int = 3,
    exhaustive_timing: bool = False,
    thresholds: Mapping[int, float] | None = None,
    default_threshold: float = 0.5,
) -> list[ExperimentRow]:
    """Grow the database past a base set and record metrics per size.

    The scene batch is fixed per seed and only plants the base objects, so
    every size is measured on identical inputs.
    """
    sizes = list(database_sizes)
    if sizes != sorted(sizes):
        raise InvalidInputError("database sizes must be ascending")
    rows = []
    for seed in seeds:
        base = synthetic_database(base_objects, views, seed=derive_seed(seed, "database"))
        scenes = make_scenes(base, n_scenes, derive_seed(seed, "scenes"), n_plants=n_plants, epsilon=epsilon)
        thr = dict(thresholds) if thresholds is not None else calibrated_thresholds_for(base, epsilon, seed)
        for size in sizes:
            db = database_of_size(base, size, derive_seed(seed, "enlarge", size))
            rows.append(
                run_experiment(db, strategy, tables, scenes, thr, seed, epsilon,
                               objects=len(db.object_ids), default_threshold=default_threshold,
                               exhaustive_timing=exhaustive_timing)
            )
    return rows


def growth_exponent(sizes: Sequence[float], times: Sequence[float]) -> float | None:
    """Least-squares slope of log(time) against log(size); ``None`` below two sizes."""
    sizes = np.asarray(sizes, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if len(np.unique(sizes)) < 2:
        return None
    if np.any(sizes <= 0) or np.any(times <= 0):
        raise InvalidInputError("sizes and times must be positive for a log-log fit")
    slope, _ = np.polyfit(np.log(sizes), np.log(times), 1)
    return float(slope)


__all__ = [
    "CSV_COLUMNS", "Calibration", "CalibrationWarning", "calibrated_thresholds_for", "DetectionResult", "ExperimentRow", "RunMetrics",
    "SceneWindows", "build_indexes", "calibrate_thresholds", "database_of_size", "detect", "evaluate",
    "exhaustive_detect", "exhaustive_scores", "exhaustive_wall_ms", "growth_exponent", "matching_ratio",
    "plant_scores", "rows_to_csv", "run_experiment", "scaling_experiment", "scene_windows",
    "slide_and_detect", "sweep_threshold",
]
