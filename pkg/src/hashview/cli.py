"""Experiment command line.

Exit codes: 0 success, 1 usage, 2 I/O, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import sys
import warnings
from pathlib import Path
from typing import Sequence

from hashview.config import ExperimentConfig, derive_seed
from hashview.errors import InvalidInputError, InvariantViolation
from hashview.index import ScaleIndex, bucket_stats, build_scale_index, load_index, save_index
from hashview.keyselect import KeySelectionWarning, Strategy, load_keys, save_keys
from hashview.pipeline import (
    CalibrationWarning,
    build_indexes,
    calibrate_thresholds,
    calibrated_thresholds_for,
    detect,
    evaluate,
    growth_exponent,
    rows_to_csv,
    run_experiment,
    scaling_experiment,
)
from hashview.synth import ViewDatabase, load_scene, make_scenes, save_scene, synthetic_database

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INVARIANT = 0, 1, 2, 3
DB_DIR = "database"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key=value config file; flags override it")
    p.add_argument("--seed", type=int, metavar="U64")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--strategy", type=str.lower, choices=[s.value for s in Strategy])
    p.add_argument("--tables", type=int, metavar="K")
    p.add_argument("--objects", type=int, metavar="M")
    p.add_argument("--views", type=int, metavar="N")
    p.add_argument("--epsilon", type=float, metavar="F")
    p.add_argument("--scenes", type=int, metavar="COUNT", help="scene batch size")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hashview", description="Hash-key learning for view-descriptor retrieval.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="synthetic database, keys and index")
    _common(p)

    p = sub.add_parser("learn-keys", help="learn keys for an existing database")
    _common(p)
    p.add_argument("--db", metavar="DIR", help="database directory (default OUT/database)")

    p = sub.add_parser("build-index", help="fill tables from a database and optional key files")
    _common(p)
    p.add_argument("--db", metavar="DIR")
    p.add_argument("--keys", metavar="DIR", help="directory holding keys_s<scale>.txt")

    p = sub.add_parser("detect", help="run the hashed pipeline on scenes")
    _common(p)
    p.add_argument("--db", metavar="DIR")
    p.add_argument("--index", metavar="DIR", help="directory holding index_s<scale>.bin")
    p.add_argument("--scene", metavar="PATH", action="append", help="scene file; repeatable")
    p.add_argument("--thresholds", metavar="PATH")

    p = sub.add_parser("calibrate", help="per-object thresholds under exhaustive search")
    _common(p)
    p.add_argument("--db", metavar="DIR")
    p.add_argument("--target-recall", type=float)

    p = sub.add_parser("compare", help="CSV over strategies, object counts and seeds")
    _common(p)
    p.add_argument("--sizes", metavar="LIST", help="object counts, comma separated")
    p.add_argument("--seeds", metavar="LIST")
    p.add_argument("--strategies", metavar="LIST")

    p = sub.add_parser("scaling", help="wall time against database size")
    _common(p)
    p.add_argument("--sizes", metavar="LIST", help="descriptor counts, ascending")
    p.add_argument("--seeds", metavar="LIST")
    p.add_argument("--exhaustive", action="store_true", help="also time the linear-scan control")

    p = sub.add_parser("bucket-stats", help="print per-table bucket statistics")
    _common(p)
    p.add_argument("--index", metavar="DIR")
    return parser


def _config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {
        "seed": args.seed, "out": args.out, "strategy": args.strategy, "tables": args.tables,
        "objects": args.objects, "views": args.views, "epsilon": args.epsilon,
    }
    for name, key, conv in (
        ("sizes", "database_sizes", ExperimentConfig._convert),
        ("seeds", "seeds", ExperimentConfig._convert),
        ("strategies", "strategies", ExperimentConfig._convert),
        ("scenes", "scenes", None),
        ("target_recall", "target_recall", None),
    ):
        value = getattr(args, name, None)
        if value is not None:
            overrides[key] = conv(key, value) if conv else value
    if getattr(args, "exhaustive", False):
        overrides["exhaustive"] = True
    if args.config:
        return ExperimentConfig.from_file(args.config, **overrides)
    return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})


def _out(cfg: ExperimentConfig, command: str) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from exc
    cfg.echo(out, f"config_{command.replace('-', '_')}.txt")
    return out


def _db_dir(args, out: Path) -> Path:
    return Path(args.db) if getattr(args, "db", None) else out / DB_DIR


def _load_db(path: Path) -> ViewDatabase:
    try:
        return ViewDatabase.load(path)
    except FileNotFoundError as exc:
        raise OSError(f"no database at {path}: {exc}") from exc


def _print_stats(index: ScaleIndex) -> None:
    for t, table in enumerate(index.tables):
        st = bucket_stats(table)
        print(
            f"scale={index.scale_cluster} table={t} strategy={table.key.strategy.value} b={table.b} "
            f"used={st.used_buckets}/{st.n_buckets} max={st.max_bucket_size} "
            f"stddev={st.stddev_nonempty:.6g} zero_bucket={st.zero_bucket_size}"
        )


def _learn_and_save(db: ViewDatabase, cfg: ExperimentConfig, out: Path) -> dict[int, ScaleIndex]:
    indexes = build_indexes(db, cfg.strategy, cfg.tables, seed=derive_seed(cfg.seed, "keys"))
    for scale, index in indexes.items():
        save_keys([t.key for t in index.tables], out / f"keys_s{scale}.txt")
    return indexes


def _save_indexes(indexes: dict[int, ScaleIndex], out: Path) -> None:
    for scale, index in indexes.items():
        save_index(index, out / f"index_s{scale}.bin")
        _print_stats(index)


def _load_indexes(db: ViewDatabase, directory: Path) -> dict[int, ScaleIndex]:
    indexes = {}
    for scale, dset in db.clusters.items():
        path = directory / f"index_s{scale}.bin"
        if not path.exists():
            raise OSError(f"missing index file {path}")
        indexes[scale] = load_index(path, dset)
    return indexes


def _save_thresholds(thresholds: dict[int, float], flagged: Sequence[int], path: Path) -> None:
    lines = [f"{obj} {thr:.2f}{' flagged' if obj in flagged else ''}" for obj, thr in sorted(thresholds.items())]
    path.write_text("\n".join(lines) + "\n")


def _load_thresholds(path: Path) -> dict[int, float]:
    out = {}
    for line in path.read_text().splitlines():
        parts = line.split()
        if parts:
            try:
                out[int(parts[0])] = float(parts[1])
            except (IndexError, ValueError):
                raise InvariantViolation(f"{path}: malformed threshold line {line!r}") from None
    return out


# -----------------------------------------------------------------------------
# Commands
# -----------------------------------------------------------------------------


def cmd_generate(args, cfg: ExperimentConfig) -> int:
    out = _out(cfg, "generate")
    db = synthetic_database(cfg.objects, cfg.views, seed=derive_seed(cfg.seed, "database"),
                            fg_density=cfg.fg_density, view_coherence=cfg.coherence)
    db.save(out / DB_DIR)
    _save_indexes(_learn_and_save(db, cfg, out), out)
    print(f"descriptors={len(db)} objects={cfg.objects} out={out}")
    return EXIT_OK


def cmd_learn_keys(args, cfg: ExperimentConfig) -> int:
    out = _out(cfg, "learn-keys")
    db = _load_db(_db_dir(args, out))
    for scale, index in _learn_and_save(db, cfg, out).items():
        for t, table in enumerate(index.tables):
            print(f"scale={scale} table={t} {table.key.to_line()}")
    return EXIT_OK


def cmd_build_index(args, cfg: ExperimentConfig) -> int:
    out = _out(cfg, "build-index")
    db = _load_db(_db_dir(args, out))
    keys_dir = Path(args.keys) if args.keys else out
    indexes = {}
    for scale, dset in db.clusters.items():
        key_file = keys_dir / f"keys_s{scale}.txt"
        seed = derive_seed(derive_seed(cfg.seed, "keys"), "index", scale)
        if key_file.exists():
            keys = load_keys(key_file)
            indexes[scale] = build_scale_index(dset, cfg.strategy, len(keys), seed=seed, keys=keys)
        else:
            indexes[scale] = build_scale_index(dset, cfg.strategy, cfg.tables, seed=seed)
    _save_indexes(indexes, out)
    return EXIT_OK


def cmd_calibrate(args, cfg: ExperimentConfig) -> int:
    out = _out(cfg, "calibrate")
    db = _load_db(_db_dir(args, out))
    scenes = make_scenes(db, cfg.scenes, derive_seed(cfg.seed, "calibration"), cfg.plants, cfg.epsilon, cfg.clutter)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", CalibrationWarning)
        cal = calibrate_thresholds(db, scenes, cfg.target_recall)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    _save_thresholds(cal.thresholds, cal.flagged, out / "thresholds.txt")
    for obj, thr in sorted(cal.thresholds.items()):
        print(f"object={obj} threshold={thr:.2f} samples={cal.samples.get(obj, 0)}"
              f"{' flagged' if obj in cal.flagged else ''}")
    return EXIT_OK


def cmd_detect(args, cfg: ExperimentConfig) -> int:
    out = _out(cfg, "detect")
    db = _load_db(_db_dir(args, out))
    indexes = _load_indexes(db, Path(args.index) if args.index else out)
    if args.thresholds:
        thresholds = _load_thresholds(Path(args.thresholds))
    else:
        thresholds = calibrated_thresholds_for(db, cfg.epsilon, cfg.seed)
        _save_thresholds(thresholds, [], out / "thresholds.txt")
    if args.scene:
        scenes = [load_scene(path, db) for path in args.scene]
    else:
        scenes = make_scenes(db, cfg.scenes, derive_seed(cfg.seed, "scenes"), cfg.plants, cfg.epsilon, cfg.clutter)
        scene_dir = out / "scenes"
        scene_dir.mkdir(exist_ok=True)
        for i, scene in enumerate(scenes):
            save_scene(scene, scene_dir / f"scene_{i:04d}.bin")
    with open(out / "detections.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scene", "x", "y", "scale", "object_id", "view_id", "descriptor_id",
                         "score", "candidates_retrieved"])
        for i, scene in enumerate(scenes):
            for d in detect(scene, indexes, thresholds, 1.0):
                writer.writerow([i, d.x, d.y, d.scale_cluster, d.object_id, d.view_id, d.descriptor_id,
                                 f"{d.score:.6g}", d.candidates_retrieved])
    m = evaluate(db, indexes, scenes, thresholds, 1.0)
    print(f"scenes={len(scenes)} recall={m.recall:.6g} pose_recall={m.pose_recall:.6g} "
          f"matching_ratio={m.matching_ratio:.6g} retrieved_per_window={m.retrieved_per_window:.6g} "
          f"wall_ms={m.wall_ms:.6g}")
    return EXIT_OK


def cmd_compare(args, cfg: ExperimentConfig) -> int:
    out = _out(cfg, "compare")
    sizes = cfg.database_sizes or (cfg.objects,)
    rows = []
    for seed in cfg.seeds:
        full = synthetic_database(max(sizes), cfg.views, seed=derive_seed(seed, "database"),
                                  fg_density=cfg.fg_density, view_coherence=cfg.coherence)
        for size in sizes:
            db = full.restrict_objects(range(size))
            scenes = make_scenes(db, cfg.scenes, derive_seed(seed, "scenes", size), cfg.plants,
                                 cfg.epsilon, cfg.clutter)
            thresholds = calibrated_thresholds_for(db, cfg.epsilon, derive_seed(seed, "calibration", size))
            for name in cfg.strategies:
                rows.append(run_experiment(db, name, cfg.tables, scenes, thresholds, seed, cfg.epsilon,
                                           objects=size))
    text = rows_to_csv(rows)
    (out / "compare.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_scaling(args, cfg: ExperimentConfig) -> int:
    out = _out(cfg, "scaling")
    sizes = cfg.database_sizes or (len(synthetic_database(1, cfg.views)),)
    rows = scaling_experiment(sizes, cfg.strategy, cfg.seeds, views=cfg.views, tables=cfg.tables,
                              epsilon=cfg.epsilon, n_scenes=cfg.scenes, n_plants=cfg.plants,
                              exhaustive_timing=cfg.exhaustive)
    text = rows_to_csv(rows)
    (out / "scaling.csv").write_text(text)
    sys.stdout.write(text)
    exponent = growth_exponent([r.descriptors for r in rows], [r.metrics.wall_ms for r in rows])
    summary = [f"exponent {cfg.strategy}: {'n/a' if exponent is None else f'{exponent:.4f}'}"]
    if cfg.exhaustive:
        control = growth_exponent([r.descriptors for r in rows], [r.exhaustive_ms for r in rows])
        summary.append(f"exponent exhaustive: {'n/a' if control is None else f'{control:.4f}'}")
    (out / "scaling_summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return EXIT_OK


def cmd_bucket_stats(args, cfg: ExperimentConfig) -> int:
    directory = Path(args.index) if args.index else Path(cfg.out)
    files = sorted(directory.glob("index_s*.bin"))
    if not files:
        raise OSError(f"no index files in {directory}")
    for path in files:
        _print_stats(load_index(path))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "learn-keys": cmd_learn_keys,
    "build-index": cmd_build_index,
    "detect": cmd_detect,
    "calibrate": cmd_calibrate,
    "compare": cmd_compare,
    "scaling": cmd_scaling,
    "bucket-stats": cmd_bucket_stats,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config(args)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", KeySelectionWarning)
            return COMMANDS[args.command](args, cfg)
    except InvalidInputError as exc:
        print(f"hashview: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolation as exc:
        print(f"hashview: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"hashview: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
