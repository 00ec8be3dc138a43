import re

import pytest

from hashview.cli import main
from hashview.config import ExperimentConfig, derive_seed
from hashview.errors import InvalidInputError
from hashview.index import load_index


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_generate_smoke(tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "generate", "--objects", 1, "--views", 64, "--strategy", "tbs", "--out", out)
    assert code == 0
    dbs = sorted((out / "database").glob("descriptors_s*.bin"))
    keys = sorted(out.glob("keys_s*.txt"))
    indexes = sorted(out.glob("index_s*.bin"))
    # one file of each kind per scale cluster
    assert len(dbs) >= 1 and len(dbs) == len(keys) == len(indexes)
    assert "used=" in stdout and "strategy=tbs" in stdout
    assert (out / "config_generate.txt").exists()


def test_generate_rejects_strategy(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--strategy", "xyz", "--out", str(tmp_path)])
    assert exc.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_bad_config_value_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("epsilon=0.7\n")
    code, _, err = run(capsys, "generate", "--config", cfg, "--out", tmp_path / "o")
    assert code == 1 and "epsilon" in err


def test_unwritable_output_is_io_error(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "generate", "--views", 64, "--objects", 1, "--out", blocker / "sub")
    assert code == 2
    assert str(blocker / "sub") in err


def test_missing_database_is_io_error(tmp_path, capsys):
    code, _, err = run(capsys, "learn-keys", "--out", tmp_path)
    assert code == 2 and "database" in err


def test_corrupt_index_is_invariant_violation(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(capsys, "generate", "--objects", 1, "--views", 64, "--out", out)[0] == 0
    path = next(out.glob("index_s*.bin"))
    path.write_bytes(path.read_bytes()[:-5])
    code, _, err = run(capsys, "bucket-stats", "--index", out)
    assert code == 3 and "invariant" in err


def test_rbs_on_sparse_data_uses_few_buckets(tmp_path, capsys):
    cfg = tmp_path / "sparse.txt"
    cfg.write_text("fg_density=0.2\nobjects=3\nviews=640\n")
    code, stdout, _ = run(capsys, "generate", "--config", cfg, "--strategy", "rbs", "--out", tmp_path / "o")
    assert code == 0
    for used, total in re.findall(r"used=(\d+)/(\d+)", stdout):
        assert int(used) <= int(total) // 4


def test_key_files_rebuild_identical_index(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(capsys, "generate", "--objects", 2, "--views", 64, "--tables", 2, "--out", out)[0] == 0
    again = tmp_path / "again"
    code, _, _ = run(capsys, "build-index", "--db", out / "database", "--keys", out, "--out", again)
    assert code == 0
    for path in out.glob("index_s*.bin"):
        assert (again / path.name).read_bytes() == path.read_bytes()


def test_learn_keys_does_not_touch_inputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(capsys, "generate", "--objects", 1, "--views", 64, "--out", out)[0] == 0
    before = {p: p.read_bytes() for p in (out / "database").iterdir()}
    code, stdout, _ = run(capsys, "learn-keys", "--db", out / "database", "--out", tmp_path / "k")
    assert code == 0 and "table=0" in stdout
    assert {p: p.read_bytes() for p in (out / "database").iterdir()} == before


def test_calibrate_then_detect(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(capsys, "generate", "--objects", 2, "--views", 64, "--out", out)[0] == 0
    code, stdout, _ = run(capsys, "calibrate", "--out", out, "--scenes", 30, "--epsilon", 0.0)
    assert code == 0
    lines = (out / "thresholds.txt").read_text().splitlines()
    assert [l.split()[:2] for l in lines] == [["0", "1.00"], ["1", "1.00"]]
    code, stdout, _ = run(capsys, "detect", "--out", out, "--scenes", 3, "--epsilon", 0.0,
                          "--thresholds", out / "thresholds.txt")
    assert code == 0 and "recall=" in stdout
    rows = (out / "detections.csv").read_text().splitlines()
    assert rows[0].startswith("scene,x,y")
    scenes = sorted((out / "scenes").glob("scene_*.bin"))
    assert len(scenes) == 3
    code, stdout2, _ = run(capsys, "detect", "--out", tmp_path / "d2", "--db", out / "database", "--index", out,
                           "--scene", scenes[0], "--thresholds", out / "thresholds.txt")
    assert code == 0 and "scenes=1" in stdout2


def test_compare_rows_and_determinism(tmp_path, capsys):
    args = ["compare", "--views", 64, "--sizes", "1,3,5", "--seeds", "0,1", "--scenes", 2, "--epsilon", 0.1]
    assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    text = (tmp_path / "a" / "compare.csv").read_text()
    assert len(text.splitlines()) == 1 + 4 * 3 * 2

    def stable(csv_text):
        # wall time is a measurement, everything else is reproducible
        return [line.rsplit(",", 1)[0] for line in csv_text.splitlines()]

    assert stable(text) == stable((tmp_path / "b" / "compare.csv").read_text())


def test_scaling_single_size_is_na(tmp_path, capsys):
    out = tmp_path / "s"
    code, stdout, _ = run(capsys, "scaling", "--views", 64, "--sizes", "64", "--scenes", 2, "--out", out)
    assert code == 0
    assert "n/a" in (out / "scaling_summary.txt").read_text()
    assert len((out / "scaling.csv").read_text().splitlines()) == 2


def test_scaling_exhaustive_summary(tmp_path, capsys):
    out = tmp_path / "s"
    code, _, _ = run(capsys, "scaling", "--views", 64, "--sizes", "64,256", "--scenes", 2, "--exhaustive", "--out", out)
    assert code == 0
    summary = (out / "scaling_summary.txt").read_text()
    assert "exponent tbv:" in summary and "exponent exhaustive:" in summary


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("# experiment\nstrategy = pbs\ntables=2\nobjects=1\nviews=64\nseed=5\n")
    out = tmp_path / "o"
    assert run(capsys, "generate", "--config", cfg, "--tables", 1, "--out", out)[0] == 0
    echoed = ExperimentConfig.parse_text((out / "config_generate.txt").read_text())
    assert echoed["strategy"] == "pbs" and echoed["tables"] == 1 and echoed["seed"] == 5
    # the echo alone reproduces the run
    again = tmp_path / "again"
    assert run(capsys, "generate", "--config", out / "config_generate.txt", "--out", again)[0] == 0
    for path in out.glob("index_s*.bin"):
        assert (again / path.name).read_bytes() == path.read_bytes()


def test_config_validation():
    with pytest.raises(InvalidInputError):
        ExperimentConfig(database_sizes=(10, 5))
    with pytest.raises(InvalidInputError):
        ExperimentConfig(tables=0)
    with pytest.raises(InvalidInputError):
        ExperimentConfig.parse_text("nonsense=1")
    with pytest.raises(InvalidInputError):
        ExperimentConfig.parse_text("tables")
    cfg = ExperimentConfig(seeds=(1, 2), exhaustive=True)
    assert ExperimentConfig(**ExperimentConfig.parse_text(cfg.to_text())) == cfg


def test_seed_derivation():
    assert derive_seed(0, "keys") == derive_seed(0, "keys")
    assert len({derive_seed(0, "keys"), derive_seed(1, "keys"), derive_seed(0, "index"), derive_seed(0, "keys", 1)}) == 4
    assert 0 <= derive_seed(2**64 - 1, "x", 7) < 2**63
