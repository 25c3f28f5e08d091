import csv
import json

import pytest

from switchkd import verify
from switchkd.cli import CSV_COLUMNS, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY, main, worker_count
from switchkd.config import Layout, cell_key, load_config
from switchkd.cli import UsageError
from switchkd.model import load_checkpoint

from conftest import tiny_run_config


def run(config, *args):
    return main(["--config", str(config), *args])


def layout_of(config) -> Layout:
    return Layout(load_config(config).out_dir)


@pytest.fixture
def trained(tiny_config):
    assert run(tiny_config, "gen-data") == EXIT_OK
    assert run(tiny_config, "train-teacher") == EXIT_OK
    return tiny_config


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return reader.fieldnames, list(reader)


# -- gen-data ------------------------------------------------------------------------------------
def test_gen_data_writes_two_files(tiny_config):
    assert run(tiny_config, "gen-data") == EXIT_OK
    files = sorted(p.name for p in layout_of(tiny_config).data_dir.iterdir())
    assert files == ["train.jsonl", "val.jsonl"]


def test_gen_data_is_repeatable(tiny_config):
    lay = layout_of(tiny_config)
    run(tiny_config, "gen-data")
    first = lay.train_path.read_bytes(), lay.val_path.read_bytes()
    run(tiny_config, "gen-data")
    assert (lay.train_path.read_bytes(), lay.val_path.read_bytes()) == first


def test_gen_data_also_writes_teacher_split(tmp_path):
    doc = tiny_run_config(tmp_path / "run", teacher_dataset={"n_train": 16, "n_val": 8, "seed": 1})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    assert run(path, "gen-data") == EXIT_OK
    assert (tmp_path / "run" / "teacher_data" / "train.jsonl").exists()


def test_invalid_task_names_the_field(tmp_path, capsys):
    doc = tiny_run_config(tmp_path / "run")
    doc["dataset"]["task"] = "count-all-the-things"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert run(path, "gen-data") == EXIT_USAGE
    assert "dataset.task" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("dataset:\n  n_train: 4\nlearning_rate: 0.1\n")
    assert run(path, "gen-data") == EXIT_USAGE
    assert "learning_rate" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert run(tmp_path / "nope.json", "gen-data") == EXIT_USAGE


def test_usage_errors_exit_one(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["no-such-command"]) == EXIT_USAGE


# -- train-teacher / eval ------------------------------------------------------------------------------
def test_missing_dataset_is_actionable(tiny_config, capsys):
    assert run(tiny_config, "train-teacher") == EXIT_RUNTIME
    err = capsys.readouterr().err
    assert "dataset not found" in err and "gen-data" in err


def test_teacher_checkpoint_reevaluates_identically(trained, capsys):
    lay = layout_of(trained)
    metrics = json.loads((lay.teacher_dir / "metrics.json").read_text())
    assert (lay.teacher_dir / "run_log.jsonl").exists()
    capsys.readouterr()
    assert run(trained, "eval", "--checkpoint", str(lay.teacher_checkpoint)) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["val_accuracy"] == metrics["val_accuracy"]
    assert report["agreement"] == 1.0


def test_eval_missing_checkpoint(trained, tmp_path, capsys):
    assert run(trained, "eval", "--checkpoint", str(tmp_path / "ghost")) == EXIT_RUNTIME
    assert "checkpoint not found" in capsys.readouterr().err


# -- distill --------------------------------------------------------------------------------------
def test_distill_requires_teacher(tiny_config, capsys):
    run(tiny_config, "gen-data")
    assert run(tiny_config, "distill") == EXIT_RUNTIME
    assert "train-teacher" in capsys.readouterr().err


def test_unknown_strategy_lists_valid_values(tiny_config, capsys):
    assert run(tiny_config, "distill", "--strategy", "kl-plus") == EXIT_USAGE
    err = capsys.readouterr().err
    for name in ("fkl", "rkl", "bild-fkl", "bild-rkl", "dbild-fkl", "dbild-rkl"):
        assert name in err


def test_switch_flag_controls_vsd_column(trained):
    lay = layout_of(trained)
    for flag, expect in (("--switch", True), ("--no-switch", False)):
        assert run(trained, "distill", "--strategy", "dbild-rkl", flag, "--scheme", "pt-dft",
                   "--seed", "0") == EXIT_OK
        cell = lay.distill_dir("PT-DFT", "dbild-rkl", expect, 0)
        records = [json.loads(line) for line in (cell / "run_log.jsonl").read_text().splitlines()]
        dft = [r for r in records if r["stage"] == "DFT"]
        assert dft and all(("L_VSD" in r) == expect for r in dft)
        header, rows = read_csv(cell / "summary.csv")
        assert header == CSV_COLUMNS
        assert (rows[0]["L_VSD"] != "") == expect
        assert (cell / "student_DFT.json").exists()


def test_incompatible_student_is_a_config_error(tmp_path, capsys):
    doc = tiny_run_config(tmp_path / "run")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    run(path, "gen-data")
    run(path, "train-teacher")
    doc["student"]["vision_dim"] = 6
    path.write_text(json.dumps(doc))
    assert run(path, "distill") == EXIT_USAGE
    assert "vision_dim" in capsys.readouterr().err


# -- ablate ----------------------------------------------------------------------------------------
def test_ablate_counts_rows_and_resumes(trained, capsys):
    lay = layout_of(trained)
    args = ["ablate", "--schemes", "PT-DFT", "--seeds", "0,1,2", "--workers", "1"]
    assert run(trained, *args) == EXIT_OK
    header, rows = read_csv(lay.ablate_dir / "results.csv")
    assert header == CSV_COLUMNS
    assert sum(r["row_type"] == "run" for r in rows) == 18
    assert sum(r["row_type"] == "mean" for r in rows) == 6
    assert all(r["n_seeds"] == "3" for r in rows if r["row_type"] == "mean")
    first = (lay.ablate_dir / "results.csv").read_bytes()

    # drop one finished cell, as if the sweep had been interrupted before it
    cells = lay.ablate_dir / "cells"
    victim = cells / f"{cell_key('PT-DFT', 'fkl', True, 1)}.json"
    victim.unlink()
    keep = cells / f"{cell_key('PT-DFT', 'rkl', True, 2)}.json"
    stamp = keep.stat().st_mtime_ns
    capsys.readouterr()
    assert run(trained, *args) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["reused"] == 17 and out["cells"] == 18
    assert keep.stat().st_mtime_ns == stamp
    assert (lay.ablate_dir / "results.csv").read_bytes() == first


def test_ablate_switch_axis(trained):
    lay = layout_of(trained)
    assert run(trained, "ablate", "--strategies", "dbild-rkl", "--switch", "both",
               "--seeds", "0,1", "--workers", "1") == EXIT_OK
    _, rows = read_csv(lay.ablate_dir / "results.csv")
    means = [r for r in rows if r["row_type"] == "mean"]
    assert sorted(r["switch"] for r in means) == ["0", "1"]


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("SWITCHKD_THREADS", "2")
    assert worker_count(8) == 2
    monkeypatch.setenv("SWITCHKD_THREADS", "many")
    with pytest.raises(UsageError):
        worker_count(4)


# -- verify ----------------------------------------------------------------------------------------
def test_verify_passes_and_reports(capsys):
    assert main(["verify", "--checks", "knee-oracle,dbild-invariants"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "count" in out and "max_err" in out
    assert out.count("PASS") == 2 and "FAIL" not in out


def test_verify_deterministic_given_seed(capsys):
    def table():
        main(["--seed", "5", "verify", "--checks", "dbild-oracle"])
        line = capsys.readouterr().out.splitlines()[-1]
        return line[:-16], line[-6:]   # drop the timing column
    assert table() == table()


def test_verify_failure_exits_three(monkeypatch, capsys):
    def failing(rng):
        res = verify.CheckResult("always-fails")
        res.record(False, 1.0)
        return res
    monkeypatch.setitem(verify.CHECKS, "knee-oracle", failing)
    assert main(["verify", "--checks", "knee-oracle"]) == EXIT_VERIFY
    assert "FAIL" in capsys.readouterr().out


def test_verify_unknown_check(capsys):
    assert main(["verify", "--checks", "everything"]) == EXIT_USAGE
