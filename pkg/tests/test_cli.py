"""End-to-end command tests driven through gridfree.cli.main()."""

import json
from pathlib import Path

import pytest

from gridfree.cli import main

GOLDEN = Path(__file__).parent / "golden"

# Small enough to train inside the test budget, large enough that every
# command has real work to do.
TINY_CONFIG = """\
n_sensors = 8
batch_size = 16
n_batches = 5
n_epochs = 2
seed = 11
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> preprocess -> train, shared by the command tests below."""
    ws = tmp_path_factory.mktemp("cli_ws")
    cfg = ws / "tiny.txt"
    cfg.write_text(TINY_CONFIG)
    data, prep, model = ws / "data", ws / "prep", ws / "model"
    assert main(["synth", "--out", str(data), "--sites", "30",
                 "--days", "25", "--sources", "2", "--noise", "0.3",
                 "--config", str(cfg)]) == 0
    assert main(["preprocess", "--in", str(data), "--out", str(prep),
                 "--config", str(cfg)]) == 0
    assert main(["train", "--data", str(prep), "--out", str(model)]) == 0
    return {"ws": ws, "config": cfg, "data": data, "prep": prep,
            "model": model}


HELP_CASES = [
    ("main", ["--help"]),
    ("synth", ["synth", "--help"]),
    ("preprocess", ["preprocess", "--help"]),
    ("train", ["train", "--help"]),
    ("predict", ["predict", "--help"]),
    ("uq", ["uq", "--help"]),
    ("evaluate", ["evaluate", "--help"]),
    ("loso", ["loso", "--help"]),
]


class TestHelp:
    @pytest.mark.parametrize("name,argv", HELP_CASES,
                             ids=[c[0] for c in HELP_CASES])
    def test_help_matches_golden(self, name, argv, capsys, monkeypatch):
        monkeypatch.setenv("COLUMNS", "80")
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert out == (GOLDEN / f"help_{name}.txt").read_text()


class TestUsageErrors:
    def test_no_command(self, capsys):
        assert main([]) == 1
        assert "command is required" in capsys.readouterr().err

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_unknown_flag(self):
        assert main(["synth", "--frobnicate", "1"]) == 1

    def test_missing_required_flag(self):
        assert main(["synth"]) == 1

    def test_bad_domain(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "d"),
                     "--domain", "1,2,3"]) == 1

    def test_bad_thread_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GRIDFREE_THREADS", "lots")
        assert main(["synth", "--out", str(tmp_path / "d")]) == 1

    def test_bad_config_file(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("not_a_key = 3\n")
        assert main(["synth", "--out", str(tmp_path / "d"),
                     "--config", str(bad)]) == 1


class TestDataErrors:
    def test_missing_model_file(self, workspace, tmp_path):
        assert main(["predict", "--model", str(tmp_path / "nope.json"),
                     "--data", str(workspace["prep"]),
                     "--query", "40,-110,2019-01-10"]) == 2

    def test_missing_data_dir(self, workspace, tmp_path):
        assert main(["predict", "--model", str(workspace["model"]),
                     "--data", str(tmp_path / "nope"),
                     "--query", "40,-110,2019-01-10"]) == 2

    def test_config_flag_model_mismatch(self, workspace, tmp_path):
        other = tmp_path / "other.txt"
        other.write_text(TINY_CONFIG.replace("n_sensors = 8",
                                             "n_sensors = 6"))
        assert main(["predict", "--model", str(workspace["model"]),
                     "--data", str(workspace["prep"]),
                     "--config", str(other),
                     "--query", "40,-110,2019-01-10"]) == 1

    def test_model_data_hash_mismatch(self, workspace, tmp_path):
        other = tmp_path / "other.txt"
        other.write_text(TINY_CONFIG.replace("n_sensors = 8",
                                             "n_sensors = 6"))
        prep2 = tmp_path / "prep2"
        assert main(["preprocess", "--in", str(workspace["data"]),
                     "--out", str(prep2), "--config", str(other)]) == 0
        assert main(["predict", "--model", str(workspace["model"]),
                     "--data", str(prep2),
                     "--query", "40,-110,2019-01-10"]) == 2

    def test_bad_query_date(self, workspace):
        assert main(["predict", "--model", str(workspace["model"]),
                     "--data", str(workspace["prep"]),
                     "--query", "40,-110,junk"]) == 2

    def test_bad_query_arity(self, workspace):
        assert main(["predict", "--model", str(workspace["model"]),
                     "--data", str(workspace["prep"]),
                     "--query", "40,-110"]) == 1

    def test_no_query_points(self, workspace):
        assert main(["predict", "--model", str(workspace["model"]),
                     "--data", str(workspace["prep"])]) == 1

    def test_query_file_bad_header(self, workspace, tmp_path):
        qf = tmp_path / "q.csv"
        qf.write_text("latitude,longitude,when\n40,-110,2019-01-10\n")
        assert main(["predict", "--model", str(workspace["model"]),
                     "--data", str(workspace["prep"]),
                     "--query-file", str(qf)]) == 2


class TestSynthOutputs:
    def test_files_written(self, workspace):
        data = workspace["data"]
        assert (data / "stations.csv").exists()
        assert (data / "field_spec.json").exists()
        assert (data / "config.txt").exists()

    def test_station_csv_reingestable(self, workspace):
        text = (workspace["data"] / "stations.csv").read_text()
        assert text.startswith("#")        # provenance comments
        assert "site_id" in text


class TestPreprocessOutputs:
    def test_files_written(self, workspace):
        prep = workspace["prep"]
        for name in ("records.csv", "scalers.json", "split.json",
                     "config.txt", "report.json"):
            assert (prep / name).exists(), name

    def test_split_is_disjoint(self, workspace):
        doc = json.loads((workspace["prep"] / "split.json").read_text())
        train, val, test = (set(doc[k]) for k in ("train", "val", "test"))
        assert not (train & val) and not (train & test) and not (val & test)
        assert len(train) > len(val) > 0 and len(test) > 0

    def test_report_counts(self, workspace):
        doc = json.loads((workspace["prep"] / "report.json").read_text())
        assert doc["records_out"] > 0
        assert doc["rows_read"] >= doc["records_out"]


class TestTrainOutputs:
    def test_files_written(self, workspace):
        model = workspace["model"]
        for name in ("model.json", "checkpoint.json", "training_log.csv",
                     "config.txt"):
            assert (model / name).exists(), name

    def test_log_has_epoch_rows(self, workspace):
        lines = (workspace["model"] / "training_log.csv").read_text()
        lines = lines.strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,wall_seconds"
        assert len(lines) == 3     # header + 2 epochs

    def test_config_round_trip(self, workspace):
        a = (workspace["model"] / "config.txt").read_text()
        b = (workspace["prep"] / "config.txt").read_text()
        assert a == b


class TestPredict:
    def test_single_query(self, workspace, capsys):
        assert main(["predict", "--model", str(workspace["model"]),
                     "--data", str(workspace["prep"]),
                     "--query", "40,-110,2019-01-10"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "lat,lon,date,pm25"
        assert len(lines) == 2
        lat, lon, date, pm25 = lines[1].split(",")
        assert (float(lat), float(lon)) == (40.0, -110.0)
        assert date == "2019-01-10"
        assert float(pm25) > 0.0

    def test_query_file(self, workspace, tmp_path, capsys):
        qf = tmp_path / "q.csv"
        qf.write_text("lat,lon,date\n40,-110,2019-01-10\n"
                      "41,-109,2019-01-20\n")
        assert main(["predict", "--model", str(workspace["model"]),
                     "--data", str(workspace["prep"]),
                     "--query-file", str(qf)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3

    def test_repeated_run_is_byte_identical(self, workspace, capsys):
        argv = ["predict", "--model", str(workspace["model"]),
                "--data", str(workspace["prep"]),
                "--query", "40.3,-109.7,2019-01-12"]
        assert main(argv) == 0
        first = capsys.readouterr().out
        assert main(argv) == 0
        assert capsys.readouterr().out == first

    def test_seed_changes_output(self, workspace, capsys):
        base = ["predict", "--model", str(workspace["model"]),
                "--data", str(workspace["prep"]),
                "--query", "40.3,-109.7,2019-01-12"]
        assert main(base) == 0
        first = capsys.readouterr().out
        assert main(base + ["--seed", "999"]) == 0
        assert capsys.readouterr().out != first


class TestUq:
    def test_table(self, workspace, capsys):
        assert main(["uq", "--model", str(workspace["model"]),
                     "--data", str(workspace["prep"]),
                     "--query", "40,-110,2019-01-10",
                     "--query", "41,-109,2019-01-20",
                     "--m", "4"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].startswith("lat,lon,date")
        assert len(lines) == 3

    def test_m_below_two_rejected(self, workspace):
        assert main(["uq", "--model", str(workspace["model"]),
                     "--data", str(workspace["prep"]),
                     "--query", "40,-110,2019-01-10", "--m", "1"]) == 1


class TestEvaluate:
    def test_reports_written(self, workspace, tmp_path, capsys):
        out = tmp_path / "eval"
        assert main(["evaluate", "--model", str(workspace["model"]),
                     "--data", str(workspace["prep"]),
                     "--split", "test", "--m", "4",
                     "--range", "0,35", "--out", str(out)]) == 0
        for name in ("summary.json", "parity.csv", "seasonal.csv",
                     "uq.csv"):
            assert (out / name).exists(), name
        doc = json.loads((out / "summary.json").read_text())
        split_doc = doc["test"]
        assert "mae" in split_doc["all"] and split_doc["all"]["n"] > 0
        assert "range" in split_doc
        line = capsys.readouterr().out.strip().splitlines()[-1]
        assert "mae" in line.lower()

    def test_bad_range_rejected(self, workspace, tmp_path):
        assert main(["evaluate", "--model", str(workspace["model"]),
                     "--data", str(workspace["prep"]),
                     "--out", str(tmp_path / "e"),
                     "--range", "garbage"]) == 1


class TestLoso:
    def test_end_to_end(self, workspace, tmp_path):
        out = tmp_path / "loso"
        rc = main(["loso", "--in", str(workspace["data"]),
                   "--out", str(out), "--config", str(workspace["config"]),
                   "--region", "bbox:west:38,42,-112,-110"])
        assert rc == 0
        doc = json.loads((out / "summary.json").read_text())
        assert doc["region"] == "west"
        assert doc["n_inside"] > 0 and doc["n_outside"] > 0
        assert doc["exclusion_checks"] > 0
        assert "mae" in doc["inside"] and doc["inside"]["n"] > 0

    def test_region_without_records_rejected(self, workspace, tmp_path):
        rc = main(["loso", "--in", str(workspace["data"]),
                   "--out", str(tmp_path / "l"),
                   "--config", str(workspace["config"]),
                   "--region", "bbox:empty:0,1,0,1"])
        assert rc == 2
