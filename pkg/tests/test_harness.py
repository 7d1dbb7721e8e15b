import csv
import json
import math
from pathlib import Path

import pytest

from splitlora.harness import (
    CSV_COLUMNS,
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    format_epsilon,
    main,
    parse_config,
    run_grid,
    serialize_config,
    summarize,
    summarize_dir,
)

TINY = {
    "devices": 2,
    "rounds": 2,
    "epsilon_grid": [3.0],
    "model": {"d_x": 6, "width": 8, "layers": 1, "rank": 2, "classes": 3},
    "data": {"n": 40, "fraction": 0.5, "margin": 2.0},
    "modes": ["both"],
}


def _write(tmp_path, obj, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


class TestParseConfig:
    def test_empty_object_gives_defaults(self, tmp_path):
        cfg = parse_config(_write(tmp_path, {}))
        assert cfg == ExperimentConfig()
        assert cfg.devices == 15 and cfg.rounds == 30
        assert cfg.epsilon_grid == (3.0, 5.0, 10.0, 100.0)
        assert cfg.delta == 1e-5 and cfg.clip_c == 0.01 and cfg.rank == 4

    def test_delta_bounds_message(self, tmp_path):
        with pytest.raises(ConfigError, match=r"delta must lie in \(0,1\)"):
            parse_config(_write(tmp_path, {"delta": 1.5}))

    def test_unknown_top_level_key(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown key: epslon_grid"):
            parse_config(_write(tmp_path, {"epslon_grid": [1.0]}))

    def test_unknown_nested_key_has_path(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown key: model.widht"):
            parse_config(_write(tmp_path, {"model": {"widht": 4}}))

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="malformed JSON"):
            parse_config(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(str(tmp_path / "nope.json"))

    def test_round_trip_identity(self, tmp_path):
        cfg = parse_config(_write(tmp_path, dict(TINY, seed=5)))
        again = config_from_dict(serialize_config(cfg))
        assert again == cfg

    def test_rank_width_constraint(self, tmp_path):
        with pytest.raises(ConfigError, match="model.rank"):
            parse_config(_write(tmp_path, {"model": {"width": 6, "rank": 4}}))

    def test_bool_is_not_an_int(self, tmp_path):
        with pytest.raises(ConfigError, match="devices"):
            parse_config(_write(tmp_path, {"devices": True}))

    def test_duplicate_modes_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="modes"):
            parse_config(_write(tmp_path, {"modes": ["both", "both"]}))


class TestFormatEpsilon:
    def test_integral(self):
        assert format_epsilon(3.0) == "3"
        assert format_epsilon(100) == "100"

    def test_fractional(self):
        assert format_epsilon(0.5) == "0p5"


class TestRunGrid:
    def test_smoke_cell_and_csv_schema(self, tmp_path):
        cfg = parse_config(_write(tmp_path, dict(TINY, out_dir=str(tmp_path / "out"))))
        assert run_grid(cfg, seed=7) == 0
        csv_path = tmp_path / "out" / "both_eps3.csv"
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == CSV_COLUMNS
        assert len(rows) == 1 + 2  # header + one row per epoch
        assert [r[3] for r in rows[1:]] == ["1", "2"]
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["schema_version"] == 1
        manifest = json.loads((tmp_path / "out" / "MANIFEST.json").read_text())
        assert manifest["seed"] == 7
        assert manifest["cells"][0]["status"] == "ok"

    def test_byte_identical_reruns(self, tmp_path):
        cfg_path = _write(tmp_path, TINY)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert main(["run", "--config", cfg_path, "--seed", "3", "--out", str(out1)]) == 0
        assert main(["run", "--config", cfg_path, "--seed", "3", "--out", str(out2)]) == 0
        for name in ["both_eps3.csv", "summary.json", "MANIFEST.json"]:
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_full_grid_cardinality(self, tmp_path):
        raw = dict(TINY, rounds=1,
                   epsilon_grid=[1.0, 5.0, 50.0, 500.0],
                   modes=["both", "fixed_gaussian", "fixed_orthonormal"],
                   out_dir=str(tmp_path / "grid"))
        cfg = parse_config(_write(tmp_path, raw))
        assert run_grid(cfg, seed=0) == 0
        csvs = sorted(p.name for p in (tmp_path / "grid").glob("*.csv"))
        assert len(csvs) == 12
        summary = json.loads((tmp_path / "grid" / "summary.json").read_text())
        assert len(summary["cells"]) == 12
        assert set(summary["final_accuracy_ordering"]) == {"1", "5", "50", "500"}

    def test_parallel_jobs_match_serial(self, tmp_path):
        raw = dict(TINY, epsilon_grid=[3.0, 30.0])
        cfg_path = _write(tmp_path, raw)
        serial, parallel = tmp_path / "s", tmp_path / "p"
        assert main(["run", "--config", cfg_path, "--seed", "1", "--out", str(serial)]) == 0
        assert main(["run", "--config", cfg_path, "--seed", "1", "--out", str(parallel),
                     "--jobs", "2"]) == 0
        for p in serial.glob("*"):
            assert p.read_bytes() == (parallel / p.name).read_bytes()

    def test_realized_epsilon_never_exceeds_target(self, tmp_path):
        raw = dict(TINY, rounds=4, epsilon_grid=[2.0, 20.0])
        cfg = parse_config(_write(tmp_path, dict(raw, out_dir=str(tmp_path / "o"))))
        assert run_grid(cfg, seed=5) == 0
        for csv_path in (tmp_path / "o").glob("*.csv"):
            with open(csv_path, newline="") as fh:
                for row in csv.DictReader(fh):
                    assert (float(row["realized_epsilon_max"])
                            <= float(row["epsilon_target"]) * (1 + 1e-9))


class TestSummarize:
    def test_orderings_follow_final_accuracy(self):
        cells = [
            {"mode": "a", "epsilon_target": 1.0, "final_accuracy": 0.5,
             "best_accuracy": 0.6, "epochs_to_best": 1,
             "realized_epsilon_max": 1.0, "binding_counts": {"privacy": 1, "power": 0},
             "csv": "a.csv", "status": "ok"},
            {"mode": "b", "epsilon_target": 1.0, "final_accuracy": 0.9,
             "best_accuracy": 0.9, "epochs_to_best": 2,
             "realized_epsilon_max": 1.0, "binding_counts": {"privacy": 1, "power": 0},
             "csv": "b.csv", "status": "ok"},
        ]
        summary = summarize(cells)
        assert summary["final_accuracy_ordering"]["1"] == ["b", "a"]

    def test_no_completed_cells_raises(self):
        with pytest.raises(ValueError):
            summarize([{"status": "failed"}])

    def test_summarize_dir_matches_run_summary(self, tmp_path):
        raw = dict(TINY, modes=["both", "fixed_orthonormal"],
                   out_dir=str(tmp_path / "out"))
        cfg = parse_config(_write(tmp_path, raw))
        assert run_grid(cfg, seed=2) == 0
        produced = json.loads((tmp_path / "out" / "summary.json").read_text())
        recomputed = summarize_dir(tmp_path / "out")
        assert recomputed == produced


class TestCli:
    def test_validate_ok(self, tmp_path, capsys):
        path = _write(tmp_path, TINY)
        assert main(["validate", "--config", path]) == 0
        assert "ok" in capsys.readouterr().out

    def test_validate_bad_config_exit_2(self, tmp_path, capsys):
        path = _write(tmp_path, {"delta": 2.0})
        assert main(["validate", "--config", path]) == 2
        assert "delta" in capsys.readouterr().err

    def test_run_missing_config_exit_2(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.json")]) == 2

    def test_summarize_missing_dir_exit_2(self, tmp_path):
        assert main(["summarize", "--in", str(tmp_path / "empty")]) == 2

    def test_env_seed_applies_when_flag_absent(self, tmp_path, monkeypatch):
        cfg_path = _write(tmp_path, TINY)
        out_env, out_flag = tmp_path / "env", tmp_path / "flag"
        monkeypatch.setenv("SIM_DEFAULT_SEED", "11")
        assert main(["run", "--config", cfg_path, "--out", str(out_env)]) == 0
        monkeypatch.delenv("SIM_DEFAULT_SEED")
        assert main(["run", "--config", cfg_path, "--seed", "11",
                     "--out", str(out_flag)]) == 0
        assert ((out_env / "both_eps3.csv").read_bytes()
                == (out_flag / "both_eps3.csv").read_bytes())

    def test_env_seed_must_be_integer(self, tmp_path, monkeypatch):
        cfg_path = _write(tmp_path, TINY)
        monkeypatch.setenv("SIM_DEFAULT_SEED", "not-a-number")
        assert main(["run", "--config", cfg_path, "--out", str(tmp_path / "x")]) == 2

    def test_default_seed_is_zero(self, tmp_path, monkeypatch):
        monkeypatch.delenv("SIM_DEFAULT_SEED", raising=False)
        cfg_path = _write(tmp_path, TINY)
        out_default, out_zero = tmp_path / "d", tmp_path / "z"
        assert main(["run", "--config", cfg_path, "--out", str(out_default)]) == 0
        assert main(["run", "--config", cfg_path, "--seed", "0",
                     "--out", str(out_zero)]) == 0
        assert ((out_default / "both_eps3.csv").read_bytes()
                == (out_zero / "both_eps3.csv").read_bytes())

    def test_config_seed_used_when_no_flag_or_env(self, tmp_path, monkeypatch):
        monkeypatch.delenv("SIM_DEFAULT_SEED", raising=False)
        cfg_path = _write(tmp_path, dict(TINY, seed=4))
        out_cfg, out_flag = tmp_path / "c", tmp_path / "f"
        assert main(["run", "--config", cfg_path, "--out", str(out_cfg)]) == 0
        assert main(["run", "--config", cfg_path, "--seed", "4",
                     "--out", str(out_flag)]) == 0
        assert ((out_cfg / "both_eps3.csv").read_bytes()
                == (out_flag / "both_eps3.csv").read_bytes())
