import json

import pytest

from bonsai_rbo.cli import main
from bonsai_rbo.config import ConfigError, ExperimentConfig, RegretConfig, load_config


def write(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


SMALL_RUN = {
    "schema_version": "bonsai_config/1", "benchmark": "figure2",
    "strategies": ["BONSAI", "Random"], "budget": 7, "seeds": [0, 1],
    "acquisition": {"raw": 32, "starts": 2, "steps": 10, "features": 64},
    "fit_restarts": 2, "refit_restarts": 1,
}


class TestConfig:
    def test_roundtrip_fixed_point(self):
        cfg = ExperimentConfig.model_validate(SMALL_RUN)
        text = cfg.dumps()
        again = ExperimentConfig.model_validate_json(text)
        assert again.dumps() == text

    def test_budget_minimum_named(self, tmp_path):
        path = write(tmp_path, "c.json", {**SMALL_RUN, "budget": 3})
        with pytest.raises(ConfigError, match="minimum for figure2 is 5"):
            load_config(path)

    @pytest.mark.parametrize("patch", [{"seeds": []}, {"seeds": [1, 1]},
                                       {"strategies": ["EIFN"]}, {"benchmark": "branin"},
                                       {"recommender": "best"}, {"unexpected": 1}])
    def test_invalid_fields(self, tmp_path, patch):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, "c.json", {**SMALL_RUN, **patch}))

    def test_exactly_one_problem_source(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, "c.json", {**SMALL_RUN, "network_file": "p.json"}))

    def test_json_error_has_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n "budget": ,\n}')
        with pytest.raises(ConfigError, match="line 2"):
            load_config(path)

    def test_regret_empty_seeds(self):
        with pytest.raises(Exception):
            RegretConfig.model_validate({"seeds": []})

    def test_schema_dispatch(self, tmp_path):
        cfg = load_config(write(tmp_path, "r.json", {"schema_version": "bonsai_regret_config/1",
                                                     "seeds": [0], "T": 5, "checkpoints": [5]}))
        assert isinstance(cfg, RegretConfig)


class TestCommands:
    def test_run_is_byte_identical(self, tmp_path, capsys):
        cfg = write(tmp_path, "c.json", SMALL_RUN)
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
        files = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
        assert len(files) == 4
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        summary = json.loads((tmp_path / "a" / "summary.json").read_text())
        assert summary["schema"] == "bonsai_summary/1"
        assert set(summary["strategies"]) == {"BONSAI", "Random"}
        assert len(summary["strategies"]["BONSAI"]["terminal"]) == 2

    def test_custom_network_file(self, tmp_path):
        from bonsai_rbo.benchmarks import make_benchmark
        from bonsai_rbo.config import problem_to_dict
        (tmp_path / "p.json").write_text(json.dumps(problem_to_dict(make_benchmark("figure2").problem)))
        payload = {k: v for k, v in SMALL_RUN.items() if k != "benchmark"}
        cfg = write(tmp_path, "c.json", {**payload, "network_file": "p.json", "strategies": ["Random"],
                                          "seeds": [0]})
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "figure2__Random__seed0.csv").exists()

    def test_oracle_output(self, tmp_path, capsys):
        out = tmp_path / "o.csv"
        assert main(["oracle", "figure2", "--grid", "200", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# schema=bonsai_oracle/1")
        row = lines[2].split(",")
        assert row[0] == "optimum" and abs(float(row[1]) - 5 ** 0.5) < 1e-3

    def test_oracle_bad_name(self, capsys):
        assert main(["oracle", "branin"]) == 2
        assert "valid names" in capsys.readouterr().err

    def test_list(self, capsys):
        assert main(["list-benchmarks"]) == 0
        assert "vibration_absorber" in capsys.readouterr().out

    def test_regret_single_node(self, tmp_path, capsys):
        cfg = write(tmp_path, "r.json", {"schema_version": "bonsai_regret_config/1", "problem": "single",
                                          "seeds": [0, 1, 2], "T": 8, "checkpoints": [4, 8]})
        main(["regret", "--config", str(cfg), "--out", str(tmp_path / "r")])
        report = json.loads((tmp_path / "r" / "report.json").read_text())
        assert report["k1_equivalence"] == "pass"
        assert report["nonnegative_regret"]
        assert "K=1 reduction equivalence: pass" in capsys.readouterr().out

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        cfg = write(tmp_path, "c.json", {**SMALL_RUN, "seeds": []})
        assert main(["run", "--config", str(cfg)]) == 2
        assert "seeds" in capsys.readouterr().err

    def test_workers_env(self, monkeypatch):
        from bonsai_rbo.cli import _workers
        monkeypatch.setenv("BONSAI_WORKERS", "3")
        assert _workers(None) == 3
        assert _workers(1) == 1
