import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from msir.cli import main
from msir.config import ConfigError, load_config
from msir.fileio import read_bundle, read_params


def write_config(path, **overrides):
    cfg = {
        "seed": 11,
        "out": str(path.parent / "out"),
        "sim": {"n_per_source": 50, "rows": 12, "cols": 12,
                "component_size": 4, "setting": "S1"},
        "hyper": {"r_components": 3, "lambda_tv": 0.1, "gamma_sip": 0.5,
                  "tau": 0.5, "max_epochs": 8, "patience": 8,
                  "inner_steps": 10},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path.write_text(yaml.safe_dump(cfg))
    return cfg


def run_cli(*args):
    return CliRunner().invoke(main, list(args), catch_exceptions=False)


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("seed: 1\nbogus_key: 2\n")
        with pytest.raises(ConfigError, match="bogus_key"):
            load_config(path)

    def test_unknown_nested_key_rejected(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("hyper:\n  momentum: 0.9\n")
        with pytest.raises(ConfigError, match="momentum"):
            load_config(path)

    def test_wrong_type_rejected(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("jobs: many\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_method_rejected(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("method: magic\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_empty_methods_rejected(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("methods: []\n")
        with pytest.raises(ConfigError, match="methods"):
            load_config(path)

    def test_example_config_is_valid(self):
        from pathlib import Path

        cfg = load_config(Path(__file__).resolve().parents[1]
                          / "example-config.yaml")
        assert cfg["method"] == "pair"


class TestSimulate:
    def test_writes_split_bundles_and_truth(self, tmp_path):
        cfg_path = tmp_path / "c.yaml"
        write_config(cfg_path)
        result = run_cli("simulate", "--config", str(cfg_path))
        assert result.exit_code == 0
        out = tmp_path / "out"
        train = read_bundle(out / "train")
        val = read_bundle(out / "val")
        test = read_bundle(out / "test")
        assert [ds.n for ds in train] == [30, 30, 30]
        assert [ds.n for ds in val] == [10, 10, 10]
        assert [ds.n for ds in test] == [10, 10, 10]
        truth = read_params(out / "truth")
        assert truth["betas"].shape == (3, 5)
        assert truth["coefficients"].shape == (3, 12, 12)

    def test_same_seed_gives_identical_files(self, tmp_path):
        cfg_path = tmp_path / "c.yaml"
        write_config(cfg_path)
        run_cli("simulate", "--config", str(cfg_path),
                "--out", str(tmp_path / "a"))
        run_cli("simulate", "--config", str(cfg_path),
                "--out", str(tmp_path / "b"))
        files_a = sorted(p for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files_a
        for file_a in files_a:
            file_b = tmp_path / "b" / file_a.relative_to(tmp_path / "a")
            assert file_a.read_bytes() == file_b.read_bytes(), file_a.name

    def test_setting3_truth_has_row_zeros(self, tmp_path):
        cfg_path = tmp_path / "c.yaml"
        write_config(cfg_path, sim={"setting": "S3"})
        run_cli("simulate", "--config", str(cfg_path))
        truth = read_params(tmp_path / "out" / "truth")
        assert all((row == 0.0).any() for row in truth["weights"])


def simulate_then(tmp_path, command, *extra, cfg_overrides=None):
    cfg_path = tmp_path / "c.yaml"
    out = tmp_path / "out"
    overrides = dict(cfg_overrides or {})
    overrides.setdefault("data", {
        "train": str(out / "train"), "val": str(out / "val"),
        "test": str(out / "test"), "truth": str(out / "truth"),
        "params": str(out / "params"),
    })
    write_config(cfg_path, **overrides)
    sim = run_cli("simulate", "--config", str(cfg_path))
    assert sim.exit_code == 0
    return run_cli(command, "--config", str(cfg_path), *extra), cfg_path, out


class TestFit:
    def test_pair_fit_writes_reports_heatmaps_figures(self, tmp_path):
        result, _, out = simulate_then(tmp_path, "fit")
        assert result.exit_code == 0
        report = (out / "fit_report.txt").read_text()
        assert "method pair" in report
        params = read_params(out / "params")
        assert params["betas"].shape == (3, 5)
        assert params["coefficients"].shape == (3, 12, 12)
        assert params["components"].shape == (3, 12, 12)
        for t in range(3):
            assert (out / "heatmaps" / f"coefficient_source_{t:03d}.pgm").exists()
        assert (out / "figures" / "coefficients.png").exists()
        assert (out / "figures" / "epochs.png").exists()

    def test_sirtv_on_single_source_bundle(self, tmp_path):
        result, _, out = simulate_then(
            tmp_path, "fit",
            cfg_overrides={"method": "sirtv", "sim": {"t_sources": 1}},
        )
        assert result.exit_code == 0
        params = read_params(out / "params")
        assert params["betas"].shape == (1, 5)

    def test_divergence_exits_nonzero_naming_epoch(self, tmp_path):
        cfg_path = tmp_path / "c.yaml"
        out = tmp_path / "out"
        write_config(cfg_path, data={"train": str(out / "train"),
                                     "val": str(out / "val")},
                     hyper={"learning_rate": 1000.0})
        assert run_cli("simulate", "--config", str(cfg_path)).exit_code == 0
        result = CliRunner().invoke(main, ["fit", "--config", str(cfg_path)])
        assert result.exit_code != 0
        assert "epoch" in result.output

    def test_missing_bundles_error(self, tmp_path):
        cfg_path = tmp_path / "c.yaml"
        write_config(cfg_path)
        result = CliRunner().invoke(main, ["fit", "--config", str(cfg_path)])
        assert result.exit_code != 0


class TestGridSearch:
    def test_small_grid_writes_table_and_best(self, tmp_path):
        result, _, out = simulate_then(
            tmp_path, "grid-search",
            cfg_overrides={"grids": {"pair": {
                "r_components": [2, 3], "lambda_tv": [0.1],
                "gamma_sip": [0.5], "tau": [0.5],
            }}},
        )
        assert result.exit_code == 0
        table = (out / "grid_table.tsv").read_text().splitlines()
        assert len(table) == 3  # header + 2 cells
        assert (out / "fit_report.txt").exists()

    def test_rejects_non_pair_method(self, tmp_path):
        cfg_path = tmp_path / "c.yaml"
        write_config(cfg_path, method="vr")
        result = CliRunner().invoke(main, ["grid-search", "--config",
                                           str(cfg_path)])
        assert result.exit_code != 0
        assert "pair" in result.output


class TestEvaluate:
    def test_writes_metrics_and_marginals(self, tmp_path):
        fit_result, cfg_path, out = simulate_then(tmp_path, "fit")
        assert fit_result.exit_code == 0
        result = run_cli("evaluate", "--config", str(cfg_path))
        assert result.exit_code == 0
        tsv = (out / "eval.tsv").read_text()
        assert "rmse" in tsv and "c_err" in tsv and "r_z" in tsv
        for t in range(3):
            assert (out / "figures" / f"marginals_source_{t:03d}.png").exists()


class TestReplicate:
    def replicate_config(self, tmp_path, **kw):
        cfg_path = tmp_path / "c.yaml"
        overrides = {
            "methods": ["pair", "sirtv"],
            "replicate": {"n_reps": 2},
            "sim": {"n_per_source": 40, "rows": 8, "cols": 8,
                    "component_size": 3},
            "hyper": {"r_components": 3, "lambda_tv": 0.1, "gamma_sip": 0.5,
                      "tau": 0.5, "max_epochs": 5, "patience": 5,
                      "inner_steps": 8},
        }
        overrides.update(kw)
        write_config(cfg_path, **overrides)
        return cfg_path

    def test_two_reps_table_structure(self, tmp_path):
        cfg_path = self.replicate_config(tmp_path)
        result = run_cli("replicate", "--config", str(cfg_path))
        assert result.exit_code == 0
        out = tmp_path / "out"
        long_rows = (out / "replicate_long.tsv").read_text().splitlines()
        # header + metrics x sources x methods
        assert len(long_rows) == 1 + 3 * 3 * 2
        table = (out / "replicate_table.txt").read_text()
        assert "metric c_err" in table
        assert "failures pair 0/2" in table

    def test_deterministic_outputs_across_runs(self, tmp_path):
        cfg_path = self.replicate_config(tmp_path)
        run_cli("replicate", "--config", str(cfg_path), "--deterministic",
                "--out", str(tmp_path / "r1"))
        run_cli("replicate", "--config", str(cfg_path), "--deterministic",
                "--out", str(tmp_path / "r2"))
        for name in ("replicate_long.tsv", "replicate_table.txt",
                     "replicate_failures.txt"):
            assert ((tmp_path / "r1" / name).read_bytes()
                    == (tmp_path / "r2" / name).read_bytes())

    def test_jobs_do_not_change_table(self, tmp_path):
        cfg_path = self.replicate_config(tmp_path)
        run_cli("replicate", "--config", str(cfg_path), "--jobs", "1",
                "--out", str(tmp_path / "j1"))
        run_cli("replicate", "--config", str(cfg_path), "--jobs", "2",
                "--out", str(tmp_path / "j2"))
        assert ((tmp_path / "j1" / "replicate_long.tsv").read_bytes()
                == (tmp_path / "j2" / "replicate_long.tsv").read_bytes())

    def test_rep_failures_recorded_with_gaps(self, tmp_path):
        cfg_path = self.replicate_config(
            tmp_path, hyper={"learning_rate": 1000.0, "max_epochs": 5,
                             "patience": 5, "inner_steps": 8})
        result = CliRunner().invoke(main, ["replicate", "--config",
                                           str(cfg_path)])
        assert result.exit_code != 0
        out = tmp_path / "out"
        failures = (out / "replicate_failures.txt").read_text()
        assert "DivergenceError" in failures
        table = (out / "replicate_table.txt").read_text()
        assert "-" in table

    def test_single_rep_rejected(self, tmp_path):
        cfg_path = self.replicate_config(tmp_path, replicate={"n_reps": 1})
        result = CliRunner().invoke(main, ["replicate", "--config",
                                           str(cfg_path)])
        assert result.exit_code != 0


class TestExportHeatmap:
    def test_text_matrix_input(self, tmp_path):
        matrix_path = tmp_path / "m.txt"
        matrix_path.write_text("0 1\n2 3\n")
        cfg_path = tmp_path / "c.yaml"
        write_config(cfg_path, export={"input": str(matrix_path),
                                       "output": str(tmp_path / "m.pgm"),
                                       "scale": "minmax"})
        result = run_cli("export-heatmap", "--config", str(cfg_path))
        assert result.exit_code == 0
        assert (tmp_path / "m.pgm").exists()
        assert (tmp_path / "m.pgm.scale.txt").exists()
        assert (tmp_path / "m.png").exists()

    def test_params_directory_input(self, tmp_path):
        _, cfg_path, out = simulate_then(
            tmp_path, "fit",
            cfg_overrides={"export": {"field": "coefficients", "index": 1}},
        )
        cfg = yaml.safe_load(cfg_path.read_text())
        cfg["export"]["input"] = str(out / "params")
        cfg["export"]["output"] = str(tmp_path / "c1.pgm")
        cfg_path.write_text(yaml.safe_dump(cfg))
        result = run_cli("export-heatmap", "--config", str(cfg_path))
        assert result.exit_code == 0
        assert (tmp_path / "c1.pgm").exists()

    def test_missing_input_rejected(self, tmp_path):
        cfg_path = tmp_path / "c.yaml"
        write_config(cfg_path)
        result = CliRunner().invoke(main, ["export-heatmap", "--config",
                                           str(cfg_path)])
        assert result.exit_code != 0
