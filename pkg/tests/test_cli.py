import json

import numpy as np
import pytest

from attkit.cli import main, load_config, parse_overrides, resolve_params
from attkit.errors import ConfigError
from attkit.panel import load_panel


def run(*argv):
    return main([str(a) for a in argv])


class TestConfig:
    def test_parse_overrides(self):
        settings = parse_overrides(["n=50", "sigma=0.8", "min_x=0,1,2"])
        assert settings["n"] == 50
        assert settings["sigma"] == 0.8
        assert settings["min_x"].tolist() == [0.0, 1.0, 2.0]

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown parameter 'bogus'"):
            parse_overrides(["bogus=1"])

    def test_malformed_pair_rejected(self):
        with pytest.raises(ConfigError, match="key=value"):
            parse_overrides(["n:50"])

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "scenario.cfg"
        cfg.write_text("# comment\nn = 25\nsigma = 1.2 # inline\n", encoding="utf-8")
        settings = load_config(cfg)
        assert settings == {"n": 25, "sigma": 1.2}

    def test_config_unknown_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("whatever = 3\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="unknown parameter"):
            load_config(cfg)

    def test_dimension_change_rebroadcasts(self):
        class Args:
            preset = None
            config = None
            seed = None
        args = Args()
        args.set = ["d_x=3", "sigma=0.8"]
        params = resolve_params(args)
        assert params.d_x == 3
        assert np.allclose(params.noise_cov, 0.8 * np.eye(3))


class TestSimulateCommand:
    def test_writes_panels_and_manifest(self, tmp_path):
        out = tmp_path / "sim"
        assert run("simulate", "--preset", "paper-1cov", "--set", "n=30",
                   "--reps", "2", "--seed", "7", "--out", out) == 0
        assert (out / "panel_rep0.csv").exists()
        assert (out / "panel_rep1.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert manifest["params"]["n"] == 30
        assert manifest["params"]["seed"] == 7

    def test_rerun_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("simulate", "--preset", "paper-1cov", "--set", "n=30",
                       "--reps", "1", "--seed", "5", "--out", out) == 0
        assert (a / "panel_rep0.csv").read_bytes() == (b / "panel_rep0.csv").read_bytes()
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()

    def test_override_subject_count(self, tmp_path):
        out = tmp_path / "sim"
        assert run("simulate", "--preset", "paper-1cov", "--set", "n=50",
                   "--reps", "1", "--seed", "1", "--out", out) == 0
        panel = load_panel(out / "panel_rep0.csv")
        assert panel.n_subjects == 50

    def test_unknown_set_key_is_config_error(self, tmp_path):
        assert run("simulate", "--preset", "paper-1cov", "--set", "zzz=1",
                   "--out", tmp_path) == 2

    def test_unknown_flag_is_hard_error(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            run("simulate", "--preset", "paper-1cov", "--frobnicate",
                "--out", tmp_path)
        assert err.value.code == 2


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "sim"
    assert run("simulate", "--preset", "paper-1cov", "--set", "n=120",
               "--reps", "1", "--seed", "11", "--out", out) == 0
    return out


class TestFitVarCommand:
    def test_writes_model(self, sim_dir, tmp_path):
        model_file = tmp_path / "vm.txt"
        assert run("fit-var", "--panel", sim_dir / "panel_rep0.csv",
                   "--out", model_file) == 0
        text = model_file.read_text()
        assert text.startswith("attkit-var-model 1")

    def test_missing_panel_is_data_error(self, tmp_path):
        assert run("fit-var", "--panel", tmp_path / "nope.csv") == 3


class TestEstimateCommand:
    def test_selected_estimators_written(self, sim_dir, tmp_path):
        out = tmp_path / "est"
        assert run("estimate", "--panel", sim_dir / "panel_rep0.csv",
                   "--estimators", "oracle,uncorrected,debiased",
                   "--out", out) == 0
        for name in ("oracle", "uncorrected", "debiased"):
            assert (out / f"coeffs_{name}.csv").exists()
            assert (out / f"cumulative_{name}.csv").exists()
        assert (out / "var_model.txt").exists()
        header = (out / "coeffs_oracle.csv").read_text().splitlines()[0]
        assert header == "t_index,t,estimator,coef_name,value,cumulative,flag_fallback"

    def test_unknown_estimator_is_config_error(self, sim_dir, tmp_path):
        assert run("estimate", "--panel", sim_dir / "panel_rep0.csv",
                   "--estimators", "magic", "--out", tmp_path) == 2

    def test_oracle_without_counterfactuals_is_data_error(self, tmp_path):
        csv = tmp_path / "plain.csv"
        csv.write_text("id,t_index,D,dN,X1\n1,0,0,1,2.0\n1,1,0,2,1.0\n1,2,0,0,0.5\n"
                       "2,0,0,1,3.0\n2,1,1,2,2.0\n2,2,1,0,1.5\n", encoding="utf-8")
        assert run("estimate", "--panel", csv, "--estimators", "oracle",
                   "--out", tmp_path / "o") == 3

    def test_subject_without_anchor_named(self, tmp_path, capsys):
        csv = tmp_path / "early.csv"
        lines = ["id,t_index,D,dN,X1",
                 "8,0,1,1,2.0", "8,1,1,2,1.0", "8,2,1,0,0.5"]
        rng = np.random.default_rng(4)
        for sid in range(9, 16):
            vals = rng.uniform(0.5, 5.0, size=3)
            lines += [f"{sid},{k},0,{rng.integers(0, 4) if k < 2 else 0},{float(vals[k])!r}"
                      for k in range(3)]
        csv.write_text("\n".join(lines) + "\n", encoding="utf-8")
        code = run("estimate", "--panel", csv, "--estimators", "debiased",
                   "--out", tmp_path / "o")
        assert code == 3
        assert "subject 8" in capsys.readouterr().err

    def test_true_sigma_needs_scenario(self, sim_dir, tmp_path):
        out = tmp_path / "ts"
        assert run("estimate", "--panel", sim_dir / "panel_rep0.csv",
                   "--preset", "paper-1cov", "--estimators",
                   "debiased,debiased_true_sigma", "--out", out) == 0
        assert (out / "coeffs_debiased_true_sigma.csv").exists()

    def test_noiseless_oracle_equals_debiased_end_to_end(self, tmp_path):
        sim = tmp_path / "sim0"
        assert run("simulate", "--preset", "paper-1cov", "--set", "n=150",
                   "--set", "sigma=0", "--reps", "1", "--seed", "13",
                   "--out", sim) == 0
        out = tmp_path / "est0"
        assert run("estimate", "--panel", sim / "panel_rep0.csv",
                   "--estimators", "oracle,debiased", "--out", out) == 0
        import csv as csvmod

        def cells(name):
            with open(out / name, newline="") as fh:
                return list(csvmod.DictReader(fh))
        oracle = cells("coeffs_oracle.csv")
        debiased = cells("coeffs_debiased.csv")
        assert len(oracle) == len(debiased)
        for a, b in zip(oracle, debiased):
            assert a["coef_name"] == b["coef_name"]
            if a["value"] == "" or b["value"] == "":
                assert a["value"] == b["value"]
                continue
            assert abs(float(a["value"]) - float(b["value"])) < 1e-9


class TestBenchmarkCommand:
    def test_shapes_and_determinism(self, tmp_path):
        args = ("benchmark", "--preset", "paper-1cov", "--set", "n=80",
                "--reps", "4", "--seed", "3")
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(*args, "--out", a) == 0
        assert run(*args, "--out", b, "--jobs", "2") == 0
        rep_lines = (a / "benchmark_replicates.csv").read_text().splitlines()
        assert rep_lines[0] == ("scenario,sigma,replicate,oracle,naive,"
                                "uncorrected,debiased,debiased_true_sigma")
        assert len(rep_lines) == 5
        for name in ("benchmark_replicates.csv", "benchmark_summary.csv",
                     "benchmark_table.txt", "manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_sigma_grid_rows(self, tmp_path):
        out = tmp_path / "grid"
        assert run("benchmark", "--preset", "paper-1cov", "--set", "n=80",
                   "--reps", "3", "--seed", "5", "--sigma-grid", "0.4,0.8",
                   "--out", out) == 0
        table = (out / "benchmark_table.txt").read_text()
        assert "0.40" in table and "0.80" in table

    def test_failure_threshold_exit_code(self, tmp_path):
        assert run("benchmark", "--preset", "paper-1cov", "--set", "n=40",
                   "--set", "treat_scale=1e9", "--reps", "3", "--seed", "2",
                   "--out", tmp_path / "fail") == 4

    def test_bad_fallback_is_config_error(self, tmp_path):
        assert run("benchmark", "--preset", "paper-1cov", "--set", "n=40",
                   "--reps", "2", "--fallback", "sometimes",
                   "--out", tmp_path / "f") == 2


class TestReportCommand:
    def test_benchmark_report(self, tmp_path):
        bench = tmp_path / "bench"
        assert run("benchmark", "--preset", "paper-1cov", "--set", "n=80",
                   "--reps", "3", "--seed", "9", "--out", bench) == 0
        out = tmp_path / "rep"
        assert run("report", "--in", bench, "--out", out) == 0
        assert (out / "mise_by_sigma.png").stat().st_size > 0
        assert (out / "mise_distribution.png").stat().st_size > 0
        assert (out / "report_summary.csv").exists()
        assert (out / "benchmark_table.txt").exists()

    def test_estimate_report(self, sim_dir, tmp_path):
        est = tmp_path / "est"
        assert run("estimate", "--panel", sim_dir / "panel_rep0.csv",
                   "--estimators", "oracle,debiased", "--out", est) == 0
        out = tmp_path / "rep"
        assert run("report", "--in", est, "--out", out) == 0
        assert (out / "cumulative_att.png").stat().st_size > 0
        assert (out / "coefficients_oracle.png").exists()
        assert (out / "coefficients_debiased.png").exists()
        assert (out / "report_coefficients.csv").exists()

    def test_empty_directory_is_data_error(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert run("report", "--in", empty, "--out", tmp_path / "r") == 3
