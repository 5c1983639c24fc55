import json

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from facmix.cli import main, run_simulation, _sim_frames
from facmix.dataio import InputError, RunConfig, canonical_json, ingest
from facmix.simulate import SimDesign, draw_true_coefficients, generate_dataset


def toy_config(**overrides):
    cfg = {
        "design": "forced_choice",
        "clusters": 2,
        "lambda": 2.0,
        "gamma": 1,
        "seed": 7,
        "max_iterations": 300,
        "factors": [{"name": f"f{j+1}", "levels": ["1", "2", "3"]}
                    for j in range(3)],
        "moderators": [{"name": "x1", "type": "numeric"},
                       {"name": "x2", "type": "numeric"}],
        "effects": {"marginal_means": True},
    }
    cfg.update(overrides)
    return cfg


def toy_frames(seed=3, n_resp=60, n_tasks=3):
    sd = SimDesign(n_factors=3, n_levels=3, n_clusters=2, n_respondents=n_resp,
                   n_tasks=n_tasks, moderator_count=2, coef_seed=seed,
                   data_seed=seed + 1)
    beta, phi = draw_true_coefficients(sd)
    data = generate_dataset(sd, beta, phi, 0)
    levels = [[str(l + 1) for l in range(3)]] * 3
    return _sim_frames(sd, data, levels)


class TestIngest:
    def test_well_formed_rows_pass(self):
        profiles, moderators = toy_frames()
        config = RunConfig.from_dict(toy_config())
        ds = ingest(profiles, moderators, config)
        assert ds.report["n_tasks"] == 180
        assert ds.report["dropped_missing_moderators"] == 0
        assert ds.design.y.shape == (180,)

    def test_unknown_level_names_row_column_value(self):
        profiles, moderators = toy_frames()
        profiles.loc[5, "f2"] = "99"
        config = RunConfig.from_dict(toy_config())
        with pytest.raises(InputError, match=r"row 5.*'99'.*'f2'"):
            ingest(profiles, moderators, config)

    def test_missing_moderator_respondent_dropped_with_count(self):
        profiles, moderators = toy_frames()
        drop_id = moderators.respondent_id.iloc[3]
        moderators = moderators[moderators.respondent_id != drop_id]
        config = RunConfig.from_dict(toy_config())
        ds = ingest(profiles, moderators, config)
        assert ds.report["dropped_missing_moderators"] == 1
        assert ds.report["n_respondents"] == 59

    def test_nan_moderator_dropped(self):
        profiles, moderators = toy_frames()
        moderators.loc[2, "x1"] = np.nan
        config = RunConfig.from_dict(toy_config())
        ds = ingest(profiles, moderators, config)
        assert ds.report["dropped_missing_moderators"] == 1

    def test_duplicate_key_rejected(self):
        profiles, moderators = toy_frames()
        profiles = pd.concat([profiles, profiles.iloc[[0]]], ignore_index=True)
        config = RunConfig.from_dict(toy_config())
        with pytest.raises(InputError, match="duplicate"):
            ingest(profiles, moderators, config)

    def test_orphan_side_rejected(self):
        profiles, moderators = toy_frames()
        profiles = profiles.drop(index=0)
        config = RunConfig.from_dict(toy_config())
        with pytest.raises(InputError, match="needs exactly sides"):
            ingest(profiles, moderators, config)

    def test_factorial_ingest(self):
        rng = np.random.default_rng(2)
        n = 40
        profiles = pd.DataFrame({
            "respondent_id": [f"r{i:02d}" for i in range(n)],
            "task_id": "t0",
            "side": "single",
            "choice": rng.integers(0, 2, n),
        })
        for j in range(2):
            profiles[f"f{j+1}"] = rng.choice(["1", "2", "3"], n)
        cfg = toy_config(design="factorial")
        cfg["factors"] = cfg["factors"][:2]
        config = RunConfig.from_dict(cfg)
        ds = ingest(profiles, None, config)
        assert ds.design.kind == "factorial"
        assert ds.design.n_rows == n
        assert ds.x_mod is None

    def test_round_trip_preserves_dataset(self, tmp_path):
        profiles, moderators = toy_frames()
        p1 = tmp_path / "p.csv"
        profiles.to_csv(p1, index=False)
        back = pd.read_csv(p1, dtype={"respondent_id": str, "task_id": str})
        config = RunConfig.from_dict(toy_config())
        ds1 = ingest(profiles, moderators, config)
        ds2 = ingest(back, moderators, config)
        assert np.array_equal(ds1.design.t, ds2.design.t)
        assert np.array_equal(ds1.design.y, ds2.design.y)


class TestRunConfig:
    def test_auto_lambda_needs_budget(self):
        with pytest.raises(InputError, match="tune_budget"):
            RunConfig.from_dict(toy_config(**{"lambda": "auto", "tune_budget": 2}))

    def test_bad_gamma_rejected(self):
        with pytest.raises(InputError, match="gamma"):
            RunConfig.from_dict(toy_config(gamma=2))

    def test_negative_lambda_rejected(self):
        with pytest.raises(InputError, match="lambda"):
            RunConfig.from_dict(toy_config(**{"lambda": -1.0}))


def _write_inputs(tmp_path, cfg=None):
    profiles, moderators = toy_frames()
    (tmp_path / "profiles.csv").write_text(profiles.to_csv(index=False))
    (tmp_path / "moderators.csv").write_text(moderators.to_csv(index=False))
    (tmp_path / "config.json").write_text(json.dumps(cfg or toy_config()))
    return tmp_path


class TestFitCommand:
    def run_fit(self, tmp_path, out, extra=()):
        runner = CliRunner()
        args = ["fit", "--config", str(tmp_path / "config.json"),
                "--profiles", str(tmp_path / "profiles.csv"),
                "--moderators", str(tmp_path / "moderators.csv"),
                "--out", str(tmp_path / out), *extra]
        return runner.invoke(main, args, catch_exceptions=False)

    def test_artifacts_written_and_deterministic(self, tmp_path):
        _write_inputs(tmp_path)
        r1 = self.run_fit(tmp_path, "a", ("--threads", "1"))
        assert r1.exit_code == 0, r1.output
        r2 = self.run_fit(tmp_path, "b", ("--threads", "4"))
        assert r2.exit_code == 0
        for name in ("model.json", "effects.csv", "cluster_profiles.csv"):
            assert ((tmp_path / "a" / name).read_bytes()
                    == (tmp_path / "b" / name).read_bytes())
        model = json.loads((tmp_path / "a" / "model.json").read_text())
        for key in ("beta_block", "responsibilities", "df", "bic", "covariance",
                    "fusion", "diagnostics"):
            assert key in model

    def test_strict_mode_nonconvergence_exit_3(self, tmp_path):
        _write_inputs(tmp_path, toy_config(max_iterations=1))
        runner = CliRunner()
        result = runner.invoke(main, [
            "fit", "--config", str(tmp_path / "config.json"),
            "--profiles", str(tmp_path / "profiles.csv"),
            "--moderators", str(tmp_path / "moderators.csv"),
            "--out", str(tmp_path / "o"), "--strict"])
        assert result.exit_code == 3

    def test_improper_prior_exit_4(self, tmp_path, monkeypatch):
        _write_inputs(tmp_path)
        import facmix.cli as climod

        real = climod.prepare_problem

        def doctored(design, config):
            design2, ps, cm = real(design, config)
            ps.proper = False
            return design2, ps, cm

        monkeypatch.setattr(climod, "prepare_problem", doctored)
        runner = CliRunner()
        result = runner.invoke(main, [
            "fit", "--config", str(tmp_path / "config.json"),
            "--profiles", str(tmp_path / "profiles.csv"),
            "--moderators", str(tmp_path / "moderators.csv"),
            "--out", str(tmp_path / "o")])
        assert result.exit_code == 4

    def test_input_error_exit_2(self, tmp_path):
        _write_inputs(tmp_path)
        profiles = pd.read_csv(tmp_path / "profiles.csv")
        profiles.loc[0, "f1"] = "bogus"
        (tmp_path / "profiles.csv").write_text(profiles.to_csv(index=False))
        runner = CliRunner()
        result = runner.invoke(main, [
            "fit", "--config", str(tmp_path / "config.json"),
            "--profiles", str(tmp_path / "profiles.csv"),
            "--moderators", str(tmp_path / "moderators.csv"),
            "--out", str(tmp_path / "o")])
        assert result.exit_code == 2

    def test_auto_lambda_respects_budget(self, tmp_path):
        cfg = toy_config(**{"lambda": "auto", "tune_budget": 6,
                            "lambda_bounds": [0.5, 20.0],
                            "max_iterations": 150})
        _write_inputs(tmp_path, cfg)
        r = self.run_fit(tmp_path, "t")
        assert r.exit_code == 0
        manifest = json.loads((tmp_path / "t" / "manifest.json").read_text())
        assert manifest["n_lambda_evaluations"] <= 6
        model = json.loads((tmp_path / "t" / "model.json").read_text())
        assert len(model["lambda_path"]["evaluations"]) <= 6


class TestValidateCommand:
    def test_reports_dimensions(self, tmp_path):
        _write_inputs(tmp_path)
        runner = CliRunner()
        result = runner.invoke(main, [
            "validate", "--config", str(tmp_path / "config.json"),
            "--profiles", str(tmp_path / "profiles.csv"),
            "--moderators", str(tmp_path / "moderators.csv"),
            "--out", str(tmp_path / "v")])
        assert result.exit_code == 0, result.output
        payload = json.loads((tmp_path / "v" / "validate.json").read_text())
        assert payload["proper"] is True
        assert payload["p_raw"] == 9 + 3 * 9


class TestEffectsCommand:
    def test_recomputes_from_model(self, tmp_path):
        _write_inputs(tmp_path)
        runner = CliRunner()
        r1 = runner.invoke(main, [
            "fit", "--config", str(tmp_path / "config.json"),
            "--profiles", str(tmp_path / "profiles.csv"),
            "--moderators", str(tmp_path / "moderators.csv"),
            "--out", str(tmp_path / "m")], catch_exceptions=False)
        assert r1.exit_code == 0
        r2 = runner.invoke(main, [
            "effects", "--config", str(tmp_path / "config.json"),
            "--profiles", str(tmp_path / "profiles.csv"),
            "--moderators", str(tmp_path / "moderators.csv"),
            "--model", str(tmp_path / "m" / "model.json"),
            "--out", str(tmp_path / "e")], catch_exceptions=False)
        assert r2.exit_code == 0
        eff1 = pd.read_csv(tmp_path / "m" / "effects.csv")
        eff2 = pd.read_csv(tmp_path / "e" / "effects.csv")
        merged = eff1.merge(eff2, on=["cluster", "kind", "factor", "level",
                                      "baseline"], suffixes=("_a", "_b"))
        assert np.allclose(merged.estimate_a, merged.estimate_b, atol=1e-8)


class TestSimulateCommand:
    def test_smoke_two_replicates(self, tmp_path):
        cfg = toy_config()
        cfg["simulate"] = {"replicates": 2, "respondents": 60, "tasks": 3,
                           "factors": 3, "levels": 3, "clusters": 2,
                           "moderators": 2, "lambda": 2.0,
                           "coef_seed": 11, "data_seed": 12,
                           "truth_mc_draws": 5000}
        cfg["max_iterations"] = 150
        (tmp_path / "config.json").write_text(json.dumps(cfg))
        runner = CliRunner()
        result = runner.invoke(main, [
            "simulate", "--config", str(tmp_path / "config.json"),
            "--out", str(tmp_path / "sim")], catch_exceptions=False)
        assert result.exit_code == 0, result.output
        for rep in (0, 1):
            assert (tmp_path / "sim" / f"fit_rep{rep}.json").exists()
            assert (tmp_path / "sim" / f"profiles_rep{rep}.csv").exists()
        report = pd.read_csv(tmp_path / "sim" / "recovery_report.csv")
        assert set(report.columns) == {"replicate", "correlation"}
        coverage = pd.read_csv(tmp_path / "sim" / "recovery_coverage.csv")
        assert "median_correlation" in coverage.columns
        assert "coverage_95" in coverage.columns

    def test_truth_files_regenerate_identically(self):
        sd = SimDesign(n_factors=3, n_levels=3, n_clusters=2, n_respondents=40,
                       n_tasks=2, moderator_count=2, coef_seed=21, data_seed=22,
                       truth_mc_draws=4000, replicates=2)
        beta1, phi1 = draw_true_coefficients(sd)
        beta2, phi2 = draw_true_coefficients(sd)
        assert np.array_equal(beta1, beta2) and np.array_equal(phi1, phi2)
        from facmix.simulate import true_amces

        t1 = true_amces(sd, beta1)
        t2 = true_amces(sd, beta2)
        assert t1.equals(t2)


def test_canonical_json_stable():
    a = canonical_json({"b": [1.5, np.float64(0.1)], "a": np.int64(2)})
    b = canonical_json({"a": 2, "b": [1.5, 0.1]})
    assert a == b
