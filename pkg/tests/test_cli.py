import json
import os
from contextlib import nullcontext

import pandas as pd
import pytest

import main as cli
from config import Config
from experiments import build_config, load_config_file
from posterior_stats import QQ_COLUMNS
from utils import ConfigError, NumericalFailure

TINY = ["--epochs", "2", "--outputs", "3"]


def _manifest(path):
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as f:
        return json.load(f)


class TestRun:
    def test_linear_forward(self, output_dir):
        assert cli.main(["run", "linear1d_forward", *TINY]) == 0
        out = output_dir / "linear1d_forward"
        manifest = _manifest(out)
        assert manifest["status"] == "success"
        assert manifest["config"]["noise"] == "case1"
        assert manifest["config"]["sigma"] == 0.01
        assert manifest["implementation"]["stencil_h"] == 1e-3
        for name in ("dataset.csv", "loss_trace.csv", "checkpoint.bin", "u_posterior.csv", "u_ensemble.csv"):
            assert (out / name).exists()
        posterior = pd.read_csv(out / "u_posterior.csv")
        assert list(posterior.columns) == ["x", "exact", "mean", "std", "covered"]
        assert len(posterior) == 201
        assert 0.0 <= manifest["metrics"]["u_coverage"] <= 1.0
        assert manifest["metrics"]["u_meas_tolerance"] == pytest.approx(2.0 * 0.01 / 3 ** 0.5)
        assert manifest["metrics"]["f_meas_max_gap"] >= 0.0

    def test_deterministic_runs_are_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            argv = ["run", "nonlinear1d_forward", *TINY, "--deterministic", "--out", str(tmp_path / name)]
            assert cli.main(argv) == 0
        for artifact in ("u_posterior.csv", "f_posterior.csv", "loss_trace.csv", "checkpoint.bin"):
            assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()

    def test_inverse_writes_k_histogram(self, output_dir):
        assert cli.main(["run", "inverse1d", *TINY, "--noise", "case2"]) == 0
        out = output_dir / "inverse1d"
        assert len(pd.read_csv(out / "k_values.csv")) == 3
        assert pd.read_csv(out / "k_histogram.csv")["count"].sum() == 3
        metrics = _manifest(out)["metrics"]
        assert metrics["k_exact"] == 0.7
        assert _manifest(out)["implementation"]["k_init"] == "uniform[0,1]"

    def test_allen_cahn_tiny(self, output_dir):
        assert cli.main(["run", "allen_cahn_2d", "--epochs", "1", "--outputs", "2"]) == 0
        out = output_dir / "allen_cahn_2d"
        assert len(pd.read_csv(out / "u_posterior.csv")) == 101 * 101
        assert not (out / "u_ensemble.csv").exists()

    def test_fem_compare_then_prior_augmented(self, output_dir):
        assert cli.main(["run", "fem_compare", "--epochs", "2", "--outputs", "4", "--ensemble", "4"]) == 0
        fem = output_dir / "fem_compare"
        qq = pd.read_csv(fem / "qq.csv")
        assert len(qq) == 9 * 10
        prior = pd.read_csv(fem / "prior_stats.csv")
        assert list(prior.columns) == ["x", "mean", "std"]
        assert len(pd.read_csv(fem / "fem_u_posterior.csv")) == 141
        fem_metrics = _manifest(fem)["metrics"]
        assert "fem_mean_gate" in fem_metrics
        assert isinstance(fem_metrics["qq_gate"], bool)
        assert 0 <= fem_metrics["qq_rows_within"] <= len(qq)
        assert list(qq.columns) == QQ_COLUMNS

        assert cli.main(["run", "prior_augmented", "--epochs", "2", "--outputs", "4"]) == 0
        aug = output_dir / "prior_augmented"
        metrics = _manifest(aug)["metrics"]
        for variant in ("measurements_only", "with_means", "with_means_stds"):
            assert (aug / variant / "u_posterior.csv").exists()
            assert "u_rmse" in metrics[variant]
        assert isinstance(metrics["rmse_ordering_holds"], bool)
        # five f measurements plus the two boundary values
        assert len(pd.read_csv(aug / "measurements_only" / "dataset.csv")) == 7

    def test_seed_consistency(self, output_dir):
        assert cli.main(["run", "seed_consistency", *TINY, "--runs", "2"]) == 0
        table = pd.read_csv(output_dir / "seed_consistency" / "k_consistency.csv")
        assert list(table["run"]) == [1, 2]

    def test_measurement_variation(self, output_dir):
        assert cli.main(["run", "measurement_variation", *TINY, "--runs", "2"]) == 0
        table = pd.read_csv(output_dir / "measurement_variation" / "measurement_variation.csv")
        assert list(table["data_seed"]) == [1234, 1235]

    def test_forward_seed_consistency(self, output_dir):
        assert cli.main(["run", "forward_seed_consistency", *TINY, "--runs", "2", "--seed", "3"]) == 0
        out = output_dir / "forward_seed_consistency"
        table = pd.read_csv(out / "u_seed_fields.csv")
        assert list(table.columns) == ["x", "mean_seed3", "std_seed3", "mean_seed4", "std_seed4"]
        assert len(table) == 201
        for run in ("run_1", "run_2"):
            assert (out / run / "u_posterior.csv").exists()
        metrics = _manifest(out)["metrics"]
        gap = (table["mean_seed3"] - table["mean_seed4"]).abs().max()
        assert metrics["u_mean_max_pairwise_diff"] == pytest.approx(gap, abs=1e-9)

    def test_deterministic_pins_threads_and_workers(self, output_dir, monkeypatch):
        calls = []

        def record(limits=None, **kwargs):
            calls.append(limits)
            return nullcontext()

        monkeypatch.setattr(cli, "threadpool_limits", record)
        assert cli.main(["run", "linear1d_forward", *TINY]) == 0
        assert calls == []
        assert cli.main(["run", "linear1d_forward", *TINY, "--deterministic"]) == 0
        assert calls == [1]
        assert _manifest(output_dir / "linear1d_forward")["config"]["deterministic"] is True

    def test_deterministic_runner_uses_one_fem_worker(self):
        assert cli.ExperimentRunner(build_config("fem_compare", {}, {"deterministic": True})).fem_workers == 1
        assert cli.ExperimentRunner(build_config("fem_compare", {}, {})).fem_workers == Config.FEM_WORKERS

    def test_convergence_from_config_file(self, output_dir, tmp_path):
        config_file = tmp_path / "convergence.env"
        config_file.write_text("EPOCHS=2\nM_LIST=2,4\n")
        assert cli.main(["run", "convergence_m", "--config", str(config_file)]) == 0
        table = pd.read_csv(output_dir / "convergence_m" / "convergence.csv")
        assert list(table["M"]) == [2, 4]
        assert pd.isna(table["delta_mean"][0]) and table["delta_mean"][1] >= 0


class TestExitCodes:
    def test_prior_file_missing(self, output_dir):
        assert cli.main(["run", "prior_augmented", *TINY]) == ConfigError.exit_code
        assert (output_dir / "error.log").exists()
        assert _manifest(output_dir / "prior_augmented")["status"] == "failed"

    def test_unknown_experiment(self):
        assert cli.main(["run", "heat3d"]) == 2

    def test_bad_outputs(self):
        assert cli.main(["run", "linear1d_forward", "--outputs", "0"]) == 2

    def test_unknown_noise_rejected_by_parser(self):
        with pytest.raises(SystemExit) as excinfo:
            cli.main(["run", "linear1d_forward", "--noise", "case9"])
        assert excinfo.value.code == 2

    def test_numerical_failure(self, output_dir, monkeypatch):
        def explode(*args, **kwargs):
            raise NumericalFailure("epoch 0: non-finite loss component 'pde'")

        monkeypatch.setattr(cli, "train", explode)
        assert cli.main(["run", "linear1d_forward", *TINY]) == NumericalFailure.exit_code
        manifest = _manifest(output_dir / "linear1d_forward")
        assert manifest["status"] == "numerical_failure"
        assert "pde" in manifest["error"]


class TestQQ:
    def test_two_ensembles(self, tmp_path, capsys):
        for name, seed in (("a", "0"), ("b", "1")):
            assert cli.main(["run", "linear1d_forward", *TINY, "--seed", seed, "--out", str(tmp_path / name)]) == 0
        capsys.readouterr()
        out = tmp_path / "qq.csv"
        assert cli.main(["qq", str(tmp_path / "a" / "u_ensemble.csv"), str(tmp_path / "b" / "u_ensemble.csv"),
                         "--out", str(out)]) == 0
        table = pd.read_csv(out)
        assert list(table.columns) == QQ_COLUMNS
        assert len(table) == 90

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        assert cli.main(["qq", str(path), str(path)]) == 2


class TestConfigFile:
    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "run.env"
        path.write_text("SEED=5\nEPOCHS=7\nW_PDE=2.5\n")
        config = build_config("linear1d_forward", load_config_file(str(path)), {"seed": 9, "epochs": None})
        assert config.seed == 9
        assert config.epochs == 7
        assert config.weights.w_pde == 2.5

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.env"
        path.write_text("EPOCHZ=7\n")
        with pytest.raises(ConfigError):
            load_config_file(str(path))

    def test_bad_value(self, tmp_path):
        path = tmp_path / "run.env"
        path.write_text("OUTPUTS=many\n")
        with pytest.raises(ConfigError):
            load_config_file(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config_file(str(tmp_path / "absent.env"))

    def test_cli_rejects_unknown_key(self, tmp_path):
        path = tmp_path / "run.env"
        path.write_text("COLOR=blue\n")
        assert cli.main(["run", "linear1d_forward", "--config", str(path)]) == 2

    def test_loss_reduction_key(self, tmp_path):
        path = tmp_path / "run.env"
        path.write_text("LOSS_REDUCTION=mean\n")
        config = build_config("linear1d_forward", load_config_file(str(path)), {})
        assert config.train_config(config.problem()).loss_reduction == "mean"
        path.write_text("LOSS_REDUCTION=median\n")
        with pytest.raises(ConfigError):
            build_config("linear1d_forward", load_config_file(str(path)), {})

    def test_paper_scale_flag(self):
        args = cli.build_parser().parse_args(["run", "allen_cahn_2d", "--paper-scale"])
        assert args.paper_scale is True
        config = build_config("allen_cahn_2d", {}, {"paper_scale": args.paper_scale})
        train_config = config.train_config(config.problem())
        assert train_config.hidden_u == tuple(Config.HIDDEN_2D_PAPER)
        assert train_config.M == Config.OUTPUTS_2D_PAPER
        assert train_config.epochs == Config.EPOCHS_2D_PAPER
