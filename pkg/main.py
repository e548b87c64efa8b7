import argparse
import json
import os
import platform
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from config import Config
from data_gen import exact_f, exact_u, expand_to_replicas, export_dataset, sample_measurements
from experiments import PRIOR_F_MEASUREMENTS, ExperimentConfig, build_config, load_config_file
from fem_mc import evaluate_fem, fem_mc_bootstrap, fem_mc_ensemble, uniform_mesh
from posterior_stats import (
    convergence_in_M,
    coverage,
    ensemble_frame,
    eval_grid,
    field_frame,
    field_seed_consistency,
    grid_rmse,
    histogram_frame,
    k_histogram,
    qq_frame,
    qq_within_tolerance,
    read_ensemble_csv,
    seed_consistency,
    summarize,
    write_frame,
)
from trainer import (
    LossWeights,
    PriorStatsConstraint,
    load_prior_stats,
    save_checkpoint,
    save_prior_stats,
    train,
    write_loss_trace,
)
from utils import ConfigError, MopinnError, NumericalFailure, ensure_dir, log_error, write_json_atomic


@dataclass
class RunManifest:
    status: str
    config: Dict
    versions: Dict
    started: str
    wall_clock_seconds: float = 0.0
    metrics: Dict = field(default_factory=dict)
    implementation: Dict = field(default_factory=dict)
    artifacts: List[str] = field(default_factory=list)
    error: Optional[str] = None


def _versions() -> Dict:
    return {"python": platform.python_version(), "numpy": np.__version__, "pandas": pd.__version__}


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.out_dir = config.out_dir
        self.artifacts: List[str] = []
        self.metrics: Dict = {}
        self.implementation: Dict = {}
        # one FEM worker in deterministic mode
        self.fem_workers = 1 if config.deterministic else Config.FEM_WORKERS

    # -- artifact helpers -------------------------------------------------

    def _path(self, *parts) -> str:
        path = os.path.join(self.out_dir, *parts)
        ensure_dir(os.path.dirname(path))
        return path

    def _write(self, frame: pd.DataFrame, *parts) -> str:
        path = self._path(*parts)
        write_frame(frame, path)
        self.artifacts.append(os.path.relpath(path, self.out_dir))
        return path

    # -- shared pipeline --------------------------------------------------

    def _train_and_summarize(self, problem, seed: int, data_seed: int, subdir: str = "",
                             prior: Optional[PriorStatsConstraint] = None,
                             weights: Optional[LossWeights] = None, M: Optional[int] = None):
        cfg = self.config
        noise = cfg.noise_spec
        train_cfg = cfg.train_config(problem, seed=seed, M=M, weights=weights)
        pde = problem.pde

        print(f"📡 Generating noisy measurements (data seed {data_seed}, sigma {noise.sigma_u})...")
        measurements = sample_measurements(pde, problem.layouts, noise, data_seed)
        data = expand_to_replicas(measurements, noise, train_cfg.M, seed)
        dataset_path = self._path(subdir, "dataset.csv")
        export_dataset(data, dataset_path)
        self.artifacts.append(os.path.relpath(dataset_path, self.out_dir))

        print(f"🤖 Training MO-PINN: M={train_cfg.M}, u-net {train_cfg.u_shape}, {train_cfg.epochs} epochs...")
        state = train(train_cfg, data, prior=prior)
        loss_path = self._path(subdir, "loss_trace.csv")
        write_loss_trace(state.loss_history, loss_path)
        checkpoint_path = self._path(subdir, "checkpoint.bin")
        save_checkpoint(state, checkpoint_path)
        self.artifacts += [os.path.relpath(p, self.out_dir) for p in (loss_path, checkpoint_path)]

        print("📊 Computing posterior statistics...")
        grid = eval_grid(pde)
        u_field = summarize(state.u_net, grid)
        f_field = summarize(state.f_net, grid)
        u_exact = exact_u(pde, grid)
        f_exact = exact_f(pde, grid)
        self._write(field_frame(u_field, u_exact), subdir, "u_posterior.csv")
        self._write(field_frame(f_field, f_exact), subdir, "f_posterior.csv")
        if pde.dimension == 1:
            self._write(ensemble_frame(u_field), subdir, "u_ensemble.csv")

        metrics = {
            "u_coverage": coverage(u_field, u_exact).coverage_fraction,
            "f_coverage": coverage(f_field, f_exact).coverage_fraction,
            "u_rmse": grid_rmse(u_field, u_exact),
            "u_mean_std": float(np.mean(u_field.std)),
            "f_mean_std": float(np.mean(f_field.std)),
            "final_loss": state.loss_history[-1].total,
        }
        # ensemble means at the measured locations, against the raw values and the replica target means
        for quantity, net in (("u", state.u_net), ("f", state.f_net)):
            rows = [i for i, m in enumerate(data.measurements) if m.quantity == quantity]
            if rows:
                locations = np.array([data.measurements[i].location for i in rows])
                mean_pred = np.asarray(net(locations)).mean(axis=1)
                values = np.array([data.measurements[i].value for i in rows])
                target_means = data.replica_targets[rows].mean(axis=1)
                metrics[f"{quantity}_meas_max_gap"] = float(np.max(np.abs(mean_pred - values)))
                metrics[f"{quantity}_target_max_gap"] = float(np.max(np.abs(mean_pred - target_means)))
                metrics[f"{quantity}_meas_tolerance"] = float(2.0 * noise.sigma(quantity) / np.sqrt(train_cfg.M))
        if state.k is not None:
            hist = k_histogram(state.k)
            self._write(histogram_frame(hist), subdir, "k_histogram.csv")
            self._write(pd.DataFrame({"k": state.k}), subdir, "k_values.csv")
            metrics.update({"k_mean": hist.mean, "k_std": hist.std, "k_exact": pde.k_value})
        self.implementation = {
            "stencil_h": train_cfg.stencil.h,
            "collocation_per_axis": train_cfg.collocation_count,
            "eval_points_per_axis": Config.EVAL_POINTS_1D if pde.dimension == 1 else Config.EVAL_POINTS_2D,
            "k_init": "uniform[0,1]" if pde.trainable else None,
            "hidden_layers": list(train_cfg.hidden_u),
            "outputs": train_cfg.M,
            "epochs": train_cfg.epochs,
        }
        return state, data, measurements, u_field, metrics

    # -- experiments ------------------------------------------------------

    def run_forward(self):
        problem = self.config.problem()
        _, _, _, _, metrics = self._train_and_summarize(problem, self.config.seed, self.config.data_seed)
        self.metrics.update(metrics)

    def run_fem_compare(self):
        cfg = self.config
        problem = cfg.problem()
        state, data, measurements, u_field, metrics = self._train_and_summarize(problem, cfg.seed, cfg.data_seed)
        self.metrics.update(metrics)

        print(f"🧮 Running FEM Monte Carlo ({cfg.ensemble} members)...")
        mesh = uniform_mesh()
        fem_data = data if cfg.ensemble == data.replicas else expand_to_replicas(
            measurements, cfg.noise_spec, cfg.ensemble, cfg.seed + 1)
        fem_field = fem_mc_bootstrap(fem_data, mesh, problem.pde.lam, workers=self.fem_workers)
        fem_exact = exact_u(problem.pde, mesh.nodes)
        self._write(field_frame(fem_field, fem_exact), "fem_u_posterior.csv")
        self._write(ensemble_frame(fem_field), "fem_u_ensemble.csv")

        resampled = fem_mc_ensemble(problem.pde, problem.layouts, cfg.noise_spec, cfg.ensemble, mesh, cfg.data_seed,
                                    workers=self.fem_workers)
        self._write(field_frame(resampled, fem_exact), "fem_resampled_u_posterior.csv")

        pinn_nodes = summarize(state.u_net, mesh.nodes)
        locations = np.array(Config.COMPARISON_LOCATIONS)
        qq = qq_frame(u_field, fem_field, locations)
        self._write(qq, "qq.csv")

        prior = PriorStatsConstraint(
            locations, evaluate_fem(mesh, fem_field.mean, locations), evaluate_fem(mesh, fem_field.std, locations))
        prior_path = self._path("prior_stats.csv")
        save_prior_stats(prior, prior_path)
        self.artifacts.append("prior_stats.csv")

        max_std = float(max(pinn_nodes.std.max(), fem_field.std.max()))
        mean_gap = float(np.max(np.abs(pinn_nodes.mean - fem_field.mean)))
        qq_gap = float(np.max(np.abs(qq["q_a"] - qq["q_b"])))
        # each QQ row is judged against the spread at its own location
        qq_ok = qq_within_tolerance(qq)
        self.metrics.update({
            "fem_max_mean_gap": mean_gap,
            "fem_max_std": max_std,
            "fem_mean_gate": mean_gap <= 0.5 * max_std,
            "qq_max_gap": qq_gap,
            "qq_rows": int(len(qq)),
            "qq_rows_within": int(qq_ok.sum()),
            "qq_gate": bool(qq_ok.all()),
            "fem_resampled_mean_std": float(np.mean(resampled.std)),
        })
        self.implementation.update({"fem_nodes": len(mesh.nodes), "comparison_locations": list(locations)})

    def run_prior_augmented(self):
        cfg = self.config
        if not cfg.prior_path or not os.path.exists(cfg.prior_path):
            raise ConfigError(f"prior statistics file {cfg.prior_path} not found; run fem_compare first")
        prior = load_prior_stats(cfg.prior_path)
        problem = cfg.problem()
        M = cfg.outputs or Config.OUTPUTS_1D
        # prior terms are not summed over replicas, so scale them to match the data terms
        weights = replace(cfg.weights, w_prior_mean=cfg.weights.w_prior_mean * M,
                          w_prior_std=cfg.weights.w_prior_std * M)
        variants = [
            ("measurements_only", None),
            ("with_means", prior.without_stds()),
            ("with_means_stds", prior if prior.target_stds is not None else None),
        ]
        for name, variant_prior in variants:
            if name == "with_means_stds" and variant_prior is None:
                raise ConfigError(f"{cfg.prior_path} has no std column")
            print(f"\n🔁 Variant: {name}")
            _, _, _, _, metrics = self._train_and_summarize(
                problem, cfg.seed, cfg.data_seed, subdir=name, prior=variant_prior, weights=weights, M=M)
            self.metrics[name] = metrics
        rmse = [self.metrics[name]["u_rmse"] for name, _ in variants]
        self.metrics["rmse_ordering_holds"] = bool(rmse[0] > rmse[1] >= rmse[2])
        self.implementation.update({"f_measurements": PRIOR_F_MEASUREMENTS, "prior_file": cfg.prior_path,
                                    "prior_weight_scale": M})

    def run_seed_consistency(self):
        cfg = self.config
        problem = cfg.problem()
        k_arrays = []
        for run in range(cfg.runs):
            print(f"\n🎲 Run {run + 1}/{cfg.runs} (seed {cfg.seed + run})")
            state, _, _, _, metrics = self._train_and_summarize(
                problem, cfg.seed + run, cfg.data_seed, subdir=f"run_{run + 1}")
            k_arrays.append(state.k)
            self.metrics[f"run_{run + 1}"] = metrics
        table = seed_consistency(k_arrays)
        self._write(table, "k_consistency.csv")
        self.metrics.update({"k_mean_spread": table.attrs["mean_spread"], "k_std_spread": table.attrs["std_spread"]})

    def run_forward_seed_consistency(self):
        cfg = self.config
        problem = cfg.problem()
        fields, seeds = [], []
        for run in range(cfg.runs):
            seed = cfg.seed + run
            print(f"\n🎲 Run {run + 1}/{cfg.runs} (seed {seed})")
            _, _, _, u_field, metrics = self._train_and_summarize(
                problem, seed, cfg.data_seed, subdir=f"run_{run + 1}")
            fields.append(u_field)
            seeds.append(seed)
            self.metrics[f"run_{run + 1}"] = metrics
        table = field_seed_consistency(fields, seeds)
        self._write(table, "u_seed_fields.csv")
        self.metrics.update({"u_mean_max_pairwise_diff": table.attrs["mean_spread"],
                             "u_std_max_pairwise_diff": table.attrs["std_spread"]})

    def run_measurement_variation(self):
        cfg = self.config
        problem = cfg.problem()
        rows = []
        for run in range(cfg.runs):
            data_seed = cfg.data_seed + run
            print(f"\n🎲 Measurement set {run + 1}/{cfg.runs} (data seed {data_seed})")
            _, _, _, _, metrics = self._train_and_summarize(problem, cfg.seed, data_seed, subdir=f"run_{run + 1}")
            rows.append({"run": run + 1, "data_seed": data_seed, "u_coverage": metrics["u_coverage"],
                         "u_mean_std": metrics["u_mean_std"], "u_rmse": metrics["u_rmse"]})
        self._write(pd.DataFrame(rows), "measurement_variation.csv")
        self.metrics["runs"] = rows

    def run_convergence_m(self):
        cfg = self.config
        problem = cfg.problem()
        measurements = sample_measurements(problem.pde, problem.layouts, cfg.noise_spec, cfg.data_seed)
        grid = eval_grid(problem.pde)
        print(f"📈 Training for M in {list(cfg.m_list)}...")
        rows = convergence_in_M(cfg.train_config(problem), measurements, cfg.noise_spec, cfg.m_list,
                                eval_points=grid, verbose=True)
        fields_frame = pd.DataFrame({"x": grid[:, 0]})
        for row in rows:
            fields_frame[f"mean_M{row.M}"] = row.mean
            fields_frame[f"std_M{row.M}"] = row.std
        self._write(fields_frame, "convergence_fields.csv")
        table = pd.DataFrame([{"M": r.M, "delta_mean": r.delta_mean, "delta_std": r.delta_std,
                               "k_mean": r.k_mean, "k_std": r.k_std} for r in rows])
        self._write(table, "convergence.csv")
        self.metrics["deltas"] = table[["M", "delta_mean", "delta_std"]].to_dict(orient="records")

    # -- entry point --------------------------------------------------------

    def run(self) -> RunManifest:
        cfg = self.config
        started = time.time()
        manifest = RunManifest("running", cfg.to_dict(), _versions(), datetime.now().isoformat(timespec="seconds"))
        handlers = {
            "fem_compare": self.run_fem_compare,
            "prior_augmented": self.run_prior_augmented,
            "seed_consistency": self.run_seed_consistency,
            "forward_seed_consistency": self.run_forward_seed_consistency,
            "measurement_variation": self.run_measurement_variation,
            "convergence_m": self.run_convergence_m,
        }
        try:
            ensure_dir(self.out_dir)
        except OSError as e:
            raise ConfigError(f"output directory {self.out_dir} is not writable: {e}")
        try:
            print(f"🚀 Starting experiment {cfg.experiment} (noise {cfg.noise}, seed {cfg.seed})")
            # single-threaded BLAS keeps every reduction in a fixed order
            limits = threadpool_limits(limits=1) if cfg.deterministic else nullcontext()
            with limits:
                handlers.get(cfg.experiment, self.run_forward)()
            manifest.status = "success"
        except NumericalFailure as e:
            manifest.status = "numerical_failure"
            manifest.error = str(e)
            log_error(f"{cfg.experiment}: {e}", component="ExperimentRunner", output_dir=self.out_dir)
        except Exception as e:
            manifest.status = "failed"
            manifest.error = str(e)
            log_error(f"{cfg.experiment}: {e}", component="ExperimentRunner", output_dir=self.out_dir)
            raise
        finally:
            manifest.wall_clock_seconds = round(time.time() - started, 3)
            manifest.metrics = _jsonable(self.metrics)
            manifest.implementation = _jsonable(self.implementation)
            manifest.artifacts = list(self.artifacts)
            if manifest.status == "running":
                manifest.status = "failed"
            write_json_atomic(os.path.join(self.out_dir, "manifest.json"), asdict(manifest))
        print(f"📁 Results saved in: {self.out_dir}")
        return manifest


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, float) and value != value:
        return None
    return value


def run_experiment(config: ExperimentConfig) -> RunManifest:
    return ExperimentRunner(config).run()


def run_prior_augmented(config: ExperimentConfig) -> RunManifest:
    if config.experiment != "prior_augmented":
        config = replace(config, experiment="prior_augmented")
    return ExperimentRunner(config).run()


def run_qq(path_a: str, path_b: str, out: Optional[str] = None, locations=None) -> pd.DataFrame:
    field_a = read_ensemble_csv(path_a)
    field_b = read_ensemble_csv(path_b)
    table = qq_frame(field_a, field_b, np.array(locations or Config.COMPARISON_LOCATIONS))
    if out:
        write_frame(table, out)
    return table


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mopinn", description="Multi-output PINN experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a named experiment")
    run.add_argument("experiment")
    run.add_argument("--config", help="KEY=VALUE experiment file; flags override it")
    run.add_argument("--noise", choices=sorted(Config.NOISE_CASES))
    run.add_argument("--seed", type=int)
    run.add_argument("--data-seed", dest="data_seed", type=int)
    run.add_argument("--outputs", type=int)
    run.add_argument("--epochs", type=int)
    run.add_argument("--ensemble", type=int)
    run.add_argument("--runs", type=int)
    run.add_argument("--prior", dest="prior_path")
    run.add_argument("--deterministic", action="store_true", default=None)
    run.add_argument("--paper-scale", dest="paper_scale", action="store_true", default=None)
    run.add_argument("--out", dest="out_dir")

    qq = sub.add_parser("qq", help="quantile-quantile table of two ensemble CSVs")
    qq.add_argument("field_a")
    qq.add_argument("field_b")
    qq.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "qq":
            table = run_qq(args.field_a, args.field_b, args.out)
            if not args.out:
                print(table.to_csv(index=False, float_format=Config.FLOAT_FORMAT), end="")
            return 0
        print("=" * 60)
        print("🧠 MO-PINN EXPERIMENT RUNNER")
        print("=" * 60)
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "experiment", "config")}
        file_values = load_config_file(args.config) if args.config else {}
        config = build_config(args.experiment, file_values, flags)
        manifest = run_experiment(config)
    except ConfigError as e:
        print(f"❌ Config error: {e}", file=sys.stderr)
        log_error(str(e), component="cli")
        return ConfigError.exit_code
    except MopinnError as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        log_error(str(e), component="cli")
        return NumericalFailure.exit_code
    if manifest.status != "success":
        print(f"❌ {manifest.status}: {manifest.error}", file=sys.stderr)
        return NumericalFailure.exit_code
    print("✅ Experiment completed successfully!")
    print(json.dumps(manifest.metrics, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
