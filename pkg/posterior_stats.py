"""Posterior summaries of the replica ensemble.

Standard deviations are population (divide-by-M) everywhere, quantiles use
the nearest-rank rule.
"""
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import Config
from data_gen import Measurement, NoiseSpec, expand_to_replicas
from pde_residuals import PdeKind
from trainer import train
from utils import ConfigError, DimensionError

Exact = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]
QQ_COLUMNS = ["x", "fraction", "q_a", "q_b", "std_a", "std_b"]


@dataclass
class PosteriorField:
    eval_points: np.ndarray
    ensemble: np.ndarray
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.eval_points = np.asarray(self.eval_points, dtype=np.float64)
        if self.eval_points.ndim == 1:
            self.eval_points = self.eval_points.reshape(-1, 1)
        self.ensemble = np.atleast_2d(np.asarray(self.ensemble, dtype=np.float64))
        if len(self.eval_points) == 0:
            raise DimensionError("posterior field needs at least one evaluation point")
        if self.ensemble.shape[0] != len(self.eval_points):
            raise DimensionError("one ensemble row is needed per evaluation point")
        self.mean = self.ensemble.mean(axis=1)
        self.std = self.ensemble.std(axis=1)

    @property
    def replicas(self) -> int:
        return self.ensemble.shape[1]


@dataclass
class CoverageMap:
    covered: np.ndarray
    coverage_fraction: float


@dataclass
class KHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    mean: float
    std: float


def eval_grid(pde: PdeKind, count: Optional[int] = None) -> np.ndarray:
    domain = pde.domain
    if pde.dimension == 1:
        count = count or Config.EVAL_POINTS_1D
        return np.linspace(domain.lower[0], domain.upper[0], count).reshape(-1, 1)
    count = count or Config.EVAL_POINTS_2D
    gx, gy = np.meshgrid(
        np.linspace(domain.lower[0], domain.upper[0], count),
        np.linspace(domain.lower[1], domain.upper[1], count),
        indexing="ij",
    )
    return np.column_stack([gx.ravel(), gy.ravel()])


def summarize(net, eval_grid_points) -> PosteriorField:
    points = np.asarray(eval_grid_points, dtype=np.float64)
    if points.size == 0:
        raise DimensionError("evaluation grid is empty")
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    return PosteriorField(points, np.asarray(net(points), dtype=np.float64))


def summarize_ensemble(points, ensemble) -> PosteriorField:
    return PosteriorField(points, ensemble)


def _exact_values(field: PosteriorField, exact: Exact) -> np.ndarray:
    values = exact(field.eval_points) if callable(exact) else exact
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.shape != field.mean.shape:
        raise DimensionError("exact values do not match the evaluation grid")
    return values


def coverage(field: PosteriorField, exact: Exact) -> CoverageMap:
    covered = np.abs(_exact_values(field, exact) - field.mean) <= 2.0 * field.std
    return CoverageMap(covered, float(np.mean(covered)))


def grid_rmse(field: PosteriorField, exact: Exact) -> float:
    return float(np.sqrt(np.mean((field.mean - _exact_values(field, exact)) ** 2)))


def k_histogram(k_values, bin_count: int = Config.HISTOGRAM_BINS) -> KHistogram:
    k = np.asarray(k_values, dtype=np.float64).ravel()
    if k.size == 0:
        raise DimensionError("k array is empty")
    if bin_count < 1:
        raise ConfigError("bin_count must be >= 1")
    counts, edges = np.histogram(k, bins=bin_count, range=(k.min(), k.max()))
    return KHistogram(edges, counts, float(k.mean()), float(k.std()))


def nearest_rank_quantiles(values, fractions: Sequence[float]) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise DimensionError("ensemble is empty")
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions <= 0) or np.any(fractions > 1):
        raise ConfigError("quantile fractions must lie in (0, 1]")
    # inverted_cdf is the nearest-rank rule: smallest value with rank >= p * n
    return np.quantile(values, fractions, method="inverted_cdf")


def qq_points(ensemble_a, ensemble_b, quantile_fractions: Sequence[float] = Config.QQ_FRACTIONS) -> List[Tuple[float, float]]:
    q_a = nearest_rank_quantiles(ensemble_a, quantile_fractions)
    q_b = nearest_rank_quantiles(ensemble_b, quantile_fractions)
    return [(float(a), float(b)) for a, b in zip(q_a, q_b)]


@dataclass
class ConvergenceRow:
    M: int
    mean: np.ndarray
    std: np.ndarray
    delta_mean: Optional[float] = None
    delta_std: Optional[float] = None
    k_mean: Optional[float] = None
    k_std: Optional[float] = None


def convergence_in_M(config, measurements: Sequence[Measurement], noise: NoiseSpec, M_list: Sequence[int],
                     eval_points: Optional[np.ndarray] = None, verbose: bool = False) -> List[ConvergenceRow]:
    """Retrain for each M on the same measurements with fresh replica noise."""
    M_list = [int(m) for m in M_list]
    if any(b <= a for a, b in zip(M_list, M_list[1:])):
        raise ConfigError(f"M_list must be strictly increasing, got {M_list}")
    points = eval_points if eval_points is not None else eval_grid(config.pde)
    rows: List[ConvergenceRow] = []
    for M in M_list:
        data = expand_to_replicas(measurements, noise, M, seed=config.seed + M)
        state = train(replace(config, M=M), data, verbose=verbose)
        field = summarize(state.u_net, points)
        row = ConvergenceRow(M, field.mean, field.std)
        if state.k is not None:
            row.k_mean, row.k_std = float(state.k.mean()), float(state.k.std())
        if rows:
            row.delta_mean = float(np.max(np.abs(field.mean - rows[-1].mean)))
            row.delta_std = float(np.max(np.abs(field.std - rows[-1].std)))
        rows.append(row)
    return rows


def seed_consistency(k_arrays: Sequence[np.ndarray]) -> pd.DataFrame:
    """Per-run k mean/std plus the largest pairwise spread of each."""
    means = np.array([np.mean(k) for k in k_arrays])
    stds = np.array([np.std(k) for k in k_arrays])
    frame = pd.DataFrame({"run": np.arange(1, len(means) + 1), "mean": means, "std": stds})
    frame.attrs["mean_spread"] = float(means.max() - means.min()) if len(means) else 0.0
    frame.attrs["std_spread"] = float(stds.max() - stds.min()) if len(stds) else 0.0
    return frame


def field_seed_consistency(fields: Sequence[PosteriorField], seeds: Sequence[int]) -> pd.DataFrame:
    """Mean/std columns per seed on a shared grid; attrs hold the largest pairwise gaps."""
    if not fields or len(fields) != len(seeds):
        raise ConfigError("need one field per seed")
    points = fields[0].eval_points
    if any(f.eval_points.shape != points.shape or not np.array_equal(f.eval_points, points) for f in fields):
        raise DimensionError("seed fields must share one evaluation grid")
    frame = pd.DataFrame(points, columns=_coord_columns(points))
    for seed, f in zip(seeds, fields):
        frame[f"mean_seed{seed}"] = f.mean
        frame[f"std_seed{seed}"] = f.std
    means = np.stack([f.mean for f in fields])
    stds = np.stack([f.std for f in fields])
    # max over points of (max - min over seeds) equals the largest pairwise difference
    frame.attrs["mean_spread"] = float(np.max(means.max(axis=0) - means.min(axis=0)))
    frame.attrs["std_spread"] = float(np.max(stds.max(axis=0) - stds.min(axis=0)))
    return frame


def _coord_columns(points: np.ndarray) -> List[str]:
    return ["x", "y"][:points.shape[1]]


def field_frame(field: PosteriorField, exact: Optional[Exact] = None) -> pd.DataFrame:
    frame = pd.DataFrame(field.eval_points, columns=_coord_columns(field.eval_points))
    if exact is not None:
        exact_values = _exact_values(field, exact)
        frame["exact"] = exact_values
    frame["mean"] = field.mean
    frame["std"] = field.std
    if exact is not None:
        frame["covered"] = coverage(field, exact_values).covered.astype(int)
    return frame


def ensemble_frame(field: PosteriorField) -> pd.DataFrame:
    frame = pd.DataFrame(field.eval_points, columns=_coord_columns(field.eval_points))
    replicas = pd.DataFrame(field.ensemble, columns=[f"r{j}" for j in range(field.replicas)])
    return pd.concat([frame, replicas], axis=1)


def read_ensemble_csv(path: str) -> PosteriorField:
    frame = pd.read_csv(path)
    coords = [c for c in ("x", "y") if c in frame.columns]
    replica_cols = [c for c in frame.columns if c.startswith("r") and c[1:].isdigit()]
    if not coords or not replica_cols:
        raise ConfigError(f"{path} is not an ensemble table (x[,y],r0,r1,...)")
    return PosteriorField(frame[coords].to_numpy(dtype=np.float64), frame[replica_cols].to_numpy(dtype=np.float64))


def histogram_frame(hist: KHistogram) -> pd.DataFrame:
    return pd.DataFrame({"bin_left": hist.bin_edges[:-1], "bin_right": hist.bin_edges[1:], "count": hist.counts})


def qq_frame(field_a: PosteriorField, field_b: PosteriorField, locations: np.ndarray,
             fractions: Sequence[float] = Config.QQ_FRACTIONS) -> pd.DataFrame:
    """QQ rows at each location, both ensembles interpolated linearly in 1D.

    Each location contributes one row per fraction, carrying the population std
    of both interpolated ensembles at that location.
    """
    locations = np.asarray(locations, dtype=np.float64).ravel()
    rows = []
    for x in locations:
        a = _ensemble_at(field_a, x)
        b = _ensemble_at(field_b, x)
        std_a, std_b = float(a.std()), float(b.std())
        for fraction, (q_a, q_b) in zip(fractions, qq_points(a, b, fractions)):
            rows.append({"x": x, "fraction": fraction, "q_a": q_a, "q_b": q_b, "std_a": std_a, "std_b": std_b})
    return pd.DataFrame(rows, columns=QQ_COLUMNS)


def qq_within_tolerance(frame: pd.DataFrame, factor: float = Config.QQ_STD_FACTOR) -> pd.Series:
    """Row-wise |q_a - q_b| <= factor * max(std_a, std_b) at the row's own location."""
    limit = factor * np.maximum(frame["std_a"], frame["std_b"])
    return (frame["q_a"] - frame["q_b"]).abs() <= limit


def _ensemble_at(field: PosteriorField, x: float) -> np.ndarray:
    if field.eval_points.shape[1] != 1:
        raise DimensionError("QQ comparison is defined for 1D fields")
    grid = field.eval_points[:, 0]
    return np.array([np.interp(x, grid, field.ensemble[:, j]) for j in range(field.replicas)])


def write_frame(frame: pd.DataFrame, path: str) -> None:
    frame.to_csv(path, index=False, float_format=Config.FLOAT_FORMAT)
