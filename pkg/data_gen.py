"""Manufactured solutions, noisy measurements and bootstrap replica targets."""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import Config
from pde_residuals import PdeKind, PdeTag
from utils import ConfigError, DimensionError, DomainError, make_rng

QUANTITIES = ("u", "f")


def exact_u(pde: PdeKind, points: np.ndarray) -> np.ndarray:
    points = _check_points(pde, points)
    if pde.dimension == 1:
        return np.sin(6.0 * points[:, 0]) ** 3
    return np.sin(np.pi * points[:, 0]) * np.sin(np.pi * points[:, 1])


def exact_laplacian(pde: PdeKind, points: np.ndarray) -> np.ndarray:
    """Analytic second derivative (1D) or Laplacian (2D) of ``exact_u``."""
    points = _check_points(pde, points)
    if pde.dimension == 1:
        s = np.sin(6.0 * points[:, 0])
        return 108.0 * s * (2.0 - 3.0 * s ** 2)
    return -2.0 * np.pi ** 2 * exact_u(pde, points)


def exact_f(pde: PdeKind, points: np.ndarray) -> np.ndarray:
    u = exact_u(pde, points)
    return pde.lam * exact_laplacian(pde, points) + pde.reaction(u, pde.k_value)


def manufactured_solution(problem: PdeKind, point) -> Tuple[float, float]:
    point = np.asarray(point, dtype=np.float64).reshape(1, -1)
    return float(exact_u(problem, point)[0]), float(exact_f(problem, point)[0])


def _check_points(pde: PdeKind, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    points = points.reshape(-1, pde.dimension)
    if not np.all(pde.domain.contains(points)):
        raise DomainError(f"points outside the {pde.tag.value} domain")
    return points


@dataclass(frozen=True)
class Measurement:
    location: Tuple[float, ...]
    value: float
    quantity: str

    def __post_init__(self):
        if self.quantity not in QUANTITIES:
            raise ConfigError(f"unknown measured quantity {self.quantity!r}")


@dataclass(frozen=True)
class NoiseSpec:
    sigma_u: float
    sigma_f: float

    def __post_init__(self):
        if self.sigma_u < 0 or self.sigma_f < 0:
            raise ConfigError("noise standard deviations must be >= 0")

    @classmethod
    def case(cls, name: str) -> "NoiseSpec":
        if name not in Config.NOISE_CASES:
            raise ConfigError(f"unknown noise case {name!r}, expected one of {sorted(Config.NOISE_CASES)}")
        sigma = Config.NOISE_CASES[name]
        return cls(sigma, sigma)

    def sigma(self, quantity: str) -> float:
        return self.sigma_u if quantity == "u" else self.sigma_f


@dataclass(frozen=True)
class Layout:
    """Where a quantity is measured.

    ``kind`` is ``equally_spaced`` (count over ``segment``, endpoints
    included), ``uniform_random`` (count over ``region``) or
    ``boundary_equal`` (count per edge of the 2D box, both ends of 1D).
    """
    kind: str
    count: int
    quantity: str = "f"
    segment: Optional[Tuple[float, float]] = None
    region: Optional[Tuple[Tuple[float, float], ...]] = None

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError(f"measurement count must be >= 1, got {self.count}")
        if self.kind not in ("equally_spaced", "uniform_random", "boundary_equal"):
            raise ConfigError(f"unknown layout {self.kind!r}")


def equally_spaced(count: int, segment=None, quantity: str = "f") -> Layout:
    return Layout("equally_spaced", count, quantity, segment=None if segment is None else tuple(segment))


def uniform_random(count: int, region=None, quantity: str = "f") -> Layout:
    return Layout("uniform_random", count, quantity, region=None if region is None else tuple(map(tuple, region)))


def boundary_equal(count_per_edge: int, quantity: str = "u") -> Layout:
    return Layout("boundary_equal", count_per_edge, quantity)


def layout_points(pde: PdeKind, layout: Layout, rng: np.random.Generator) -> np.ndarray:
    domain = pde.domain
    if layout.kind == "equally_spaced":
        if pde.dimension != 1:
            raise ConfigError("equally_spaced layouts are 1D only")
        lo, hi = layout.segment or (domain.lower[0], domain.upper[0])
        return np.linspace(lo, hi, layout.count).reshape(-1, 1)
    if layout.kind == "uniform_random":
        region = layout.region or tuple(zip(domain.lower, domain.upper))
        lows = np.array([r[0] for r in region])
        highs = np.array([r[1] for r in region])
        return rng.uniform(lows, highs, size=(layout.count, len(region)))
    if pde.dimension == 1:
        return np.array([[domain.lower[0]], [domain.upper[0]]])
    (x0, y0), (x1, y1) = domain.lower, domain.upper
    t = np.linspace(0.0, 1.0, layout.count)
    edges = [
        np.column_stack([x0 + (x1 - x0) * t, np.full_like(t, y0)]),
        np.column_stack([np.full_like(t, x1), y0 + (y1 - y0) * t]),
        np.column_stack([x1 - (x1 - x0) * t, np.full_like(t, y1)]),
        np.column_stack([np.full_like(t, x0), y1 - (y1 - y0) * t]),
    ]
    return np.concatenate(edges, axis=0)


def sample_measurements(problem: PdeKind, layout, noise: NoiseSpec, seed: int) -> List[Measurement]:
    """Exact values plus one Gaussian draw each; ``layout`` may be a sequence of layouts."""
    layouts = [layout] if isinstance(layout, Layout) else list(layout)
    measurements = []
    for index, item in enumerate(layouts):
        points = layout_points(problem, item, make_rng(seed, 1, index))
        exact = exact_u(problem, points) if item.quantity == "u" else exact_f(problem, points)
        values = exact + make_rng(seed, 2, index).normal(0.0, noise.sigma(item.quantity), size=len(points))
        measurements.extend(
            Measurement(tuple(float(c) for c in p), float(v), item.quantity)
            for p, v in zip(points, values)
        )
    return measurements


@dataclass
class ReplicaDataset:
    measurements: List[Measurement]
    replica_targets: np.ndarray
    rng_seed: int

    def __post_init__(self):
        self.replica_targets = np.atleast_2d(np.asarray(self.replica_targets, dtype=np.float64))
        if self.replica_targets.shape[0] != len(self.measurements):
            raise DimensionError("one row of replica targets is needed per measurement")

    @property
    def replicas(self) -> int:
        return self.replica_targets.shape[1]

    @property
    def dimension(self) -> int:
        return len(self.measurements[0].location) if self.measurements else 1

    def _mask(self, quantity: str) -> np.ndarray:
        return np.array([m.quantity == quantity for m in self.measurements], dtype=bool)

    def points(self, quantity: str) -> np.ndarray:
        mask = self._mask(quantity)
        locs = [m.location for m, keep in zip(self.measurements, mask) if keep]
        return np.array(locs, dtype=np.float64).reshape(-1, self.dimension)

    def values(self, quantity: str) -> np.ndarray:
        return np.array([m.value for m in self.measurements if m.quantity == quantity])

    def targets(self, quantity: str) -> np.ndarray:
        return self.replica_targets[self._mask(quantity)]


def expand_to_replicas(measurements: Sequence[Measurement], noise: NoiseSpec, M: int, seed: int) -> ReplicaDataset:
    """Parametric bootstrap: independent noise per (measurement, replica) pair."""
    if M < 1:
        raise ConfigError(f"number of replicas must be >= 1, got {M}")
    measurements = list(measurements)
    rng = make_rng(seed, 3)
    values = np.array([m.value for m in measurements], dtype=np.float64)
    sigmas = np.array([noise.sigma(m.quantity) for m in measurements], dtype=np.float64)
    draws = rng.standard_normal(size=(len(measurements), M))
    return ReplicaDataset(measurements, values[:, None] + sigmas[:, None] * draws, seed)


def export_dataset(dataset: ReplicaDataset, path: str) -> None:
    coords = ["x", "y"][:dataset.dimension]
    frame = pd.DataFrame({"quantity": [m.quantity for m in dataset.measurements]})
    for axis, name in enumerate(coords):
        frame[name] = [m.location[axis] for m in dataset.measurements]
    frame["value"] = [m.value for m in dataset.measurements]
    replicas = pd.DataFrame(
        dataset.replica_targets, columns=[f"r{j}" for j in range(dataset.replicas)]
    )
    pd.concat([frame, replicas], axis=1).to_csv(path, index=False, float_format=Config.FLOAT_FORMAT)


def import_dataset(path: str, rng_seed: int = -1) -> ReplicaDataset:
    frame = pd.read_csv(path)
    coords = [c for c in ("x", "y") if c in frame.columns]
    replica_cols = [c for c in frame.columns if c.startswith("r") and c[1:].isdigit()]
    if not coords or "value" not in frame.columns or not replica_cols:
        raise ConfigError(f"{path} is not a dataset table")
    measurements = [
        Measurement(tuple(float(row[c]) for c in coords), float(row["value"]), str(row["quantity"]))
        for _, row in frame.iterrows()
    ]
    return ReplicaDataset(measurements, frame[replica_cols].to_numpy(dtype=np.float64), rng_seed)


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    pde: PdeKind
    layouts: Tuple[Layout, ...]


def problem_preset(name: str, f_count: Optional[int] = None) -> ProblemSpec:
    """Measurement setups of the benchmark problems; ``f_count`` overrides the f-measurement count."""
    if name == "linear1d":
        pde = PdeKind(PdeTag.LINEAR_1D, lam=0.01)
        layouts = (equally_spaced(f_count or 16, quantity="f"), equally_spaced(2, quantity="u"))
    elif name == "nonlinear1d":
        pde = PdeKind(PdeTag.NONLINEAR_TANH_1D, lam=0.01, k_value=0.7)
        layouts = (equally_spaced(f_count or 32, quantity="f"), equally_spaced(2, quantity="u"))
    elif name == "inverse1d":
        pde = PdeKind(PdeTag.NONLINEAR_TANH_1D, lam=0.01, k_mode="trainable", k_value=0.7)
        layouts = (equally_spaced(f_count or 32, quantity="f"), equally_spaced(8, quantity="u"))
    elif name == "allen_cahn_2d":
        pde = PdeKind(PdeTag.ALLEN_CAHN_2D, lam=0.01)
        layouts = (uniform_random(f_count or 500, quantity="f"), boundary_equal(25, quantity="u"))
    elif name == "inverse2d":
        pde = PdeKind(PdeTag.QUADRATIC_REACTION_2D, lam=0.01, k_mode="trainable", k_value=1.0)
        layouts = (
            uniform_random(f_count or 100, quantity="f"),
            uniform_random(100, quantity="u"),
            boundary_equal(25, quantity="u"),
        )
    else:
        raise ConfigError(f"unknown problem {name!r}")
    return ProblemSpec(name, pde, layouts)
