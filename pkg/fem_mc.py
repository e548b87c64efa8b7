"""Linear-element FEM for ``lam * u'' = f`` on [-0.7, 0.7] and its Monte Carlo wrappers."""
import concurrent.futures
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from config import Config
from data_gen import Layout, Measurement, NoiseSpec, ReplicaDataset, sample_measurements
from pde_residuals import DOMAIN_1D, PdeKind, PdeTag
from posterior_stats import PosteriorField, summarize_ensemble
from utils import DomainError, NumericalFailure, check_finite, make_rng

GAUSS_OFFSET = 1.0 / np.sqrt(3.0)


@dataclass
class Mesh1D:
    nodes: np.ndarray

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64).ravel()
        if len(self.nodes) < 2 or np.any(np.diff(self.nodes) <= 0):
            raise DomainError("mesh nodes must be strictly increasing with at least two nodes")

    @property
    def element_count(self) -> int:
        return len(self.nodes) - 1


def uniform_mesh(n_nodes: int = Config.FEM_NODES, lower: float = DOMAIN_1D.lower[0],
                 upper: float = DOMAIN_1D.upper[0]) -> Mesh1D:
    return Mesh1D(np.linspace(lower, upper, n_nodes))


@dataclass
class TridiagonalSystem:
    sub: np.ndarray
    main: np.ndarray
    sup: np.ndarray
    rhs: np.ndarray

    def dense(self) -> np.ndarray:
        return np.diag(self.main) + np.diag(self.sub, -1) + np.diag(self.sup, 1)


def thomas_solve(system: TridiagonalSystem) -> np.ndarray:
    """Tridiagonal elimination without pivoting; ``sub[i]`` couples row ``i+1`` to ``i``."""
    main = np.array(system.main, dtype=np.float64)
    rhs = np.array(system.rhs, dtype=np.float64)
    sub, sup = np.asarray(system.sub, dtype=np.float64), np.asarray(system.sup, dtype=np.float64)
    n = len(main)
    c_prime = np.zeros(max(n - 1, 0))
    d_prime = np.zeros(n)
    if main[0] == 0.0:
        raise NumericalFailure("singular tridiagonal system (zero pivot in row 0)")
    if n > 1:
        c_prime[0] = sup[0] / main[0]
    d_prime[0] = rhs[0] / main[0]
    for i in range(1, n):
        pivot = main[i] - sub[i - 1] * c_prime[i - 1]
        if pivot == 0.0:
            raise NumericalFailure(f"singular tridiagonal system (zero pivot in row {i})")
        if i < n - 1:
            c_prime[i] = sup[i] / pivot
        d_prime[i] = (rhs[i] - sub[i - 1] * d_prime[i - 1]) / pivot
    x = np.zeros(n)
    x[-1] = d_prime[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d_prime[i] - c_prime[i] * x[i + 1]
    return x


def _source_table(f_measurements) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(f_measurements, tuple) and len(f_measurements) == 2:
        locations, values = (np.asarray(a, dtype=np.float64).ravel() for a in f_measurements)
    else:
        items = [m for m in f_measurements if m.quantity == "f"]
        locations = np.array([m.location[0] for m in items], dtype=np.float64)
        values = np.array([m.value for m in items], dtype=np.float64)
    order = np.argsort(locations, kind="stable")
    return locations[order], values[order]


def interpolate_f_linear(f_measurements, x):
    """Piecewise-linear source through the f measurements.

    ``f_measurements`` is a sequence of f ``Measurement`` objects or a
    ``(locations, values)`` pair.
    """
    locations, values = _source_table(f_measurements)
    if len(locations) == 0:
        raise DomainError("no f measurements to interpolate")
    x_arr = np.asarray(x, dtype=np.float64)
    if np.any(x_arr < locations[0] - 1e-12) or np.any(x_arr > locations[-1] + 1e-12):
        raise DomainError("x lies outside the span of the f measurements")
    result = np.interp(x_arr, locations, values)
    return float(result) if result.ndim == 0 else result


def fem_solve(mesh: Mesh1D, lam: float, f_interp: Callable[[np.ndarray], np.ndarray],
              u_left: float, u_right: float) -> np.ndarray:
    """Galerkin solution at the nodes with Dirichlet values at both ends."""
    if not lam > 0:
        raise DomainError(f"lambda must be > 0, got {lam}")
    nodes = mesh.nodes
    n = len(nodes)
    h = np.diff(nodes)

    # Element stiffness lam / h, assembled into the tridiagonal
    main = np.zeros(n)
    off = np.zeros(n - 1)
    load = np.zeros(n)
    stiffness = lam / h
    main[:-1] += stiffness
    main[1:] += stiffness
    off -= stiffness

    # Load vector: 2-point Gauss rule on each element, hat functions as weights
    mid = 0.5 * (nodes[:-1] + nodes[1:])
    for sign in (-1.0, 1.0):
        xq = mid + sign * 0.5 * h * GAUSS_OFFSET
        fq = np.asarray(f_interp(xq), dtype=np.float64)
        weight = 0.5 * h
        load[:-1] += weight * fq * (nodes[1:] - xq) / h
        load[1:] += weight * fq * (xq - nodes[:-1]) / h

    # lam * u'' = f  ->  K u = -F for the stiffness K of -lam * u''
    rhs = -load
    sub, sup = off.copy(), off.copy()
    # Dirichlet rows at both ends
    main[0], sup[0], rhs[0] = 1.0, 0.0, u_left
    main[-1], sub[-1], rhs[-1] = 1.0, 0.0, u_right
    if np.any(main == 0.0):
        raise NumericalFailure("zero on the stiffness diagonal")
    solution = thomas_solve(TridiagonalSystem(sub, main, sup, rhs))
    check_finite("FEM solution", solution)
    return solution


def evaluate_fem(mesh: Mesh1D, nodal: np.ndarray, x) -> np.ndarray:
    return np.interp(np.asarray(x, dtype=np.float64), mesh.nodes, nodal)


def _end_values(points: np.ndarray, values: np.ndarray, mesh: Mesh1D) -> Tuple[float, float]:
    points = np.asarray(points, dtype=np.float64).ravel()
    left = np.flatnonzero(np.abs(points - mesh.nodes[0]) <= 1e-12)
    right = np.flatnonzero(np.abs(points - mesh.nodes[-1]) <= 1e-12)
    if not len(left) or not len(right):
        raise DomainError("FEM needs u measurements at both ends of the domain")
    return float(values[left[0]]), float(values[right[0]])


def _solve_member(mesh: Mesh1D, lam: float, f_points, f_values, u_points, u_values) -> np.ndarray:
    u_left, u_right = _end_values(u_points, u_values, mesh)
    source = (np.asarray(f_points).ravel(), np.asarray(f_values))
    return fem_solve(mesh, lam, lambda x: interpolate_f_linear(source, x), u_left, u_right)


def _check_linear(problem: PdeKind) -> None:
    if problem.tag is not PdeTag.LINEAR_1D:
        raise DomainError("the FEM baseline only covers the 1D linear Poisson problem")


def _run_members(jobs: List[Callable[[], np.ndarray]], workers: int) -> np.ndarray:
    # results come back in member order whatever the scheduling
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        solutions = list(executor.map(lambda job: job(), jobs))
    return np.column_stack(solutions)


def fem_mc_ensemble(problem: PdeKind, layout: Sequence[Layout], noise: NoiseSpec, ensemble_size: int,
                    mesh: Mesh1D, seed: int, workers: int = Config.FEM_WORKERS) -> PosteriorField:
    """Fresh noisy datasets around the exact solution, one FEM solve each."""
    _check_linear(problem)
    if ensemble_size < 1:
        raise DomainError("ensemble_size must be >= 1")

    def member(index: int) -> Callable[[], np.ndarray]:
        def job():
            member_seed = int(make_rng(seed, 20, index).integers(0, 2 ** 62))
            measurements: List[Measurement] = sample_measurements(problem, layout, noise, member_seed)
            u_items = [m for m in measurements if m.quantity == "u"]
            f_items = [m for m in measurements if m.quantity == "f"]
            return _solve_member(
                mesh, problem.lam,
                [m.location[0] for m in f_items], [m.value for m in f_items],
                [m.location[0] for m in u_items], [m.value for m in u_items],
            )
        return job

    ensemble = _run_members([member(i) for i in range(ensemble_size)], workers)
    return summarize_ensemble(mesh.nodes.reshape(-1, 1), ensemble)


def fem_mc_bootstrap(dataset: ReplicaDataset, mesh: Mesh1D, lam: float,
                     workers: int = Config.FEM_WORKERS) -> PosteriorField:
    """One FEM solve per replica of ``dataset`` (the data the MO-PINN trains on)."""
    f_points, f_targets = dataset.points("f"), dataset.targets("f")
    u_points, u_targets = dataset.points("u"), dataset.targets("u")

    def member(j: int) -> Callable[[], np.ndarray]:
        return lambda: _solve_member(mesh, lam, f_points, f_targets[:, j], u_points, u_targets[:, j])

    ensemble = _run_members([member(j) for j in range(dataset.replicas)], workers)
    return summarize_ensemble(mesh.nodes.reshape(-1, 1), ensemble)
