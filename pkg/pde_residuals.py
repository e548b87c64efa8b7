"""Strong-form residuals evaluated with finite-difference stencils.

A "model" here is anything that maps an ``(n, d)`` array of points to an
``(n, M)`` array of replica outputs: an ``MlpNetwork`` or, in tests, a plain
function with forced values. Residual entry ``j`` only ever touches replica
``j`` of each model (and ``k_j``).
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from utils import DimensionError, DomainError

BOUNDARY_TOL = 1e-12


class PdeTag(str, Enum):
    LINEAR_1D = "linear1d"
    NONLINEAR_TANH_1D = "nonlinear_tanh1d"
    ALLEN_CAHN_2D = "allen_cahn2d"
    QUADRATIC_REACTION_2D = "quadratic_reaction2d"


TRAINABLE_K = {PdeTag.NONLINEAR_TANH_1D, PdeTag.QUADRATIC_REACTION_2D}


@dataclass(frozen=True)
class Domain:
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    @property
    def dimension(self) -> int:
        return len(self.lower)

    def contains(self, points: np.ndarray, tol: float = BOUNDARY_TOL) -> np.ndarray:
        points = np.atleast_2d(points)
        lower, upper = np.asarray(self.lower), np.asarray(self.upper)
        return np.all((points >= lower - tol) & (points <= upper + tol), axis=1)

    def on_boundary(self, points: np.ndarray, tol: float = BOUNDARY_TOL) -> np.ndarray:
        points = np.atleast_2d(points)
        lower, upper = np.asarray(self.lower), np.asarray(self.upper)
        touches = np.any((np.abs(points - lower) <= tol) | (np.abs(points - upper) <= tol), axis=1)
        return touches & self.contains(points, tol)


DOMAIN_1D = Domain((-0.7,), (0.7,))
DOMAIN_2D = Domain((-1.0, -1.0), (1.0, 1.0))


@dataclass(frozen=True)
class PdeKind:
    """``lam * Laplacian(u) + reaction(u; k) = f``.

    ``k_value`` is the fixed coefficient in fixed mode and the ground truth
    used to manufacture data in trainable mode.
    """
    tag: PdeTag
    lam: float = 0.01
    k_mode: str = "fixed"
    k_value: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "tag", PdeTag(self.tag))
        if not self.lam > 0:
            raise DomainError(f"lambda must be > 0, got {self.lam}")
        if self.k_mode not in ("fixed", "trainable"):
            raise DomainError(f"unknown k_mode {self.k_mode!r}")
        if self.k_mode == "trainable" and self.tag not in TRAINABLE_K:
            raise DomainError(f"{self.tag.value} has no trainable coefficient")

    @property
    def dimension(self) -> int:
        return 1 if self.tag in (PdeTag.LINEAR_1D, PdeTag.NONLINEAR_TANH_1D) else 2

    @property
    def domain(self) -> Domain:
        return DOMAIN_1D if self.dimension == 1 else DOMAIN_2D

    @property
    def trainable(self) -> bool:
        return self.k_mode == "trainable"

    def reaction(self, u, k):
        if self.tag is PdeTag.LINEAR_1D:
            return np.zeros_like(u)
        if self.tag is PdeTag.NONLINEAR_TANH_1D:
            return k * np.tanh(u)
        if self.tag is PdeTag.ALLEN_CAHN_2D:
            return u * (u ** 2 - 1.0)
        return k * u ** 2

    def reaction_du(self, u, k):
        if self.tag is PdeTag.LINEAR_1D:
            return np.zeros_like(u)
        if self.tag is PdeTag.NONLINEAR_TANH_1D:
            return k * (1.0 - np.tanh(u) ** 2)
        if self.tag is PdeTag.ALLEN_CAHN_2D:
            return 3.0 * u ** 2 - 1.0
        return 2.0 * k * u

    def reaction_dk(self, u):
        if self.tag is PdeTag.NONLINEAR_TANH_1D:
            return np.tanh(u)
        if self.tag is PdeTag.QUADRATIC_REACTION_2D:
            return u ** 2
        return np.zeros_like(u)


@dataclass(frozen=True)
class Stencil:
    h: float
    dimension: int = 1

    def __post_init__(self):
        if not self.h > 0:
            raise DomainError(f"stencil step must be > 0, got {self.h}")
        if self.dimension not in (1, 2):
            raise DomainError(f"stencil dimension must be 1 or 2, got {self.dimension}")

    def laplacian(self) -> Tuple[np.ndarray, np.ndarray]:
        """Offsets ``(S, d)`` and weights ``(S,)``; row 0 is the centre."""
        d, h = self.dimension, self.h
        offsets = [np.zeros(d)]
        weights = [-2.0 * d / h ** 2]
        for axis in range(d):
            for sign in (1.0, -1.0):
                offset = np.zeros(d)
                offset[axis] = sign * h
                offsets.append(offset)
                weights.append(1.0 / h ** 2)
        return np.array(offsets), np.array(weights)


def _empty(d):
    return np.zeros((0, d))


@dataclass
class CollocationSet:
    interior: np.ndarray
    essential_points: Optional[np.ndarray] = None
    essential_values: Optional[np.ndarray] = None
    natural_points: Optional[np.ndarray] = None
    natural_values: Optional[np.ndarray] = None
    natural_axis: int = 0

    def __post_init__(self):
        self.interior = np.atleast_2d(np.asarray(self.interior, dtype=np.float64))
        d = self.interior.shape[1]
        if self.essential_points is None:
            self.essential_points, self.essential_values = _empty(d), np.zeros(0)
        if self.natural_points is None:
            self.natural_points, self.natural_values = _empty(d), np.zeros(0)
        self.essential_points = np.asarray(self.essential_points, dtype=np.float64).reshape(-1, d)
        self.natural_points = np.asarray(self.natural_points, dtype=np.float64).reshape(-1, d)
        self.essential_values = np.asarray(self.essential_values, dtype=np.float64).ravel()
        self.natural_values = np.asarray(self.natural_values, dtype=np.float64).ravel()
        if len(self.essential_values) != len(self.essential_points):
            raise DimensionError("essential targets do not match essential points")
        if len(self.natural_values) != len(self.natural_points):
            raise DimensionError("natural targets do not match natural points")

    def validate(self, domain: Domain, stencil: Stencil) -> None:
        lower, upper = np.asarray(domain.lower), np.asarray(domain.upper)
        inset = stencil.h - BOUNDARY_TOL
        if not np.all((self.interior >= lower + inset) & (self.interior <= upper - inset)):
            raise DomainError("interior collocation points must lie at least h inside the domain")
        for name, points in (("essential", self.essential_points), ("natural", self.natural_points)):
            if len(points) and not np.all(domain.on_boundary(points)):
                raise DomainError(f"{name} boundary points must lie on the domain boundary")


def build_collocation(pde: PdeKind, stencil: Stencil, count: int,
                      essential=None, natural=None, natural_axis: int = 0) -> CollocationSet:
    """Uniform interior grid (``count`` per axis) inset by ``h`` from every edge.

    ``essential`` / ``natural`` are optional ``(points, values)`` pairs.
    """
    if count < 1:
        raise DomainError("collocation count must be >= 1")
    domain = pde.domain
    axes = [np.linspace(lo + stencil.h, hi - stencil.h, count) for lo, hi in zip(domain.lower, domain.upper)]
    if pde.dimension == 1:
        interior = axes[0].reshape(-1, 1)
    else:
        gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
        interior = np.column_stack([gx.ravel(), gy.ravel()])
    colloc = CollocationSet(
        interior,
        essential_points=None if essential is None else essential[0],
        essential_values=None if essential is None else essential[1],
        natural_points=None if natural is None else natural[0],
        natural_values=None if natural is None else natural[1],
        natural_axis=natural_axis,
    )
    colloc.validate(domain, stencil)
    return colloc


def _check_support(points: np.ndarray, domain: Domain) -> None:
    if not np.all(domain.contains(points)):
        raise DomainError("finite-difference stencil leaves the domain")


def _evaluate(model, points: np.ndarray) -> np.ndarray:
    return np.asarray(model(points), dtype=np.float64)


def _check_k(pde: PdeKind, k_values, m: int):
    if pde.trainable:
        if k_values is None:
            raise DomainError("trainable k mode needs a k array")
        k = np.asarray(k_values, dtype=np.float64)
        if k.shape != (m,):
            raise DimensionError(f"k array has shape {k.shape}, expected ({m},)")
        return k
    return pde.k_value


def laplacian_points(points: np.ndarray, stencil: Stencil, domain: Domain) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked stencil points ``(S * n, d)`` (stencil-major) and the weights ``(S,)``."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    offsets, weights = stencil.laplacian()
    if points.shape[1] != offsets.shape[1]:
        raise DimensionError(f"points have {points.shape[1]} components, stencil is {offsets.shape[1]}D")
    stacked = np.concatenate([points + offset for offset in offsets], axis=0)
    _check_support(stacked, domain)
    return stacked, weights


@dataclass
class PdeLinearization:
    """Residuals plus their partial derivatives, everything ``(n, M)``.

    ``du`` has one slab per stencil point, ``(S, n, M)``; ``df`` is
    always -1 and ``dk`` is ``None`` unless k is trainable.
    """
    residual: np.ndarray
    du: np.ndarray
    dk: Optional[np.ndarray] = None
    u_center: np.ndarray = field(default=None, repr=False)


def pde_residual_from_values(u_stack: np.ndarray, f_values: np.ndarray, k_values,
                             pde: PdeKind, weights: np.ndarray) -> PdeLinearization:
    """Residual from precomputed outputs, ``u_stack`` shaped ``(S, n, M)``."""
    m = u_stack.shape[2]
    k = _check_k(pde, k_values, m)
    laplacian = np.tensordot(weights, u_stack, axes=(0, 0))
    u_center = u_stack[0]
    residual = pde.lam * laplacian + pde.reaction(u_center, k) - f_values
    du = pde.lam * weights[:, None, None] * np.ones_like(u_stack)
    du[0] = du[0] + pde.reaction_du(u_center, k)
    dk = pde.reaction_dk(u_center) if pde.trainable else None
    return PdeLinearization(residual, du, dk, u_center)


def residual_pde_batch(u_net, f_net, k_values, pde: PdeKind, stencil: Stencil,
                       points: np.ndarray) -> PdeLinearization:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    stacked, weights = laplacian_points(points, stencil, pde.domain)
    u_values = _evaluate(u_net, stacked)
    u_stack = u_values.reshape(len(weights), len(points), -1)
    f_values = _evaluate(f_net, points)
    if f_values.shape != u_stack.shape[1:]:
        raise DimensionError("u and f models disagree on the number of replicas")
    return pde_residual_from_values(u_stack, f_values, k_values, pde, weights)


def residual_pde(u_net, f_net, k_values, pde: PdeKind, stencil: Stencil, point) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64).reshape(1, -1)
    return residual_pde_batch(u_net, f_net, k_values, pde, stencil, point).residual[0]


def residual_essential(u_net, point, target_h) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64).reshape(1, -1)
    return _evaluate(u_net, point)[0] - target_h


def natural_points(points: np.ndarray, stencil: Stencil, domain: Domain,
                   axis: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """One-sided 3-point derivative along ``axis`` pointing into the domain.

    Returns stacked points ``(3 * n, d)`` and per-point weights ``(3, n)``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    h = stencil.h
    mid = 0.5 * (domain.lower[axis] + domain.upper[axis])
    # +1 steps forward from the lower edge, -1 steps backward from the upper edge
    direction = np.where(points[:, axis] <= mid, 1.0, -1.0)
    stacked = []
    for step in range(3):
        shifted = points.copy()
        shifted[:, axis] += direction * step * h
        stacked.append(shifted)
    stacked = np.concatenate(stacked, axis=0)
    _check_support(stacked, domain)
    weights = np.array([-3.0, 4.0, -1.0])[:, None] * direction[None, :] / (2.0 * h)
    return stacked, weights


def residual_natural(u_net, point, target_g, stencil: Stencil, domain: Domain = None,
                     axis: int = 0) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64).reshape(1, -1)
    domain = domain or (DOMAIN_1D if point.shape[1] == 1 else DOMAIN_2D)
    stacked, weights = natural_points(point, stencil, domain, axis)
    values = _evaluate(u_net, stacked).reshape(3, 1, -1)
    slope = np.sum(weights[:, :, None] * values, axis=0)
    return slope[0] - target_g


def residual_measurement(net, point, replica_targets) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64).reshape(1, -1)
    outputs = _evaluate(net, point)[0]
    targets = np.asarray(replica_targets, dtype=np.float64)
    if targets.shape != outputs.shape:
        raise DimensionError(f"targets {targets.shape} do not match outputs {outputs.shape}")
    return outputs - targets
