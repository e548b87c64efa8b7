"""Total MO-PINN loss over every residual family and replica, ADAM, training loop."""
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import Config
from data_gen import ReplicaDataset
from nn_core import (
    GradientBuffer,
    MlpNetwork,
    backward_batch,
    dump_parameters,
    forward_batch,
    init_xavier_normal,
    load_parameters,
)
from pde_residuals import (
    CollocationSet,
    PdeKind,
    Stencil,
    build_collocation,
    laplacian_points,
    natural_points,
    pde_residual_from_values,
)
from utils import ConfigError, DimensionError, NumericalFailure, make_rng

FAMILIES = ("pde", "essential", "natural", "meas_u", "meas_f", "prior_mean", "prior_std")


@dataclass
class LossWeights:
    w_pde: float = 1.0
    w_essential: float = 1.0
    w_natural: float = 1.0
    w_meas_u: float = 1.0
    w_meas_f: float = 1.0
    w_prior_mean: float = 1.0
    w_prior_std: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {value}")

    def of(self, family: str) -> float:
        return getattr(self, f"w_{family}")


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    learning_rate: float = Config.LEARNING_RATE
    beta1: float = Config.ADAM_BETA1
    beta2: float = Config.ADAM_BETA2
    epsilon: float = Config.ADAM_EPSILON

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], learning_rate: float = Config.LEARNING_RATE) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, learning_rate)


@dataclass
class InverseParamArray:
    k_values: np.ndarray
    seed: int

    @classmethod
    def init_uniform(cls, M: int, seed: int) -> "InverseParamArray":
        return cls(make_rng(seed, 12).uniform(0.0, 1.0, size=M), seed)


@dataclass
class PriorStatsConstraint:
    locations: np.ndarray
    target_means: np.ndarray
    target_stds: Optional[np.ndarray] = None

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=np.float64)
        if self.locations.ndim == 1:
            self.locations = self.locations.reshape(-1, 1)
        self.target_means = np.asarray(self.target_means, dtype=np.float64).ravel()
        if len(self.locations) == 0:
            raise ConfigError("prior statistics need at least one location")
        if len(self.target_means) != len(self.locations):
            raise DimensionError("prior means do not match the number of locations")
        if self.target_stds is not None:
            self.target_stds = np.asarray(self.target_stds, dtype=np.float64).ravel()
            if len(self.target_stds) != len(self.locations):
                raise DimensionError("prior stds do not match the number of locations")
            if np.any(self.target_stds <= 0):
                raise ConfigError("prior stds must be > 0")

    def without_stds(self) -> "PriorStatsConstraint":
        return PriorStatsConstraint(self.locations, self.target_means, None)


def load_prior_stats(path: str) -> PriorStatsConstraint:
    frame = pd.read_csv(path)
    coords = [c for c in ("x", "y") if c in frame.columns]
    if not coords or "mean" not in frame.columns:
        raise ConfigError(f"{path} needs columns x[,y],mean[,std]")
    stds = frame["std"].to_numpy(dtype=np.float64) if "std" in frame.columns else None
    return PriorStatsConstraint(frame[coords].to_numpy(dtype=np.float64), frame["mean"].to_numpy(), stds)


def save_prior_stats(prior: PriorStatsConstraint, path: str) -> None:
    frame = pd.DataFrame(prior.locations, columns=["x", "y"][:prior.locations.shape[1]])
    frame["mean"] = prior.target_means
    if prior.target_stds is not None:
        frame["std"] = prior.target_stds
    frame.to_csv(path, index=False, float_format=Config.FLOAT_FORMAT)


def _check_reduction(reduction: str) -> None:
    if reduction not in Config.LOSS_REDUCTIONS:
        raise ConfigError(f"loss reduction must be one of {Config.LOSS_REDUCTIONS}, got {reduction!r}")


def _family_scale(weight: float, count: int, reduction: str) -> float:
    return weight / count if reduction == "mean" else weight


@dataclass
class TrainConfig:
    pde: PdeKind
    M: int
    epochs: int = Config.EPOCHS_1D
    learning_rate: float = Config.LEARNING_RATE
    hidden_u: Tuple[int, ...] = Config.HIDDEN_1D
    hidden_f: Tuple[int, ...] = Config.HIDDEN_1D
    stencil: Optional[Stencil] = None
    collocation_count: int = Config.COLLOCATION_1D
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = Config.SEED
    log_every: int = Config.LOG_EVERY
    loss_reduction: str = Config.LOSS_REDUCTION

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.M < 1:
            raise ConfigError(f"M must be >= 1, got {self.M}")
        _check_reduction(self.loss_reduction)
        if self.stencil is None:
            h = Config.STENCIL_H_1D if self.pde.dimension == 1 else Config.STENCIL_H_2D
            self.stencil = Stencil(h, self.pde.dimension)

    @property
    def u_shape(self) -> List[int]:
        return [self.pde.dimension, *self.hidden_u, self.M]

    @property
    def f_shape(self) -> List[int]:
        return [self.pde.dimension, *self.hidden_f, self.M]

    def collocation(self) -> CollocationSet:
        return build_collocation(self.pde, self.stencil, self.collocation_count)


@dataclass
class LossBreakdown:
    components: Dict[str, float]

    @property
    def total(self) -> float:
        return float(sum(self.components.values()))

    def first_non_finite(self) -> Optional[str]:
        for name in FAMILIES:
            if not np.isfinite(self.components.get(name, 0.0)):
                return name
        return None


@dataclass
class LossResult:
    loss: float
    breakdown: LossBreakdown
    u_grads: GradientBuffer
    f_grads: GradientBuffer
    k_grad: Optional[np.ndarray] = None


@dataclass
class LossBatches:
    """Every point the loss evaluates, stacked so each network runs once per step."""
    u_points: np.ndarray
    f_points: np.ndarray
    u_slices: Dict[str, slice]
    f_slices: Dict[str, slice]
    laplacian_weights: np.ndarray
    natural_weights: np.ndarray
    n_interior: int
    colloc: CollocationSet
    data: ReplicaDataset
    prior: Optional[PriorStatsConstraint]


def _stack(blocks: List[Tuple[str, np.ndarray]], dim: int) -> Tuple[np.ndarray, Dict[str, slice]]:
    slices, start, arrays = {}, 0, []
    for name, points in blocks:
        points = np.asarray(points, dtype=np.float64).reshape(-1, dim)
        slices[name] = slice(start, start + len(points))
        start += len(points)
        arrays.append(points)
    return np.concatenate(arrays, axis=0), slices


def prepare_batches(data: ReplicaDataset, colloc: CollocationSet, pde: PdeKind, stencil: Stencil,
                    prior: Optional[PriorStatsConstraint] = None) -> LossBatches:
    dim = pde.dimension
    if len(colloc.interior):
        pde_points, lap_weights = laplacian_points(colloc.interior, stencil, pde.domain)
    else:
        pde_points, lap_weights = np.zeros((0, dim)), stencil.laplacian()[1]
    if len(colloc.natural_points):
        nat_points, nat_weights = natural_points(colloc.natural_points, stencil, pde.domain, colloc.natural_axis)
    else:
        nat_points, nat_weights = np.zeros((0, dim)), np.zeros((3, 0))
    u_blocks = [
        ("pde", pde_points),
        ("essential", colloc.essential_points),
        ("natural", nat_points),
        ("meas_u", data.points("u")),
        ("prior", prior.locations if prior is not None else np.zeros((0, dim))),
    ]
    f_blocks = [("pde", colloc.interior), ("meas_f", data.points("f"))]
    u_points, u_slices = _stack(u_blocks, dim)
    f_points, f_slices = _stack(f_blocks, dim)
    return LossBatches(u_points, f_points, u_slices, f_slices, lap_weights, nat_weights,
                       len(colloc.interior), colloc, data, prior)


def assemble_loss(u_net: MlpNetwork, f_net: MlpNetwork, k, data: ReplicaDataset, colloc: CollocationSet,
                  pde: PdeKind, weights: LossWeights, prior: Optional[PriorStatsConstraint] = None,
                  stencil: Optional[Stencil] = None, batches: Optional[LossBatches] = None,
                  reduction: str = Config.LOSS_REDUCTION) -> LossResult:
    """Weighted squared residuals summed over replicas.

    ``reduction="sum"`` adds every point of a family with the family weight;
    ``"mean"`` divides each family by its point count first.
    """
    _check_reduction(reduction)
    M = u_net.output_dim
    if f_net.output_dim != M or data.replicas != M:
        raise DimensionError(
            f"replica counts disagree: u_net {M}, f_net {f_net.output_dim}, data {data.replicas}"
        )
    if pde.trainable:
        if k is None or np.shape(k) != (M,):
            raise DimensionError(f"trainable k must have shape ({M},)")
        k = np.asarray(k, dtype=np.float64)
    if batches is None:
        stencil = stencil or Stencil(
            Config.STENCIL_H_1D if pde.dimension == 1 else Config.STENCIL_H_2D, pde.dimension
        )
        batches = prepare_batches(data, colloc, pde, stencil, prior)
    prior = batches.prior

    # One forward pass per network over every stacked point
    U, u_cache = forward_batch(u_net, batches.u_points)
    F, f_cache = forward_batch(f_net, batches.f_points)
    cot_u = np.zeros_like(U)
    cot_f = np.zeros_like(F)
    k_grad = np.zeros(M) if pde.trainable else None
    components = {name: 0.0 for name in FAMILIES}

    # PDE residual at the interior collocation points
    n = batches.n_interior
    if n:
        S = len(batches.laplacian_weights)
        sl = batches.u_slices["pde"]
        u_stack = U[sl].reshape(S, n, M)
        lin = pde_residual_from_values(u_stack, F[batches.f_slices["pde"]], k, pde, batches.laplacian_weights)
        w = _family_scale(weights.w_pde, n, reduction)
        components["pde"] = w * float(np.sum(lin.residual ** 2))
        d_res = 2.0 * w * lin.residual
        cot_u[sl] += (lin.du * d_res[None]).reshape(S * n, M)
        cot_f[batches.f_slices["pde"]] -= d_res
        if k_grad is not None:
            k_grad += np.sum(d_res * lin.dk, axis=0)

    # Essential boundary values
    ne = len(batches.colloc.essential_points)
    if ne:
        sl = batches.u_slices["essential"]
        residual = U[sl] - batches.colloc.essential_values[:, None]
        w = _family_scale(weights.w_essential, ne, reduction)
        components["essential"] = w * float(np.sum(residual ** 2))
        cot_u[sl] += 2.0 * w * residual

    # Natural boundary derivative (3 stencil rows per point)
    nn = len(batches.colloc.natural_points)
    if nn:
        sl = batches.u_slices["natural"]
        values = U[sl].reshape(3, nn, M)
        nat_w = batches.natural_weights[:, :, None]
        residual = np.sum(nat_w * values, axis=0) - batches.colloc.natural_values[:, None]
        w = _family_scale(weights.w_natural, nn, reduction)
        components["natural"] = w * float(np.sum(residual ** 2))
        cot_u[sl] += (nat_w * (2.0 * w * residual)[None]).reshape(3 * nn, M)

    # Measurements: each replica against its own perturbed targets
    for family, outputs, cot, slices, quantity in (
        ("meas_u", U, cot_u, batches.u_slices, "u"),
        ("meas_f", F, cot_f, batches.f_slices, "f"),
    ):
        sl = slices[family]
        count = sl.stop - sl.start
        if not count:
            continue
        residual = outputs[sl] - batches.data.targets(quantity)
        w = _family_scale(weights.of(family), count, reduction)
        components[family] = w * float(np.sum(residual ** 2))
        cot[sl] += 2.0 * w * residual

    # Prior statistics couple the replicas through the ensemble mean and std
    if prior is not None:
        sl = batches.u_slices["prior"]
        values = U[sl]
        mean = values.mean(axis=1)
        gap = mean - prior.target_means
        components["prior_mean"] = weights.w_prior_mean * float(np.sum(gap ** 2))
        cot_u[sl] += (2.0 * weights.w_prior_mean * gap / M)[:, None]
        if prior.target_stds is not None:
            centered = values - mean[:, None]
            std = np.sqrt(np.mean(centered ** 2, axis=1) + Config.STD_FLOOR)
            std_gap = std - prior.target_stds
            components["prior_std"] = weights.w_prior_std * float(np.sum(std_gap ** 2))
            cot_u[sl] += (2.0 * weights.w_prior_std * std_gap / (M * std))[:, None] * centered

    breakdown = LossBreakdown(components)
    bad = breakdown.first_non_finite()
    if bad is not None:
        raise NumericalFailure(f"non-finite loss component '{bad}'")
    return LossResult(
        breakdown.total,
        breakdown,
        backward_batch(u_net, u_cache, cot_u),
        backward_batch(f_net, f_cache, cot_f),
        k_grad,
    )


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> Tuple[List[np.ndarray], AdamState]:
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer moments differ in length")
    step = state.step + 1
    new_params, new_m, new_v = [], [], []
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, step, state.learning_rate, state.beta1, state.beta2, state.epsilon)


@dataclass
class TrainState:
    u_net: MlpNetwork
    f_net: MlpNetwork
    k: Optional[np.ndarray]
    adam: AdamState
    epoch: int = 0
    loss_history: List[LossBreakdown] = field(default_factory=list)
    k_init_seed: Optional[int] = None

    def parameters(self) -> List[np.ndarray]:
        params = self.u_net.parameters() + self.f_net.parameters()
        return params + ([self.k] if self.k is not None else [])


def _network_seed(seed: int, stream: int) -> int:
    return int(make_rng(seed, stream).integers(0, 2 ** 62))


def init_state(config: TrainConfig) -> TrainState:
    u_net = init_xavier_normal(config.u_shape, _network_seed(config.seed, 10))
    f_net = init_xavier_normal(config.f_shape, _network_seed(config.seed, 11))
    k = InverseParamArray.init_uniform(config.M, config.seed).k_values if config.pde.trainable else None
    params = u_net.parameters() + f_net.parameters() + ([k] if k is not None else [])
    return TrainState(u_net, f_net, k, AdamState.zeros_like(params, config.learning_rate),
                      k_init_seed=config.seed if k is not None else None)


def train(config: TrainConfig, data: ReplicaDataset, prior: Optional[PriorStatsConstraint] = None,
          initial_state: Optional[TrainState] = None, colloc: Optional[CollocationSet] = None,
          verbose: bool = True) -> TrainState:
    """Full-batch ADAM, one step per epoch; ``initial_state`` resumes a checkpoint."""
    if data.replicas != config.M:
        raise ConfigError(f"dataset has {data.replicas} replicas, config expects M={config.M}")
    colloc = colloc if colloc is not None else config.collocation()
    batches = prepare_batches(data, colloc, config.pde, config.stencil, prior)
    state = initial_state or init_state(config)
    n_u = len(state.u_net.parameters())
    n_f = len(state.f_net.parameters())
    for _ in range(config.epochs):
        try:
            result = assemble_loss(state.u_net, state.f_net, state.k, data, colloc, config.pde,
                                   config.weights, batches=batches, reduction=config.loss_reduction)
        except NumericalFailure as e:
            raise NumericalFailure(f"epoch {state.epoch}: {e}") from e
        # one joint ADAM step over u-net, f-net and k
        grads = result.u_grads.arrays() + result.f_grads.arrays()
        if result.k_grad is not None:
            grads.append(result.k_grad)
        params, adam = adam_step(state.parameters(), grads, state.adam)
        state.u_net = state.u_net.with_parameters(params[:n_u])
        state.f_net = state.f_net.with_parameters(params[n_u:n_u + n_f])
        if state.k is not None:
            state.k = params[-1]
        state.adam = adam
        state.loss_history.append(result.breakdown)
        state.epoch += 1
        if verbose and config.log_every and state.epoch % config.log_every == 0:
            print(f"   epoch {state.epoch:>6d}  loss {result.loss:.6e}", flush=True)
    # Final sanity check on every trained parameter
    for name, arrays in (("u-net", state.u_net.parameters()), ("f-net", state.f_net.parameters()),
                         ("k", [state.k] if state.k is not None else [])):
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise NumericalFailure(f"non-finite parameters in {name} after epoch {state.epoch}")
    return state


def loss_trace_frame(history: Sequence[LossBreakdown], start_epoch: int = 0) -> pd.DataFrame:
    rows = []
    for i, breakdown in enumerate(history):
        row = {"epoch": start_epoch + i, "total": breakdown.total}
        row.update({name: breakdown.components.get(name, 0.0) for name in FAMILIES})
        rows.append(row)
    return pd.DataFrame(rows, columns=["epoch", "total", *FAMILIES])


def write_loss_trace(history: Sequence[LossBreakdown], path: str) -> None:
    loss_trace_frame(history).to_csv(path, index=False, float_format=Config.FLOAT_FORMAT)


def save_checkpoint(state: TrainState, path: str) -> None:
    blob = dump_parameters(state.u_net) + dump_parameters(state.f_net)
    k = state.k if state.k is not None else np.zeros(0)
    blob += f"k={len(k)}\n".encode("ascii") + np.ascontiguousarray(k, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(blob)


def load_checkpoint(path: str, learning_rate: float = Config.LEARNING_RATE) -> TrainState:
    """Networks and k come back exactly; optimizer moments restart from zero."""
    with open(path, "rb") as f:
        blob = f.read()
    u_net, rest = load_parameters(blob)
    f_net, rest = load_parameters(rest)
    newline = rest.find(b"\n")
    header = rest[:newline].decode("ascii")
    if not header.startswith("k="):
        raise ConfigError(f"{path} is not a checkpoint")
    count = int(header[2:])
    if len(rest) < newline + 1 + 8 * count:
        raise ConfigError(f"{path} is truncated")
    k = np.frombuffer(rest, dtype="<f8", count=count, offset=newline + 1).astype(np.float64) if count else None
    params = u_net.parameters() + f_net.parameters() + ([k] if k is not None else [])
    return TrainState(u_net, f_net, k, AdamState.zeros_like(params, learning_rate))
