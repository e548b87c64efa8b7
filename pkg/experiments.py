"""Named experiments and their resolved settings."""
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Optional, Tuple

from dotenv import dotenv_values

from config import Config
from data_gen import NoiseSpec, ProblemSpec, problem_preset
from trainer import LossWeights, TrainConfig
from utils import ConfigError

# experiment id -> (problem preset, default noise case)
EXPERIMENTS = {
    "linear1d_forward": ("linear1d", "case1"),
    "nonlinear1d_forward": ("nonlinear1d", "case1"),
    "allen_cahn_2d": ("allen_cahn_2d", "case1"),
    "inverse1d": ("inverse1d", "case1"),
    "inverse2d": ("inverse2d", "case1"),
    "fem_compare": ("linear1d", "case2"),
    "prior_augmented": ("linear1d", "case2"),
    "seed_consistency": ("inverse1d", "case2"),
    "forward_seed_consistency": ("linear1d", "case2"),
    "measurement_variation": ("linear1d", "case2"),
    "convergence_m": ("linear1d", "case2"),
}

PRIOR_F_MEASUREMENTS = 5
DEFAULT_RUNS = {"seed_consistency": 3, "forward_seed_consistency": 4, "measurement_variation": 4}
DEFAULT_M_LIST = (10, 50, 100, 500)


@dataclass
class ExperimentConfig:
    experiment: str
    noise: Optional[str] = None
    seed: int = Config.SEED
    data_seed: int = Config.DATA_SEED
    outputs: Optional[int] = None
    epochs: Optional[int] = None
    learning_rate: float = Config.LEARNING_RATE
    deterministic: bool = False
    paper_scale: bool = False
    out_dir: Optional[str] = None
    ensemble: int = Config.FEM_ENSEMBLE
    prior_path: Optional[str] = None
    runs: Optional[int] = None
    m_list: Tuple[int, ...] = DEFAULT_M_LIST
    weights: LossWeights = field(default_factory=LossWeights)
    log_every: int = Config.LOG_EVERY
    loss_reduction: str = Config.LOSS_REDUCTION

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}, expected one of {sorted(EXPERIMENTS)}")
        if self.noise is None:
            self.noise = EXPERIMENTS[self.experiment][1]
        NoiseSpec.case(self.noise)
        if self.outputs is not None and self.outputs < 1:
            raise ConfigError("--outputs must be >= 1")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("--epochs must be >= 1")
        if self.ensemble < 1:
            raise ConfigError("--ensemble must be >= 1")
        if self.runs is None:
            self.runs = DEFAULT_RUNS.get(self.experiment, 1)
        if self.loss_reduction not in Config.LOSS_REDUCTIONS:
            raise ConfigError(f"loss_reduction must be one of {Config.LOSS_REDUCTIONS}")
        if self.runs < 1:
            raise ConfigError("--runs must be >= 1")
        if self.out_dir is None:
            self.out_dir = os.path.join(Config.OUTPUT_DIR, self.experiment)
        if self.experiment == "prior_augmented" and self.prior_path is None:
            self.prior_path = os.path.join(Config.OUTPUT_DIR, "fem_compare", "prior_stats.csv")

    @property
    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec.case(self.noise)

    def problem(self) -> ProblemSpec:
        preset = EXPERIMENTS[self.experiment][0]
        f_count = PRIOR_F_MEASUREMENTS if self.experiment == "prior_augmented" else None
        return problem_preset(preset, f_count=f_count)

    def train_config(self, problem: ProblemSpec, seed: Optional[int] = None, M: Optional[int] = None,
                     weights: Optional[LossWeights] = None) -> TrainConfig:
        pde = problem.pde
        if pde.dimension == 1:
            hidden, default_m = Config.HIDDEN_1D, Config.OUTPUTS_1D
            epochs, colloc = Config.EPOCHS_1D, Config.COLLOCATION_1D
        elif self.paper_scale:
            hidden, default_m = Config.HIDDEN_2D_PAPER, Config.OUTPUTS_2D_PAPER
            epochs, colloc = Config.EPOCHS_2D_PAPER, Config.COLLOCATION_2D_PAPER
        else:
            hidden, default_m = Config.HIDDEN_2D, Config.OUTPUTS_2D
            epochs, colloc = Config.EPOCHS_2D, Config.COLLOCATION_2D
        return TrainConfig(
            pde=pde,
            M=M or self.outputs or default_m,
            epochs=self.epochs or epochs,
            learning_rate=self.learning_rate,
            hidden_u=tuple(hidden),
            hidden_f=tuple(hidden),
            collocation_count=colloc,
            weights=weights or self.weights,
            seed=self.seed if seed is None else seed,
            log_every=self.log_every,
            loss_reduction=self.loss_reduction,
        )

    def to_dict(self) -> Dict:
        resolved = asdict(self)
        resolved["m_list"] = list(self.m_list)
        resolved["sigma"] = Config.NOISE_CASES[self.noise]
        return resolved


_WEIGHT_KEYS = {f.name for f in fields(LossWeights)}
_FIELD_TYPES = {
    "noise": str, "seed": int, "data_seed": int, "outputs": int, "epochs": int,
    "learning_rate": float, "deterministic": bool, "paper_scale": bool, "out_dir": str,
    "ensemble": int, "prior_path": str, "runs": int, "m_list": tuple, "log_every": int,
    "loss_reduction": str,
}


def _convert(key: str, raw: str, kind):
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("1", "true", "yes")
        if kind is tuple:
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {kind.__name__}")


def load_config_file(path: str) -> Dict:
    """``KEY=VALUE`` document; keys are case-insensitive field names or loss weights ``w_*``."""
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    values = {}
    weights = {}
    for key, raw in dotenv_values(path).items():
        name = key.strip().lower()
        if raw is None:
            raise ConfigError(f"config key {key!r} has no value")
        if name in _WEIGHT_KEYS:
            weights[name] = _convert(name, raw, float)
        elif name in _FIELD_TYPES:
            values[name] = _convert(name, raw, _FIELD_TYPES[name])
        elif name == "experiment":
            values[name] = raw.strip()
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if weights:
        values["weights"] = LossWeights(**weights)
    return values


def build_config(experiment: Optional[str], file_values: Dict, flag_values: Dict) -> ExperimentConfig:
    """Preset defaults, then file values, then CLI flags (flags win)."""
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    if experiment:
        merged["experiment"] = experiment
    if "experiment" not in merged:
        raise ConfigError("no experiment given")
    return ExperimentConfig(**merged)
