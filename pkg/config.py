import os
from dotenv import load_dotenv

load_dotenv()


def _env_float(name, default):
    value = os.getenv(name)
    return float(value) if value not in (None, "") else default


def _env_int(name, default):
    value = os.getenv(name)
    return int(value) if value not in (None, "") else default


class Config:
    # File paths
    OUTPUT_DIR = os.getenv('MOPINN_OUTPUT_DIR', 'mopinn_output')
    ERROR_LOG = 'error.log'

    # Optimizer settings
    LEARNING_RATE = _env_float('MOPINN_LEARNING_RATE', 1e-3)
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPSILON = 1e-8
    EPOCHS_1D = _env_int('MOPINN_EPOCHS_1D', 10000)
    EPOCHS_2D = _env_int('MOPINN_EPOCHS_2D', 5000)
    EPOCHS_2D_PAPER = 50000
    LOG_EVERY = _env_int('MOPINN_LOG_EVERY', 1000)

    # Loss reduction over the points of a family: 'sum' or 'mean'
    LOSS_REDUCTION = os.getenv('MOPINN_LOSS_REDUCTION', 'sum')
    LOSS_REDUCTIONS = ('sum', 'mean')

    # Network shapes (hidden layers only, input/output are filled per problem)
    HIDDEN_1D = (20, 40)
    HIDDEN_2D = (50, 50)
    HIDDEN_2D_PAPER = (200, 200, 200)
    OUTPUTS_1D = _env_int('MOPINN_OUTPUTS_1D', 500)
    OUTPUTS_2D = _env_int('MOPINN_OUTPUTS_2D', 200)
    OUTPUTS_2D_PAPER = 2000

    # Finite-difference stencils and collocation
    STENCIL_H_1D = 1e-3
    STENCIL_H_2D = 1e-2
    COLLOCATION_1D = 201
    COLLOCATION_2D = 21
    COLLOCATION_2D_PAPER = 41

    # Evaluation grids
    EVAL_POINTS_1D = 201
    EVAL_POINTS_2D = 101

    # Noise cases (std of u and f measurement noise)
    NOISE_CASES = {
        'case1': 0.01,
        'case2': 0.1,
    }

    # Seeds
    SEED = _env_int('MOPINN_SEED', 0)
    DATA_SEED = _env_int('MOPINN_DATA_SEED', 1234)

    # FEM Monte Carlo
    FEM_NODES = 141
    FEM_ENSEMBLE = _env_int('MOPINN_FEM_ENSEMBLE', 500)
    FEM_WORKERS = _env_int('MOPINN_FEM_WORKERS', 4)

    # Posterior statistics
    HISTOGRAM_BINS = 30
    QQ_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(1, 11))
    QQ_STD_FACTOR = 0.5
    COMPARISON_LOCATIONS = tuple(round(-0.56 + 0.14 * i, 2) for i in range(9))

    # Numerical guards
    STD_FLOOR = 1e-12

    # CSV output
    FLOAT_FORMAT = '%.12e'
