import os
import json
import tempfile
from datetime import datetime

import numpy as np

from config import Config


class MopinnError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MopinnError):
    exit_code = 2


class DimensionError(MopinnError, ValueError):
    pass


class DomainError(MopinnError, ValueError):
    pass


class NumericalFailure(MopinnError):
    exit_code = 3


def log_error(message, component=None, output_dir=None):
    output_dir = output_dir or Config.OUTPUT_DIR
    os.makedirs(output_dir, exist_ok=True)
    log_path = os.path.join(output_dir, Config.ERROR_LOG)
    with open(log_path, 'a', encoding='utf-8') as f:
        timestamp = datetime.now().strftime('%Y-%m-%d %H:%M:%S')
        component_str = f'[{component}]' if component else ''
        f.write(f"[{timestamp}] {component_str} {message}\n")


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def write_json_atomic(path, payload):
    """Write ``payload`` as JSON so readers never see a half-written file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write('\n')
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def make_rng(seed, *stream):
    """Independent generator for ``(seed, *stream)``; streams never collide."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(s) for s in stream]]))


def check_finite(name, array):
    if not np.all(np.isfinite(array)):
        raise NumericalFailure(f"non-finite values in {name}")
