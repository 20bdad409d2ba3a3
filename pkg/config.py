"""
Configuration settings for the KOALA ground-texture localization toolkit.
"""
import os
from dotenv import load_dotenv, dotenv_values

# Load environment variables from .env file
load_dotenv()

# Process-wide settings
KOALA_SEED = int(os.getenv('KOALA_SEED', '42'))
KOALA_OUT = os.getenv('KOALA_OUT', 'out')
KOALA_WORKERS = int(os.getenv('KOALA_WORKERS', '4'))

# Camera (rectified Raspberry Pi camera looking straight down)
IMAGE_WIDTH = 632
IMAGE_HEIGHT = 480
FOOTPRINT_MM = (49.5, 28.0)

# Reference palette, 8-bit RGB, indexed by class (BG, R, G, B, W)
PALETTE = (
    (8, 8, 8),
    (200, 40, 40),
    (40, 180, 60),
    (40, 70, 210),
    (225, 225, 225),
)

# Experiment defaults; keys mirror the *Params types
DEFAULTS = {
    # floor
    'FLOOR_WIDTH': 2.0,
    'FLOOR_HEIGHT': 2.0,
    'BLOB_DENSITY': 0.6,
    'BLOB_RADIUS_MIN_MM': 0.8,
    'BLOB_RADIUS_MAX_MM': 2.5,
    'COLOR_WEIGHTS': [1.0, 1.0, 1.0, 1.0],
    'NOISE_SIGMA': 3.0,
    # runs
    'MAP_TILE': 2.0,
    'LANE_SPACING': 0.010,
    'MAPPING_SPEED': 0.2,
    'EVAL_SPEED': 0.3,
    'CAPTURE_RATE': 60.0,
    'EVAL_FRAMES': 600,
    'EVAL_RUNS': 1,
    'POSE_NOISE_SIGMA': 0.0005,
    'AREAS': [4.0],
    # map creation
    'OUTLIER_WINDOW': 15,
    'OUTLIER_ALPHA': 0.8,
    'OUTLIER_SIGMA_FLOOR': 0.001,
    'SEG_MAX_DISTANCE': 90.0,
    'BORDER_MARGIN': 64,
    'MIN_BLOB_AREA': 150,
    'SUPPORT_RADIUS': 64,
    'MIN_SUPPORT_PIXELS': 500,
    'CLUSTER_RADIUS': 0.005,
    'CLUSTER_COSINE': 0.1,
    'CLUSTER_MIN_MEMBERS': 4,
    # position estimation
    'KNN_K': 20,
    'MODE_RADIUS': 0.0285,
    'MIN_FILTERED_MATCHES': 3,
    'RANSAC_MIN_SAMPLES': 3,
    'RANSAC_RESIDUAL': 0.002,
    'RANSAC_MAX_TRIALS': 100,
    'EXACT_KNN': False,
    # evaluation
    'MAX_POS_ERROR': 0.10,
    'MAX_ANGLE_ERROR_DEG': 20.0,
    'SEED': KOALA_SEED,
    'WORKERS': KOALA_WORKERS,
    'RECORD_TIMING': True,
}

# Debug mode
DEBUG = os.getenv('DEBUG', 'False').lower() == 'true'


class ConfigError(ValueError):
    """Raised for unknown keys or unparsable values in an experiment config."""


def _cast(key, raw):
    """
    Convert a raw config value to the type of its default.

    Args:
        key (str): Config key
        raw: Raw value (string from a file, or an already typed override)

    Returns:
        The typed value
    """
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return list(raw) if isinstance(default, list) else type(default)(raw)

    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ('1', 'true', 'yes', 'on'):
                return True
            if text.lower() in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(text)
        if isinstance(default, list):
            return [float(part) for part in text.split(',') if part.strip()]
        if isinstance(default, int):
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"Invalid value for {key}: '{raw}'")


def load_config(path=None, overrides=None):
    """
    Load an experiment configuration.

    Args:
        path (str, optional): Flat KEY=value file (dotenv syntax)
        overrides (dict, optional): Values applied after the file

    Returns:
        dict: Complete, typed configuration
    """
    values = dict(DEFAULTS)
    sources = []

    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"Config file '{path}' not found")
        sources.append(dotenv_values(path))
    if overrides:
        sources.append(overrides)

    for source in sources:
        for key, raw in source.items():
            if key not in DEFAULTS:
                raise ConfigError(f"Unknown config key: {key}")
            if raw is None:
                raise ConfigError(f"Missing value for {key}")
            values[key] = _cast(key, raw)

    return values
