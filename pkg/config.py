#!/usr/bin/env python3
"""
Configuration management for DepthProbe
Supports development, testing, and production environments
"""

import os
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Base directory
BASE_DIR = Path(__file__).resolve().parent

LOG_LEVELS = {'error', 'info', 'debug'}


class Config:
    """Base configuration class"""

    # Application settings
    APP_NAME = 'DepthProbe'
    APP_VERSION = '1.0.0'

    # Output settings
    OUTPUT_FOLDER = BASE_DIR / 'runs'
    MANIFEST_FILENAME = 'manifest.json'
    CSV_FLOAT_FORMAT = '%.9g'
    CSV_NA_REP = 'NA'

    # Logging
    LOG_LEVEL = 'info'

    # Seeding
    DEFAULT_SEED = 0

    # Worker pool
    THREADS: Optional[int] = None

    @staticmethod
    def init_output_dir(path: Path) -> Path:
        """Create an output directory for a run"""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        return path


class DevelopmentConfig(Config):
    """Development configuration"""

    LOG_LEVEL = 'debug'


class TestingConfig(Config):
    """Testing configuration"""

    LOG_LEVEL = 'error'

    # Tests pin a single worker unless they exercise the pool explicitly
    THREADS = 1


class ProductionConfig(Config):
    """Production configuration"""

    LOG_LEVEL = 'info'


# Configuration mapping
config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'production': ProductionConfig,
    'default': DevelopmentConfig
}


def get_config() -> Config:
    """Get the current configuration based on environment"""
    env = os.environ.get('DEPTHPROBE_ENV', 'development')
    return config.get(env, config['default'])


def get_log_level() -> str:
    """Log level from DEPTHPROBE_LOG, falling back to the active config"""
    level = os.environ.get('DEPTHPROBE_LOG', '').strip().lower()
    if level in LOG_LEVELS:
        return level
    return get_config().LOG_LEVEL


def get_thread_count(requested: Optional[int] = None) -> int:
    """Worker cap: explicit request, then DEPTHPROBE_THREADS, then the config, then cpu count"""
    if requested is not None and requested > 0:
        return int(requested)
    env_value = os.environ.get('DEPTHPROBE_THREADS')
    if env_value and env_value.isdigit() and int(env_value) > 0:
        return int(env_value)
    if get_config().THREADS:
        return int(get_config().THREADS)
    return os.cpu_count() or 1


# Experiment defaults
EXPERIMENT_CONFIG: Dict[str, Dict[str, Any]] = {
    'model': {
        'num_layers': 8,
        'd_model': 64,
        'num_heads': 4,
        'd_ff': 256,
        'vocab_size': 25,
        'max_seq_len': 128,
        'layer_norm_eps': 1e-5,
    },

    'training': {
        'steps': 3000,
        'batch_size': 32,
        'seq_len': 64,
        'learning_rate': 3e-4,
        'beta1': 0.9,
        'beta2': 0.999,
        'epsilon': 1e-8,
        'mask_rate': 0.15,
        'grad_shards': 4,
        'heldout_size': 64,
        'eval_every': 100,
    },

    'skiplayer': {
        'repeats': 4,
        'mask_rate': 0.15,
        'min_fraction': 0.2,
        'max_fraction': 0.8,
        'num_prompts': 40,
    },

    'lens': {
        'mask_rate': 0.15,
    },

    'scoring': {
        'length_normalize': False,
    },

    'synth': {
        'num_states': 6,
        'concentration': 0.3,
        'num_prompts': 40,
        'prompt_length': 64,
        'wildtype_length': 48,
        'noise_sigma': 0.0,
        'num_assays': 1,
    },

    'numerics': {
        'kl_clamp': 1e-12,
    },
}
