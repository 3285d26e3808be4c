"""
Default experiment configuration.

Values reproduce the branched-flow setup: K=10 Gaussian bumps with A=0.1,
sigma=0.1, a 5 x 40 base, 11 base heads at y0 = 0.0, 0.1, ..., 1.0 and 100
evenly spaced transfer initial conditions in [0, 1].

An experiment JSON file mirrors `config_experiment`; it is deep-merged over
these defaults by `load_config`, and CLI flags override the result.
"""

import copy
import json
from pathlib import Path

import numpy as np

from utils.errors import ConfigurationError

BASE_ICS = [round(0.1 * i, 10) for i in range(11)]

config_potential = {
    'path': None,
    'seed': 0,
    'K': 10,
    'A': 0.1,
    'sigma': 0.1,
    'sampling_rect': [[0.0, 1.0], [0.0, 1.0]],
    'conventional_exponent': False,
    # Potential Transfer Learning draws fresh means under this seed
    'transfer_seed': 1,
}

config_model = {
    'hidden_layers': 5,
    'hidden_width': 40,
    'activation': 'tanh',
    'init_seed': 0,
}

config_training = {
    'epochs': 20000,
    'collocation_count': 100,
    't_end': 1.0,
    'learning_rate': 1e-3,
    'betas': [0.9, 0.999],
    'eps': 1e-8,
    'sampling': 'uniform_resample',
    'seed': 0,
    'loss_threshold': None,
    'eval_points': 200,
    'verbose': True,
    'log_every': 1000,
}

config_transfer = {
    'epochs': 5000,
    'init': 'copy_nearest',
    'workers': 1,
}

config_deqgan = {
    'noise_std': 1e-2,
    'noise_decay': 0.5,
    'noise_decay_every': 2000,
    'discriminator_layers': [32, 32, 32],
    'negative_slope': 0.2,
    'generator_lr': 1e-3,
    'discriminator_lr': 1e-3,
    'betas': [0.9, 0.999],
    'seed': 0,
}

config_oracle = {
    'dt': 1e-3,
}

config_eval = {
    'points': 200,
    't_end': None,
}

config_bench = {
    'min_seconds': 30.0,
    'min_epochs': 200,
}

config_experiment = {
    'out_dir': 'results',
    'checkpoint': None,
    'gan': False,
    'base_ics': BASE_ICS,
    'transfer_ics': {'count': 100, 'range': [0.0, 1.0]},
    'potential': config_potential,
    'model': config_model,
    'training': config_training,
    'transfer': config_transfer,
    'deqgan': config_deqgan,
    'oracle': config_oracle,
    'eval': config_eval,
    'bench': config_bench,
}


def deep_merge(base, override):
    """Recursively overlays `override` on a copy of `base`."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def expand_ics(ics):
    """A list of y0, or {'count': n, 'range': [lo, hi]} for even spacing."""
    if isinstance(ics, dict):
        lo, hi = ics['range']
        return [float(y0) for y0 in np.linspace(lo, hi, int(ics['count']))]
    return [float(y0) for y0 in ics]


def load_config(path=None):
    """Defaults, overlaid with the JSON file at `path` if given."""
    if path is None:
        return copy.deepcopy(config_experiment)
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f'Config file {path} does not exist')
    with open(path, encoding='utf-8') as handle:
        try:
            override = json.load(handle)
        except json.JSONDecodeError as err:
            raise ConfigurationError(f'Config file {path} is not valid JSON: {err}') from err
    unknown = set(override) - set(config_experiment) - {'mode'}
    if unknown:
        raise ConfigurationError(f'Unknown config keys: {sorted(unknown)}')
    return deep_merge(config_experiment, override)
