"""
Random Gaussian potentials.

    V(x) = -A / (2 pi sigma^2) * sum_i exp(-||x - mu_i||^2 / s)

with s = 2 pi sigma^2 (default) or s = 2 sigma^2 when `conventional_exponent`
is set. The prefactor is the same in both forms.

Means are drawn i.i.d. uniform over `sampling_rect` with numpy's PCG64
generator, so a (seed, K, rect) triple always reproduces the same means.
"""

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from utils.errors import ConfigurationError

DEFAULT_RECT = ((0.0, 1.0), (0.0, 1.0))


@dataclass(frozen=True, eq=False)
class RandomPotential:
    """
    K Gaussian bumps. `sampling_rect` is ((x_lo, x_hi), (y_lo, y_hi)).

    `means` is a read-only (K, 2) array.
    """
    means: np.ndarray
    sigma: float
    amplitude: float
    seed: int = 0
    sampling_rect: tuple = DEFAULT_RECT
    conventional_exponent: bool = False
    _hash: str = field(default='', init=False, compare=False, repr=False)

    def __post_init__(self):
        means = np.array(self.means, dtype=np.float64).reshape(-1, 2)
        means.setflags(write=False)
        object.__setattr__(self, 'means', means)
        object.__setattr__(self, 'sampling_rect',
                           tuple(tuple(float(v) for v in side) for side in self.sampling_rect))
        if not self.sigma > 0:
            raise ConfigurationError(f'sigma must be positive, got {self.sigma}')
        if not self.amplitude >= 0:
            raise ConfigurationError(f'amplitude must be non-negative, got {self.amplitude}')

    @property
    def K(self):
        return self.means.shape[0]

    @property
    def prefactor(self):
        return self.amplitude / (2 * np.pi * self.sigma**2)

    @property
    def exponent_scale(self):
        if self.conventional_exponent:
            return 2 * self.sigma**2
        return 2 * np.pi * self.sigma**2

    def to_dict(self):
        return {'seed': int(self.seed),
                'K': self.K,
                'A': float(self.amplitude),
                'sigma': float(self.sigma),
                'sampling_rect': [list(side) for side in self.sampling_rect],
                'means': self.means.tolist(),
                'conventional_exponent': bool(self.conventional_exponent)}

    @classmethod
    def from_dict(cls, payload):
        """Stored means are used verbatim; the seed is provenance only."""
        means = payload['means']
        if len(means) != payload.get('K', len(means)):
            raise ConfigurationError(f'Potential file lists {len(means)} means but K={payload["K"]}')
        return cls(means=np.array(means, dtype=np.float64).reshape(-1, 2),
                   sigma=payload['sigma'],
                   amplitude=payload['A'],
                   seed=payload.get('seed', 0),
                   sampling_rect=payload.get('sampling_rect', DEFAULT_RECT),
                   conventional_exponent=payload.get('conventional_exponent', False))


def _check_rect(rect):
    (x_lo, x_hi), (y_lo, y_hi) = rect
    if not (x_hi > x_lo and y_hi > y_lo):
        raise ConfigurationError(f'Degenerate sampling rectangle {rect}')


def sample_potential(seed, K=10, A=0.1, sigma=0.1, sampling_rect=DEFAULT_RECT,
                     conventional_exponent=False):
    """Draws K means uniformly over `sampling_rect` from PCG64(seed)."""
    if K < 0:
        raise ConfigurationError(f'K must be non-negative, got {K}')
    if not sigma > 0:
        raise ConfigurationError(f'sigma must be positive, got {sigma}')
    _check_rect(sampling_rect)

    rng = np.random.Generator(np.random.PCG64(seed))
    (x_lo, x_hi), (y_lo, y_hi) = sampling_rect
    means = rng.uniform(low=(x_lo, y_lo), high=(x_hi, y_hi), size=(K, 2))

    return RandomPotential(means=means, sigma=sigma, amplitude=A, seed=seed,
                           sampling_rect=sampling_rect,
                           conventional_exponent=conventional_exponent)


def resample_means(potential, seed):
    """New means under `seed`; K, sigma, A, rect and exponent form kept."""
    fresh = sample_potential(seed, potential.K, potential.amplitude, potential.sigma,
                             potential.sampling_rect, potential.conventional_exponent)
    return replace(potential, means=fresh.means, seed=seed)


def _bump_terms(potential, x):
    """exp(-||x - mu_i||^2 / s) for x of shape (..., 2) -> (..., K), and x - mu."""
    diff = np.asarray(x, dtype=np.float64)[..., None, :] - potential.means
    return np.exp(-np.sum(diff**2, axis=-1) / potential.exponent_scale), diff


def eval_potential(potential, x):
    """V at x. Accepts a single 2-vector or any (..., 2) array."""
    terms, _ = _bump_terms(potential, x)
    value = -potential.prefactor * terms.sum(axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def grad_potential(potential, x):
    """Analytic grad V at x, shape matching x."""
    terms, diff = _bump_terms(potential, x)
    coeff = 2 * potential.prefactor / potential.exponent_scale
    return coeff * np.sum(terms[..., None] * diff, axis=-2)


def grad_potential_torch(potential, xy):
    """
    grad V for a torch batch xy [n x 2], differentiable w.r.t. xy.

    Same formula as `grad_potential`; used inside the training residuals.
    """
    means = torch.as_tensor(potential.means, dtype=xy.dtype)
    if means.shape[0] == 0:
        return torch.zeros_like(xy)
    diff = xy[:, None, :] - means[None, :, :]
    terms = torch.exp(-(diff**2).sum(dim=-1) / potential.exponent_scale)
    coeff = 2 * potential.prefactor / potential.exponent_scale
    return coeff * (terms[..., None] * diff).sum(dim=1)


def potential_grid(potential, bounds=DEFAULT_RECT, n=120):
    """V sampled on an n x n grid. Returns (xs, ys, values[n_y, n_x])."""
    (x_lo, x_hi), (y_lo, y_hi) = bounds
    xs = np.linspace(x_lo, x_hi, n)
    ys = np.linspace(y_lo, y_hi, n)
    grid = np.stack(np.meshgrid(xs, ys), axis=-1)
    return xs, ys, eval_potential(potential, grid)


def potential_hash(potential):
    """Content hash over everything that changes V."""
    if not potential._hash:
        payload = {'means': potential.means.tolist(),
                   'sigma': float(potential.sigma),
                   'A': float(potential.amplitude),
                   'conventional_exponent': bool(potential.conventional_exponent)}
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
        object.__setattr__(potential, '_hash', digest)
    return potential._hash


def save_potential(potential, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(potential.to_dict(), handle, indent=1)


def load_potential(path):
    with open(path, encoding='utf-8') as handle:
        return RandomPotential.from_dict(json.load(handle))
