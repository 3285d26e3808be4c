"""
Accuracy metrics of PINN solutions against the RK4 oracle.

For every head the reparametrised solution is evaluated on a uniform grid
over [0, t_end] and compared with an oracle integrated onto the same grid:

- max |error| per coordinate (x, y, px, py)
- mean squared residual of Hamilton's equations on the grid
- relative energy drift of the PINN trajectory

Grid points beyond the horizon the network was trained on are counted in
`extrapolated_points` and left out of every metric.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from utils.autodiff import DTYPE
from utils.dynamics import STATE_COLUMNS, Trajectory, energy_drift, rk4_integrate
from utils.models import reparametrized_forward
from utils.potential import potential_hash
from utils.training import hamilton_residuals, residual_loss

EVAL_POINTS = 200
DOMAIN_TOLERANCE = 1e-12


@dataclass
class HeadEvaluation:
    y0: float
    max_abs_error: dict
    final_residual: float
    energy_drift: float
    role: str = 'base'

    @property
    def max_error(self):
        return max(self.max_abs_error.values())


@dataclass
class EvalSummary:
    heads: list = field(default_factory=list)
    t_end: float = 1.0
    grid_points: int = EVAL_POINTS
    extrapolated_points: int = 0
    potential_hash: str = ''

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        payload = dict(payload)
        payload['heads'] = [HeadEvaluation(**h) for h in payload['heads']]
        return cls(**payload)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as handle:
            json.dump(self.to_dict(), handle, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, encoding='utf-8') as handle:
            return cls.from_dict(json.load(handle))


def evaluation_grid(t_end, train_t_end=None, n=EVAL_POINTS):
    """(in-domain times, number of points beyond `train_t_end`)."""
    times = np.linspace(0.0, t_end, n)
    if train_t_end is None:
        return times, 0
    inside = times <= train_t_end + DOMAIN_TOLERANCE
    return times[inside], int(np.sum(~inside))


def max_abs_errors(trajectory, oracle):
    errors = np.max(np.abs(trajectory.states - oracle.states), axis=0)
    return dict(zip(STATE_COLUMNS, (float(e) for e in errors)))


def evaluate_solution(solution, ic, potential, times, dt=1e-3, role='base'):
    """
    Scores any proposed solution `solution(times) -> (u~, du~/dt)`.

    The oracle is integrated onto exactly the same `times` (starting at 0).
    """
    times_t = torch.as_tensor(times, dtype=DTYPE)
    with torch.no_grad():
        u_tilde, du_tilde = solution(times_t)
        residual = float(residual_loss(hamilton_residuals(u_tilde, du_tilde, potential)))
    trajectory = Trajectory(np.asarray(times), u_tilde.numpy())
    oracle = rk4_integrate(ic, potential, float(times[-1]), min(dt, float(times[-1])), t_eval=times)
    return HeadEvaluation(y0=float(ic.y0),
                          max_abs_error=max_abs_errors(trajectory, oracle),
                          final_residual=residual,
                          energy_drift=energy_drift(trajectory, potential),
                          role=role)


def pinn_trajectory(net, head_index, times):
    """Reparametrised solution of one head as a Trajectory."""
    with torch.no_grad():
        u_tilde, _ = reparametrized_forward(net, head_index, times)
    return Trajectory(np.asarray(times), u_tilde.numpy())


def evaluate_heads(net, potential, t_end, train_t_end=None, n=EVAL_POINTS, dt=1e-3, heads=None):
    """EvalSummary over `heads` (default: all)."""
    times, extrapolated = evaluation_grid(t_end, train_t_end, n)
    if extrapolated:
        print(f'Warning: {extrapolated} evaluation points lie beyond the training horizon '
              f't={train_t_end} and are excluded')

    evaluations = []
    for l in (range(net.n_heads) if heads is None else heads):
        head = net.heads[l]
        solution = lambda t, l=l: reparametrized_forward(net, l, t)
        evaluations.append(evaluate_solution(solution, head.ic, potential, times, dt, role=head.role))

    return EvalSummary(heads=evaluations, t_end=t_end, grid_points=n,
                       extrapolated_points=extrapolated, potential_hash=potential_hash(potential))
