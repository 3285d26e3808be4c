"""
Hamilton's equations for a particle in a random potential, and the RK4
reference integrator used as ground truth.

    H(x, p) = ||p||^2 / 2 + V(x)
    dx/dt = px,  dy/dt = py,  dpx/dt = -dV/dx,  dpy/dt = -dV/dy

Plane-wave initial conditions are (0, y0, 1, 0).
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from utils.errors import ConfigurationError, IntegrationDivergedError
from utils.potential import eval_potential, grad_potential

STATE_COLUMNS = ['x', 'y', 'px', 'py']


@dataclass(frozen=True)
class PhaseState:
    x: float
    y: float
    px: float
    py: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ConfigurationError(f'Non-finite phase state {self}')

    def as_array(self):
        return np.array([self.x, self.y, self.px, self.py], dtype=np.float64)

    @classmethod
    def from_array(cls, values):
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class InitialCondition:
    """Plane-wave initial condition (0, y0, 1, 0)."""
    y0: float

    def state(self):
        return PhaseState(0.0, float(self.y0), 1.0, 0.0)

    def as_array(self):
        return self.state().as_array()


@dataclass
class Trajectory:
    """times [n], states [n x 4] with columns x, y, px, py."""
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64).reshape(-1, 4)
        if len(self.times) != len(self.states):
            raise ConfigurationError(
                f'{len(self.times)} times but {len(self.states)} states')
        if np.any(np.diff(self.times) <= 0):
            raise ConfigurationError('Trajectory times must be strictly increasing')

    def __len__(self):
        return len(self.times)

    def state(self, i):
        return PhaseState.from_array(self.states[i])

    @property
    def final(self):
        return self.state(-1)

    def to_frame(self):
        frame = pd.DataFrame(self.states, columns=STATE_COLUMNS)
        frame.insert(0, 't', self.times)
        return frame

    def to_csv(self, path):
        """Header `t,x,y,px,py`, 17 significant digits."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format='%.17g')

    @classmethod
    def from_csv(cls, path):
        frame = pd.read_csv(path, dtype=np.float64, float_precision='round_trip')
        return cls(frame['t'].to_numpy(), frame[STATE_COLUMNS].to_numpy())


def rhs(state, potential):
    """(px, py, -dV/dx, -dV/dy). `state` is a PhaseState or a 4-array."""
    z = state.as_array() if isinstance(state, PhaseState) else np.asarray(state, dtype=np.float64)
    force = -grad_potential(potential, z[:2])
    return np.array([z[2], z[3], force[0], force[1]])


def hamiltonian_energy(state, potential):
    z = state.as_array() if isinstance(state, PhaseState) else np.asarray(state, dtype=np.float64)
    return 0.5 * (z[2]**2 + z[3]**2) + eval_potential(potential, z[:2])


def energy_along(trajectory, potential):
    """H evaluated at every state of a trajectory."""
    states = trajectory.states
    kinetic = 0.5 * (states[:, 2]**2 + states[:, 3]**2)
    return kinetic + eval_potential(potential, states[:, :2])


def energy_drift(trajectory, potential):
    """max_t |H(t) - H(0)| / |H(0)|."""
    energy = energy_along(trajectory, potential)
    return float(np.max(np.abs(energy - energy[0])) / abs(energy[0]))


def _rk4_step(z, h, potential):
    k1 = rhs(z, potential)
    k2 = rhs(z + 0.5 * h * k1, potential)
    k3 = rhs(z + 0.5 * h * k2, potential)
    k4 = rhs(z + h * k3, potential)
    return z + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def _step_times(t_start, t_stop, dt):
    """Fixed steps of dt from t_start; the last one shortened to hit t_stop."""
    n_steps = max(1, math.ceil((t_stop - t_start) / dt - 1e-9))
    times = t_start + dt * np.arange(n_steps + 1, dtype=np.float64)
    times[-1] = t_stop
    return times


def rk4_integrate_state(state, potential, t_end, dt, t_eval=None):
    """
    Classical fixed-step RK4 from t=0 to t_end for any starting state.

    Without `t_eval` every step is saved. With `t_eval` (increasing, starting
    at 0, ending at t_end) the integration runs segment-wise between
    successive evaluation times, each segment split into equal sub-steps no
    larger than dt, and only the evaluation times are saved.
    """
    if not t_end > 0:
        raise ConfigurationError(f't_end must be positive, got {t_end}')
    if not 0 < dt <= t_end:
        raise ConfigurationError(f'dt must lie in (0, t_end], got {dt}')

    z = state.as_array() if isinstance(state, PhaseState) else np.asarray(state, dtype=np.float64)

    if t_eval is None:
        times = _step_times(0.0, t_end, dt)
        states = np.empty((len(times), 4))
        states[0] = z
        for i in range(1, len(times)):
            z = _rk4_step(z, times[i] - times[i - 1], potential)
            if not np.all(np.isfinite(z)):
                raise IntegrationDivergedError(times[i])
            states[i] = z
        return Trajectory(times, states)

    times = np.asarray(t_eval, dtype=np.float64)
    if times[0] != 0 or np.any(np.diff(times) <= 0):
        raise ConfigurationError('t_eval must start at 0 and be strictly increasing')
    states = np.empty((len(times), 4))
    states[0] = z
    for i in range(1, len(times)):
        span = times[i] - times[i - 1]
        n_sub = max(1, math.ceil(span / dt - 1e-9))
        h = span / n_sub
        for _ in range(n_sub):
            z = _rk4_step(z, h, potential)
        if not np.all(np.isfinite(z)):
            raise IntegrationDivergedError(times[i])
        states[i] = z
    return Trajectory(times, states)


def rk4_integrate(ic, potential, t_end=1.0, dt=1e-3, t_eval=None):
    """RK4 oracle trajectory for a plane-wave initial condition."""
    return rk4_integrate_state(ic.state(), potential, t_end, dt, t_eval=t_eval)


def _integrate_one(y0, potential, t_end, dt, t_eval):
    return rk4_integrate(InitialCondition(y0), potential, t_end, dt, t_eval)


def rk4_sweep(ics, potential, t_end=1.0, dt=1e-3, t_eval=None, workers=1):
    """
    Oracle trajectories for many ICs.

    `workers > 1` fans the ICs out as ray tasks; results keep the IC order.
    """
    if workers <= 1:
        return [rk4_integrate(ic, potential, t_end, dt, t_eval) for ic in ics]

    import ray
    ray.init(num_cpus=workers, ignore_reinit_error=True, include_dashboard=False)
    remote = ray.remote(_integrate_one)
    potential_ref = ray.put(potential)
    return ray.get([remote.remote(ic.y0, potential_ref, t_end, dt, t_eval) for ic in ics])
