"""
Lorenz system: right-hand side, Jacobians, classical RK4 stepping and attractor spin-up.

States are numpy arrays of shape ``(3,)``; the vectorised helpers also accept stacks of
states of shape ``(N, 3)`` so that KKT assembly can evaluate a whole trajectory at once.
"""
import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .exceptions import IntegrationError

PARAMETERS = ('s', 'r', 'b')
STATE_DIM = 3

# bounding box used when drawing a random spin-up start point
INITIAL_STATE_RANGE = (-10.0, 10.0)


@dataclass(frozen=True)
class LorenzParams:
    """
    Parameters of the Lorenz system dx/dt = s(y - x), dy/dt = x(r - z) - y, dz/dt = xy - bz.
    """
    s: float = 10.0
    r: float = 28.0
    b: float = 8.0 / 3.0

    def __post_init__(self):
        values = (self.s, self.r, self.b)
        if not all(np.isfinite(values)):
            raise ValueError(f'Lorenz parameters must be finite, got s={self.s}, r={self.r}, b={self.b}')

    def get(self, which: str) -> float:
        _check_parameter(which)
        return getattr(self, which)

    def perturbed(self, which: str, delta: float) -> 'LorenzParams':
        """Returns a copy with parameter `which` shifted by `delta`."""
        _check_parameter(which)
        return dataclasses.replace(self, **{which: getattr(self, which) + delta})

    @property
    def fixed_point(self) -> np.ndarray:
        """The non-trivial equilibrium with positive x (requires r > 1)."""
        c = np.sqrt(self.b * (self.r - 1.0))
        return np.array([c, c, self.r - 1.0])


@dataclass(frozen=True)
class Trajectory:
    """
    Time-discretised solution u_0..u_m sampled every `dt` starting at `t0`.

    Attributes:
        states: array of shape (m + 1, n)
        dt: time step
        t0: time of the first recorded state
    """
    states: np.ndarray
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2 or states.shape[0] < 2:
            raise ValueError(f'A trajectory needs at least two states, got shape {states.shape}')
        if not self.dt > 0:
            raise ValueError(f'Time step must be positive, got {self.dt}')
        object.__setattr__(self, 'states', states)

    @property
    def m(self) -> int:
        """Number of time steps."""
        return self.states.shape[0] - 1

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def duration(self) -> float:
        return self.m * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.m + 1)

    def __len__(self):
        return self.states.shape[0]


def _check_parameter(which: str):
    if which not in PARAMETERS:
        raise ValueError(f'Unknown Lorenz parameter "{which}". Supported values are: {", ".join(PARAMETERS)}')


def rhs(u: np.ndarray, p: LorenzParams) -> np.ndarray:
    """
    Lorenz vector field f(u) for a single state or a stack of states.
    """
    u = np.asarray(u, dtype=float)
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    return np.stack([p.s * (y - x), x * (p.r - z) - y, x * y - p.b * z], axis=-1)


def jacobian_u(u: np.ndarray, p: LorenzParams) -> np.ndarray:
    """
    State Jacobian df/du, shape (3, 3) or (N, 3, 3).
    """
    u = np.asarray(u, dtype=float)
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    jac = np.zeros(u.shape[:-1] + (STATE_DIM, STATE_DIM))
    jac[..., 0, 0] = -p.s
    jac[..., 0, 1] = p.s
    jac[..., 1, 0] = p.r - z
    jac[..., 1, 1] = -1.0
    jac[..., 1, 2] = -x
    jac[..., 2, 0] = y
    jac[..., 2, 1] = x
    jac[..., 2, 2] = -p.b
    return jac


def jacobian_xi(u: np.ndarray, p: LorenzParams, which: str) -> np.ndarray:
    """
    Parameter derivative df/d(which) for which in {'s', 'r', 'b'}.

    Raises:
        ValueError: on unknown parameter id
    """
    _check_parameter(which)
    u = np.asarray(u, dtype=float)
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    dfdxi = np.zeros(u.shape)
    if which == 's':
        dfdxi[..., 0] = y - x
    elif which == 'r':
        dfdxi[..., 1] = x
    else:
        dfdxi[..., 2] = -z
    return dfdxi


def _rk4(f: Callable[[np.ndarray], np.ndarray], u: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(u)
    k2 = f(u + 0.5 * dt * k1)
    k3 = f(u + 0.5 * dt * k2)
    k4 = f(u + dt * k3)
    return u + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(u: np.ndarray, dt: float, p: LorenzParams) -> np.ndarray:
    """
    One classical 4-stage Runge-Kutta step of the Lorenz system.
    """
    if not dt > 0:
        raise ValueError(f'Time step must be positive, got {dt}')
    return _rk4(lambda v: rhs(v, p), np.asarray(u, dtype=float), dt)


def random_initial_state(seed: Optional[int] = None) -> np.ndarray:
    """Uniform random point in [-10, 10]^3, reproducible for a given seed."""
    rng = np.random.default_rng(seed)
    return rng.uniform(*INITIAL_STATE_RANGE, size=STATE_DIM)


def integrate(u0: np.ndarray, dt: float, steps: int, spinup: float, p: LorenzParams,
              t0: float = 0.0) -> Trajectory:
    """
    Integrates `spinup` time units (discarded), then records `steps` + 1 states.

    Args:
        u0: initial state
        dt: time step used both for spin-up and for the recorded segment
        steps: number of recorded steps m
        spinup: spin-up duration in time units
        p: Lorenz parameters
        t0: time assigned to the first recorded state

    Raises:
        IntegrationError: when a state becomes non-finite
    """
    if not dt > 0:
        raise ValueError(f'Time step must be positive, got {dt}')
    if steps < 1:
        raise ValueError(f'At least one step must be recorded, got {steps}')
    if spinup < 0:
        raise ValueError(f'Spin-up time must be non-negative, got {spinup}')

    u = np.asarray(u0, dtype=float).copy()
    spinup_steps = int(round(spinup / dt))
    logging.debug(f'Spin-up of {spinup} time units ({spinup_steps} steps), dt={dt}')
    for i in range(spinup_steps):
        u = rk4_step(u, dt, p)
        if not np.all(np.isfinite(u)):
            raise IntegrationError('Non-finite state during spin-up', step=i + 1)

    states = np.empty((steps + 1, u.size))
    states[0] = u
    for i in range(1, steps + 1):
        states[i] = rk4_step(states[i - 1], dt, p)
        if not np.all(np.isfinite(states[i])):
            raise IntegrationError('Non-finite state in recorded trajectory', step=i)
    return Trajectory(states=states, dt=dt, t0=t0)


def lorenz_trajectory(p: LorenzParams, dt: float, steps: int, spinup: float = 100.0,
                      seed: Optional[int] = None) -> Trajectory:
    """Spin-up from a seeded random start point and record `steps` steps."""
    return integrate(random_initial_state(seed), dt, steps, spinup, p)
