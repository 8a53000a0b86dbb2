"""
Tangent recovery, the shadowing sensitivity formula and the block-Thomas direct solver.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict

import numpy as np
import scipy.integrate
import scipy.linalg

from .dynamics import LorenzParams, Trajectory
from .exceptions import GuardViolation, SingularBlockError
from .kkt import BlockTridiag, KktBlocks, apply_constraint, apply_constraint_transpose, assemble_blocks, \
    rhs_vector, schur_blocks

# largest block-row count accepted by the direct solver
DIRECT_GUARD_ROWS = 4096


@dataclass(frozen=True, eq=False)
class TangentSolution:
    """
    Attributes:
        v: (m+1, n) tangent v_0..v_m
        eta: (m,) time dilation eta_1..eta_m, one value per step
    """
    v: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        if self.v.ndim != 2 or self.eta.shape != (self.v.shape[0] - 1,):
            raise ValueError(f'Tangent of shape {self.v.shape} does not match time dilation of shape '
                             f'{self.eta.shape}')

    @property
    def max_abs_eta(self) -> float:
        return float(np.max(np.abs(self.eta)))


class QuantityOfInterest(ABC):
    """
    Instantaneous objective J(u); both methods accept a single state or an (N, n) stack.
    """
    name: str = ''

    @abstractmethod
    def evaluate(self, u: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def gradient_u(self, u: np.ndarray) -> np.ndarray:
        pass


class Component(QuantityOfInterest):
    """J(u) = u[index]."""

    def __init__(self, name: str, index: int):
        self.name = name
        self.index = index

    def evaluate(self, u):
        return np.asarray(u, dtype=float)[..., self.index]

    def gradient_u(self, u):
        u = np.asarray(u, dtype=float)
        grad = np.zeros(u.shape)
        grad[..., self.index] = 1.0
        return grad


class SquaredComponent(QuantityOfInterest):
    """J(u) = u[index]^2."""

    def __init__(self, name: str, index: int):
        self.name = name
        self.index = index

    def evaluate(self, u):
        return np.asarray(u, dtype=float)[..., self.index] ** 2

    def gradient_u(self, u):
        u = np.asarray(u, dtype=float)
        grad = np.zeros(u.shape)
        grad[..., self.index] = 2.0 * u[..., self.index]
        return grad


QUANTITIES: Dict[str, QuantityOfInterest] = {
    'x': Component('x', 0),
    'y': Component('y', 1),
    'z': Component('z', 2),
    'z2': SquaredComponent('z2', 2),
}


def quantity_of_interest(name: str = 'z') -> QuantityOfInterest:
    try:
        return QUANTITIES[name]
    except KeyError:
        raise ValueError(f'Unknown quantity of interest "{name}". Supported values are: {", ".join(QUANTITIES)}')


def recover_tangent(blocks: KktBlocks, w: np.ndarray) -> TangentSolution:
    """
    v = -B^T w and eta_i = -f_i^T w_i / alpha^2, with w_0 = w_{m+1} = 0.
    """
    wb = np.asarray(w, dtype=float).reshape(blocks.m, blocks.n)
    v = -apply_constraint_transpose(blocks, wb)
    eta = -np.einsum('ki,ki->k', blocks.f, wb) / blocks.alpha2
    return TangentSolution(v=v, eta=eta)


def _trapezoid_mean(values: np.ndarray, dt: float) -> float:
    duration = dt * (values.shape[0] - 1)
    return float(scipy.integrate.trapezoid(values, dx=dt, axis=0) / duration)


def time_average(traj: Trajectory, qoi: QuantityOfInterest) -> float:
    """Finite-T average of J over the trajectory by the trapezoidal rule."""
    return _trapezoid_mean(qoi.evaluate(traj.states), traj.dt)


def gradient(traj: Trajectory, tangent: TangentSolution, qoi: QuantityOfInterest) -> float:
    """
    d(J average)/d(xi) = mean<dJ/du, v> + mean(eta J) - mean(eta) mean(J).

    Node quantities use the trapezoidal rule; eta lives on steps and is paired with step-midpoint J.
    """
    if tangent.v.shape != traj.states.shape:
        raise ValueError(f'Tangent of shape {tangent.v.shape} does not match trajectory {traj.states.shape}')
    j = qoi.evaluate(traj.states)
    dj = qoi.gradient_u(traj.states)
    direct = _trapezoid_mean(np.einsum('ki,ki->k', dj, tangent.v), traj.dt)
    j_mid = 0.5 * (j[:-1] + j[1:])
    dilation = float(np.mean(tangent.eta * j_mid) - np.mean(tangent.eta) * np.mean(j_mid))
    return direct + dilation


def objective(tangent: TangentSolution, alpha2: float, dt: float) -> float:
    """Discrete least-squares objective 1/2 sum(|v|^2 + alpha^2 eta^2) dt."""
    return 0.5 * dt * float(np.sum(tangent.v ** 2) + alpha2 * np.sum(tangent.eta ** 2))


def constraint_residual(blocks: KktBlocks, tangent: TangentSolution) -> np.ndarray:
    """Row-wise F_{i-1} v_{i-1} + G_i v_i + f_i eta_i + b_i, zero for an exact tangent."""
    return apply_constraint(blocks, tangent.v, tangent.eta) + blocks.b


def direct_solve(system: BlockTridiag, rhs: np.ndarray, max_rows: int = DIRECT_GUARD_ROWS) -> np.ndarray:
    """
    Block-Thomas elimination with Cholesky-factorised pivots.

    Args:
        system: symmetric positive definite block-tridiagonal matrix
        rhs: flat right-hand side
        max_rows: size guard

    Returns:
        flat solution vector

    Raises:
        SingularBlockError: when a pivot block is not positive definite
        GuardViolation: when the system exceeds `max_rows` block rows
    """
    rows, n = system.rows, system.n
    if rows > max_rows:
        raise GuardViolation(f'Direct solve refused: {rows} block rows exceed the guard of {max_rows}')
    b = np.asarray(rhs, dtype=float).reshape(rows, n)
    y = np.empty_like(b)
    pivots = []
    pivot = system.diag[0]
    y[0] = b[0]
    for i in range(rows):
        if i > 0:
            # eliminate L_i using the previous factorised pivot
            gain = scipy.linalg.cho_solve(pivots[-1], system.lower[i - 1].T).T
            pivot = system.diag[i] - gain @ system.upper[i - 1]
            y[i] = b[i] - gain @ y[i - 1]
        try:
            pivots.append(scipy.linalg.cho_factor(pivot))
        except np.linalg.LinAlgError:
            raise SingularBlockError(i, message='Non positive definite pivot block')

    x = np.empty_like(b)
    x[-1] = scipy.linalg.cho_solve(pivots[-1], y[-1])
    for i in range(rows - 2, -1, -1):
        x[i] = scipy.linalg.cho_solve(pivots[i], y[i] - system.upper[i] @ x[i + 1])
    return x.reshape(-1)


def shadowing_gradient(traj: Trajectory, p: LorenzParams, which: str, alpha2: float,
                       qoi: QuantityOfInterest) -> float:
    """Assembles the KKT system of `traj`, solves it directly and returns the sensitivity."""
    blocks = assemble_blocks(traj, p, which, alpha2)
    w = direct_solve(schur_blocks(blocks), rhs_vector(blocks), max_rows=max(blocks.m, DIRECT_GUARD_ROWS))
    value = gradient(traj, recover_tangent(blocks, w), qoi)
    logging.debug(f'd{qoi.name}/d{which} = {value:.6f} over T={traj.duration}')
    return value
