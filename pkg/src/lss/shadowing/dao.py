import dataclasses
import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional

import numpy as np
from pytz import utc

from .dynamics import PARAMETERS, LorenzParams
from .exceptions import UserException
from .sensitivity import QUANTITIES
from .smoothers import GAUSS_SEIDEL, SMOOTHER_KINDS

SCHEMA_VERSION = 1
REPORT_TIME_FORMAT = '%Y-%m-%dT%H:%M:%S%z'

DIRECT = 'direct'
MINRES = 'minres'
CG = 'cg'
CLASSIC_MG = 'classic-mg'
MATRIX_MG = 'matrix-mg'
SOLUTION_MG = 'solution-mg'
CYCLIC_REDUCTION = 'cyclic-reduction'
SCHEMES = (DIRECT, MINRES, CG, CLASSIC_MG, MATRIX_MG, SOLUTION_MG, CYCLIC_REDUCTION)
MULTIGRID_SCHEMES = (CLASSIC_MG, MATRIX_MG, SOLUTION_MG)

COARSE_SOLVERS = ('auto', DIRECT, 'krylov-to-tol')
AVERAGING_ORDERS = range(1, 6)

# relative distance to the final gradient below which the gradient history counts as settled
GRADIENT_SETTLE_TOLERANCE = 1e-3


def coarsening_count(dt_f: float, dt_c: float) -> int:
    """Number of step doublings until the coarse step reaches dt_c."""
    if not dt_f > 0:
        raise ValueError(f'Fine time step must be positive, got {dt_f}')
    count = 0
    while dt_f * 2 ** count < dt_c * (1.0 - 1e-12):
        count += 1
    return count


@dataclass
class SubscriptableDataclass:
    """
    Helper class to make dataclasses subscriptable
    """

    def __getitem__(self, index):
        return getattr(self, index)


# ################### CONFIGURATION SECTIONS


@dataclass
class DynamicsConfig(SubscriptableDataclass):
    s: float = 10.0
    r: float = 28.0
    b: float = 8.0 / 3.0
    which: str = 'r'
    qoi: str = 'z'

    def validate(self):
        if self.which not in PARAMETERS:
            raise UserException(f'dynamics.which must be one of {", ".join(PARAMETERS)}, got "{self.which}"')
        if self.qoi not in QUANTITIES:
            raise UserException(f'dynamics.qoi must be one of {", ".join(QUANTITIES)}, got "{self.qoi}"')
        if not all(np.isfinite([self.s, self.r, self.b])):
            raise UserException('dynamics.s, dynamics.r and dynamics.b must be finite numbers')
        if self.b <= 0:
            raise UserException(f'dynamics.b must be positive, got {self.b}')

    @property
    def params(self) -> LorenzParams:
        return LorenzParams(s=self.s, r=self.r, b=self.b)


@dataclass
class TrajectoryConfig(SubscriptableDataclass):
    """
    Either `steps` or the duration `T` fixes the step count m; `steps` wins when both are given.
    """
    dt: float = 0.01
    T: float = 20.0
    steps: Optional[int] = None
    spinup: float = 100.0
    seed: int = 0

    def validate(self):
        if not self.dt > 0:
            raise UserException(f'trajectory.dt must be positive, got {self.dt}')
        if self.steps is None and not self.T >= self.dt:
            raise UserException(f'trajectory.T must span at least one step, got T={self.T}, dt={self.dt}')
        if self.steps is not None and (not isinstance(self.steps, int) or self.steps < 1):
            raise UserException(f'trajectory.steps must be a positive integer, got {self.steps}')
        if self.spinup < 0:
            raise UserException(f'trajectory.spinup must be non-negative, got {self.spinup}')
        if not isinstance(self.seed, int) or self.seed < 0:
            raise UserException(f'trajectory.seed must be a non-negative integer, got {self.seed}')

    @property
    def m(self) -> int:
        if self.steps is not None:
            return self.steps
        return int(round(self.T / self.dt))


@dataclass
class SolverConfig(SubscriptableDataclass):
    """
    Solver selection. `smoother` defaults per scheme: Gauss-Seidel for classic multigrid, conjugate gradient
    for matrix restriction and MINRES for solution restriction.
    """
    scheme: str = DIRECT
    alpha2: float = 40.0
    smoother: Optional[str] = None
    nu1: int = 30
    nu2: int = 30
    omega: float = 1.0
    averaging_order: int = 3
    dt_c: float = 0.2
    max_cycles: int = 50
    max_iters: int = 20000
    rel_tol: float = 1e-12
    coarse_solver: str = 'auto'

    def validate(self):
        if self.scheme not in SCHEMES:
            raise UserException(f'solver.scheme must be one of {", ".join(SCHEMES)}, got "{self.scheme}"')
        if not self.alpha2 > 0:
            raise UserException(f'solver.alpha2 must be positive, got {self.alpha2}')
        if self.smoother is not None and self.smoother not in SMOOTHER_KINDS:
            raise UserException(f'solver.smoother must be one of {", ".join(SMOOTHER_KINDS)}, '
                                f'got "{self.smoother}"')
        if self.nu1 < 0 or self.nu2 < 0 or self.nu1 + self.nu2 < 1:
            raise UserException(f'solver.nu1 and solver.nu2 must be non-negative with a positive sum, '
                                f'got {self.nu1} and {self.nu2}')
        if not 0 < self.omega <= 1:
            raise UserException(f'solver.omega must lie in (0, 1], got {self.omega}')
        if self.max_cycles < 1 or self.max_iters < 1:
            raise UserException('solver.max_cycles and solver.max_iters must be at least 1')
        if not 0 <= self.rel_tol < 1:
            raise UserException(f'solver.rel_tol must lie in [0, 1), got {self.rel_tol}')
        if not isinstance(self.averaging_order, int) or self.averaging_order not in AVERAGING_ORDERS:
            raise UserException(f'solver.averaging_order must be an integer between 1 and 5, '
                                f'got {self.averaging_order}')
        if not self.dt_c > 0:
            raise UserException(f'solver.dt_c must be positive, got {self.dt_c}')
        if self.coarse_solver not in COARSE_SOLVERS:
            raise UserException(f'solver.coarse_solver must be one of {", ".join(COARSE_SOLVERS)}, '
                                f'got "{self.coarse_solver}"')
        if self.scheme == MATRIX_MG and self.smoother == GAUSS_SEIDEL:
            raise UserException('solver.smoother block-gauss-seidel cannot smooth the matrix-free coarse operators '
                                'of matrix-mg')


@dataclass
class OutputConfig(SubscriptableDataclass):
    folder: str = 'out'
    history: bool = True
    trajectory: bool = True
    tangent: bool = True


@dataclass
class ExperimentConfig(SubscriptableDataclass):
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    debug: bool = False
    action: str = 'solve'
    schema_version: int = SCHEMA_VERSION

    SECTIONS = {'dynamics': DynamicsConfig, 'trajectory': TrajectoryConfig, 'solver': SolverConfig,
                'output': OutputConfig}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        """
        Builds and validates the configuration.

        Raises:
            UserException: on unknown keys, wrong schema version or values out of range
        """
        if not isinstance(data, dict):
            raise UserException('The configuration must be a JSON object')
        data = dict(data)
        version = data.get('schema_version', SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise UserException(f'Unsupported schema_version {version}, expected {SCHEMA_VERSION}')
        sections = {}
        for name, section_class in cls.SECTIONS.items():
            value = data.pop(name, {})
            if not isinstance(value, dict):
                raise UserException(f'Configuration section "{name}" must be an object')
            sections[name] = build_dataclass_from_dict(section_class, value, section=name)
        config = build_dataclass_from_dict(cls, data, section='configuration')
        config = dataclasses.replace(config, **sections)
        config.validate()
        return config

    def validate(self):
        self.dynamics.validate()
        self.trajectory.validate()
        self.solver.validate()
        self._validate_grid_hierarchy()

    def _validate_grid_hierarchy(self):
        m, dt = self.trajectory.m, self.trajectory.dt
        if self.solver.scheme == CLASSIC_MG and m & (m - 1):
            raise UserException(f'classic-mg coarsens to a single row and needs a power-of-2 step count, got m={m}')
        if self.solver.scheme not in (MATRIX_MG, SOLUTION_MG):
            return
        if self.solver.dt_c < dt:
            raise UserException(f'solver.dt_c={self.solver.dt_c} must not be finer than trajectory.dt={dt}')
        levels = coarsening_count(dt, self.solver.dt_c)
        if m % 2 ** levels:
            raise UserException(f'The step count m={m} is not divisible by 2^{levels}={2 ** levels} required '
                                f'by dt_c={self.solver.dt_c}')

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def build_dataclass_from_dict(data_class, dict_value: Dict[str, Any], section: str = ''):
    """
    Convenience method building specified dataclass from a dictionary, rejecting keys the dataclass lacks.

    Raises:
        UserException: on unknown keys
    """
    field_names = set(f.name for f in dataclasses.fields(data_class))
    unknown = sorted(set(dict_value) - field_names)
    if unknown:
        raise UserException(f'Unknown key(s) {", ".join(unknown)} in section "{section}". '
                            f'Allowed keys are: {", ".join(sorted(field_names))}')
    try:
        return data_class(**dict_value)
    except TypeError as e:
        raise UserException(f'Invalid section "{section}": {e}') from e


# ################### RESULTS


@dataclass
class SolveReport(SubscriptableDataclass):
    """
    Outcome of one solver run.

    Attributes:
        scheme: solver scheme that produced the run
        residual_history: ||b - A w||_2 after every cycle or iteration, starting with the initial guess
        gradient_history: sensitivity estimate per cycle or iteration, aligned with residual_history when tracked
        gamma: slope of log10 residual against log10 cycle index; None for fewer than 3 cycles
        estimated_flops: operation count by the scheme's cost model
        levels: time step of every grid level, finest first (multigrid only)
    """
    scheme: str
    residual_history: List[float] = field(default_factory=list)
    gradient_history: List[float] = field(default_factory=list)
    gamma: Optional[float] = None
    fit_intercept: Optional[float] = None
    fit_range: Optional[List[int]] = None
    estimated_flops: float = 0.0
    wall_time: float = 0.0
    final_gradient: Optional[float] = None
    cycles: int = 0
    converged: bool = False
    cycles_to_tol: Optional[int] = None
    gradient_settle_cycle: Optional[int] = None
    levels: List[float] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    created: str = field(default_factory=lambda: datetime.now(utc).strftime(REPORT_TIME_FORMAT))
    error: Optional[str] = None

    @property
    def relative_residuals(self) -> np.ndarray:
        history = np.asarray(self.residual_history, dtype=float)
        if history.size == 0 or history[0] == 0:
            return history
        return history / history[0]

    def first_cycle_below(self, rel_tol: float) -> Optional[int]:
        """Index of the first history entry at or below rel_tol relative to the initial residual."""
        below = np.nonzero(self.relative_residuals <= rel_tol)[0]
        return int(below[0]) if below.size else None

    def gradient_settled_at(self, tolerance: float = GRADIENT_SETTLE_TOLERANCE) -> Optional[int]:
        """First index after which every gradient estimate stays within `tolerance` relative of the last one."""
        if not self.gradient_history:
            return None
        history = np.asarray(self.gradient_history, dtype=float)
        scale = max(abs(history[-1]), np.finfo(float).tiny)
        outside = np.nonzero(np.abs(history - history[-1]) > tolerance * scale)[0]
        return int(outside[-1] + 1) if outside.size else 0

    def finalize(self, rel_tol: float):
        self.cycles = max(len(self.residual_history) - 1, 0)
        self.cycles_to_tol = self.first_cycle_below(rel_tol)
        self.converged = self.cycles_to_tol is not None
        self.gradient_settle_cycle = self.gradient_settled_at()
        if self.gradient_history:
            self.final_gradient = float(self.gradient_history[-1])
        logging.debug(f'{self.scheme}: {self.cycles} cycles, converged={self.converged}')

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)
