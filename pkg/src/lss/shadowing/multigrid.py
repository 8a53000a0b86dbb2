"""
Multigrid in time for the Schur system.

Three schemes share one V-cycle:

- ``classic``: the trajectory is injected and the KKT system re-assembled at the doubled step, residuals are
  injected and corrections are linearly interpolated; the hierarchy goes down to a single block row.
- ``matrix-restriction``: the coarse operator is the Galerkin product R A P, applied matrix-free.
- ``solution-restriction``: the trajectory u(t) is restricted and the KKT system is re-assembled on every
  coarse grid.

The multiplier w is cell-centred (one value per time step) and vanishes outside the time domain, the
trajectory is node-centred. Both are transferred with the averaging stencils below.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.sparse.linalg import LinearOperator

from .dao import AVERAGING_ORDERS, COARSE_SOLVERS, SolveReport, coarsening_count
from .dynamics import LorenzParams, Trajectory
from .exceptions import BreakdownError, GuardViolation, SolverDivergence, UserException
from .kkt import DENSE_GUARD_ROWS, BlockTridiag, KktBlocks, as_operator, assemble_blocks, rhs_vector, \
    schur_blocks
from .sensitivity import QuantityOfInterest, direct_solve, gradient, quantity_of_interest, recover_tangent
from .smoothers import GAUSS_SEIDEL, SmootherSpec, conjugate_gradient, minres, smooth, under_relaxation

CLASSIC = 'classic'
MATRIX_RESTRICTION = 'matrix-restriction'
SOLUTION_RESTRICTION = 'solution-restriction'
MG_SCHEMES = (CLASSIC, MATRIX_RESTRICTION, SOLUTION_RESTRICTION)

AUTO = 'auto'
DIRECT = 'direct'
KRYLOV_TO_TOL = 'krylov-to-tol'

# c^h in R = c^h P^T
TRANSFER_SCALE = 0.5
# operator-only coarsest grids up to this many block rows are solved densely under `auto`
DENSE_COARSE_ROWS = 8
COARSE_KRYLOV_TOL = 1e-12


@dataclass(frozen=True)
class AveragingStencil:
    """
    Binomial averaging weights. Even orders are centred on a node, odd orders on a half point.
    """
    order: int
    weights: Tuple[Fraction, ...]

    @property
    def staggered(self) -> bool:
        return self.order % 2 == 1

    @property
    def values(self) -> np.ndarray:
        return np.array([float(w) for w in self.weights])

    def __len__(self):
        return len(self.weights)


def averaging_weights(order: int) -> AveragingStencil:
    """
    Exact weights of the averaging stencil of the given order: (1/2, 1/2), (1/4, 1/2, 1/4),
    (1/8, 3/8, 3/8, 1/8), (1/16, 1/4, 3/8, 1/4, 1/16) and (1/32, 5/32, 10/32, 10/32, 5/32, 1/32).

    Raises:
        ValueError: when the order is outside 1..5
    """
    if order not in AVERAGING_ORDERS:
        raise ValueError(f'Averaging order must be between 1 and 5, got {order}')
    return AveragingStencil(order=order,
                            weights=tuple(Fraction(math.comb(order, k), 2 ** order) for k in range(order + 1)))


@dataclass(frozen=True)
class MgConfig:
    scheme: str = SOLUTION_RESTRICTION
    smoother: SmootherSpec = field(default_factory=lambda: SmootherSpec(kind='minres'))
    nu1: int = 30
    nu2: int = 30
    averaging_order: int = 3
    dt_c: float = 0.2
    alpha2: float = 40.0
    max_cycles: int = 50
    rel_tol: float = 1e-12
    coarse_solver: str = AUTO
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.scheme not in MG_SCHEMES:
            raise ValueError(f'Unknown multigrid scheme "{self.scheme}". '
                             f'Supported values are: {", ".join(MG_SCHEMES)}')
        if self.coarse_solver not in COARSE_SOLVERS:
            raise ValueError(f'Unknown coarse solver "{self.coarse_solver}". '
                             f'Supported values are: {", ".join(COARSE_SOLVERS)}')
        if self.nu1 < 0 or self.nu2 < 0 or self.nu1 + self.nu2 < 1:
            raise ValueError(f'nu1 + nu2 must be at least 1, got {self.nu1} and {self.nu2}')
        if self.max_cycles < 1:
            raise ValueError(f'max_cycles must be at least 1, got {self.max_cycles}')
        if not self.dt_c > 0 or not self.alpha2 > 0:
            raise ValueError(f'dt_c and alpha2 must be positive, got {self.dt_c} and {self.alpha2}')
        if self.averaging_order not in AVERAGING_ORDERS:
            raise ValueError(f'Averaging order must be between 1 and 5, got {self.averaging_order}')
        if self.scheme == MATRIX_RESTRICTION and self.smoother.kind == GAUSS_SEIDEL:
            raise ValueError('Block Gauss-Seidel cannot smooth the Galerkin coarse operators of matrix restriction')

    @property
    def stencil(self) -> AveragingStencil:
        return averaging_weights(self.averaging_order)


# ####### TRANSFER OPERATORS

def restriction_matrix(rows: int, stencil: AveragingStencil) -> scipy.sparse.csr_matrix:
    """
    Scalar restriction of a cell-centred sequence of `rows` values to rows/2 values.

    Coarse cell j averages the fine cells 2j + 1 - L//2 + k, k = 0..L-1, with L the stencil length; cells
    outside the domain are zero and the remaining weights are not renormalised.
    """
    if rows < 2 or rows % 2:
        raise ValueError(f'A cell-centred sequence needs an even number of at least 2 entries, got {rows}')
    length = len(stencil)
    coarse = np.arange(rows // 2)[:, None]
    cols = 2 * coarse + 1 - length // 2 + np.arange(length)[None, :]
    rows_idx = np.broadcast_to(coarse, cols.shape)
    values = np.broadcast_to(stencil.values, cols.shape)
    inside = (cols >= 0) & (cols < rows)
    return scipy.sparse.coo_matrix((values[inside], (rows_idx[inside], cols[inside])),
                                   shape=(rows // 2, rows)).tocsr()


def prolongation_matrix(rows: int, stencil: AveragingStencil) -> scipy.sparse.csr_matrix:
    """P = R^T / c^h, mapping rows/2 coarse cells to `rows` fine cells."""
    return (restriction_matrix(rows, stencil).T / TRANSFER_SCALE).tocsr()


def transfer_matrices(rows: int, stencil: AveragingStencil, n: int = 1) \
        -> Tuple[scipy.sparse.csr_matrix, scipy.sparse.csr_matrix]:
    """Block restriction and prolongation acting on flattened (rows, n) vectors."""
    eye = scipy.sparse.identity(n, format='csr')
    return (scipy.sparse.kron(restriction_matrix(rows, stencil), eye, format='csr'),
            scipy.sparse.kron(prolongation_matrix(rows, stencil), eye, format='csr'))


def _rows_of(vector: np.ndarray, n: int) -> np.ndarray:
    vector = np.asarray(vector, dtype=float)
    if vector.size % n:
        raise ValueError(f'Vector of length {vector.size} is not a multiple of the block size {n}')
    return vector.reshape(-1, n)


def restrict_vector(fine: np.ndarray, stencil: AveragingStencil, n: int = 1) -> np.ndarray:
    """
    Restricts a flat block vector of block size `n` (a scalar sequence for n = 1).

    Raises:
        ValueError: when the number of blocks is odd
    """
    rows = _rows_of(fine, n)
    return (restriction_matrix(rows.shape[0], stencil) @ rows).reshape(-1)


def prolong_vector(coarse: np.ndarray, stencil: AveragingStencil, n: int = 1) -> np.ndarray:
    rows = _rows_of(coarse, n)
    return (prolongation_matrix(2 * rows.shape[0], stencil) @ rows).reshape(-1)


def solution_restriction_matrix(steps: int, stencil: AveragingStencil) -> scipy.sparse.csr_matrix:
    """
    Node-centred restriction of m+1 nodes to m/2+1 nodes.

    Coarse node J sits on fine node 2J. Even orders sample the nodes 2J - L//2 .. 2J + L//2, odd orders the
    half points 2J - (L-1) .. 2J + (L-1) in steps of 2. Clipped stencils are renormalised and both end
    nodes are copied.
    """
    if steps < 2 or steps % 2:
        raise ValueError(f'Solution restriction needs an even step count, got {steps}')
    length = len(stencil)
    spacing = 2 if stencil.staggered else 1
    offsets = spacing * (2 * np.arange(length) - (length - 1)) // 2
    coarse = np.arange(steps // 2 + 1)[:, None]
    cols = 2 * coarse + offsets[None, :]
    rows_idx = np.broadcast_to(coarse, cols.shape)
    values = np.broadcast_to(stencil.values, cols.shape)
    inside = (cols >= 0) & (cols <= steps)
    interior = (rows_idx > 0) & (rows_idx < steps // 2)
    keep = inside & interior
    r, c, v = rows_idx[keep], cols[keep], values[keep]
    v = v / np.bincount(r, weights=v, minlength=steps // 2 + 1)[r]
    ends = np.array([0, steps // 2])
    r = np.concatenate([r, ends])
    c = np.concatenate([c, [0, steps]])
    v = np.concatenate([v, [1.0, 1.0]])
    return scipy.sparse.coo_matrix((v, (r, c)), shape=(steps // 2 + 1, steps + 1)).tocsr()


def restrict_solution(traj: Trajectory, stencil: AveragingStencil) -> Trajectory:
    """
    Coarse trajectory with twice the step: m/2 + 1 stencil-averaged states.

    Raises:
        ValueError: when the step count is odd
    """
    if traj.m % 2:
        raise ValueError(f'Cannot coarsen a trajectory with an odd step count {traj.m}')
    states = solution_restriction_matrix(traj.m, stencil) @ traj.states
    return Trajectory(states=states, dt=2.0 * traj.dt, t0=traj.t0)


def inject_solution(traj: Trajectory) -> Trajectory:
    """
    Coarse trajectory with twice the step made of the even nodes u_0, u_2, ..., u_m.

    Raises:
        ValueError: when the step count is odd
    """
    if traj.m % 2:
        raise ValueError(f'Cannot coarsen a trajectory with an odd step count {traj.m}')
    return Trajectory(states=traj.states[::2].copy(), dt=2.0 * traj.dt, t0=traj.t0)


def injection_matrix(rows: int) -> scipy.sparse.csr_matrix:
    """Keeps the fine cells 1, 3, 5, ... (the even steps 2, 4, 6, ... counted from 1)."""
    if rows < 2 or rows % 2:
        raise ValueError(f'Injection needs an even number of rows, got {rows}')
    coarse = np.arange(rows // 2)
    return scipy.sparse.coo_matrix((np.ones(coarse.size), (coarse, 2 * coarse + 1)),
                                   shape=(rows // 2, rows)).tocsr()


def interpolation_matrix(rows: int) -> scipy.sparse.csr_matrix:
    """Linear interpolation back onto `rows` fine cells, with zero beyond the first coarse cell."""
    coarse = np.arange(rows // 2)
    r = np.concatenate([2 * coarse + 1, 2 * coarse, 2 * coarse[1:]])
    c = np.concatenate([coarse, coarse, coarse[1:] - 1])
    v = np.concatenate([np.ones(coarse.size), np.full(coarse.size, 0.5), np.full(coarse.size - 1, 0.5)])
    return scipy.sparse.coo_matrix((v, (r, c)), shape=(rows, rows // 2)).tocsr()


# ####### COARSE OPERATORS

def classic_coarsen(system: BlockTridiag, rhs: np.ndarray) -> Tuple[BlockTridiag, np.ndarray]:
    """
    Injects every second block row and column, keeping rows 2, 4, ... counted from 1.

    Neighbouring kept rows are two apart, so the injected submatrix has no off-diagonal blocks. The classic
    hierarchy therefore re-assembles its coarse systems from the injected trajectory instead.
    """
    if system.rows % 2:
        raise ValueError(f'Injection needs an even number of block rows, got {system.rows}')
    kept = np.arange(1, system.rows, 2)
    coarse = BlockTridiag.from_diagonal(system.diag[kept].copy())
    return coarse, np.asarray(rhs, dtype=float).reshape(system.rows, system.n)[kept].reshape(-1)


def galerkin_coarse_apply(fine_apply, stencil: AveragingStencil, w_coarse: np.ndarray, n: int = 3) -> np.ndarray:
    """
    R (A (P w_coarse)) without assembling the coarse matrix.
    """
    op = fine_apply if isinstance(fine_apply, LinearOperator) else as_operator(fine_apply)
    fine = prolong_vector(w_coarse, stencil, n)
    return restrict_vector(op.matvec(fine), stencil, n)


def galerkin_operator(fine_apply, stencil: AveragingStencil, rows: int, n: int) -> LinearOperator:
    """LinearOperator of the Galerkin coarse system of a fine operator with `rows` block rows."""
    restriction, prolongation = transfer_matrices(rows, stencil, n)
    op = fine_apply if isinstance(fine_apply, LinearOperator) else as_operator(fine_apply)

    def matvec(x):
        return restriction @ op.matvec(prolongation @ np.ravel(x))

    size = (rows // 2) * n
    return LinearOperator((size, size), matvec=matvec, rmatvec=matvec, dtype=float)


# ####### HIERARCHY

@dataclass(eq=False)
class GridLevel:
    """
    One grid of the hierarchy.

    Attributes:
        dt: time step of this grid
        rows: number of block rows (time steps)
        system: explicit BlockTridiag or a matrix-free LinearOperator
        omega: Gauss-Seidel factor used on this grid
        trajectory, blocks: re-assembled KKT data (every grid except the Galerkin levels)
        restriction, prolongation: block transfers to and from the next coarser grid
        factor: dense factorisation of an operator-only coarsest grid
    """
    dt: float
    rows: int
    system: Union[BlockTridiag, LinearOperator]
    omega: float = 1.0
    trajectory: Optional[Trajectory] = None
    blocks: Optional[KktBlocks] = None
    restriction: Optional[scipy.sparse.csr_matrix] = None
    prolongation: Optional[scipy.sparse.csr_matrix] = None
    factor: Optional[tuple] = None

    @property
    def explicit(self) -> bool:
        return isinstance(self.system, BlockTridiag)

    @property
    def operator(self) -> LinearOperator:
        return self.system if isinstance(self.system, LinearOperator) else as_operator(self.system)


@dataclass(eq=False)
class GridHierarchy:
    scheme: str
    levels: List[GridLevel]
    n: int
    stencil: AveragingStencil

    @property
    def fine(self) -> GridLevel:
        return self.levels[0]

    @property
    def coarsest(self) -> int:
        return len(self.levels) - 1

    @property
    def dts(self) -> List[float]:
        return [level.dt for level in self.levels]

    def restrict(self, level: int, vector: np.ndarray) -> np.ndarray:
        return self.levels[level].restriction @ vector

    def prolong(self, level: int, vector: np.ndarray) -> np.ndarray:
        return self.levels[level].prolongation @ vector


def _check_divisible(m: int, coarsenings: int):
    if m % 2 ** coarsenings:
        raise UserException(f'The step count m={m} is not divisible by 2^{coarsenings}={2 ** coarsenings} '
                            f'required by the grid hierarchy')


def build_hierarchy(traj: Trajectory, p: LorenzParams, which: str, cfg: MgConfig) -> GridHierarchy:
    """
    Builds every grid of the V-cycle, finest first.

    Raises:
        UserException: when m is not divisible by 2^levels or dt_c is finer than the trajectory step
    """
    dt_f = traj.dt
    stencil = cfg.stencil
    blocks = assemble_blocks(traj, p, which, cfg.alpha2)
    fine = GridLevel(dt=dt_f, rows=traj.m, system=schur_blocks(blocks), omega=cfg.smoother.omega,
                     trajectory=traj, blocks=blocks)
    n = traj.n

    if cfg.scheme == CLASSIC:
        coarsenings = int(round(math.log2(traj.m))) if traj.m > 1 else 0
        if 2 ** coarsenings != traj.m:
            raise UserException(f'Classic multigrid coarsens to a single row and needs m to be a power of 2, '
                                f'got m={traj.m}')
    else:
        if cfg.dt_c < dt_f:
            raise UserException(f'dt_c={cfg.dt_c} must not be finer than the trajectory step {dt_f}')
        coarsenings = coarsening_count(dt_f, cfg.dt_c)
        _check_divisible(traj.m, coarsenings)

    levels = [fine]
    for k in range(1, coarsenings + 1):
        parent = levels[-1]
        dt = dt_f * 2 ** k
        rows = parent.rows // 2
        omega = under_relaxation(dt, dt_f, cfg.smoother.omega)
        if cfg.scheme == CLASSIC:
            parent.restriction = scipy.sparse.kron(injection_matrix(parent.rows), scipy.sparse.identity(n),
                                                   format='csr')
            parent.prolongation = scipy.sparse.kron(interpolation_matrix(parent.rows), scipy.sparse.identity(n),
                                                    format='csr')
            coarse_traj = inject_solution(parent.trajectory)
            coarse_blocks = assemble_blocks(coarse_traj, p, which, cfg.alpha2)
            level = GridLevel(dt=dt, rows=rows, system=schur_blocks(coarse_blocks), omega=omega,
                              trajectory=coarse_traj, blocks=coarse_blocks)
        else:
            parent.restriction, parent.prolongation = transfer_matrices(parent.rows, stencil, n)
            if cfg.scheme == MATRIX_RESTRICTION:
                system = galerkin_operator(parent.operator, stencil, parent.rows, n)
                level = GridLevel(dt=dt, rows=rows, system=system, omega=omega)
            else:
                coarse_traj = restrict_solution(parent.trajectory, stencil)
                coarse_blocks = assemble_blocks(coarse_traj, p, which, cfg.alpha2)
                level = GridLevel(dt=dt, rows=rows, system=schur_blocks(coarse_blocks), omega=omega,
                                  trajectory=coarse_traj, blocks=coarse_blocks)
        levels.append(level)

    hierarchy = GridHierarchy(scheme=cfg.scheme, levels=levels, n=n, stencil=stencil)
    _prepare_coarse_solve(hierarchy, cfg)
    logging.debug(f'{cfg.scheme} hierarchy: dt {", ".join(f"{dt:g}" for dt in hierarchy.dts)}')
    return hierarchy


def _prepare_coarse_solve(hierarchy: GridHierarchy, cfg: MgConfig):
    """Factorises an operator-only coarsest grid when it is solved densely."""
    coarsest = hierarchy.levels[-1]
    if coarsest.explicit or cfg.coarse_solver == KRYLOV_TO_TOL:
        return
    if cfg.coarse_solver == AUTO and coarsest.rows > DENSE_COARSE_ROWS:
        return
    if coarsest.rows > DENSE_GUARD_ROWS:
        raise GuardViolation(f'Dense coarse solve refused: {coarsest.rows} block rows exceed the guard of '
                             f'{DENSE_GUARD_ROWS}')
    size = coarsest.rows * hierarchy.n
    dense = coarsest.operator.matmat(np.eye(size))
    dense = 0.5 * (dense + dense.T)
    try:
        coarsest.factor = ('cholesky', scipy.linalg.cho_factor(dense))
    except np.linalg.LinAlgError:
        logging.warning('Coarsest Galerkin operator is not numerically positive definite, using LU')
        coarsest.factor = ('lu', scipy.linalg.lu_factor(dense))


def coarse_solve(hierarchy: GridHierarchy, rhs: np.ndarray, cfg: MgConfig) -> np.ndarray:
    coarsest = hierarchy.levels[-1]
    if coarsest.factor is not None:
        kind, factor = coarsest.factor
        return scipy.linalg.cho_solve(factor, rhs) if kind == 'cholesky' else scipy.linalg.lu_solve(factor, rhs)
    if coarsest.explicit and cfg.coarse_solver != KRYLOV_TO_TOL:
        return direct_solve(coarsest.system, rhs, max_rows=max(coarsest.rows, 1))
    start = np.zeros_like(rhs)
    max_iters = 10 * rhs.size
    try:
        w, _ = conjugate_gradient(coarsest.operator, start, rhs, max_iters, rel_tol=COARSE_KRYLOV_TOL)
    except BreakdownError:
        logging.warning('CG breakdown on the coarsest grid, retrying with MINRES')
        w, _ = minres(coarsest.operator, start, rhs, max_iters, rel_tol=COARSE_KRYLOV_TOL)
    return w


def v_cycle(hierarchy: GridHierarchy, level: int, w: np.ndarray, rhs: np.ndarray, cfg: MgConfig) -> np.ndarray:
    """
    One V-cycle starting at `level`: nu1 pre-smoothing steps, coarse-grid correction of the restricted
    residual, nu2 post-smoothing steps. The coarsest grid is solved by `coarse_solve`.
    """
    if level == hierarchy.coarsest:
        return coarse_solve(hierarchy, np.asarray(rhs, dtype=float), cfg)
    grid = hierarchy.levels[level]
    w, _ = smooth(cfg.smoother, grid.system, w, rhs, cfg.nu1, omega=grid.omega, level=level)
    residual = np.asarray(rhs, dtype=float) - grid.operator.matvec(w)
    coarse_rhs = hierarchy.restrict(level, residual)
    correction = v_cycle(hierarchy, level + 1, np.zeros_like(coarse_rhs), coarse_rhs, cfg)
    w = w + hierarchy.prolong(level, correction)
    w, _ = smooth(cfg.smoother, grid.system, w, rhs, cfg.nu2, omega=grid.omega, level=level)
    return w


def cycle_flops(hierarchy: GridHierarchy, cfg: MgConfig) -> float:
    """
    Smoothing cost of one V-cycle: every matrix restriction level costs a fine-grid apply, the other
    schemes pay m_k n per sweep on level k.
    """
    fine = hierarchy.fine
    sweeps = cfg.nu1 + cfg.nu2
    if hierarchy.scheme == MATRIX_RESTRICTION:
        return float(len(hierarchy.levels) * fine.rows * hierarchy.n * sweeps)
    return float(sum(level.rows for level in hierarchy.levels) * hierarchy.n * sweeps)


def mg_solve(traj: Trajectory, p: LorenzParams, which: str, cfg: MgConfig,
             qoi: Optional[QuantityOfInterest] = None) -> Tuple[np.ndarray, SolveReport]:
    """
    Repeats V-cycles from w = 0 until ||r|| <= rel_tol ||b|| or max_cycles.

    Returns:
        the fine-grid solution and a report with per-cycle residual and gradient histories

    Raises:
        SolverDivergence: when the residual grows by `divergence_factor` or turns non-finite; the exception
            carries the partial report
    """
    qoi = qoi or quantity_of_interest('z')
    start = time.perf_counter()
    hierarchy = build_hierarchy(traj, p, which, cfg)
    fine = hierarchy.fine
    b = rhs_vector(fine.blocks)
    w = np.zeros_like(b)
    initial = float(np.linalg.norm(b))

    report = SolveReport(scheme=cfg.scheme, residual_history=[initial],
                         gradient_history=[gradient(traj, recover_tangent(fine.blocks, w), qoi)],
                         levels=hierarchy.dts)
    per_cycle = cycle_flops(hierarchy, cfg)
    for cycle in range(1, cfg.max_cycles + 1):
        if report.residual_history[-1] <= cfg.rel_tol * initial:
            break
        w = v_cycle(hierarchy, 0, w, b, cfg)
        residual = float(np.linalg.norm(b - fine.operator.matvec(w)))
        report.residual_history.append(residual)
        report.gradient_history.append(gradient(traj, recover_tangent(fine.blocks, w), qoi))
        report.estimated_flops += per_cycle
        logging.debug(f'cycle {cycle}: residual {residual:.3e}, gradient {report.gradient_history[-1]:.6f}')
        if not np.isfinite(residual) or residual > cfg.divergence_factor * initial:
            report.wall_time = time.perf_counter() - start
            report.finalize(cfg.rel_tol)
            report.error = f'residual grew to {residual:.3e} from {initial:.3e} in {cycle} cycles'
            raise SolverDivergence(f'{cfg.scheme} multigrid diverged: {report.error}', report=report)

    report.wall_time = time.perf_counter() - start
    report.finalize(cfg.rel_tol)
    logging.info(f'{cfg.scheme} multigrid: {report.cycles} cycles, relative residual '
                 f'{report.relative_residuals[-1]:.3e}, gradient {report.final_gradient:.6f}')
    return w, report
