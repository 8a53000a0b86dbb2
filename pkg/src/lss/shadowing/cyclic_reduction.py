"""
Block cyclic reduction of a symmetric block-tridiagonal system.

Rows are indexed from 0. Each reduction eliminates the even rows 0, 2, ..., M-1 of an odd-sized level and
keeps the odd rows, so a level of 2^k - 1 rows reduces to a single row after k - 1 steps.
"""
import logging
import time
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .dao import CYCLIC_REDUCTION, SolveReport
from .exceptions import BreakdownError, InnerSolveError
from .kkt import BlockTridiag, invert_blocks
from .smoothers import conjugate_gradient, minres

INNER_TOLERANCE = 1e-10


@dataclass(frozen=True, eq=False)
class CrLevel:
    """
    One level of the reduction.

    Attributes:
        tridiag: system of this level
        rhs: (rows, n) right-hand side
        parent: the finer level this one was reduced from
        parent_inverses: inverses of the parent's eliminated diagonal blocks, used for back-substitution
        depth: 0 for the original system
    """
    tridiag: BlockTridiag
    rhs: np.ndarray
    parent: Optional['CrLevel'] = None
    parent_inverses: Optional[np.ndarray] = None
    depth: int = 0

    @property
    def rows(self) -> int:
        return self.tridiag.rows


@dataclass(frozen=True)
class FlopModel:
    """
    Attributes:
        p: flops of one Jacobian-block multiply
        q: iterations of one inner block solve
        n: state dimension
    """
    p: int
    q: int
    n: int

    def __post_init__(self):
        for name in ('p', 'q', 'n'):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f'FlopModel.{name} must be a positive integer, got {value}')


@dataclass(frozen=True)
class FlopEstimate:
    """
    Leading-order counts for m = 2^l + 1 rows: CR = c * p * q^k, Jacobi = a * p + e * n.
    """
    m: int
    levels: int
    cr_coefficient: int
    q_power: int
    jacobi_p: int
    jacobi_n: int
    cr_flops: int
    jacobi_flops: int

    @property
    def cr_expression(self) -> str:
        return f'{self.cr_coefficient}pq^{self.q_power}'

    @property
    def jacobi_expression(self) -> str:
        return f'{self.jacobi_p}p+{self.jacobi_n}n'


def reduce_level(level: CrLevel) -> CrLevel:
    """
    Eliminates the even rows of `level`.

    For a kept row i with eliminated neighbours i-1 and i+1:

        L_I = -L_i D_{i-1}^{-1} L_{i-1}
        D_I = D_i - L_i D_{i-1}^{-1} U_{i-1} - U_i D_{i+1}^{-1} L_{i+1}
        U_I = -U_i D_{i+1}^{-1} U_{i+1}
        b_I = b_i - L_i D_{i-1}^{-1} b_{i-1} - U_i D_{i+1}^{-1} b_{i+1}

    Raises:
        ValueError: when the row count is not odd and at least 3
        SingularBlockError: when an eliminated diagonal block is singular
    """
    system, b = level.tridiag, level.rhs
    rows = system.rows
    if rows < 3 or rows % 2 == 0:
        raise ValueError(f'Cyclic reduction needs an odd row count of at least 3, got {rows}')

    eliminated = np.arange(0, rows, 2)
    kept = np.arange(1, rows - 1, 2)
    inverses = invert_blocks(system.diag[eliminated], level.depth, indices=eliminated)

    left = np.matmul(system.lower[kept - 1], inverses[(kept - 1) // 2])
    right = np.matmul(system.upper[kept], inverses[(kept + 1) // 2])
    diag = (system.diag[kept]
            - np.matmul(left, system.upper[kept - 1])
            - np.matmul(right, system.lower[kept]))
    rhs = (b[kept]
           - np.einsum('kij,kj->ki', left, b[kept - 1])
           - np.einsum('kij,kj->ki', right, b[kept + 1]))
    lower = -np.matmul(left[1:], system.lower[kept[1:] - 2])
    upper = -np.matmul(right[:-1], system.upper[kept[:-1] + 1])
    return CrLevel(tridiag=BlockTridiag(lower=lower, diag=diag, upper=upper), rhs=rhs, parent=level,
                   parent_inverses=inverses, depth=level.depth + 1)


def back_substitute(coarse_solution: np.ndarray, level: CrLevel) -> np.ndarray:
    """
    Recovers the parent's solution from the solution of `level`.

    The kept rows take the coarse values, every eliminated row j solves D_j w_j = b_j - L_j w_{j-1} - U_j w_{j+1}.

    Returns:
        (parent rows, n) solution
    """
    if level.parent is None:
        raise ValueError('The finest level has no parent to substitute into')
    parent = level.parent
    system, b = parent.tridiag, parent.rhs
    rows, n = system.rows, system.n
    x = np.zeros((rows, n))
    x[1:rows - 1:2] = np.asarray(coarse_solution, dtype=float).reshape(-1, n)

    eliminated = np.arange(0, rows, 2)
    r = b[eliminated].copy()
    r[1:] -= np.einsum('kij,kj->ki', system.lower[eliminated[1:] - 1], x[eliminated[1:] - 1])
    r[:-1] -= np.einsum('kij,kj->ki', system.upper[eliminated[:-1]], x[eliminated[:-1] + 1])
    x[eliminated] = np.einsum('kij,kj->ki', level.parent_inverses, r)
    return x


def _padded(system: BlockTridiag, rhs: np.ndarray) -> Tuple[BlockTridiag, np.ndarray]:
    rows, n = system.rows, system.n
    target = 2 ** int(np.ceil(np.log2(rows + 1))) - 1
    if target == rows:
        return system, rhs
    extra = target - rows
    zeros = np.zeros((extra, n, n))
    padded = BlockTridiag(lower=np.concatenate([system.lower, zeros]),
                          diag=np.concatenate([system.diag, np.broadcast_to(np.eye(n), (extra, n, n))]),
                          upper=np.concatenate([system.upper, zeros]))
    return padded, np.concatenate([rhs, np.zeros((extra, n))])


def solve_cr(system: BlockTridiag, rhs: np.ndarray) -> Tuple[np.ndarray, SolveReport]:
    """
    Solves the system in one reduction and back-substitution pass.

    Systems whose row count is not 2^k - 1 are padded with decoupled identity rows and zero right-hand side;
    the padding is stripped from the result.

    Returns:
        flat solution and a single-cycle report
    """
    start = time.perf_counter()
    rows, n = system.rows, system.n
    b = np.asarray(rhs, dtype=float).reshape(rows, n)
    padded, padded_rhs = _padded(system, b)

    level = CrLevel(tridiag=padded, rhs=padded_rhs)
    while level.rows > 1:
        level = reduce_level(level)
        logging.debug(f'Cyclic reduction level {level.depth}: {level.rows} rows')

    x = np.einsum('kij,kj->ki', invert_blocks(level.tridiag.diag, level.depth), level.rhs)
    while level.parent is not None:
        x = back_substitute(x, level)
        level = level.parent

    w = x[:rows].reshape(-1)
    report = SolveReport(scheme=CYCLIC_REDUCTION,
                         residual_history=[float(np.linalg.norm(b)),
                                           float(np.linalg.norm(b.reshape(-1) - system.matvec(w)))],
                         levels=[],
                         wall_time=time.perf_counter() - start)
    depth = int(np.log2(padded.rows + 1)) - 1
    if depth >= 1:
        # dense n x n blocks: one block product costs 2 n^3 flops, one block solve is exact (q = 1)
        report.estimated_flops = float(flop_estimate(FlopModel(p=2 * n ** 3, q=1, n=n), 2 ** depth + 1).cr_flops)
    return w, report


def _inner_solve(block: np.ndarray, y: np.ndarray, tol: float, index: int, level: int) -> np.ndarray:
    """Iterative solve of D z = y; CG first, MINRES when CG meets non-positive curvature."""
    max_iters = 10 * block.shape[0]
    try:
        z, trace = conjugate_gradient(block, np.zeros_like(y), y, max_iters, rel_tol=tol)
    except BreakdownError:
        logging.warning(f'CG breakdown on block {index} of level {level}, retrying with MINRES')
        z, trace = minres(block, np.zeros_like(y), y, max_iters, rel_tol=tol)
    scale = float(np.linalg.norm(y))
    residual = float(np.linalg.norm(y - block @ z))
    if residual > max(tol * scale * 100.0, np.finfo(float).tiny):
        raise InnerSolveError(block=index, level=level, residual=residual / scale if scale else residual)
    return z


def inversion_free_apply(level: CrLevel, x: np.ndarray, inner_tol: float = INNER_TOLERANCE) -> np.ndarray:
    """
    Action of the next coarser operator of `level` on a coarse vector, without forming any block inverse.

    With t_j = D_j^{-1} (L_j x_{j-1} + U_j x_{j+1}) computed by an inner iterative solve for every eliminated
    row j, the coarse row of kept row i reads D_i x_I - L_i t_{i-1} - U_i t_{i+1}.

    Raises:
        InnerSolveError: when an inner solve misses its tolerance
    """
    system = level.tridiag
    rows, n = system.rows, system.n
    if rows < 3 or rows % 2 == 0:
        raise ValueError(f'Cyclic reduction needs an odd row count of at least 3, got {rows}')
    kept = np.arange(1, rows - 1, 2)
    xc = np.asarray(x, dtype=float).reshape(kept.size, n)
    fine = np.zeros((rows, n))
    fine[kept] = xc

    t = np.zeros((rows, n))
    for j in range(0, rows, 2):
        y = np.zeros(n)
        if j > 0:
            y += system.lower[j - 1] @ fine[j - 1]
        if j < rows - 1:
            y += system.upper[j] @ fine[j + 1]
        t[j] = _inner_solve(system.diag[j], y, inner_tol, j, level.depth)

    out = (np.einsum('kij,kj->ki', system.diag[kept], xc)
           - np.einsum('kij,kj->ki', system.lower[kept - 1], t[kept - 1])
           - np.einsum('kij,kj->ki', system.upper[kept], t[kept + 1]))
    return out.reshape(-1)


def flop_estimate(model: FlopModel, m: int) -> FlopEstimate:
    """
    Operation count of one cyclic reduction pass against Jacobi iteration for m = 2^l + 1, l >= 1.

    CR costs 2^{l+2} p q^{l+1}; Jacobi costs (2^{l+3} + 4) p + (5 * 2^l + 3) n.

    Raises:
        ValueError: when m is not of the form 2^l + 1 with l >= 1
    """
    l = int(np.log2(m - 1)) if m >= 3 else 0
    if m < 3 or 2 ** l + 1 != m:
        raise ValueError(f'Operation counts are defined for m = 2^l + 1 with l >= 1, got m={m}')
    cr_coefficient = 2 ** (l + 2)
    q_power = l + 1
    jacobi_p = 2 ** (l + 3) + 4
    jacobi_n = 5 * 2 ** l + 3
    return FlopEstimate(m=m, levels=l,
                        cr_coefficient=cr_coefficient, q_power=q_power,
                        jacobi_p=jacobi_p, jacobi_n=jacobi_n,
                        cr_flops=cr_coefficient * model.p * model.q ** q_power,
                        jacobi_flops=jacobi_p * model.p + jacobi_n * model.n)
