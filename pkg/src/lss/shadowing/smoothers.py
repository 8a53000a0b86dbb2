"""
Relaxation and Krylov iterations on the Schur system.

Every routine takes the initial guess and right-hand side as flat KKT vectors and returns a new vector
together with an `IterationTrace`; inputs are never modified.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.sparse.linalg import LinearOperator

from .exceptions import BreakdownError
from .kkt import BlockTridiag, as_operator, invert_blocks

GAUSS_SEIDEL = 'block-gauss-seidel'
CONJUGATE_GRADIENT = 'conjugate-gradient'
MINRES = 'minres'
SMOOTHER_KINDS = (GAUSS_SEIDEL, CONJUGATE_GRADIENT, MINRES)

# bounds of the coarse-grid under-relaxation schedule
MIN_OMEGA = 0.05

Callback = Optional[Callable[[np.ndarray], None]]


@dataclass(frozen=True)
class SmootherSpec:
    kind: str = CONJUGATE_GRADIENT
    iterations: int = 30
    omega: float = 1.0

    def __post_init__(self):
        if self.kind not in SMOOTHER_KINDS:
            raise ValueError(f'Unknown smoother "{self.kind}". Supported values are: {", ".join(SMOOTHER_KINDS)}')
        if self.iterations < 0:
            raise ValueError(f'Smoother iterations must be non-negative, got {self.iterations}')
        if not 0 < self.omega <= 1:
            raise ValueError(f'Under-relaxation factor must lie in (0, 1], got {self.omega}')


@dataclass
class IterationTrace:
    """
    Residual 2-norms, the first entry being the residual of the initial guess.
    """
    residual_norms: List[float] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations_run(self) -> int:
        return max(len(self.residual_norms) - 1, 0)

    @property
    def final_residual(self) -> float:
        return self.residual_norms[-1]


def block_gauss_seidel(system: BlockTridiag, w: np.ndarray, rhs: np.ndarray, sweeps: int,
                       omega: float = 1.0, level: int = 0) -> Tuple[np.ndarray, IterationTrace]:
    """
    Forward block Gauss-Seidel with one n x n block per time step.

    Each block update solves D_i exactly and blends the result with the previous value:
    w_i <- (1 - omega) w_i + omega D_i^{-1} (rhs_i - L_i w_{i-1} - U_i w_{i+1}).

    Args:
        system: explicit block-tridiagonal operator
        w: initial guess
        rhs: right-hand side
        sweeps: number of forward passes
        omega: under-relaxation factor in (0, 1]
        level: grid level, only used in error messages

    Raises:
        SingularBlockError: when a diagonal block cannot be inverted
    """
    if not 0 < omega <= 1:
        raise ValueError(f'Under-relaxation factor must lie in (0, 1], got {omega}')
    rows, n = system.rows, system.n
    x = np.array(w, dtype=float).reshape(rows, n)
    b = np.asarray(rhs, dtype=float).reshape(rows, n)
    trace = IterationTrace([_residual(system, x, b)])
    if sweeps <= 0:
        return x.reshape(-1), trace

    inverses = invert_blocks(system.diag, level)
    lower, upper = system.lower, system.upper
    for _ in range(sweeps):
        for i in range(rows):
            r = b[i].copy()
            if i > 0:
                r -= lower[i - 1] @ x[i - 1]
            if i < rows - 1:
                r -= upper[i] @ x[i + 1]
            x[i] = (1.0 - omega) * x[i] + omega * (inverses[i] @ r)
        trace.residual_norms.append(_residual(system, x, b))
    return x.reshape(-1), trace


def _residual(system: BlockTridiag, x: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(b.reshape(-1) - system.matvec(x.reshape(-1))))


def under_relaxation(dt: float, dt_f: float, omega_f: float) -> float:
    """
    Gauss-Seidel factor for a grid of step `dt` given the fine-grid step and factor.

    Scales omega_f by dt_f / dt and clamps the result to [0.05, omega_f].
    """
    if not dt_f > 0 or dt < dt_f:
        raise ValueError(f'Expected dt >= dt_f > 0, got dt={dt}, dt_f={dt_f}')
    return float(min(omega_f, max(MIN_OMEGA, omega_f * dt_f / dt)))


def conjugate_gradient(apply, w0: np.ndarray, rhs: np.ndarray, max_iters: int, rel_tol: float = 0.0,
                       callback: Callback = None) -> Tuple[np.ndarray, IterationTrace]:
    """
    Unpreconditioned conjugate gradient.

    Stops after `max_iters` iterations or once ||r||_2 <= rel_tol * ||rhs||_2. With rel_tol = 0 it runs
    the full iteration count unless the residual vanishes exactly, which is how it is used as a smoother.

    Args:
        apply: SPD operator (LinearOperator, BlockTridiag, KktBlocks or matrix)
        w0: initial guess
        rhs: right-hand side
        max_iters: iteration limit
        rel_tol: relative residual tolerance
        callback: called with the current iterate after every iteration

    Raises:
        BreakdownError: on a search direction with p^T A p <= 0
    """
    op = _operator(apply)
    b = np.asarray(rhs, dtype=float).reshape(-1)
    x = np.array(w0, dtype=float).reshape(-1)
    tol = rel_tol * np.linalg.norm(b)

    r = b - op.matvec(x)
    p = r.copy()
    rr = float(r @ r)
    trace = IterationTrace([np.sqrt(rr)])
    for k in range(max_iters):
        if np.sqrt(rr) <= tol or rr == 0.0:
            break
        ap = op.matvec(p)
        curvature = float(p @ ap)
        if curvature <= 0.0:
            raise BreakdownError(f'Conjugate gradient breakdown at iteration {k}: p^T A p = {curvature:.3e}')
        step = rr / curvature
        x += step * p
        r -= step * ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        trace.residual_norms.append(np.sqrt(rr))
        if callback is not None:
            callback(x)
    trace.converged = bool(trace.final_residual <= tol)
    logging.debug(f'CG: {trace.iterations_run} iterations, residual {trace.final_residual:.3e}')
    return x, trace


def minres(apply, w0: np.ndarray, rhs: np.ndarray, max_iters: int, rel_tol: float = 0.0,
           callback: Callback = None) -> Tuple[np.ndarray, IterationTrace]:
    """
    Unpreconditioned MINRES for symmetric operators.

    Intermediate residuals are the Lanczos recurrence estimate of ||r||_2, non-increasing by construction; the
    last entry is the true residual of the returned iterate and decides `converged`. Same stopping contract as
    `conjugate_gradient`; non-convergence is reported in the trace only.
    """
    op = _operator(apply)
    b = np.asarray(rhs, dtype=float).reshape(-1)
    x = np.array(w0, dtype=float).reshape(-1)
    tol = rel_tol * np.linalg.norm(b)
    eps = np.finfo(float).eps

    r1 = b - op.matvec(x)
    beta1 = float(np.linalg.norm(r1))
    trace = IterationTrace([beta1])
    if beta1 == 0.0:
        trace.converged = True
        return x, trace

    y = r1.copy()
    r2 = r1.copy()
    beta, oldb = beta1, 0.0
    dbar = epsln = 0.0
    phibar = beta1
    cs, sn = -1.0, 0.0
    d = np.zeros_like(x)
    d2 = np.zeros_like(x)
    for itn in range(max_iters):
        if phibar <= tol:
            break
        v = y / beta
        y = op.matvec(v)
        if itn > 0:
            y = y - (beta / oldb) * r1
        alfa = float(v @ y)
        y = y - (alfa / beta) * r2
        r1, r2 = r2, y
        oldb = beta
        beta = float(np.linalg.norm(r2))

        # plane rotation eliminating the subdiagonal of the Lanczos tridiagonal
        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        gamma = max(np.hypot(gbar, beta), eps)
        cs, sn = gbar / gamma, beta / gamma
        phi = cs * phibar
        phibar = sn * phibar

        d1, d2 = d2, d
        d = (v - oldeps * d1 - delta * d2) / gamma
        x += phi * d
        trace.residual_norms.append(float(phibar))
        if callback is not None:
            callback(x)
        if beta == 0.0:
            break
    if trace.iterations_run:
        # the recurrence estimate drifts from ||b - A x|| over long runs
        trace.residual_norms[-1] = float(np.linalg.norm(b - op.matvec(x)))
    trace.converged = bool(trace.final_residual <= tol)
    logging.debug(f'MINRES: {trace.iterations_run} iterations, residual {trace.final_residual:.3e}')
    return x, trace


def _operator(apply) -> LinearOperator:
    if isinstance(apply, LinearOperator):
        return apply
    return as_operator(apply)


def smooth(spec: SmootherSpec, system, w: np.ndarray, rhs: np.ndarray, iterations: int,
           omega: Optional[float] = None, level: int = 0) -> Tuple[np.ndarray, IterationTrace]:
    """
    Runs `iterations` smoothing steps of the kind given by `spec`.

    Block Gauss-Seidel needs an explicit `BlockTridiag`; the Krylov smoothers accept any operator.
    """
    if spec.kind == GAUSS_SEIDEL:
        if not isinstance(system, BlockTridiag):
            raise ValueError('Block Gauss-Seidel smoothing needs an explicit block-tridiagonal operator')
        return block_gauss_seidel(system, w, rhs, iterations, spec.omega if omega is None else omega, level)
    if spec.kind == CONJUGATE_GRADIENT:
        return conjugate_gradient(system, w, rhs, iterations)
    return minres(system, w, rhs, iterations)
