"""
Discrete KKT system of least squares shadowing.

Constraint row i (i = 1..m) couples the tangent at nodes i-1 and i:

    F_{i-1} v_{i-1} + G_i v_i + f_i eta_i + b_i = 0

which, written as B v + C eta = -b and combined with v = -B^T w and alpha^2 eta = -C^T w,
gives the block-tridiagonal Schur system A w = b with A = B B^T + C C^T / alpha^2.

Array conventions (0-based): ``F[k]`` is F_k for k = 0..m-1, ``G[k]`` is G_{k+1}, ``f[k]`` and
``b[k]`` belong to constraint row k+1, a KktVector is the flattened ``(m, n)`` array of w_1..w_m.
"""
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.sparse.linalg import LinearOperator

from . import dynamics
from .dynamics import LorenzParams, Trajectory
from .exceptions import GuardViolation, SingularBlockError

# largest block-row count accepted by dense verification helpers
DENSE_GUARD_ROWS = 256


@dataclass(frozen=True, eq=False)
class KktBlocks:
    """
    Per-step blocks of the discretised KKT system.

    Attributes:
        F: (m, n, n) blocks F_0..F_{m-1}
        G: (m, n, n) blocks G_1..G_m
        f: (m, n) step-averaged vector field f_1..f_m
        b: (m, n) step-averaged parameter derivative b_1..b_m
        alpha2: weight of the time dilation term
        dt: time step
    """
    F: np.ndarray
    G: np.ndarray
    f: np.ndarray
    b: np.ndarray
    alpha2: float
    dt: float

    def __post_init__(self):
        m, n = self.f.shape
        if self.F.shape != (m, n, n) or self.G.shape != (m, n, n) or self.b.shape != (m, n):
            raise ValueError(f'Inconsistent KKT block shapes: F{self.F.shape}, G{self.G.shape}, '
                             f'f{self.f.shape}, b{self.b.shape}')
        if not self.alpha2 > 0:
            raise ValueError(f'alpha2 must be positive, got {self.alpha2}')

    @property
    def m(self) -> int:
        return self.f.shape[0]

    @property
    def n(self) -> int:
        return self.f.shape[1]

    @property
    def size(self) -> int:
        return self.m * self.n


@dataclass(frozen=True, eq=False)
class BlockTridiag:
    """
    Block-tridiagonal matrix with `rows` block rows of size n.

    Attributes:
        lower: (rows-1, n, n), lower[k] is the block at (k+1, k), i.e. L of row k+1
        diag: (rows, n, n)
        upper: (rows-1, n, n), upper[k] is the block at (k, k+1), i.e. U of row k
    """
    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        rows, n, n2 = self.diag.shape
        off = (max(rows - 1, 0), n, n)
        if n != n2 or self.lower.shape != off or self.upper.shape != off:
            raise ValueError(f'Inconsistent block-tridiagonal shapes: lower{self.lower.shape}, '
                             f'diag{self.diag.shape}, upper{self.upper.shape}')

    @classmethod
    def from_diagonal(cls, diag: np.ndarray) -> 'BlockTridiag':
        rows, n, _ = diag.shape
        zeros = np.zeros((max(rows - 1, 0), n, n))
        return cls(lower=zeros, diag=np.asarray(diag, dtype=float), upper=zeros.copy())

    @classmethod
    def identity(cls, rows: int, n: int) -> 'BlockTridiag':
        return cls.from_diagonal(np.broadcast_to(np.eye(n), (rows, n, n)).copy())

    @classmethod
    def from_dense(cls, matrix: np.ndarray, n: int) -> 'BlockTridiag':
        """Extracts the three block diagonals of a dense matrix (entries outside are ignored)."""
        rows = matrix.shape[0] // n
        blocks = matrix.reshape(rows, n, rows, n).transpose(0, 2, 1, 3)
        k = np.arange(rows)
        return cls(lower=blocks[k[1:], k[:-1]].copy(), diag=blocks[k, k].copy(), upper=blocks[k[:-1], k[1:]].copy())

    @property
    def rows(self) -> int:
        return self.diag.shape[0]

    @property
    def n(self) -> int:
        return self.diag.shape[1]

    @property
    def size(self) -> int:
        return self.rows * self.n

    def matvec(self, x: np.ndarray) -> np.ndarray:
        xb = np.asarray(x, dtype=float).reshape(self.rows, self.n)
        y = np.einsum('kij,kj->ki', self.diag, xb)
        if self.rows > 1:
            y[:-1] += np.einsum('kij,kj->ki', self.upper, xb[1:])
            y[1:] += np.einsum('kij,kj->ki', self.lower, xb[:-1])
        return y.reshape(-1)

    @cached_property
    def sparse(self) -> scipy.sparse.bsr_matrix:
        n = self.n
        parts = [_block_coo(self.diag, 0, 0, n)]
        if self.rows > 1:
            parts.append(_block_coo(self.lower, 1, 0, n))
            parts.append(_block_coo(self.upper, 0, 1, n))
        rows = np.concatenate([p[0] for p in parts])
        cols = np.concatenate([p[1] for p in parts])
        data = np.concatenate([p[2] for p in parts])
        return scipy.sparse.coo_matrix((data, (rows, cols)), shape=(self.size, self.size)).tobsr(blocksize=(n, n))

    def as_operator(self) -> LinearOperator:
        return scipy.sparse.linalg.aslinearoperator(self.sparse)

    def to_dense(self, max_rows: int = DENSE_GUARD_ROWS) -> np.ndarray:
        if self.rows > max_rows:
            raise GuardViolation(f'Dense assembly refused: {self.rows} block rows exceed the guard of {max_rows}')
        return self.sparse.toarray()

    def symmetry_error(self) -> float:
        """Largest entry of |U_k - L_{k+1}^T| plus the asymmetry of the diagonal blocks."""
        off = np.max(np.abs(self.upper - self.lower.transpose(0, 2, 1)), initial=0.0)
        on = np.max(np.abs(self.diag - self.diag.transpose(0, 2, 1)), initial=0.0)
        return max(off, on)


def invert_blocks(blocks: np.ndarray, level: int = 0, indices: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Batched inverse of a stack of n x n blocks.

    Args:
        blocks: (k, n, n) stack
        level: grid level reported on failure
        indices: block-row index of every stacked block, reported on failure (defaults to 0..k-1)

    Raises:
        SingularBlockError: naming the first block that cannot be inverted
    """
    try:
        inverses = np.linalg.inv(blocks)
        if np.all(np.isfinite(inverses)):
            return inverses
    except np.linalg.LinAlgError:
        pass
    indices = np.arange(blocks.shape[0]) if indices is None else indices
    for k, block in enumerate(blocks):
        if np.linalg.matrix_rank(block) < block.shape[0] or not np.all(np.isfinite(block)):
            raise SingularBlockError(int(indices[k]), level)
    raise SingularBlockError(int(indices[0]), level, message='Ill-conditioned diagonal block')


def _block_coo(blocks: np.ndarray, row_offset: int, col_offset: int, n: int):
    k = np.arange(blocks.shape[0])[:, None, None]
    i = np.arange(n)[None, :, None]
    j = np.arange(n)[None, None, :]
    rows = np.broadcast_to((k + row_offset) * n + i, blocks.shape)
    cols = np.broadcast_to((k + col_offset) * n + j, blocks.shape)
    return rows.ravel(), cols.ravel(), blocks.ravel()


def assemble_blocks(traj: Trajectory, p: LorenzParams, which: str, alpha2: float) -> KktBlocks:
    """
    Builds F_i, G_i from the Jacobian at single nodes and f_i, b_i as two-node midpoint averages.
    """
    if not alpha2 > 0:
        raise ValueError(f'alpha2 must be positive, got {alpha2}')
    u = traj.states
    n = traj.n
    eye = np.eye(n) / traj.dt
    jac = dynamics.jacobian_u(u, p)
    fu = dynamics.rhs(u, p)
    dxi = dynamics.jacobian_xi(u, p, which)
    return KktBlocks(F=eye + 0.5 * jac[:-1],
                     G=-eye + 0.5 * jac[1:],
                     f=0.5 * (fu[:-1] + fu[1:]),
                     b=0.5 * (dxi[:-1] + dxi[1:]),
                     alpha2=float(alpha2),
                     dt=traj.dt)


def schur_blocks(blocks: KktBlocks) -> BlockTridiag:
    """
    Explicit blocks of A = B B^T + C C^T / alpha^2.
    """
    F, G, f = blocks.F, blocks.G, blocks.f
    diag = (np.einsum('kij,klj->kil', F, F)
            + np.einsum('kij,klj->kil', G, G)
            + np.einsum('ki,kj->kij', f, f) / blocks.alpha2)
    # row k couples to row k+1 through G_{k+1} F_{k+1}^T
    upper = np.einsum('kij,klj->kil', G[:-1], F[1:])
    return BlockTridiag(lower=upper.transpose(0, 2, 1).copy(), diag=diag, upper=upper)


def apply_constraint_transpose(blocks: KktBlocks, w: np.ndarray) -> np.ndarray:
    """B^T w as an (m+1, n) array; w_0 and w_{m+1} are zero."""
    wb = _as_blocks(blocks, w)
    y = np.zeros((blocks.m + 1, blocks.n))
    y[:-1] += np.einsum('kji,kj->ki', blocks.F, wb)
    y[1:] += np.einsum('kji,kj->ki', blocks.G, wb)
    return y


def apply_constraint(blocks: KktBlocks, v: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """B v + C eta as an (m, n) array."""
    v = np.asarray(v, dtype=float).reshape(blocks.m + 1, blocks.n)
    return (np.einsum('kij,kj->ki', blocks.F, v[:-1])
            + np.einsum('kij,kj->ki', blocks.G, v[1:])
            + blocks.f * np.asarray(eta, dtype=float)[:, None])


def apply_schur(blocks: KktBlocks, w: np.ndarray) -> np.ndarray:
    """
    Matrix-free A w = B (B^T w) + C (C^T w) / alpha^2.
    """
    wb = _as_blocks(blocks, w)
    y = apply_constraint_transpose(blocks, wb)
    eta = np.einsum('ki,ki->k', blocks.f, wb) / blocks.alpha2
    return apply_constraint(blocks, y, eta).reshape(-1)


def schur_operator(blocks: KktBlocks) -> LinearOperator:
    def matvec(w):
        return apply_schur(blocks, np.ravel(w))

    return LinearOperator((blocks.size, blocks.size), matvec=matvec, rmatvec=matvec, dtype=float)


def rhs_vector(blocks: KktBlocks) -> np.ndarray:
    """
    Right-hand side of A w = b. The KKT right-hand side is -b; eliminating v and eta cancels the sign.
    """
    return blocks.b.reshape(-1).copy()


def as_operator(system: Union[KktBlocks, BlockTridiag, LinearOperator, np.ndarray]) -> LinearOperator:
    """Wraps any supported representation of the Schur system in a LinearOperator."""
    if isinstance(system, KktBlocks):
        return schur_operator(system)
    if isinstance(system, BlockTridiag):
        return system.as_operator()
    return scipy.sparse.linalg.aslinearoperator(system)


def residual_norm(system, w: np.ndarray, rhs: np.ndarray) -> float:
    """||rhs - A w||_2."""
    op = as_operator(system)
    return float(np.linalg.norm(np.ravel(rhs) - op.matvec(np.ravel(w))))


def _as_blocks(blocks: KktBlocks, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.size != blocks.size:
        raise ValueError(f'KKT vector of length {w.size} does not match m*n = {blocks.size}')
    return w.reshape(blocks.m, blocks.n)


# ####### FULL SADDLE-POINT ORACLE

def constraint_matrices(blocks: KktBlocks) -> Tuple[scipy.sparse.csr_matrix, scipy.sparse.csr_matrix]:
    """
    Sparse B (mn x (m+1)n) and C (mn x m).
    """
    m, n = blocks.m, blocks.n
    f_rows, f_cols, f_data = _block_coo(blocks.F, 0, 0, n)
    g_rows, g_cols, g_data = _block_coo(blocks.G, 0, 1, n)
    B = scipy.sparse.coo_matrix((np.concatenate([f_data, g_data]),
                                 (np.concatenate([f_rows, g_rows]), np.concatenate([f_cols, g_cols]))),
                                shape=(m * n, (m + 1) * n)).tocsr()
    C = scipy.sparse.coo_matrix((blocks.f.ravel(), (np.arange(m * n), np.repeat(np.arange(m), n))),
                                shape=(m * n, m)).tocsr()
    return B, C


def kkt_matrix(blocks: KktBlocks) -> scipy.sparse.csc_matrix:
    """
    The symmetric saddle-point matrix [[I, 0, B^T], [0, alpha^2 I, C^T], [B, C, 0]].
    """
    m, n = blocks.m, blocks.n
    B, C = constraint_matrices(blocks)
    return scipy.sparse.bmat([[scipy.sparse.identity((m + 1) * n), None, B.T],
                              [None, blocks.alpha2 * scipy.sparse.identity(m), C.T],
                              [B, C, None]], format='csc')


def solve_kkt_full(blocks: KktBlocks) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Direct sparse solve of the full (v, eta, w) system; verification oracle for the Schur route.

    Returns:
        v as (m+1, n), eta as (m,), w as flat (m*n,)
    """
    m, n = blocks.m, blocks.n
    if m > 16 * DENSE_GUARD_ROWS:
        raise GuardViolation(f'Full KKT solve refused for m={m}')
    rhs = np.concatenate([np.zeros((m + 1) * n + m), -blocks.b.ravel()])
    sol = scipy.sparse.linalg.spsolve(kkt_matrix(blocks), rhs)
    v = sol[:(m + 1) * n].reshape(m + 1, n)
    eta = sol[(m + 1) * n:(m + 1) * n + m]
    w = sol[(m + 1) * n + m:]
    return v, eta, w


def extreme_eigenvalues(system: BlockTridiag, max_rows: int = DENSE_GUARD_ROWS) -> Tuple[float, float]:
    """Smallest and largest eigenvalue of a symmetric block-tridiagonal matrix by dense eigensolve."""
    eigenvalues = scipy.linalg.eigvalsh(system.to_dense(max_rows=max_rows))
    return float(eigenvalues[0]), float(eigenvalues[-1])
