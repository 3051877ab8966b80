"""
Tensor-Train Linear Layers
Storage, contraction and initialization of TT-factorized weight matrices

A dense M x N matrix W is folded into a 2L-way tensor and stored as a chain of
4-way cores G_k of extent r_{k-1} x m_k x n_k x r_k:

    W(i_1..i_L, j_1..j_L) = G_1(i_1, j_1) G_2(i_2, j_2) ... G_L(i_L, j_L)

Unfolding convention: factor 1 is the slowest-varying digit of both the row
index (over out_factors) and the column index (over in_factors).
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import DimensionMismatchError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TTShape:
    """Factorization of an M x N matrix into L cores"""

    out_factors: Tuple[int, ...]
    in_factors: Tuple[int, ...]
    ranks: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "out_factors", tuple(int(m) for m in self.out_factors))
        object.__setattr__(self, "in_factors", tuple(int(n) for n in self.in_factors))
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))

        if len(self.out_factors) == 0:
            raise ValueError("TTShape needs at least one core")
        if len(self.out_factors) != len(self.in_factors):
            raise ValueError(
                f"out_factors and in_factors differ in length: "
                f"{len(self.out_factors)} vs {len(self.in_factors)}"
            )
        if len(self.ranks) != len(self.out_factors) + 1:
            raise ValueError(
                f"Expected {len(self.out_factors) + 1} ranks, got {len(self.ranks)}"
            )
        if self.ranks[0] != 1 or self.ranks[-1] != 1:
            raise ValueError(f"Boundary ranks must be 1, got {self.ranks}")
        if min(self.out_factors + self.in_factors + self.ranks) < 1:
            raise ValueError("All factors and ranks must be positive")

    @property
    def n_cores(self) -> int:
        return len(self.out_factors)

    @property
    def out_dim(self) -> int:
        return int(np.prod(self.out_factors))

    @property
    def in_dim(self) -> int:
        return int(np.prod(self.in_factors))

    def core_shape(self, k: int) -> Tuple[int, int, int, int]:
        return (self.ranks[k], self.out_factors[k], self.in_factors[k], self.ranks[k + 1])


@dataclass(frozen=True)
class TTCores:
    """TT-cores of one layer; arrays are frozen after construction"""

    shape: TTShape
    cores: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.cores) != self.shape.n_cores:
            raise ValueError(f"Expected {self.shape.n_cores} cores, got {len(self.cores)}")
        frozen = []
        for k, core in enumerate(self.cores):
            core = np.array(core, dtype=np.float64)
            if core.shape != self.shape.core_shape(k):
                raise ValueError(
                    f"Core {k} has shape {core.shape}, expected {self.shape.core_shape(k)}"
                )
            core.setflags(write=False)
            frozen.append(core)
        object.__setattr__(self, "cores", tuple(frozen))

    @property
    def n_stored(self) -> int:
        return int(sum(core.size for core in self.cores))


def tt_param_count(shape: TTShape) -> int:
    """Number of scalars stored by the cores: sum_k r_{k-1} m_k n_k r_k"""
    return int(sum(np.prod(shape.core_shape(k)) for k in range(shape.n_cores)))


def tt_core_matrix(core: np.ndarray) -> np.ndarray:
    """
    Unfold a 4-way core into its (r_{k-1} n_k) x (m_k r_k) matrix

    Row index is (a, j) and column index is (i, b) for core entry G[a, i, j, b].
    This is the matrix one photonic mesh realizes for the core.
    """
    r_prev, m, n, r_next = core.shape
    return core.transpose(0, 2, 1, 3).reshape(r_prev * n, m * r_next)


def tt_core_from_matrix(matrix: np.ndarray, r_prev: int, m: int, n: int, r_next: int) -> np.ndarray:
    """Inverse of tt_core_matrix"""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (r_prev * n, m * r_next):
        raise DimensionMismatchError(
            f"Core matrix has shape {matrix.shape}, expected {(r_prev * n, m * r_next)}"
        )
    return matrix.reshape(r_prev, n, m, r_next).transpose(0, 2, 1, 3)


def tt_to_dense(cores: TTCores) -> np.ndarray:
    """
    Densify TT-cores into the M x N matrix they represent

    Args:
        cores: TTCores of any valid shape

    Returns:
        np.ndarray: dense matrix, factor 1 slowest-varying in rows and columns
    """
    first = cores.cores[0]
    dense = first.reshape(first.shape[1], first.shape[2], first.shape[3])
    for core in cores.cores[1:]:
        rows, cols, _ = dense.shape
        _, m, n, r_next = core.shape
        dense = np.einsum("IJa,aijb->IiJjb", dense, core).reshape(rows * m, cols * n, r_next)
    return dense[:, :, 0]


def contract_core_matrices(shape: TTShape, matrices: Sequence[np.ndarray], x: np.ndarray) -> np.ndarray:
    """
    Left-to-right TT contraction with cores given in matrix form

    Args:
        shape: TTShape the matrices belong to
        matrices: per-core (r_{k-1} n_k) x (m_k r_k) matrices
        x: input of shape (N,) or (B, N)

    Returns:
        np.ndarray: output of shape (M,) or (B, M)
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x.reshape(1, -1) if single else x
    if batch.ndim != 2 or batch.shape[1] != shape.in_dim:
        raise DimensionMismatchError(
            f"TT layer expects inputs of length {shape.in_dim}, got shape {x.shape}"
        )

    n_rows = batch.shape[0]
    # state: (leading, rank, remaining input digits); leading = batch x output digits so far
    state = batch.reshape(n_rows, 1, shape.in_dim)
    leading = n_rows
    for k, mat in enumerate(matrices):
        r_prev, m, n, r_next = shape.core_shape(k)
        rest = state.shape[-1] // n
        state = state.reshape(leading, r_prev, n, rest)
        state = state.transpose(0, 3, 1, 2).reshape(leading * rest, r_prev * n)
        state = state @ mat
        state = state.reshape(leading, rest, m, r_next).transpose(0, 2, 3, 1)
        leading *= m
        state = state.reshape(leading, r_next, rest)

    out = state.reshape(n_rows, shape.out_dim)
    return out[0] if single else out


def tt_matvec(cores: TTCores, x: np.ndarray) -> np.ndarray:
    """Compute W x core by core without materializing W"""
    matrices = [tt_core_matrix(core) for core in cores.cores]
    return contract_core_matrices(cores.shape, matrices, x)


def tt_init(shape: TTShape, seed: int) -> TTCores:
    """
    Gaussian core initialization with fan-in scaling of the dense equivalent

    A dense entry is a sum over prod(r_1..r_{L-1}) rank paths of L-fold core
    products, so equal per-core variance s^2 with
    s^{2L} * prod(internal ranks) = 1 / N gives Var(W_ij) = 1 / N.
    """
    rng = np.random.default_rng(seed)
    internal = float(np.prod(shape.ranks[1:-1])) if shape.n_cores > 1 else 1.0
    std = (1.0 / (shape.in_dim * internal)) ** (0.5 / shape.n_cores)
    cores = [rng.normal(0.0, std, size=shape.core_shape(k)) for k in range(shape.n_cores)]
    logger.debug(f"TT init {shape.out_dim}x{shape.in_dim}, per-core std {std:.4g}")
    return TTCores(shape, tuple(cores))
