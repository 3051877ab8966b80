"""
PINN Loss Evaluation
HJB problem definition, finite-difference derivative estimation and
residual / terminal / validation losses that only need forward passes.

Networks are black boxes f(x, t) taking x of shape (B, D) and t of shape (B,)
and returning shape (B,). The solution ansatz

    u(x, t) = (1 - t) f(x, t) + ||x||_1

satisfies the terminal condition u(x, 1) = ||x||_1 exactly.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Tuple, Union

import numpy as np
from sklearn.metrics import mean_squared_error

from .errors import FDSafetyError

logger = logging.getLogger(__name__)

Network = Callable[[np.ndarray, np.ndarray], np.ndarray]

# slack for points sampled exactly on the FD-safe boundary
_SAFETY_SLACK = 1e-12


@dataclass(frozen=True)
class PDEProblem:
    """
    HJB instance on [0,1]^D x [0,T]:

        du/dt + Laplacian(u) - grad_coeff * ||grad_x u||^2 = source,  u(x, T) = ||x||_1
    """

    dim: int = 20
    grad_coeff: float = 0.05
    source: float = -2.0
    horizon: float = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"Problem dimension must be positive, got {self.dim}")

    @property
    def inferences_per_point(self) -> int:
        """Forward passes the FD stencil needs at one collocation point"""
        return 2 * self.dim + 2

    def terminal(self, x: np.ndarray) -> np.ndarray:
        return np.abs(x).sum(axis=-1)

    def exact_solution(self, x: np.ndarray, t) -> np.ndarray:
        return np.abs(x).sum(axis=-1) + self.horizon - t


def hjb_problem(dim: int = 20, grad_coeff: float = 0.05) -> PDEProblem:
    """
    hjb20 for dim=20, the hjb-toy(D) variants otherwise

    The source is -(1 + grad_coeff * D) so that ||x||_1 + T - t stays the
    exact solution at every D; at D=20 this is -2.
    """
    return PDEProblem(dim=dim, grad_coeff=grad_coeff, source=-(1.0 + grad_coeff * dim))


@dataclass(frozen=True)
class FDConfig:
    eps_x: float = 1e-2
    eps_t: float = 1e-2

    def __post_init__(self):
        if not (0 < self.eps_x < 0.5) or not (0 < self.eps_t < 1):
            raise ValueError(f"FD steps out of range: eps_x={self.eps_x}, eps_t={self.eps_t}")


@dataclass(frozen=True)
class CollocationBatch:
    x: np.ndarray
    t: np.ndarray

    def __len__(self):
        return self.t.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class DerivativeEstimate:
    """FD derivatives at one point (scalars) or a batch (leading axis B)"""

    u: Union[float, np.ndarray]
    du_dt: Union[float, np.ndarray]
    grad_x: np.ndarray
    laplacian: Union[float, np.ndarray]
    n_evals: int


def transformed_forward(net: Network, x: np.ndarray, t) -> np.ndarray:
    """(1 - t) f(x, t) + ||x||_1 for one point or a batch"""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x.reshape(1, -1) if single else x
    tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
    u = (1.0 - tb) * np.asarray(net(xb, tb)).reshape(-1) + np.abs(xb).sum(axis=1)
    return u[0] if single else u


def check_fd_safe(x: np.ndarray, t: np.ndarray, cfg: FDConfig, horizon: float = 1.0):
    lo, hi = cfg.eps_x - _SAFETY_SLACK, 1.0 - cfg.eps_x + _SAFETY_SLACK
    if np.any(x < lo) or np.any(x > hi):
        raise FDSafetyError(f"Spatial coordinates must lie in [{cfg.eps_x}, {1 - cfg.eps_x}]")
    if np.any(t < -_SAFETY_SLACK) or np.any(t > horizon - cfg.eps_t + _SAFETY_SLACK):
        raise FDSafetyError(f"Time must lie in [0, {horizon - cfg.eps_t}]")


def fd_stencil(x: np.ndarray, t: np.ndarray, cfg: FDConfig, horizon: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Stencil points of a batch, shapes (B, 2D+2, D) and (B, 2D+2)

    Column order per point: center, x + eps e_1..e_D, x - eps e_1..e_D, t + eps_t.
    """
    n_pts, dim = x.shape
    check_fd_safe(x, t, cfg, horizon)
    eye = np.eye(dim) * cfg.eps_x
    stencil_x = np.concatenate([
        x[:, None, :],
        x[:, None, :] + eye[None],
        x[:, None, :] - eye[None],
        x[:, None, :],
    ], axis=1)
    stencil_t = np.repeat(t[:, None], 2 * dim + 2, axis=1)
    stencil_t[:, -1] += cfg.eps_t
    return stencil_x, stencil_t


def derivatives_from_values(values: np.ndarray, cfg: FDConfig) -> DerivativeEstimate:
    """Combine stencil values of shape (B, 2D+2) into derivative estimates"""
    n_pts, n_stencil = values.shape
    dim = (n_stencil - 2) // 2
    u0 = values[:, 0]
    plus, minus = values[:, 1:dim + 1], values[:, dim + 1:2 * dim + 1]
    grad = (plus - minus) / (2.0 * cfg.eps_x)
    laplacian = ((plus - 2.0 * u0[:, None] + minus) / cfg.eps_x ** 2).sum(axis=1)
    du_dt = (values[:, -1] - u0) / cfg.eps_t
    return DerivativeEstimate(u0, du_dt, grad, laplacian, n_pts * n_stencil)


def fd_derivatives(u_fn: Network, x: np.ndarray, t, cfg: FDConfig, horizon: float = 1.0) -> DerivativeEstimate:
    """
    Central differences in x, forward difference in t

    All 2D + 2 stencil points of every collocation point are stacked and sent
    to u_fn in a single call; the second differences reuse the two evaluations
    of the first differences.

    Args:
        u_fn: black-box u(x, t) on batches
        x: point of shape (D,) or batch of shape (B, D)
        t: scalar or shape (B,)
        cfg: FD step sizes

    Returns:
        DerivativeEstimate; n_evals counts rows evaluated (2D + 2 per point)
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x.reshape(1, -1) if single else x
    n_pts, dim = xb.shape
    tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (n_pts,)).copy()

    stencil_x, stencil_t = fd_stencil(xb, tb, cfg, horizon)
    values = np.asarray(
        u_fn(stencil_x.reshape(-1, dim), stencil_t.reshape(-1))
    ).reshape(n_pts, 2 * dim + 2)

    d = derivatives_from_values(values, cfg)
    if single:
        return DerivativeEstimate(float(d.u[0]), float(d.du_dt[0]), d.grad_x[0], float(d.laplacian[0]), d.n_evals)
    return d


def hjb_residual(d: DerivativeEstimate, prob: PDEProblem):
    """du/dt + Laplacian - grad_coeff * ||grad||^2 - source"""
    grad_sq = np.sum(np.square(d.grad_x), axis=-1)
    return d.du_dt + d.laplacian - prob.grad_coeff * grad_sq - prob.source


def residual_loss_u(u_fn: Network, batch: CollocationBatch, cfg: FDConfig, prob: PDEProblem) -> Tuple[float, int]:
    """Mean squared HJB residual of a solution candidate u given directly"""
    if len(batch) == 0:
        raise ValueError("Residual loss needs a nonempty batch")
    d = fd_derivatives(u_fn, batch.x, batch.t, cfg, prob.horizon)
    r = hjb_residual(d, prob)
    return float(np.mean(np.square(r))), d.n_evals


def residual_loss(net: Network, batch: CollocationBatch, cfg: FDConfig, prob: PDEProblem) -> Tuple[float, int]:
    """
    L_r = mean of squared residuals of the transformed network

    Returns:
        (loss, inference_count) with inference_count = (2D + 2) * N_r
    """
    return residual_loss_u(lambda x, t: transformed_forward(net, x, t), batch, cfg, prob)


def initial_loss(net: Network, x: np.ndarray, lam: float, prob: PDEProblem, transformed: bool = True) -> float:
    """lam * mean (u(x, T) - g(x))^2; identically zero for the transformed ansatz"""
    if lam == 0:
        return 0.0
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.full(x.shape[0], prob.horizon)
    u = transformed_forward(net, x, t) if transformed else np.asarray(net(x, t)).reshape(-1)
    return float(lam * np.mean(np.square(u - prob.terminal(x))))


def total_loss(net: Network, batch: CollocationBatch, x_terminal: np.ndarray, lam: float,
               cfg: FDConfig, prob: PDEProblem, transformed: bool = True) -> Tuple[float, int]:
    """L_r + lam * L_0, with the inference count of the residual term"""
    if transformed:
        loss, count = residual_loss(net, batch, cfg, prob)
    else:
        loss, count = residual_loss_u(net, batch, cfg, prob)
    return loss + initial_loss(net, x_terminal, lam, prob, transformed), count


def sample_collocation(n_r: int, cfg: FDConfig, seed, dim: int = 20, horizon: float = 1.0) -> CollocationBatch:
    """Uniform points inside the FD-safe domain"""
    if n_r < 1:
        raise ValueError(f"Need at least one collocation point, got {n_r}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(cfg.eps_x, 1.0 - cfg.eps_x, size=(n_r, dim))
    t = rng.uniform(0.0, horizon - cfg.eps_t, size=n_r)
    return CollocationBatch(x, t)


def validation_mse(net: Network, n_val: int, seed: int, prob: PDEProblem) -> float:
    """MSE against the analytic solution on fresh uniform points of the full domain"""
    if n_val < 1:
        raise ValueError(f"Need at least one validation point, got {n_val}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n_val, prob.dim))
    t = rng.uniform(0.0, prob.horizon, size=n_val)
    pred = transformed_forward(net, x, t)
    return float(mean_squared_error(prob.exact_solution(x, t), pred))
