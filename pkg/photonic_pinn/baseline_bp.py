"""
Off-Chip Training Baseline
Dense 3-layer sine MLP trained in software with hand-derived backpropagation
through the FD-realized residual loss, then mapped onto a noisy chip.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch

from .errors import CheckpointError, DimensionMismatchError, TrainingDivergedError
from .photonic_mesh import NoiseConfig, chip_from_dense
from .pinn import (CollocationBatch, FDConfig, Network, PDEProblem,
                   derivatives_from_values, fd_stencil, hjb_residual,
                   sample_collocation, validation_mse)
from .zo_trainer import chip_network

logger = logging.getLogger(__name__)

MLP_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DenseMLP:
    """f(z) = W3 sin(W2 sin(W1 z)), z = (x, t), no biases"""

    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray

    def __post_init__(self):
        mats = [np.array(w, dtype=np.float64) for w in (self.w1, self.w2, self.w3)]
        w1, w2, w3 = mats
        hidden = w1.shape[0]
        if w2.shape != (hidden, hidden) or w3.shape != (1, hidden):
            raise DimensionMismatchError(
                f"Weights do not chain: {w1.shape}, {w2.shape}, {w3.shape}"
            )
        for name, w in zip(("w1", "w2", "w3"), mats):
            w.setflags(write=False)
            object.__setattr__(self, name, w)

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def weights(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.w1, self.w2, self.w3


@dataclass(frozen=True)
class ParamGradients:
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray

    @property
    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.w1, self.w2, self.w3

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.arrays)))


def init_mlp(input_dim: int, hidden: int, seed: int) -> DenseMLP:
    rng = np.random.default_rng(seed)
    return DenseMLP(
        rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(hidden, input_dim)),
        rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, hidden)),
        rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(1, hidden)),
    )


def dense_param_count(mlp: DenseMLP) -> int:
    return int(sum(w.size for w in mlp.weights))


# =========================================
# ========= FORWARD / BACKWARD ============
# =========================================

def _forward_cache(mlp: DenseMLP, z: np.ndarray):
    a1 = z @ mlp.w1.T
    h1 = np.sin(a1)
    a2 = h1 @ mlp.w2.T
    h2 = np.sin(a2)
    f = (h2 @ mlp.w3.T)[:, 0]
    return a1, h1, a2, h2, f


def dense_forward(mlp: DenseMLP, x: np.ndarray, t) -> np.ndarray:
    """Raw network output f(x, t) for one point or a batch"""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x.reshape(1, -1) if single else x
    tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
    z = np.concatenate([xb, tb[:, None]], axis=1)
    if z.shape[1] != mlp.input_dim:
        raise DimensionMismatchError(f"MLP expects {mlp.input_dim} inputs, got {z.shape[1]}")
    f = _forward_cache(mlp, z)[-1]
    return f[0] if single else f


def dense_network(mlp: DenseMLP) -> Network:
    return lambda x, t: dense_forward(mlp, x, t)


def loss_param_gradient(mlp: DenseMLP, batch: CollocationBatch, cfg: FDConfig,
                        prob: PDEProblem) -> Tuple[float, ParamGradients]:
    """
    Residual loss and its exact gradient with respect to W1, W2, W3

    The FD loss is a finite sum over stencil forwards, so its gradient is the
    chain-rule sum of ordinary per-forward backprops. Per stencil column the
    residual sensitivity is
        center:   -1/eps_t - 2D/eps_x^2
        x + e_i:   1/eps_x^2 - c * grad_i / eps_x
        x - e_i:   1/eps_x^2 + c * grad_i / eps_x
        t + eps_t: 1/eps_t
    """
    n_pts, dim = batch.x.shape
    if n_pts == 0:
        raise ValueError("Residual loss needs a nonempty batch")
    stencil_x, stencil_t = fd_stencil(batch.x, batch.t, cfg, prob.horizon)
    n_stencil = stencil_t.shape[1]
    flat_x = stencil_x.reshape(-1, dim)
    flat_t = stencil_t.reshape(-1)
    z = np.concatenate([flat_x, flat_t[:, None]], axis=1)

    a1, h1, a2, h2, f = _forward_cache(mlp, z)
    u = (1.0 - flat_t) * f + np.abs(flat_x).sum(axis=1)
    d = derivatives_from_values(u.reshape(n_pts, n_stencil), cfg)
    r = hjb_residual(d, prob)
    loss = float(np.mean(np.square(r)))

    inv_x2 = 1.0 / cfg.eps_x ** 2
    dr_du = np.empty((n_pts, n_stencil))
    dr_du[:, 0] = -1.0 / cfg.eps_t - 2.0 * dim * inv_x2
    dr_du[:, 1:dim + 1] = inv_x2 - prob.grad_coeff * d.grad_x / cfg.eps_x
    dr_du[:, dim + 1:2 * dim + 1] = inv_x2 + prob.grad_coeff * d.grad_x / cfg.eps_x
    dr_du[:, -1] = 1.0 / cfg.eps_t

    g_u = (2.0 / n_pts) * r[:, None] * dr_du
    g_f = g_u.reshape(-1) * (1.0 - flat_t)

    g_w3 = (g_f @ h2)[None, :]
    g_a2 = (g_f[:, None] * mlp.w3) * np.cos(a2)
    g_w2 = g_a2.T @ h1
    g_a1 = (g_a2 @ mlp.w2) * np.cos(a1)
    g_w1 = g_a1.T @ z
    return loss, ParamGradients(g_w1, g_w2, g_w3)


# =========================================
# ========= OFF-CHIP TRAINING =============
# =========================================

@dataclass(frozen=True)
class OffchipConfig:
    epochs: int = 2000
    batch_size: int = 100
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    fd: FDConfig = field(default_factory=FDConfig)
    seed: int = 0
    hardware_aware: bool = False
    noise: Optional[NoiseConfig] = None
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr >= 0 required")
        if self.hardware_aware and self.noise is None:
            raise ValueError("hardware_aware training needs a noise config")


@dataclass
class OffchipResult:
    mlp: DenseMLP
    history: List[float]


def _effective_weights(mlp: DenseMLP, noise: NoiseConfig, seed: int) -> DenseMLP:
    chip = chip_from_dense(mlp.weights, noise, seed)
    return DenseMLP(*chip.layer_matrices(noisy=True))


def offchip_train(mlp: DenseMLP, cfg: OffchipConfig, prob: PDEProblem) -> OffchipResult:
    """
    Adam on hand-derived gradients

    With hardware_aware set, each epoch maps the current weights onto a
    freshly sampled noisy chip and applies the gradient taken at the
    effective weights to the commanded weights.
    """
    params = [torch.nn.Parameter(torch.from_numpy(np.array(w))) for w in mlp.weights]
    optimizer = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas)
    history = []

    current = mlp
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        batch = sample_collocation(cfg.batch_size, cfg.fd, rng, prob.dim, prob.horizon)
        seen = current
        if cfg.hardware_aware:
            seen = _effective_weights(current, cfg.noise, int(rng.integers(2 ** 31)))

        loss, grads = loss_param_gradient(seen, batch, cfg.fd, prob)
        history.append(loss)
        if not np.isfinite(loss) or loss > cfg.divergence_threshold:
            logger.error(f"Off-chip training diverged at epoch {epoch}: loss {loss}")
            raise TrainingDivergedError(f"Loss {loss} at epoch {epoch}", history)

        optimizer.zero_grad()
        for p, g in zip(params, grads.arrays):
            p.grad = torch.from_numpy(np.ascontiguousarray(g))
        optimizer.step()
        current = DenseMLP(*(p.detach().numpy().copy() for p in params))

        if epoch % 500 == 0:
            logger.info(f"Off-chip epoch {epoch:5d} | loss {loss:.4e}")

    return OffchipResult(current, history)


# =========================================
# ========= MAPPING ONTO HARDWARE =========
# =========================================

@dataclass
class DegradationResult:
    clean_mse: float
    noisy_mses: List[float]

    @property
    def median_noisy(self) -> float:
        return float(np.median(self.noisy_mses)) if self.noisy_mses else float("nan")


def map_and_degrade(mlp: DenseMLP, noise: NoiseConfig, n_seeds: int, prob: PDEProblem,
                    n_val: int = 1000, val_seed: int = 0, noise_seed: int = 0) -> DegradationResult:
    """
    Map trained weights onto meshes and score them on noise-free and noisy chips

    Noisy chip k uses noise seed noise_seed + k; all share one mapping.
    """
    clean = chip_from_dense(mlp.weights)
    clean_mse = validation_mse(chip_network(clean), n_val, val_seed, prob)
    noisy = []
    for k in range(n_seeds):
        chip = clean.with_noise(noise, noise_seed + k)
        noisy.append(validation_mse(chip_network(chip), n_val, val_seed, prob))
    logger.info(
        f"Mapped {clean.n_mzis} MZIs: clean MSE {clean_mse:.3e}, "
        f"median noisy MSE {np.median(noisy) if noisy else float('nan'):.3e} over {n_seeds} chips"
    )
    return DegradationResult(clean_mse, noisy)


# =========================================
# ========= CHECKPOINTS ===================
# =========================================

def mlp_to_json(mlp: DenseMLP) -> dict:
    return {
        "schema_version": MLP_SCHEMA_VERSION,
        "kind": "dense_mlp",
        "weights": [w.tolist() for w in mlp.weights],
    }


def mlp_from_json(data: dict) -> DenseMLP:
    try:
        if data.get("kind") != "dense_mlp" or data.get("schema_version") != MLP_SCHEMA_VERSION:
            raise CheckpointError("Not a dense MLP checkpoint of a supported schema version")
        w1, w2, w3 = (np.asarray(w, dtype=np.float64) for w in data["weights"])
        return DenseMLP(w1, w2, w3)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise CheckpointError(f"Malformed MLP checkpoint: {e}") from e


def save_mlp(mlp: DenseMLP, path: str):
    with open(path, "w") as f:
        json.dump(mlp_to_json(mlp), f)
    logger.info(f"Dense checkpoint saved to: {path}")


def load_mlp(path: str) -> DenseMLP:
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    return mlp_from_json(data)
