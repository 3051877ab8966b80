"""
Zeroth-Order On-Chip Training
SPSA gradient estimation over all commanded mesh values and sign-SGD updates,
using forward passes only.
"""

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from .errors import EpochAbortedError, NonFiniteLossError
from .photonic_mesh import (TWO_PI, ChipInstance, NoiseConfig, build_onn_chip, chip_forward,
                            build_tonn_chip, save_chip, wrap_phase)
from .pinn import (FDConfig, Network, PDEProblem, hjb_problem, residual_loss,
                   sample_collocation, validation_mse)
from .tensor_train import TTShape, tt_param_count

logger = logging.getLogger(__name__)

ARCHITECTURES = ("tonn", "onn-dense")
PROBLEMS = ("hjb20", "hjb-toy")


# =========================================
# ========= CONFIGURATION =================
# =========================================

@dataclass(frozen=True)
class SPSAConfig:
    num_perturbations: int = 10
    radius: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.num_perturbations < 1:
            raise ValueError(f"num_perturbations must be >= 1, got {self.num_perturbations}")
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class ProblemConfig:
    name: str = "hjb20"
    dim: int = 20

    def __post_init__(self):
        if self.name not in PROBLEMS:
            raise ValueError(f"Unknown problem {self.name!r}, expected one of {PROBLEMS}")
        if self.name == "hjb20" and self.dim != 20:
            raise ValueError("hjb20 is the 20-dimensional problem; use hjb-toy for other sizes")
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")

    def build(self) -> PDEProblem:
        return hjb_problem(self.dim)


@dataclass(frozen=True)
class NetworkConfig:
    """Three-layer sine MLP; the two hidden layers are TT-factorized for 'tonn'"""

    arch: str = "tonn"
    hidden: int = 1024
    tt_out_factors: Tuple[int, ...] = (4, 8, 4, 8)
    tt_in_factors: Tuple[int, ...] = (8, 4, 8, 4)
    tt_ranks: Tuple[int, ...] = (1, 2, 1, 2, 1)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"Unknown architecture {self.arch!r}, expected one of {ARCHITECTURES}")
        if self.hidden < 1:
            raise ValueError(f"hidden must be positive, got {self.hidden}")
        if self.arch == "tonn":
            shape = self.tt_shape
            if shape.out_dim != self.hidden or shape.in_dim != self.hidden:
                raise ValueError(
                    f"TT factors describe a {shape.out_dim}x{shape.in_dim} matrix, hidden is {self.hidden}"
                )

    @property
    def tt_shape(self) -> TTShape:
        return TTShape(self.tt_out_factors, self.tt_in_factors, self.tt_ranks)

    def param_count(self, input_dim: int) -> int:
        """Trainable weights of the equivalent network, no biases"""
        if self.arch == "tonn":
            return 2 * tt_param_count(self.tt_shape) + self.hidden
        return input_dim * self.hidden + self.hidden * self.hidden + self.hidden


@dataclass(frozen=True)
class SeedConfig:
    train: int = 0
    validation: int = 20240
    noise: int = 7
    init: int = 0


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines an on-chip training run"""

    problem: ProblemConfig = field(default_factory=ProblemConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    epochs: int = 5000
    batch_size: int = 100
    lr: float = 1e-3
    lr_decay: bool = False
    lr_decay_every: int = 2000
    lr_decay_factor: float = 0.5
    spsa: SPSAConfig = field(default_factory=SPSAConfig)
    fd: FDConfig = field(default_factory=FDConfig)
    noise: Optional[NoiseConfig] = field(default_factory=NoiseConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    val_every: int = 50
    n_val: int = 1000
    max_retries: int = 3

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("batch_size", "val_every", "n_val", "lr_decay_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")

    def lr_at(self, epoch: int) -> float:
        if not self.lr_decay:
            return self.lr
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)


# =========================================
# ========= RUN RECORDS ===================
# =========================================

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    inferences: int
    cum_inferences: int
    cum_inferences_perturbed: int
    lr: float
    wall_time_s: float


@dataclass
class TrainState:
    chip: ChipInstance
    epoch: int = 0
    cum_inferences: int = 0
    cum_inferences_perturbed: int = 0


@dataclass
class TrainRun:
    config: TrainConfig
    records: List[EpochRecord]
    final_chip: ChipInstance


# =========================================
# ========= SPSA + SIGN-SGD ===============
# =========================================

def spsa_gradient(loss_fn: Callable[[np.ndarray], float], phi: np.ndarray, base_loss: float,
                  cfg: SPSAConfig, rng: np.random.Generator, n_jobs: int = 1) -> np.ndarray:
    """
    One-sided SPSA estimate sum_i (L(phi + mu xi_i) - L(phi)) xi_i / (N mu)

    Args:
        loss_fn: black-box loss over the full parameter vector
        phi: current parameters
        base_loss: loss_fn(phi), evaluated once by the caller
        cfg: number of perturbations and sampling radius
        rng: source of the standard-normal directions
        n_jobs: threads for the perturbed evaluations

    Returns:
        np.ndarray: gradient estimate, same length as phi
    """
    if not np.isfinite(base_loss):
        raise NonFiniteLossError(f"Base loss is not finite: {base_loss}")
    phi = np.asarray(phi, dtype=np.float64)
    directions = rng.standard_normal((cfg.num_perturbations, phi.size))

    losses = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(loss_fn)(phi + cfg.radius * xi) for xi in directions
    )

    grad = np.zeros_like(phi)
    scale = 1.0 / (cfg.num_perturbations * cfg.radius)
    for i, (loss, xi) in enumerate(zip(losses, directions)):
        if not np.isfinite(loss):
            raise NonFiniteLossError(f"Perturbed loss {i} is not finite: {loss}")
        grad += (loss - base_loss) * scale * xi
    return grad


def sign_step(phi: np.ndarray, g_hat: np.ndarray, alpha: float,
              periodic: Optional[np.ndarray] = None) -> np.ndarray:
    """
    phi - alpha * sign(g_hat), periodic coordinates reduced mod 2*pi

    sign(0) = 0 leaves a coordinate unchanged. `periodic` masks the angle
    coordinates; every coordinate is periodic when it is omitted.
    """
    phi = np.asarray(phi, dtype=np.float64)
    g_hat = np.asarray(g_hat, dtype=np.float64)
    if phi.shape != g_hat.shape:
        raise ValueError(f"Shape mismatch: {phi.shape} vs {g_hat.shape}")
    stepped = phi - alpha * np.sign(g_hat)
    if periodic is None:
        return wrap_phase(stepped)
    stepped[periodic] = wrap_phase(stepped[periodic])
    return stepped


def circular_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise distance between angles on the circle"""
    d = np.mod(np.asarray(a) - np.asarray(b), TWO_PI)
    return np.minimum(d, TWO_PI - d)


# =========================================
# ========= TRAINING LOOP =================
# =========================================

def chip_network(chip: ChipInstance) -> Network:
    """Wrap a chip as f(x, t): input layout (x_1..x_D, t)"""

    def net(x: np.ndarray, t: np.ndarray) -> np.ndarray:
        z = np.concatenate([x, np.asarray(t).reshape(-1, 1)], axis=1)
        return chip_forward(chip, z)[:, 0]

    return net


def build_chip(cfg: TrainConfig) -> ChipInstance:
    """Initial chip for a run, with its noise model sampled once and frozen"""
    input_dim = cfg.problem.dim + 1
    net = cfg.network
    if net.arch == "tonn":
        return build_tonn_chip(input_dim, [net.tt_shape, net.tt_shape], 1, cfg.noise,
                               cfg.seeds.noise, cfg.seeds.init)
    return build_onn_chip(input_dim, net.hidden, 1, cfg.noise, cfg.seeds.noise, cfg.seeds.init)


def train_epoch(state: TrainState, problem: PDEProblem, cfg: TrainConfig,
                attempt: int = 0, n_jobs: int = 1) -> EpochRecord:
    """
    One epoch: fresh batch, base loss, N perturbed losses, sign step

    On a non-finite loss the state is left untouched and EpochAbortedError
    is raised.
    """
    start = time.perf_counter()
    chip = state.chip
    rng = np.random.default_rng([cfg.spsa.seed, cfg.seeds.train, state.epoch, attempt])
    batch = sample_collocation(cfg.batch_size, cfg.fd, rng, problem.dim, problem.horizon)

    def loss_at(params: np.ndarray) -> float:
        return residual_loss(chip_network(chip.with_params(params)), batch, cfg.fd, problem)[0]

    try:
        base_loss, per_loss = residual_loss(chip_network(chip), batch, cfg.fd, problem)
        g_hat = spsa_gradient(loss_at, chip.params, base_loss, cfg.spsa, rng, n_jobs)
    except NonFiniteLossError as e:
        logger.warning(f"Epoch {state.epoch} aborted (attempt {attempt}): {e}")
        raise EpochAbortedError(str(e)) from e

    lr = cfg.lr_at(state.epoch)
    new_chip = chip.with_params(sign_step(chip.params, g_hat, lr, periodic=chip.angle_mask))

    n_evals = cfg.spsa.num_perturbations
    inferences = per_loss * (n_evals + 1)
    state.chip = new_chip
    state.cum_inferences += inferences
    state.cum_inferences_perturbed += per_loss * n_evals

    is_last = state.epoch == cfg.epochs - 1
    val = float("nan")
    if state.epoch % cfg.val_every == 0 or is_last:
        val = validation_mse(chip_network(new_chip), cfg.n_val, cfg.seeds.validation, problem)

    record = EpochRecord(
        epoch=state.epoch,
        train_loss=base_loss,
        val_mse=val,
        inferences=inferences,
        cum_inferences=state.cum_inferences,
        cum_inferences_perturbed=state.cum_inferences_perturbed,
        lr=lr,
        wall_time_s=time.perf_counter() - start,
    )
    state.epoch += 1
    return record


def save_checkpoint(state: TrainState, cfg: TrainConfig, directory: str) -> str:
    """Write chip JSON plus optimizer state; returns the chip path"""
    os.makedirs(directory, exist_ok=True)
    chip_path = os.path.join(directory, f"chip_epoch{state.epoch:06d}.json")
    save_chip(state.chip, chip_path)
    with open(os.path.join(directory, f"optimizer_epoch{state.epoch:06d}.json"), "w") as f:
        json.dump({
            "epoch": state.epoch,
            "lr": cfg.lr_at(state.epoch),
            "cum_inferences": state.cum_inferences,
            "cum_inferences_perturbed": state.cum_inferences_perturbed,
        }, f, indent=2)
    return chip_path


def train(cfg: TrainConfig, n_jobs: int = 1, checkpoint_dir: Optional[str] = None,
          checkpoint_every: int = 0, on_record: Optional[Callable[[EpochRecord], None]] = None,
          chip: Optional[ChipInstance] = None) -> TrainRun:
    """
    Run cfg.epochs epochs of BP-free on-chip training

    Args:
        cfg: run configuration (all seeds fixed => identical run)
        n_jobs: threads for the perturbed loss evaluations
        checkpoint_dir: where periodic checkpoints go (None disables them)
        checkpoint_every: epochs between checkpoints
        on_record: callback receiving each finished epoch record
        chip: starting chip; built from cfg when omitted

    Returns:
        TrainRun with one record per epoch and the final chip
    """
    problem = cfg.problem.build()
    state = TrainState(chip if chip is not None else build_chip(cfg))
    logger.info(
        f"Training {cfg.network.arch} on {cfg.problem.name} (D={problem.dim}): "
        f"{state.chip.n_params} trainable values, {state.chip.n_mzis} MZIs, {cfg.epochs} epochs"
    )

    records = []
    while state.epoch < cfg.epochs:
        failures = 0
        while True:
            try:
                record = train_epoch(state, problem, cfg, attempt=failures, n_jobs=n_jobs)
                break
            except EpochAbortedError:
                failures += 1
                if failures > cfg.max_retries:
                    logger.error(f"Epoch {state.epoch} failed {failures} times in a row, giving up")
                    raise
        records.append(record)
        if on_record is not None:
            on_record(record)
        if not np.isnan(record.val_mse):
            logger.info(
                f"Epoch {record.epoch:5d} | loss {record.train_loss:.4e} | "
                f"val MSE {record.val_mse:.4e} | inferences {record.cum_inferences}"
            )
        if checkpoint_dir and checkpoint_every and state.epoch % checkpoint_every == 0:
            save_checkpoint(state, cfg, checkpoint_dir)

    return TrainRun(cfg, records, state.chip)
