"""
Hardware Cost Model
Closed-form MZI counts, latency, energy and footprint of optical PINN
accelerators, plus per-epoch and per-run training cost.

Times are in nanoseconds unless a name ends in _s; energies in joules.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

UNAVAILABLE = "unavailable"
# "paper" and "perturbed" both count only the N perturbed loss evaluations per step
ACCOUNTING_MODES = ("paper", "perturbed", "true")


@dataclass(frozen=True)
class DeviceConstants:
    t_dac: float = 24.0
    t_adc: float = 24.0
    t_tuning: float = 0.1
    t_dig: float = 500.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")


@dataclass(frozen=True)
class ArchitectureSpec:
    """
    One accelerator variant

    energy_per_inference is None where optical loss makes the design
    infeasible. The MZI count is derived from layer_dims through the SVD
    formula unless mzi_count_override is set.
    """

    name: str
    n_cycle: int
    t_opt: float
    energy_per_inference: Optional[float]
    footprint_mm2: float
    layer_dims: Tuple[Tuple[int, int], ...] = ()
    wavelengths: int = 1
    mzi_count_override: Optional[int] = None

    def __post_init__(self):
        if self.n_cycle < 1:
            raise ValueError(f"n_cycle must be >= 1, got {self.n_cycle}")
        if self.t_opt < 0 or self.footprint_mm2 < 0:
            raise ValueError("t_opt and footprint must be nonnegative")
        if self.energy_per_inference is not None and self.energy_per_inference < 0:
            raise ValueError("energy_per_inference must be nonnegative")
        if self.mzi_count_override is None and not self.layer_dims:
            raise ValueError(f"{self.name}: need layer_dims or an MZI count")

    @property
    def mzi_count(self) -> int:
        if self.mzi_count_override is not None:
            return int(self.mzi_count_override)
        return int(sum(mzi_count_svd(p, q) for p, q in self.layer_dims))


ONN = ArchitectureSpec("ONN", 1, 51.2, None, 2.62e5, layer_dims=((1024, 21), (1024, 1024), (1, 1024)))
TONN_1 = ArchitectureSpec("TONN-1", 1, 1.6, 6.45e-9, 648.0, wavelengths=32, mzi_count_override=1790)
TONN_2 = ArchitectureSpec("TONN-2", 64, 0.4, 5.05e-9, 26.0, wavelengths=32, mzi_count_override=28)
ARCHITECTURES: Dict[str, ArchitectureSpec] = {a.name: a for a in (ONN, TONN_1, TONN_2)}


@dataclass(frozen=True)
class TrainingBudget:
    inferences_per_loss: int = 42
    loss_evals_per_step: int = 10
    batch: int = 100
    epochs: int = 5000
    pipelined: bool = True

    def __post_init__(self):
        if min(self.inferences_per_loss, self.loss_evals_per_step, self.batch) < 1:
            raise ValueError("inferences_per_loss, loss_evals_per_step and batch must be >= 1")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")

    @classmethod
    def for_training(cls, dim: int, num_perturbations: int, batch: int, epochs: int,
                     accounting: str = "perturbed", pipelined: bool = True) -> "TrainingBudget":
        """Budget of a ZO run; 'true' accounting also counts the base loss"""
        if accounting not in ACCOUNTING_MODES:
            raise ValueError(f"accounting must be one of {ACCOUNTING_MODES}, got {accounting!r}")
        evals = num_perturbations + (1 if accounting == "true" else 0)
        return cls(2 * dim + 2, evals, batch, epochs, pipelined)


@dataclass(frozen=True)
class EpochCost:
    inferences: int
    energy_j: Optional[float]
    latency_s: float


@dataclass(frozen=True)
class RunCost:
    energy_j: Optional[float]
    time_s: float


def mzi_count_svd(p: int, q: int) -> int:
    """MZIs for a p x q matrix as U Sigma V^T: two meshes plus min(p, q) attenuators"""
    if p < 1 or q < 1:
        raise ValueError(f"Matrix dimensions must be >= 1, got ({p}, {q})")
    return p * (p - 1) // 2 + q * (q - 1) // 2 + min(p, q)


def onn_mzi_count(dims: Sequence[Tuple[int, int]]) -> int:
    return int(sum(mzi_count_svd(p, q) for p, q in dims))


def latency_per_inference(arch: ArchitectureSpec, consts: DeviceConstants = DeviceConstants()) -> float:
    """n_cycle (t_dac + t_tuning + t_opt + t_adc) + t_dig, to 0.1 ns"""
    optical = consts.t_dac + consts.t_tuning + arch.t_opt + consts.t_adc
    return round(arch.n_cycle * optical + consts.t_dig, 1)


def inference_cost(n_inferences: int, batch: int, arch: ArchitectureSpec,
                   consts: DeviceConstants = DeviceConstants(), pipelined: bool = True) -> EpochCost:
    """Energy and modeled time of a block of inferences issued in batches"""
    energy = None
    if arch.energy_per_inference is not None:
        energy = n_inferences * arch.energy_per_inference
    sequential = n_inferences / batch if pipelined else n_inferences
    latency_s = sequential * latency_per_inference(arch, consts) * 1e-9
    return EpochCost(int(n_inferences), energy, latency_s)


def epoch_cost(budget: TrainingBudget, arch: ArchitectureSpec,
               consts: DeviceConstants = DeviceConstants()) -> EpochCost:
    inferences = budget.inferences_per_loss * budget.loss_evals_per_step * budget.batch
    cost = inference_cost(inferences, budget.batch, arch, consts, budget.pipelined)
    if cost.energy_j is None:
        logger.warning(f"{arch.name}: energy per inference is {UNAVAILABLE}")
    return cost


def run_cost(budget: TrainingBudget, arch: ArchitectureSpec,
             consts: DeviceConstants = DeviceConstants()) -> RunCost:
    per_epoch = epoch_cost(budget, arch, consts)
    energy = None if per_epoch.energy_j is None else per_epoch.energy_j * budget.epochs
    return RunCost(energy, per_epoch.latency_s * budget.epochs)


def reduction_ratio(onn_mzis: float, tonn_mzis: float) -> float:
    if onn_mzis <= 0 or tonn_mzis <= 0:
        raise ValueError("MZI counts must be positive")
    return onn_mzis / tonn_mzis


def compression_ratio(dense_params: int, tt_params: int) -> float:
    if dense_params <= 0 or tt_params <= 0:
        raise ValueError("Parameter counts must be positive")
    return dense_params / tt_params


# =========================================
# ========= REPORTING =====================
# =========================================

def sci_short(value: Optional[float], digits: int = 3) -> str:
    """Scientific notation with a bare exponent: 1171.2 -> '1.17E3'"""
    if value is None:
        return UNAVAILABLE
    mantissa, exponent = f"{value:.{digits - 1}E}".split("E")
    return f"{mantissa}E{int(exponent)}"


def rounded_latency(ns: float) -> float:
    """Nearest 10 ns below one microsecond, nearest ns above"""
    return float(round(ns, -1)) if ns < 1000 else float(round(ns))


def cost_report(archs: Sequence[ArchitectureSpec] = (ONN, TONN_1, TONN_2),
                consts: DeviceConstants = DeviceConstants(),
                budget: Optional[TrainingBudget] = None,
                train_arch: ArchitectureSpec = TONN_1,
                param_counts: Optional[Tuple[int, int]] = None) -> dict:
    """
    Hardware comparison plus optional training totals, as a JSON-ready dict

    Args:
        archs: rows of the comparison table
        consts: device timing constants
        budget: training budget; totals are reported for train_arch
        param_counts: (dense, tt) network parameter counts for the compression ratio
    """
    rows = []
    for arch in archs:
        latency = latency_per_inference(arch, consts)
        rows.append({
            "architecture": arch.name,
            "mzis": arch.mzi_count,
            "mzis_short": sci_short(arch.mzi_count),
            "energy_per_inference_j": arch.energy_per_inference,
            "latency_ns": latency,
            "latency_rounded_ns": rounded_latency(latency),
            "footprint_mm2": arch.footprint_mm2,
            "n_cycle": arch.n_cycle,
        })

    report = {"constants": asdict(consts), "architectures": rows}
    names = {a.name for a in archs}
    if "ONN" in names and "TONN-1" in names:
        onn = next(a for a in archs if a.name == "ONN")
        tonn = next(a for a in archs if a.name == "TONN-1")
        ratio = reduction_ratio(onn.mzi_count, tonn.mzi_count)
        report["mzi_reduction"] = {"value": ratio, "short": sci_short(ratio)}
    if param_counts is not None:
        ratio = compression_ratio(*param_counts)
        report["compression"] = {"dense_params": param_counts[0], "tt_params": param_counts[1],
                                 "value": ratio, "short": sci_short(ratio)}
    if budget is not None:
        per_epoch = epoch_cost(budget, train_arch, consts)
        total = run_cost(budget, train_arch, consts)
        report["training"] = {
            "architecture": train_arch.name,
            "budget": asdict(budget),
            "epoch_inferences": per_epoch.inferences,
            "epoch_energy_j": per_epoch.energy_j,
            "epoch_latency_s": per_epoch.latency_s,
            "run_energy_j": total.energy_j,
            "run_time_s": total.time_s,
        }
    return report


def format_cost_table(report: dict) -> str:
    """Aligned text table: # MZIs, energy/inference, latency/inference, footprint"""
    frame = pd.DataFrame([
        {
            "Arch": row["architecture"],
            "# MZIs": f"{row['mzis']} ({row['mzis_short']})",
            "Energy/inf (J)": sci_short(row["energy_per_inference_j"]),
            "Latency (ns)": f"{row['latency_ns']:.1f} ({row['latency_rounded_ns']:g})",
            "Footprint (mm2)": sci_short(row["footprint_mm2"]),
        }
        for row in report["architectures"]
    ])
    lines: List[str] = [frame.to_string(index=False)]
    if "mzi_reduction" in report:
        red = report["mzi_reduction"]
        lines.append(f"MZI reduction ONN/TONN-1: {red['value']:.1f} ({red['short']})")
    if "compression" in report:
        comp = report["compression"]
        lines.append(
            f"Parameter compression: {comp['dense_params']} / {comp['tt_params']} "
            f"= {comp['value']:.1f} ({comp['short']})"
        )
    if "training" in report:
        tr = report["training"]
        lines.append(
            f"Training on {tr['architecture']}: {tr['epoch_inferences']} inferences/epoch, "
            f"{sci_short(tr['epoch_energy_j'])} J/epoch, {tr['epoch_latency_s'] * 1e3:.4g} ms/epoch"
        )
        lines.append(
            f"  {tr['budget']['epochs']} epochs: {sci_short(tr['run_energy_j'])} J, "
            f"{tr['run_time_s']:.4g} s"
        )
    return "\n".join(lines)


def cumulative_cost(cum_inferences: np.ndarray, batch: int, arch: ArchitectureSpec,
                   consts: DeviceConstants = DeviceConstants(),
                   pipelined: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Cumulative modeled energy (NaN when unavailable) and time for a run's inference counts"""
    cum = np.asarray(cum_inferences, dtype=np.float64)
    t_inf = latency_per_inference(arch, consts) * 1e-9
    time_s = (cum / batch if pipelined else cum) * t_inf
    if arch.energy_per_inference is None:
        return np.full_like(cum, np.nan), time_s
    return cum * arch.energy_per_inference, time_s
