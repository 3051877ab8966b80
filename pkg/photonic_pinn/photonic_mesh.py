"""
Photonic Mesh Model
Phase-domain simulation of MZI meshes in a rectangular (Clements) layout

Each MZI is a real 2x2 Givens rotator acting on adjacent waveguides (m, m+1):

    T_m(phi) = [[cos phi, -sin phi],
                [sin phi,  cos phi]]

An n x n orthogonal matrix is Q = D T_1 T_2 ... T_K with K = n(n-1)/2 and
D = diag(+-1). Rotators are labelled by the sub-diagonal element (i, j), i > j,
that the Clements nulling procedure removes with them, so each label appears
exactly once. Arbitrary matrices are realized as U Sigma V^T with two meshes
and a column of attenuators.
"""

import json
import logging
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CheckpointError, DimensionMismatchError, NonOrthogonalError
from .tensor_train import TTShape, contract_core_matrices, tt_core_matrix, tt_init

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
CHECKPOINT_SCHEMA_VERSION = 1


def wrap_phase(angles) -> np.ndarray:
    """Reduce angles to the canonical range [0, 2*pi)"""
    wrapped = np.mod(np.asarray(angles, dtype=np.float64), TWO_PI)
    # np.mod can round tiny negatives up to exactly 2*pi
    return np.where(wrapped >= TWO_PI, 0.0, wrapped)


# =========================================
# ========= MESH TOPOLOGY =================
# =========================================

def _clements_schedule(n: int):
    """
    Nulling schedule of the rectangular decomposition

    Yields (side, label, mode): side 'right' rotates columns (mode, mode+1),
    side 'left' rotates rows (mode, mode+1); label is the nulled element.
    """
    for i in range(n - 1):
        if i % 2 == 0:
            for j in range(i + 1):
                row, col = n - 1 - j, i - j
                yield "right", (row, col), col
        else:
            for j in range(i + 1):
                row, col = n - 1 - i + j, j
                yield "left", (row, col), row - 1


@dataclass(frozen=True)
class MeshTopology:
    """Ordered rotators of one n x n mesh"""

    n: int
    pair_order: Tuple[Tuple[int, int], ...]
    modes: Tuple[int, ...]
    columns: Tuple[int, ...] = field(init=False, repr=False, compare=False)
    layers: Tuple[np.ndarray, ...] = field(init=False, repr=False, compare=False)
    mode_array: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.pair_order) != self.n * (self.n - 1) // 2 or len(self.modes) != len(self.pair_order):
            raise ValueError(f"Mesh of size {self.n} needs {self.n * (self.n - 1) // 2} rotators")

        # ASAP layering: rotators in one column touch disjoint waveguides
        last = [-1] * max(self.n, 1)
        columns = []
        for m in self.modes:
            col = max(last[m], last[m + 1]) + 1
            last[m] = last[m + 1] = col
            columns.append(col)
        n_cols = max(columns) + 1 if columns else 0
        col_arr = np.asarray(columns, dtype=int)
        layers = tuple(np.flatnonzero(col_arr == c) for c in range(n_cols))

        object.__setattr__(self, "columns", tuple(columns))
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "mode_array", np.asarray(self.modes, dtype=int))
        object.__setattr__(self, "_neighbors", tuple(self._find_neighbors()))

    @property
    def n_mzis(self) -> int:
        return len(self.pair_order)

    def neighbor_pairs(self) -> List[Tuple[int, int]]:
        """Rotator index pairs that sit side by side in the same column"""
        return list(self._neighbors)

    def _find_neighbors(self) -> List[Tuple[int, int]]:
        pairs = []
        for idx in self.layers:
            by_mode = {self.modes[k]: k for k in idx}
            for m, k in by_mode.items():
                if m + 2 in by_mode:
                    pairs.append((k, by_mode[m + 2]))
        return sorted(pairs)


@lru_cache(maxsize=None)
def clements_topology(n: int) -> MeshTopology:
    """Rectangular mesh topology for an n x n orthogonal matrix"""
    if n < 1:
        raise ValueError(f"Mesh size must be positive, got {n}")
    schedule = list(_clements_schedule(n))
    left = [(label, mode) for side, label, mode in schedule if side == "left"]
    right = [(label, mode) for side, label, mode in schedule if side == "right"]
    ordered = left + right[::-1]
    return MeshTopology(n, tuple(lbl for lbl, _ in ordered), tuple(m for _, m in ordered))


@dataclass(frozen=True)
class PhaseProgram:
    """Commanded angles and output signs of one mesh"""

    topology: MeshTopology
    angles: np.ndarray
    diag_signs: np.ndarray

    def __post_init__(self):
        angles = wrap_phase(self.angles).reshape(-1)
        signs = np.asarray(self.diag_signs, dtype=np.float64).reshape(-1)
        if angles.size != self.topology.n_mzis:
            raise DimensionMismatchError(
                f"Mesh of size {self.topology.n} needs {self.topology.n_mzis} angles, got {angles.size}"
            )
        if signs.size != self.topology.n or not np.all(np.abs(signs) == 1.0):
            raise ValueError("diag_signs must hold n entries from {+1, -1}")
        angles.setflags(write=False)
        signs.setflags(write=False)
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "diag_signs", signs)

    @property
    def n(self) -> int:
        return self.topology.n


def mesh_left_apply(topology: MeshTopology, angles: np.ndarray, signs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Q @ x for the mesh matrix Q, x of shape (n, k)"""
    out = np.array(x, dtype=np.float64)
    cos, sin = np.cos(angles), np.sin(angles)
    for idx in reversed(topology.layers):
        m = topology.mode_array[idx]
        c, s = cos[idx][:, None], sin[idx][:, None]
        top, bottom = out[m], out[m + 1]
        out[m] = c * top - s * bottom
        out[m + 1] = s * top + c * bottom
    return out * np.asarray(signs)[:, None]


def mesh_right_apply(topology: MeshTopology, angles: np.ndarray, signs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """x @ Q for the mesh matrix Q, x of shape (k, n)"""
    out = np.array(x, dtype=np.float64) * np.asarray(signs)[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    for idx in topology.layers:
        m = topology.mode_array[idx]
        c, s = cos[idx][None, :], sin[idx][None, :]
        left, right = out[:, m], out[:, m + 1]
        out[:, m] = left * c + right * s
        out[:, m + 1] = right * c - left * s
    return out


def compose_orthogonal(p: PhaseProgram) -> np.ndarray:
    """Orthogonal matrix D * prod(T) programmed by p"""
    return mesh_left_apply(p.topology, p.angles, p.diag_signs, np.eye(p.n))


def orthogonality_defect(q: np.ndarray) -> float:
    q = np.asarray(q, dtype=np.float64)
    return float(np.max(np.abs(q.T @ q - np.eye(q.shape[1])))) if q.size else 0.0


def clements_decompose(q: np.ndarray, tol: float = 1e-8) -> PhaseProgram:
    """
    Decompose an orthogonal matrix into rectangular-mesh angles

    Nulls sub-diagonal elements alternately with column rotations (right) and
    row rotations (left). The left rotations are then pushed through the
    remaining sign diagonal D so the result is D * prod(T).

    Args:
        q: n x n orthogonal matrix
        tol: accepted max|Q^T Q - I|

    Returns:
        PhaseProgram reconstructing q
    """
    work = np.array(q, dtype=np.float64)
    if work.ndim != 2 or work.shape[0] != work.shape[1]:
        raise DimensionMismatchError(f"Expected a square matrix, got shape {work.shape}")
    defect = orthogonality_defect(work)
    if defect > tol:
        raise NonOrthogonalError(defect)

    n = work.shape[0]
    left_ops, right_ops = [], []
    for side, (row, col), mode in _clements_schedule(n):
        if side == "right":
            theta = np.arctan2(-work[row, col], work[row, col + 1])
            c, s = np.cos(theta), np.sin(theta)
            a, b = work[:, mode].copy(), work[:, mode + 1].copy()
            work[:, mode] = a * c + b * s
            work[:, mode + 1] = b * c - a * s
            right_ops.append(theta)
        else:
            theta = np.arctan2(-work[row, col], work[row - 1, col])
            c, s = np.cos(theta), np.sin(theta)
            a, b = work[mode].copy(), work[mode + 1].copy()
            work[mode] = c * a - s * b
            work[mode + 1] = s * a + c * b
            left_ops.append((mode, theta))

    signs = np.where(np.diag(work) < 0, -1.0, 1.0)
    # T_m(theta)^T D = D T_m(-d_m d_{m+1} theta)
    left_angles = [-signs[m] * signs[m + 1] * theta for m, theta in left_ops]
    right_angles = [-theta for theta in reversed(right_ops)]
    return PhaseProgram(clements_topology(n), np.asarray(left_angles + right_angles), signs)


# =========================================
# ========= SVD LAYER PROGRAMS ============
# =========================================

@dataclass(frozen=True)
class SVDLayerProgram:
    """W = U[:, :k] diag(sigma) V[:k, :] with both unitaries as meshes"""

    u_phases: PhaseProgram
    sigma: np.ndarray
    v_phases: PhaseProgram

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if sigma.size != min(self.u_phases.n, self.v_phases.n):
            raise DimensionMismatchError(
                f"sigma needs {min(self.u_phases.n, self.v_phases.n)} entries, got {sigma.size}"
            )
        if np.any(sigma < 0):
            raise ValueError("sigma must be nonnegative")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.u_phases.n, self.v_phases.n

    @property
    def n_mzis(self) -> int:
        return self.u_phases.topology.n_mzis + self.v_phases.topology.n_mzis + self.sigma.size


def compose_svd(u_top: MeshTopology, u_angles, u_signs, sigma, v_top: MeshTopology, v_angles, v_signs) -> np.ndarray:
    """Dense matrix of an SVD mesh pair for explicit (possibly noisy) angles"""
    k = len(sigma)
    u_cols = mesh_left_apply(u_top, u_angles, u_signs, np.eye(u_top.n)[:, :k])
    v_rows = mesh_right_apply(v_top, v_angles, v_signs, np.eye(v_top.n)[:k, :])
    return (u_cols * np.asarray(sigma)[None, :]) @ v_rows


def compose_layer(prog: SVDLayerProgram) -> np.ndarray:
    return compose_svd(
        prog.u_phases.topology, prog.u_phases.angles, prog.u_phases.diag_signs, prog.sigma,
        prog.v_phases.topology, prog.v_phases.angles, prog.v_phases.diag_signs,
    )


def svd_map(w: np.ndarray) -> SVDLayerProgram:
    """Map an arbitrary real matrix onto two meshes and an attenuator column"""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or not np.all(np.isfinite(w)):
        raise ValueError("svd_map needs a finite 2-D matrix")
    u, s, vt = np.linalg.svd(w, full_matrices=True)
    return SVDLayerProgram(clements_decompose(u), s, clements_decompose(vt))


# =========================================
# ========= HARDWARE NOISE ================
# =========================================

@dataclass(frozen=True)
class NoiseConfig:
    """Sampling parameters of the fabricated-chip imperfections"""

    sigma_gamma: float = 0.002
    omega: float = 0.005
    bias_on: bool = True

    def __post_init__(self):
        if self.sigma_gamma < 0 or self.omega < 0:
            raise ValueError("sigma_gamma and omega must be nonnegative")


@dataclass(frozen=True)
class NoiseModel:
    """Frozen per-shifter drift, crosstalk couplings and bias"""

    gamma: np.ndarray
    crosstalk: Tuple[Tuple[int, int, float], ...]
    phase_bias: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=np.float64).reshape(-1)
        bias = wrap_phase(self.phase_bias).reshape(-1)
        if gamma.size != bias.size:
            raise DimensionMismatchError("gamma and phase_bias lengths differ")
        coupling = tuple((int(a), int(b), float(w)) for a, b, w in self.crosstalk)
        for a, b, _ in coupling:
            if not (0 <= a < gamma.size and 0 <= b < gamma.size):
                raise ValueError(f"Crosstalk pair ({a}, {b}) out of range")
        gamma.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "phase_bias", bias)
        object.__setattr__(self, "crosstalk", coupling)
        src = np.asarray([a for a, _, _ in coupling], dtype=int)
        dst = np.asarray([b for _, b, _ in coupling], dtype=int)
        coeff = np.asarray([w for _, _, w in coupling], dtype=np.float64)
        object.__setattr__(self, "_src", src)
        object.__setattr__(self, "_dst", dst)
        object.__setattr__(self, "_coeff", coeff)

    @property
    def n_phases(self) -> int:
        return self.gamma.size

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.gamma == 1.0) and not self.crosstalk and np.all(self.phase_bias == 0.0))


def identity_noise(n_phases: int) -> NoiseModel:
    return NoiseModel(np.ones(n_phases), (), np.zeros(n_phases), None)


def sample_noise(n_phases: int, sigma_gamma: float, omega: float, bias_on: bool, seed: int,
                 neighbors: Optional[Sequence[Tuple[int, int]]] = None) -> NoiseModel:
    """
    Sample one fabricated chip's imperfections

    Args:
        n_phases: number of phase shifters
        sigma_gamma: std of the multiplicative tuning-coefficient drift
        omega: crosstalk coefficient between neighboring shifters
        bias_on: draw a U(0, 2*pi) fabrication bias per shifter
        seed: RNG seed
        neighbors: physically adjacent shifter pairs; consecutive indices if omitted

    Returns:
        NoiseModel, frozen for the lifetime of the chip
    """
    if sigma_gamma < 0 or omega < 0:
        raise ValueError("sigma_gamma and omega must be nonnegative")
    rng = np.random.default_rng(seed)
    gamma = 1.0 + sigma_gamma * rng.standard_normal(n_phases)
    bias = rng.uniform(0.0, TWO_PI, n_phases) if bias_on else np.zeros(n_phases)

    if neighbors is None:
        neighbors = [(k, k + 1) for k in range(n_phases - 1)]
    crosstalk = []
    if omega > 0:
        for a, b in neighbors:
            crosstalk.append((a, b, omega))
            crosstalk.append((b, a, omega))
    return NoiseModel(gamma, tuple(crosstalk), bias, seed)


def effective_phases(commanded: np.ndarray, noise: NoiseModel) -> np.ndarray:
    """Omega (Gamma * Phi) + Phi_b, reduced mod 2*pi"""
    commanded = np.asarray(commanded, dtype=np.float64)
    if commanded.shape != (noise.n_phases,):
        raise DimensionMismatchError(
            f"Noise model covers {noise.n_phases} phases, got {commanded.shape}"
        )
    drifted = noise.gamma * commanded
    out = drifted.copy()
    if noise._src.size:
        out += np.bincount(noise._dst, weights=noise._coeff * drifted[noise._src], minlength=out.size)
    return wrap_phase(out + noise.phase_bias)


# =========================================
# ========= CHIP INSTANCE =================
# =========================================

@dataclass(frozen=True)
class DenseMeshLayer:
    program: SVDLayerProgram

    @property
    def in_dim(self) -> int:
        return self.program.shape[1]

    @property
    def out_dim(self) -> int:
        return self.program.shape[0]

    @property
    def programs(self) -> Tuple[SVDLayerProgram, ...]:
        return (self.program,)


@dataclass(frozen=True)
class TTMeshLayer:
    """TT layer whose cores are each realized by one SVD mesh pair"""

    shape: TTShape
    core_programs: Tuple[SVDLayerProgram, ...]

    def __post_init__(self):
        for k, prog in enumerate(self.core_programs):
            r_prev, m, n, r_next = self.shape.core_shape(k)
            if prog.shape != (r_prev * n, m * r_next):
                raise DimensionMismatchError(f"Core {k} mesh has shape {prog.shape}")

    @property
    def in_dim(self) -> int:
        return self.shape.in_dim

    @property
    def out_dim(self) -> int:
        return self.shape.out_dim

    @property
    def programs(self) -> Tuple[SVDLayerProgram, ...]:
        return self.core_programs


Layer = Union[DenseMeshLayer, TTMeshLayer]


class ChipInstance:
    """
    A network programmed onto photonic meshes plus its frozen noise model

    The trainable state is a flat vector holding, for every mesh pair in
    layer order, [U angles | V angles | sigma]. Chips are immutable: use
    with_params() to obtain a reprogrammed copy sharing the noise model.
    """

    activation = staticmethod(np.sin)

    def __init__(self, layers: Sequence[Layer], noise: Optional[NoiseModel] = None,
                 input_dim: Optional[int] = None, noise_config: Optional[NoiseConfig] = None,
                 layout_from: Optional["ChipInstance"] = None):
        self.layers = tuple(layers)
        if not self.layers:
            raise ValueError("Chip needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionMismatchError(f"Layer widths do not chain: {prev.out_dim} -> {nxt.in_dim}")
        self.input_dim = int(input_dim) if input_dim is not None else self.layers[0].in_dim
        if self.input_dim > self.layers[0].in_dim:
            raise DimensionMismatchError(
                f"Input width {self.input_dim} exceeds first layer width {self.layers[0].in_dim}"
            )

        if layout_from is None:
            self._build_layout()
        else:
            self._copy_layout(layout_from)
        self.noise_config = noise_config
        self.noise = noise if noise is not None else identity_noise(self.n_angles)
        if self.noise.n_phases != self.n_angles:
            raise DimensionMismatchError(
                f"Noise model covers {self.noise.n_phases} phases, chip has {self.n_angles}"
            )
        self._params = self._collect_params()
        self._params.setflags(write=False)
        self._cache = {}
        self._lock = threading.Lock()

    # ----- parameter layout -----

    def _build_layout(self):
        self._programs = [prog for layer in self.layers for prog in layer.programs]
        slots = []
        mask = []
        angle_pos = 0
        crosstalk = []
        for prog in self._programs:
            n_u, n_v, n_s = prog.u_phases.topology.n_mzis, prog.v_phases.topology.n_mzis, prog.sigma.size
            start = len(mask)
            slots.append({
                "u": slice(start, start + n_u),
                "v": slice(start + n_u, start + n_u + n_v),
                "sigma": slice(start + n_u + n_v, start + n_u + n_v + n_s),
                "u_angle": slice(angle_pos, angle_pos + n_u),
                "v_angle": slice(angle_pos + n_u, angle_pos + n_u + n_v),
            })
            crosstalk += [(angle_pos + a, angle_pos + b) for a, b in prog.u_phases.topology.neighbor_pairs()]
            crosstalk += [(angle_pos + n_u + a, angle_pos + n_u + b) for a, b in prog.v_phases.topology.neighbor_pairs()]
            mask += [True] * (n_u + n_v) + [False] * n_s
            angle_pos += n_u + n_v
        self._slots = slots
        self.angle_mask = np.asarray(mask, dtype=bool)
        self.angle_mask.setflags(write=False)
        self.n_angles = angle_pos
        self.crosstalk_pairs = tuple(crosstalk)

    def _copy_layout(self, other: "ChipInstance"):
        """Reuse the slot layout of a chip with identical topology"""
        self._programs = [prog for layer in self.layers for prog in layer.programs]
        if len(self._programs) != len(other._programs):
            raise DimensionMismatchError("Layout source has a different number of meshes")
        self._slots = other._slots
        self.angle_mask = other.angle_mask
        self.n_angles = other.n_angles
        self.crosstalk_pairs = other.crosstalk_pairs

    def _collect_params(self) -> np.ndarray:
        parts = []
        for prog in self._programs:
            parts += [prog.u_phases.angles, prog.v_phases.angles, prog.sigma]
        return np.concatenate(parts) if parts else np.zeros(0)

    @property
    def params(self) -> np.ndarray:
        return self._params

    @property
    def n_params(self) -> int:
        return self._params.size

    @property
    def n_mzis(self) -> int:
        return int(sum(prog.n_mzis for prog in self._programs))

    def project(self, params: np.ndarray) -> np.ndarray:
        """Wrap angles into [0, 2*pi) and clamp attenuations at zero"""
        params = np.array(params, dtype=np.float64)
        if params.shape != self._params.shape:
            raise DimensionMismatchError(f"Chip has {self.n_params} parameters, got {params.shape}")
        params[self.angle_mask] = wrap_phase(params[self.angle_mask])
        params[~self.angle_mask] = np.maximum(params[~self.angle_mask], 0.0)
        return params

    def with_params(self, params: np.ndarray) -> "ChipInstance":
        """Copy of this chip with new commanded values and the same noise"""
        params = self.project(params)
        layers = []
        pos = 0
        for layer in self.layers:
            progs = []
            for prog in layer.programs:
                slot = self._slots[pos]
                progs.append(SVDLayerProgram(
                    PhaseProgram(prog.u_phases.topology, params[slot["u"]], prog.u_phases.diag_signs),
                    params[slot["sigma"]],
                    PhaseProgram(prog.v_phases.topology, params[slot["v"]], prog.v_phases.diag_signs),
                ))
                pos += 1
            if isinstance(layer, TTMeshLayer):
                layers.append(TTMeshLayer(layer.shape, tuple(progs)))
            else:
                layers.append(DenseMeshLayer(progs[0]))
        return ChipInstance(layers, self.noise, self.input_dim, self.noise_config, layout_from=self)

    def with_noise(self, noise_config: Optional[NoiseConfig], seed: int) -> "ChipInstance":
        """Same programming on another fabricated instance (None means noise-free)"""
        return _attach_noise(self.layers, self.input_dim, noise_config, seed)

    # ----- composed operators -----

    def _operators(self, noisy: bool):
        key = "noisy" if noisy else "ideal"
        with self._lock:
            if key in self._cache:
                return self._cache[key]

        angles = self._params[self.angle_mask]
        if noisy:
            angles = effective_phases(angles, self.noise)

        ops = []
        pos = 0
        for layer in self.layers:
            mats = []
            for prog in layer.programs:
                slot = self._slots[pos]
                mats.append(compose_svd(
                    prog.u_phases.topology, angles[slot["u_angle"]], prog.u_phases.diag_signs,
                    self._params[slot["sigma"]],
                    prog.v_phases.topology, angles[slot["v_angle"]], prog.v_phases.diag_signs,
                ))
                pos += 1
            ops.append(mats)

        with self._lock:
            self._cache[key] = ops
        return ops

    def layer_matrices(self, noisy: bool = True) -> List[np.ndarray]:
        """Dense matrix realized by every layer (TT layers densified)"""
        mats = []
        for layer, ops in zip(self.layers, self._operators(noisy)):
            if isinstance(layer, TTMeshLayer):
                mats.append(contract_core_matrices(layer.shape, ops, np.eye(layer.in_dim)).T)
            else:
                mats.append(ops[0])
        return mats

    def _run(self, x: np.ndarray, noisy: bool) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x.reshape(1, -1) if single else x
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise DimensionMismatchError(f"Chip expects inputs of length {self.input_dim}, got shape {x.shape}")
        pad = self.layers[0].in_dim - self.input_dim
        if pad:
            h = np.pad(h, ((0, 0), (0, pad)))

        ops = self._operators(noisy)
        for idx, (layer, mats) in enumerate(zip(self.layers, ops)):
            if isinstance(layer, TTMeshLayer):
                h = contract_core_matrices(layer.shape, mats, h)
            else:
                h = h @ mats[0].T
            if idx < len(self.layers) - 1:
                h = self.activation(h)
        return h[0] if single else h

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self._run(x, noisy=True)

    def ideal_forward(self, x: np.ndarray) -> np.ndarray:
        """Noise-free evaluation of the commanded phases; for testing"""
        return self._run(x, noisy=False)


def chip_forward(chip: ChipInstance, x: np.ndarray) -> np.ndarray:
    """Evaluate the chip on x of shape (input_dim,) or (B, input_dim), noise applied"""
    return chip.forward(x)


# =========================================
# ========= CHIP BUILDERS =================
# =========================================

def _attach_noise(layers, input_dim, noise_config: Optional[NoiseConfig], noise_seed: int) -> ChipInstance:
    chip = ChipInstance(layers, None, input_dim, None)
    if noise_config is None:
        return chip
    noise = sample_noise(chip.n_angles, noise_config.sigma_gamma, noise_config.omega,
                         noise_config.bias_on, noise_seed, neighbors=chip.crosstalk_pairs)
    return ChipInstance(chip.layers, noise, input_dim, noise_config)


def chip_from_dense(weights: Sequence[np.ndarray], noise_config: Optional[NoiseConfig] = None,
                    noise_seed: int = 0) -> ChipInstance:
    """Program a dense sine MLP (no biases) onto a chip"""
    layers = [DenseMeshLayer(svd_map(w)) for w in weights]
    return _attach_noise(layers, layers[0].in_dim, noise_config, noise_seed)


def build_onn_chip(input_dim: int, hidden: int, out_dim: int, noise_config: Optional[NoiseConfig],
                   noise_seed: int, init_seed: int) -> ChipInstance:
    """Dense 3-layer ONN with fan-in Gaussian initial weights"""
    rng = np.random.default_rng(init_seed)
    dims = [(hidden, input_dim), (hidden, hidden), (out_dim, hidden)]
    weights = [rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols)) for rows, cols in dims]
    return chip_from_dense(weights, noise_config, noise_seed)


def build_tonn_chip(input_dim: int, tt_shapes: Sequence[TTShape], out_dim: int,
                    noise_config: Optional[NoiseConfig], noise_seed: int, init_seed: int) -> ChipInstance:
    """
    TT-compressed ONN: TT hidden layers followed by a dense output layer

    Inputs narrower than the first TT layer are zero-padded.
    """
    layers = []
    for idx, shape in enumerate(tt_shapes):
        cores = tt_init(shape, init_seed + idx)
        layers.append(TTMeshLayer(shape, tuple(svd_map(tt_core_matrix(core)) for core in cores.cores)))
    rng = np.random.default_rng(init_seed + len(tt_shapes))
    hidden = tt_shapes[-1].out_dim
    w_out = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(out_dim, hidden))
    layers.append(DenseMeshLayer(svd_map(w_out)))
    return _attach_noise(layers, input_dim, noise_config, noise_seed)


# =========================================
# ========= CHECKPOINTS ===================
# =========================================

def _program_to_dict(prog: SVDLayerProgram) -> dict:
    return {
        "rows": prog.shape[0],
        "cols": prog.shape[1],
        "u_angles": prog.u_phases.angles.tolist(),
        "u_signs": [int(s) for s in prog.u_phases.diag_signs],
        "sigma": prog.sigma.tolist(),
        "v_angles": prog.v_phases.angles.tolist(),
        "v_signs": [int(s) for s in prog.v_phases.diag_signs],
    }


def _program_from_dict(data: dict) -> SVDLayerProgram:
    return SVDLayerProgram(
        PhaseProgram(clements_topology(int(data["rows"])), np.asarray(data["u_angles"], dtype=np.float64),
                     np.asarray(data["u_signs"], dtype=np.float64)),
        np.asarray(data["sigma"], dtype=np.float64),
        PhaseProgram(clements_topology(int(data["cols"])), np.asarray(data["v_angles"], dtype=np.float64),
                     np.asarray(data["v_signs"], dtype=np.float64)),
    )


def chip_to_json(chip: ChipInstance) -> dict:
    """
    Serialize a chip to the checkpoint schema

    {"schema_version": 1, "kind": "chip", "input_dim": int,
     "layers": [{"kind": "tt", "out_factors", "in_factors", "ranks", "meshes": [...]},
                {"kind": "dense", "mesh": {...}}],
     "noise": null | {"sigma_gamma", "omega", "bias_on", "seed"}}
    """
    layers = []
    for layer in chip.layers:
        if isinstance(layer, TTMeshLayer):
            layers.append({
                "kind": "tt",
                "out_factors": list(layer.shape.out_factors),
                "in_factors": list(layer.shape.in_factors),
                "ranks": list(layer.shape.ranks),
                "meshes": [_program_to_dict(p) for p in layer.core_programs],
            })
        else:
            layers.append({"kind": "dense", "mesh": _program_to_dict(layer.program)})

    noise = None
    if chip.noise_config is not None:
        noise = {
            "sigma_gamma": chip.noise_config.sigma_gamma,
            "omega": chip.noise_config.omega,
            "bias_on": chip.noise_config.bias_on,
            "seed": chip.noise.seed,
        }
    return {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": "chip",
        "input_dim": chip.input_dim,
        "layers": layers,
        "noise": noise,
    }


def chip_from_json(data: dict) -> ChipInstance:
    """Rebuild a chip; the noise model is resampled from its recorded seed"""
    try:
        if data.get("kind") != "chip" or data.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
            raise CheckpointError("Not a chip checkpoint of a supported schema version")
        layers = []
        for entry in data["layers"]:
            if entry["kind"] == "tt":
                shape = TTShape(entry["out_factors"], entry["in_factors"], entry["ranks"])
                layers.append(TTMeshLayer(shape, tuple(_program_from_dict(m) for m in entry["meshes"])))
            elif entry["kind"] == "dense":
                layers.append(DenseMeshLayer(_program_from_dict(entry["mesh"])))
            else:
                raise CheckpointError(f"Unknown layer kind {entry['kind']!r}")
        noise = data.get("noise")
        if noise is None:
            return ChipInstance(layers, None, data["input_dim"], None)
        config = NoiseConfig(noise["sigma_gamma"], noise["omega"], bool(noise["bias_on"]))
        return _attach_noise(layers, data["input_dim"], config, int(noise["seed"]))
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise CheckpointError(f"Malformed chip checkpoint: {e}") from e


def save_chip(chip: ChipInstance, path: str):
    with open(path, "w") as f:
        json.dump(chip_to_json(chip), f)
    logger.info(f"Chip checkpoint saved to: {path}")


def load_chip(path: str) -> ChipInstance:
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    return chip_from_json(data)
