"""Problem instances and the independent oracles every solver is checked against."""

import logging
import math
from collections.abc import Iterator, Sequence
from functools import cached_property
from typing import Any

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import brentq

from .channel import CandidateGrid, ChannelRealization, coupling_matrix
from .errors import InvalidInputError, StructuralInfeasibleError
from .models import DesignStatus, SystemConfig

logger = logging.getLogger(__name__)

GEOMETRY_TOL = 1e-9  # mm
MAX_DRAWS = 10_000


def distance_surrogate_coefficient(distances: np.ndarray) -> float:
    """Largest singular value of the distance matrix.

    It bounds λ_max of every symmetrized two-element block, so the relaxed
    minimum-distance constraint stays convex for all element pairs.
    """
    distances = np.asarray(distances, dtype=float)
    if not distances.size or not np.any(distances):
        return 0.0
    return float(np.linalg.norm(distances, 2))


class InstanceData(BaseModel):
    """One solvable problem. Immutable once built; arrays are read-only."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    grid: CandidateGrid
    channels: list[ChannelRealization]
    config: SystemConfig
    initial_positions: np.ndarray  # (M,) grid indices
    distance_matrix: np.ndarray  # (N, N) mm
    move_h: np.ndarray  # (M, N) mm
    move_v: np.ndarray  # (M, N) mm
    energy: np.ndarray  # (M, N) J
    eta: float
    coupling: np.ndarray | None = None

    @property
    def n_positions(self) -> int:
        return self.grid.n_positions

    @property
    def n_elements(self) -> int:
        return self.config.n_elements

    @property
    def n_users(self) -> int:
        return self.config.n_users

    @property
    def initial_coords(self) -> np.ndarray:
        return self.grid.positions[self.initial_positions]

    @cached_property
    def channel_matrix(self) -> np.ndarray:
        """ĥ_k stacked as rows, (K, N)."""
        return np.vstack([ch.effective_channel for ch in self.channels])

    @cached_property
    def noise_std(self) -> np.ndarray:
        return np.sqrt(self.config.noise_powers)

    @cached_property
    def power_unit(self) -> float:
        """Reference power so that normalized beamformers are O(1)."""
        gain = float(np.mean(np.abs(self.channel_matrix) ** 2))
        if gain <= 0:
            return 1.0
        return float(np.mean(self.config.noise_powers)) / gain

    @cached_property
    def scaled_channels(self) -> np.ndarray:
        """ĥ_k·√p_ref/σ_k: channels in units where noise is 1 and powers are O(1)."""
        return self.channel_matrix * (math.sqrt(self.power_unit) / self.noise_std)[:, None]

    @cached_property
    def reachable(self) -> list[np.ndarray]:
        """Positions each element can reach within one movement phase."""
        ok = (self.move_h <= self.config.max_move_h_mm + GEOMETRY_TOL) & (
            self.move_v <= self.config.max_move_v_mm + GEOMETRY_TOL
        )
        return [np.flatnonzero(row) for row in ok]

    @cached_property
    def min_distance_factor(self) -> np.ndarray:
        """Symmetric square root of [[ηI, −D/2], [−D/2, ηI]] (order 2N).

        With it the relaxed minimum-distance constraint for a pair (m, m′) reads
        ‖(F·[b_m; b_m′], √η·b_j for j ∉ {m, m′})‖ ≤ √(ηM − D_min).
        """
        n = self.n_positions
        half = self.distance_matrix / 2.0
        q = np.block([[self.eta * np.eye(n), -half], [-half, self.eta * np.eye(n)]])
        w, v = scipy.linalg.eigh(q)
        return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _check_initial(grid: CandidateGrid, config: SystemConfig, positions: np.ndarray) -> None:
    if positions.shape != (config.n_elements,):
        raise InvalidInputError(f"need {config.n_elements} initial positions, got {positions.shape}")
    if positions.min() < 0 or positions.max() >= grid.n_positions:
        raise InvalidInputError("initial positions must be grid indices")
    d = grid.distance_matrix[np.ix_(positions, positions)]
    iu = np.triu_indices(len(positions), 1)
    if len(set(positions.tolist())) != len(positions) or np.any(
        d[iu] < config.min_distance_mm - GEOMETRY_TOL
    ):
        raise InvalidInputError("initial positions violate the minimum distance")


def sample_initial_positions(
    grid: CandidateGrid, config: SystemConfig, rng: np.random.Generator
) -> np.ndarray:
    """Uniform distinct grid positions, redrawn until pairwise D_min holds."""
    m, n = config.n_elements, grid.n_positions
    if m > n:
        raise StructuralInfeasibleError(f"{m} elements do not fit on {n} positions")
    d = grid.distance_matrix
    iu = np.triu_indices(m, 1)
    for _ in range(MAX_DRAWS):
        pick = rng.choice(n, size=m, replace=False)
        if np.all(d[np.ix_(pick, pick)][iu] >= config.min_distance_mm - GEOMETRY_TOL):
            return np.sort(pick) if m == 1 else pick
    raise StructuralInfeasibleError(
        f"no initial placement with minimum distance {config.min_distance_mm} mm found"
    )


def build_instance(
    grid: CandidateGrid,
    channels: Sequence[ChannelRealization],
    config: SystemConfig,
    initial_positions: Sequence[int] | None = None,
    rng: np.random.Generator | None = None,
    coupling: np.ndarray | None = None,
) -> InstanceData:
    """Assemble an instance and its derived geometry and energy data."""
    channels = list(channels)
    if len(channels) != config.n_users:
        raise InvalidInputError(f"need {config.n_users} channels, got {len(channels)}")
    for k, ch in enumerate(channels):
        if ch.frm.shape[1] != grid.n_positions:
            raise InvalidInputError(
                f"channel {k} covers {ch.frm.shape[1]} positions, grid has {grid.n_positions}"
            )
    if initial_positions is None:
        if rng is None:
            raise InvalidInputError("initial positions or a generator are required")
        initial = sample_initial_positions(grid, config, rng)
    else:
        initial = np.asarray(initial_positions, dtype=int).ravel()
    _check_initial(grid, config, initial)

    xy = grid.positions
    start = xy[initial]
    move_h = np.abs(xy[None, :, 0] - start[:, None, 0])
    move_v = np.abs(xy[None, :, 1] - start[:, None, 1])
    # mm / (mm/ms) = ms → s
    energy = 1e-3 * (
        config.driver_power_h_w * move_h / config.speed_h_mm_per_ms
        + config.driver_power_v_w * move_v / config.speed_v_mm_per_ms
    )
    if coupling is None and config.coupling:
        coupling = coupling_matrix(grid, config.alpha_mc)
    distances = grid.distance_matrix
    arrays = {
        "initial_positions": initial,
        "distance_matrix": distances,
        "move_h": move_h,
        "move_v": move_v,
        "energy": energy,
    }
    for value in arrays.values():
        value.setflags(write=False) if value.flags.owndata else None
    return InstanceData(
        grid=grid,
        channels=channels,
        config=config,
        eta=distance_surrogate_coefficient(distances),
        coupling=None if coupling is None else np.asarray(coupling, dtype=complex),
        **arrays,
    )


# Placements


def selection_matrix(positions: Sequence[int], n_positions: int) -> np.ndarray:
    """N×M binary matrix with column m one-hot at positions[m]."""
    positions = np.asarray(positions, dtype=int)
    b = np.zeros((n_positions, len(positions)))
    b[positions, np.arange(len(positions))] = 1.0
    return b


def positions_of(b: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(b), axis=0)


def iter_placements(instance: InstanceData, limit: int | None = None) -> Iterator[tuple[int, ...]]:
    """Ordered placements satisfying the distance and movement limits (depth-first)."""
    reach = instance.reachable
    d = instance.distance_matrix
    dmin = instance.config.min_distance_mm - GEOMETRY_TOL
    m_total = instance.n_elements
    count = 0

    def extend(prefix: list[int]) -> Iterator[tuple[int, ...]]:
        nonlocal count
        if limit is not None and count >= limit:
            return
        if len(prefix) == m_total:
            count += 1
            yield tuple(prefix)
            return
        for n in reach[len(prefix)]:
            if n in prefix or any(d[n, p] < dmin for p in prefix):
                continue
            prefix.append(int(n))
            yield from extend(prefix)
            prefix.pop()

    yield from extend([])


def ensure_placeable(instance: InstanceData) -> None:
    """Raise StructuralInfeasibleError when no placement meets the geometry."""
    if next(iter_placements(instance, limit=1), None) is None:
        raise StructuralInfeasibleError(
            "no placement satisfies the minimum distance and movement limits"
        )


def sample_placement(instance: InstanceData, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform draw over feasible ordered placements (rejection on reachable sets)."""
    reach = instance.reachable
    if any(len(r) == 0 for r in reach):
        raise StructuralInfeasibleError("an element cannot reach any position")
    d = instance.distance_matrix
    dmin = instance.config.min_distance_mm - GEOMETRY_TOL
    m_total = instance.n_elements
    iu = np.triu_indices(m_total, 1)
    for _ in range(MAX_DRAWS):
        pick = np.array([rng.choice(r) for r in reach])
        if len(set(pick.tolist())) == m_total and np.all(d[np.ix_(pick, pick)][iu] >= dmin):
            return tuple(int(p) for p in pick)
    # low acceptance: draw from the explicit list (same distribution)
    everything = list(iter_placements(instance))
    if not everything:
        raise StructuralInfeasibleError(
            "no placement satisfies the minimum distance and movement limits"
        )
    return everything[int(rng.integers(len(everything)))]


# Feasibility


class FeasibilityReport(BaseModel):
    feasible: bool
    violations: list[str] = Field(default_factory=list)


def check_feasible(instance: InstanceData, b: np.ndarray, tol: float = GEOMETRY_TOL) -> FeasibilityReport:
    """Verify binary entries, one position per element, distances and movement."""
    b = np.asarray(b, dtype=float)
    n, m_total = instance.n_positions, instance.n_elements
    if b.shape != (n, m_total):
        return FeasibilityReport(feasible=False, violations=[f"shape: expected {(n, m_total)}, got {b.shape}"])
    violations = []
    if np.any(np.minimum(np.abs(b), np.abs(b - 1.0)) > 1e-9):
        violations.append("binary: entries outside {0, 1}")
    sums = b.sum(axis=0)
    for m in np.flatnonzero(np.abs(sums - 1.0) > 1e-9):
        violations.append(f"one-position: element {m} selects {sums[m]:g} positions")
    if violations:
        return FeasibilityReport(feasible=False, violations=violations)

    pos = positions_of(b)
    d = instance.distance_matrix
    dmin = instance.config.min_distance_mm
    for m in range(m_total):
        for m2 in range(m + 1, m_total):
            dist = float(b[:, m] @ d @ b[:, m2])
            if pos[m] == pos[m2]:
                violations.append(f"min-distance: elements {m} and {m2} share position {pos[m]}")
            elif dist < dmin - tol:
                violations.append(
                    f"min-distance: elements {m} and {m2} are {dist:g} mm apart (min {dmin:g})"
                )
    cfg = instance.config
    for m in range(m_total):
        dh = float(instance.move_h[m] @ b[:, m])
        dv = float(instance.move_v[m] @ b[:, m])
        if dh > cfg.max_move_h_mm + tol:
            violations.append(f"max-move-h: element {m} moves {dh:g} mm (max {cfg.max_move_h_mm:g})")
        if dv > cfg.max_move_v_mm + tol:
            violations.append(f"max-move-v: element {m} moves {dv:g} mm (max {cfg.max_move_v_mm:g})")
    return FeasibilityReport(feasible=not violations, violations=violations)


def min_distance_surrogate(instance: InstanceData, b: np.ndarray, m: int, m2: int) -> float:
    """η‖b̄‖² − b_mᵀ D b_m′ − ηM + D_min; ≤ 0 means the relaxed constraint holds."""
    b = np.asarray(b, dtype=float)
    eta = instance.eta
    return float(
        eta * np.sum(b**2)
        - b[:, m] @ instance.distance_matrix @ b[:, m2]
        - eta * instance.n_elements
        + instance.config.min_distance_mm
    )


# Power and SINR


def motion_energy(b: np.ndarray, instance: InstanceData) -> float:
    return float(np.einsum("mn,nm->", instance.energy, np.asarray(b, dtype=float)))


def radiated_power(w: np.ndarray) -> float:
    """Σ‖w_k‖² for (M, K) beamformers, Σ Tr W_k for (K, M, M) lifted ones."""
    w = np.asarray(w)
    if w.ndim == 3:
        return float(np.real(np.trace(w, axis1=1, axis2=2)).sum())
    return float(np.sum(np.abs(w) ** 2))


def average_power(b: np.ndarray, w: np.ndarray, instance: InstanceData) -> float:
    """(Σ_m b_mᵀe_m + T_Data·Σ_k‖w_k‖²)/(T_MA + T_Data) in watts."""
    cfg = instance.config
    return (motion_energy(b, instance) + cfg.t_data_s * radiated_power(w)) / cfg.frame_s


def effective_rows(instance: InstanceData, b: np.ndarray, with_coupling: bool = False) -> np.ndarray:
    """Row k is ĥ_kᴴB, or ĥ_kᴴB·BᵀCB under mutual coupling; shape (K, M)."""
    b = np.asarray(b, dtype=float)
    rows = instance.channel_matrix.conj() @ b
    if with_coupling:
        if instance.coupling is None:
            raise InvalidInputError("instance has no coupling matrix")
        rows = rows @ (b.T @ instance.coupling @ b)
    return rows


def sinr(instance: InstanceData, b: np.ndarray, w: np.ndarray, with_coupling: bool = False) -> np.ndarray:
    rows = effective_rows(instance, b, with_coupling)
    w = np.asarray(w)
    if w.ndim == 3:
        gains = np.real(np.einsum("km,jmn,kn->kj", rows, w, rows.conj()))
    else:
        gains = np.abs(rows @ w) ** 2
    signal = np.diag(gains).copy()
    interference = gains.sum(axis=1) - signal
    return signal / (interference + instance.config.noise_powers)


def sinr_margins_db(instance: InstanceData, b: np.ndarray, w: np.ndarray, with_coupling: bool = False) -> np.ndarray:
    values = sinr(instance, b, w, with_coupling)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(values / instance.config.sinr_targets)


# Worst case over the CSI error ball


def _trust_region_min(q: np.ndarray, c: np.ndarray, radius: float) -> tuple[np.ndarray, float]:
    """Minimize zᴴQz + 2Re(cᴴz) over ‖z‖ ≤ radius for Hermitian (possibly indefinite) Q."""
    n = len(c)
    if radius <= 0:
        return np.zeros(n, dtype=complex), 0.0
    lam, v = scipy.linalg.eigh(q)
    g = v.conj().T @ c

    def value(z: np.ndarray) -> float:
        return float(np.sum(lam * np.abs(z) ** 2) + 2.0 * np.real(np.vdot(g, z)))

    scale = max(1.0, float(np.abs(lam).max(initial=0.0)))
    if lam[0] > 1e-14 * scale:
        z = -g / lam
        if np.linalg.norm(z) <= radius:
            return v @ z, value(z)

    lo = max(0.0, -lam[0])
    bottom = np.abs(lam - lam[0]) <= 1e-12 * scale
    if np.linalg.norm(g[bottom]) <= 1e-14 * max(1.0, float(np.linalg.norm(g))):
        z = np.zeros(n, dtype=complex)
        rest = ~bottom
        z[rest] = -g[rest] / (lam[rest] + lo)
        slack = radius**2 - float(np.linalg.norm(z) ** 2)
        if slack >= 0:
            # hard case: complete along the bottom eigenvector
            z[np.flatnonzero(bottom)[0]] = math.sqrt(slack)
            return v @ z, value(z)

    def secular(nu: float) -> float:
        return 1.0 / np.linalg.norm(g / (lam + nu)) - 1.0 / radius

    left = lo + 1e-13 * scale
    while secular(left) >= 0 and left > lo:
        left = lo + (left - lo) * 1e-3
        if left - lo < 1e-300:
            break
    right = lo + float(np.linalg.norm(g)) / radius + scale
    nu = brentq(secular, left, right, xtol=1e-15 * scale, rtol=1e-15, maxiter=500)
    z = -g / (lam + nu)
    return v @ z, value(z)


def _interference_matrix(w: np.ndarray, k: int, gamma: float) -> np.ndarray:
    """γ_k Σ_{k′≠k} W_k′ − W_k from vectors (M, K) or lifted (K, M, M) beamformers."""
    w = np.asarray(w)
    mats = w if w.ndim == 3 else np.einsum("mk,nk->kmn", w, w.conj())
    others = mats.sum(axis=0) - mats[k]
    return gamma * others - mats[k]


def worst_case_margin(
    instance: InstanceData, b: np.ndarray, w: np.ndarray, k: int, normalized: bool = False
) -> float:
    """min over ‖Δψ‖ ≤ ε_k of −(ψ̄+Δψ)ᴴ G B W̃_k Bᵀ Gᴴ (ψ̄+Δψ) − σ_k²γ_k.

    Nonnegative certifies the SINR target for every channel in the error ball.
    `normalized` divides by σ_k² (noise units).
    """
    ch = instance.channels[k]
    gamma = float(instance.config.sinr_targets[k])
    noise = float(instance.config.noise_powers[k])
    gb = ch.frm @ np.asarray(b, dtype=float)  # (L, M)
    a = gb @ _interference_matrix(w, k, gamma) @ gb.conj().T
    a = (a + a.conj().T) / 2.0
    psi = ch.nominal_pcv
    nominal = -float(np.real(np.vdot(psi, a @ psi)))
    _, shift = _trust_region_min(-a, -(a @ psi), ch.error_radius)
    margin = nominal + shift - noise * gamma
    return margin / noise if normalized else margin


# Designs


class DesignSolution(BaseModel):
    """Placement, beamformers and power breakdown returned by every scheme."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    status: DesignStatus
    b: np.ndarray | None = None
    w: np.ndarray | None = None  # (M, K)
    w_lifted: np.ndarray | None = None  # (K, M, M), robust designs
    avg_power: float = float("inf")
    radiated_power: float = float("inf")
    motion_energy: float = float("inf")
    iterations: int = 0
    nodes: int = 0
    wall_s: float = 0.0
    gap: float | None = None
    rank_one_residuals: list[float] | None = None
    tightness_warning: bool = False
    objective_trace: list[float] = Field(default_factory=list)
    metadata: dict[str, Any] = Field(default_factory=dict)

    @classmethod
    def infeasible(cls, **kwargs) -> "DesignSolution":
        return cls(status=DesignStatus.INFEASIBLE, **kwargs)

    @classmethod
    def from_design(
        cls,
        instance: InstanceData,
        b: np.ndarray,
        w: np.ndarray | None,
        status: DesignStatus,
        w_lifted: np.ndarray | None = None,
        **kwargs,
    ) -> "DesignSolution":
        """Fill the power breakdown from B and the beamformers."""
        beams = w_lifted if w_lifted is not None and w is None else w
        rad = radiated_power(beams)
        return cls(
            status=status,
            b=np.asarray(b, dtype=float),
            w=w,
            w_lifted=w_lifted,
            avg_power=average_power(b, beams, instance),
            radiated_power=rad,
            motion_energy=motion_energy(b, instance),
            **kwargs,
        )

    @property
    def found(self) -> bool:
        return self.status != DesignStatus.INFEASIBLE and self.b is not None

    @property
    def positions(self) -> np.ndarray | None:
        return None if self.b is None else positions_of(self.b)

    @property
    def beamformers(self) -> np.ndarray | None:
        """Vectors when available, otherwise the lifted matrices."""
        return self.w if self.w is not None else self.w_lifted
