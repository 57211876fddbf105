"""Candidate grid, field-response channels, CSI perturbations and mutual coupling."""

import logging
from collections.abc import Sequence
from functools import cached_property

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.spatial.distance import cdist

from .errors import InvalidInputError
from .models import PerturbMode

logger = logging.getLogger(__name__)

_ARRAYS = ConfigDict(frozen=True, arbitrary_types_allowed=True)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def free_space_pathloss(wavelength_mm: float, reference_m: float = 1.0) -> float:
    """Free-space path loss at `reference_m` metres: (λ / (4π d0))²."""
    wavelength_m = wavelength_mm / 1000.0
    return (wavelength_m / (4.0 * np.pi * reference_m)) ** 2


class CandidateGrid(BaseModel):
    """Quantized transmit area. Positions are (x, y) in mm, row-major from (0, 0)."""

    model_config = _ARRAYS

    wavelength_mm: float
    side_length_mm: float
    step_mm: float
    positions: np.ndarray

    @model_validator(mode="after")
    def _check_positions(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 1:
            raise InvalidInputError(f"positions must be an (N, 2) array, got {pos.shape}")
        object.__setattr__(self, "positions", _readonly(pos))
        return self

    @classmethod
    def from_positions(
        cls, positions: np.ndarray, wavelength_mm: float, step_mm: float | None = None
    ) -> "CandidateGrid":
        """Irregular candidate set, e.g. hand-built toy grids."""
        pos = np.asarray(positions, dtype=float).reshape(-1, 2)
        side = float(np.ptp(pos, axis=0).max()) if len(pos) > 1 else 0.0
        if step_mm is None:
            d = cdist(pos, pos)
            step_mm = float(d[d > 0].min()) if np.any(d > 0) else 0.0
        return cls(wavelength_mm=wavelength_mm, side_length_mm=side, step_mm=step_mm, positions=pos)

    @property
    def n_positions(self) -> int:
        return int(self.positions.shape[0])

    @cached_property
    def distance_matrix(self) -> np.ndarray:
        return _readonly(cdist(self.positions, self.positions))


def build_grid(area_scale: float, step_mm: float, wavelength_mm: float) -> CandidateGrid:
    """Square lattice of side area_scale·λ with spacing `step_mm` in both axes."""
    if area_scale <= 0 or step_mm <= 0 or wavelength_mm <= 0:
        raise InvalidInputError("area scale, step and wavelength must be positive")
    side = area_scale * wavelength_mm
    ratio = side / step_mm
    cells = int(round(ratio))
    if abs(ratio - cells) > 1e-9 * max(1.0, ratio):
        raise InvalidInputError(
            f"side length {side:g} mm is not an integer multiple of step {step_mm:g} mm"
        )
    axis = np.arange(cells + 1) * step_mm
    xx, yy = np.meshgrid(axis, axis)  # x varies fastest
    positions = np.column_stack([xx.ravel(), yy.ravel()])
    logger.debug("built %dx%d grid (N=%d)", cells + 1, cells + 1, len(positions))
    return CandidateGrid(
        wavelength_mm=wavelength_mm, side_length_mm=side, step_mm=step_mm, positions=positions
    )


class PathSet(BaseModel):
    """Angles of departure (rad) and complex path coefficients of one user's L paths."""

    model_config = _ARRAYS

    elevation: np.ndarray
    azimuth: np.ndarray
    coefficients: np.ndarray

    @model_validator(mode="after")
    def _check(self):
        theta = np.asarray(self.elevation, dtype=float).ravel()
        phi = np.asarray(self.azimuth, dtype=float).ravel()
        psi = np.asarray(self.coefficients, dtype=complex).ravel()
        if not (len(theta) == len(phi) == len(psi) >= 1):
            raise InvalidInputError("elevation, azimuth and coefficients must share length L >= 1")
        half_pi = np.pi / 2 + 1e-12
        if np.any(np.abs(theta) > half_pi) or np.any(np.abs(phi) > half_pi):
            raise InvalidInputError("angles of departure must lie in [-pi/2, pi/2]")
        object.__setattr__(self, "elevation", _readonly(theta))
        object.__setattr__(self, "azimuth", _readonly(phi))
        object.__setattr__(self, "coefficients", _readonly(psi))
        return self

    @property
    def n_paths(self) -> int:
        return len(self.coefficients)


def sample_paths(
    n_users: int,
    n_paths: int,
    distances_m: Sequence[float],
    pathloss: float,
    exponent: float,
    rng: np.random.Generator | Sequence[np.random.Generator],
    normalize: bool = False,
) -> list[PathSet]:
    """Draw per-user paths.

    Elevation follows the density cos(θ)/2 via θ = arcsin(2U − 1), azimuth is uniform
    on [−π/2, π/2] and each coefficient is CN(0, L0·D^−α) (divided by L when
    `normalize` is set). `rng` may be one generator or one per user.
    """
    if n_paths < 1:
        raise InvalidInputError("path count must be >= 1")
    if len(distances_m) != n_users or any(d <= 0 for d in distances_m):
        raise InvalidInputError("need one positive distance per user")
    rngs = [rng] * n_users if isinstance(rng, np.random.Generator) else list(rng)
    if len(rngs) != n_users:
        raise InvalidInputError("need one generator per user")

    paths = []
    for k in range(n_users):
        g = rngs[k]
        theta = np.arcsin(2.0 * g.random(n_paths) - 1.0)
        phi = g.uniform(-np.pi / 2, np.pi / 2, n_paths)
        variance = pathloss * distances_m[k] ** (-exponent)
        if normalize:
            variance /= n_paths
        psi = np.sqrt(variance / 2.0) * (g.standard_normal(n_paths) + 1j * g.standard_normal(n_paths))
        paths.append(PathSet(elevation=theta, azimuth=phi, coefficients=psi))
    return paths


def _phases(path_set: PathSet, xy: np.ndarray, wavelength_mm: float) -> np.ndarray:
    # xy: (P, 2) offsets from the reference corner → (L, P) phases
    direction = np.column_stack(
        [np.cos(path_set.elevation) * np.sin(path_set.azimuth), np.sin(path_set.elevation)]
    )
    return (2.0 * np.pi / wavelength_mm) * (direction @ xy.T)


def field_response_vector(
    path_set: PathSet,
    position: Sequence[float],
    wavelength_mm: float,
    reference: Sequence[float] = (0.0, 0.0),
) -> np.ndarray:
    offset = np.asarray(position, dtype=float) - np.asarray(reference, dtype=float)
    return np.exp(1j * _phases(path_set, offset.reshape(1, 2), wavelength_mm)[:, 0])


def field_response_matrix(path_set: PathSet, positions: CandidateGrid | np.ndarray, wavelength_mm: float | None = None) -> np.ndarray:
    """FRM G (L×N): column n is the FRV at position n."""
    if isinstance(positions, CandidateGrid):
        wavelength_mm = positions.wavelength_mm if wavelength_mm is None else wavelength_mm
        positions = positions.positions
    if wavelength_mm is None:
        raise InvalidInputError("wavelength required for raw positions")
    return np.exp(1j * _phases(path_set, np.asarray(positions, dtype=float), wavelength_mm))


def effective_channel(frm: np.ndarray, pcv: np.ndarray) -> np.ndarray:
    """ĥ = Gᴴψ."""
    frm = np.asarray(frm)
    pcv = np.asarray(pcv).ravel()
    if frm.ndim != 2 or frm.shape[0] != pcv.shape[0]:
        raise InvalidInputError(f"FRM {frm.shape} does not match PCV of length {pcv.shape[0]}")
    return frm.conj().T @ pcv


class ChannelRealization(BaseModel):
    """One user's channel: FRM over the grid, nominal PCV and its error radius."""

    model_config = _ARRAYS

    path_set: PathSet | None = None
    frm: np.ndarray
    nominal_pcv: np.ndarray
    effective_channel: np.ndarray
    error_radius: float = 0.0

    @classmethod
    def from_matrices(cls, frm: np.ndarray, pcv: np.ndarray, kappa: float = 0.0,
                      path_set: PathSet | None = None) -> "ChannelRealization":
        frm = np.asarray(frm, dtype=complex)
        pcv = np.asarray(pcv, dtype=complex).ravel()
        if kappa < 0:
            raise InvalidInputError("kappa must be >= 0")
        return cls(
            path_set=path_set,
            frm=_readonly(frm),
            nominal_pcv=_readonly(pcv),
            effective_channel=_readonly(effective_channel(frm, pcv)),
            error_radius=float(kappa * np.linalg.norm(pcv)),
        )

    @property
    def n_paths(self) -> int:
        return int(self.frm.shape[0])


def realize_channel(path_set: PathSet, grid: CandidateGrid, kappa: float = 0.0) -> ChannelRealization:
    frm = field_response_matrix(path_set, grid)
    return ChannelRealization.from_matrices(frm, path_set.coefficients, kappa, path_set=path_set)


def perturb_pcv(
    pcv: np.ndarray, radius: float, mode: PerturbMode, rng: np.random.Generator
) -> np.ndarray:
    """Draw ΔΨ with ‖Δψ‖ = radius (sphere) or ≤ radius (uniform ball)."""
    if radius < 0:
        raise InvalidInputError("error radius must be >= 0")
    n = len(np.asarray(pcv).ravel())
    if radius == 0:
        return np.zeros(n, dtype=complex)
    g = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    delta = radius * g / np.linalg.norm(g)
    if PerturbMode(mode) == PerturbMode.BALL:
        # real dimension is 2n
        delta *= rng.random() ** (1.0 / (2 * n))
    return delta


def coupling_matrix(grid: CandidateGrid, alpha_mc: float) -> np.ndarray:
    """C[n, n'] = exp(−(2 D[n, n'] / λ)(α_mc + jπ))."""
    if alpha_mc <= 0:
        raise InvalidInputError("alpha_mc must be positive")
    d = grid.distance_matrix
    return np.exp(-(2.0 * d / grid.wavelength_mm) * (alpha_mc + 1j * np.pi))
