"""Reference schemes: random placement, antenna selection, alternating optimization,
motion-unaware search, exhaustive enumeration and the mutual-coupling designs."""

import itertools
import logging
import math
import time

import numpy as np

from .bnb import BnbResult, optimize
from .channel import CandidateGrid, ChannelRealization, field_response_matrix
from .conic import SolverSettings
from .errors import BudgetExceededError, InvalidInputError, StructuralInfeasibleError
from .instance import (
    DesignSolution,
    InstanceData,
    build_instance,
    check_feasible,
    ensure_placeable,
    iter_placements,
    positions_of,
    sample_placement,
    selection_matrix,
)
from .models import DesignStatus, ObjectiveKind, ToleranceConfig
from .perfect import (
    NodeFixings,
    build_relaxation,
    round_binary,
    solve_beamforming,
    solve_fixed_B,
    solve_relaxation,
    threshold,
)
from .robust import (
    RobustBlocks,
    build_robust_relaxation,
    finish_robust_design,
    solve_robust_beamforming,
    solve_robust_fixed_B,
)

logger = logging.getLogger(__name__)

AO_TOL = 1e-2
AO_MAX_ITER = 50
AO_ASCENT_RTOL = 1e-7


def _settings(tolerances: ToleranceConfig | None) -> SolverSettings:
    return SolverSettings.from_tolerances(tolerances or ToleranceConfig())


def fixed_design(
    instance: InstanceData,
    b: np.ndarray,
    robust: bool = False,
    settings: SolverSettings | None = None,
    with_coupling: bool = False,
) -> DesignSolution:
    """Beamformers for a given placement under the selected CSI model."""
    if robust:
        return solve_robust_fixed_B(instance, b, settings=settings)
    return solve_fixed_B(instance, b, with_coupling, settings)


def random_positions(
    instance: InstanceData,
    rng: np.random.Generator,
    robust: bool = False,
    tolerances: ToleranceConfig | None = None,
) -> DesignSolution:
    """Elements moved once to a uniformly drawn feasible placement."""
    started = time.perf_counter()
    placement = sample_placement(instance, rng)
    design = fixed_design(
        instance, selection_matrix(placement, instance.n_positions), robust, _settings(tolerances)
    )
    design.wall_s = time.perf_counter() - started
    design.metadata["placement"] = list(placement)
    return design


# Antenna selection


def upa_positions(n_elements: int, wavelength_mm: float) -> np.ndarray:
    """2×M half-wavelength planar array anchored at the origin, row-major."""
    spacing = wavelength_mm / 2.0
    cols, rows = np.meshgrid(np.arange(n_elements), np.arange(2))
    return np.column_stack([cols.ravel() * spacing, rows.ravel() * spacing])


def upa_instance(instance: InstanceData) -> InstanceData:
    """The instance seen by a fixed 2×M array: same users and paths, 2M positions.

    Geometry limits do not apply to fixed antennas, so the minimum distance is
    dropped and the array starts on its first M elements.
    """
    m = instance.n_elements
    wavelength = instance.grid.wavelength_mm
    xy = upa_positions(m, wavelength)
    grid = CandidateGrid.from_positions(xy, wavelength, step_mm=wavelength / 2.0)
    channels = []
    for k, ch in enumerate(instance.channels):
        if ch.path_set is None:
            raise InvalidInputError(f"channel {k} has no path geometry for array evaluation")
        frm = field_response_matrix(ch.path_set, xy, wavelength)
        kappa = ch.error_radius / max(float(np.linalg.norm(ch.nominal_pcv)), 1e-300)
        channels.append(
            ChannelRealization.from_matrices(frm, ch.nominal_pcv, kappa, path_set=ch.path_set)
        )
    config = instance.config.model_copy(update={"min_distance_mm": 0.0})
    return build_instance(grid, channels, config, initial_positions=np.arange(m))


def antenna_selection(
    instance: InstanceData,
    robust: bool = False,
    tolerances: ToleranceConfig | None = None,
) -> DesignSolution:
    """Best M-subset of a fixed 2×M array; antennas never move.

    The reported power is the radiated power Σ‖w_k‖² and the selection matrix
    indexes the array positions, not the movable-antenna grid.
    """
    started = time.perf_counter()
    settings = _settings(tolerances)
    array = upa_instance(instance)
    m, size = instance.n_elements, 2 * instance.n_elements
    cfg = instance.config
    blocks = RobustBlocks.from_instance(array) if robust else None
    best: DesignSolution | None = None
    subsets = list(itertools.combinations(range(size), m))
    for subset in subsets:
        b = selection_matrix(subset, size)
        if robust:
            res = solve_robust_beamforming(blocks.restricted(b), settings)
            if not res.feasible:
                continue
            design = finish_robust_design(array, b, res.w_lifted, DesignStatus.OPTIMAL)
        else:
            rows = array.channel_matrix.conj() @ b
            res = solve_beamforming(rows, cfg.noise_powers, cfg.sinr_targets, array.power_unit, settings)
            if not res.feasible:
                continue
            design = DesignSolution.from_design(array, b, res.w, DesignStatus.OPTIMAL)
        design.motion_energy = 0.0
        design.avg_power = design.radiated_power
        design.metadata["subset"] = list(subset)
        if best is None or design.avg_power < best.avg_power:
            best = design
    wall = time.perf_counter() - started
    if best is None:
        return DesignSolution.infeasible(iterations=len(subsets), wall_s=wall)
    best.iterations = len(subsets)
    best.wall_s = wall
    best.metadata["array_positions_mm"] = upa_positions(m, instance.grid.wavelength_mm).tolist()
    logger.info("antenna selection: subset %s, P=%.6g W", best.metadata["subset"], best.avg_power)
    return best


# Alternating optimization


def _beam_change(current: np.ndarray, previous: np.ndarray) -> float:
    return float(np.linalg.norm(current - previous) / max(np.linalg.norm(previous), 1e-300))


def alternating_optimization(
    instance: InstanceData,
    robust: bool = False,
    tolerances: ToleranceConfig | None = None,
    b_init: np.ndarray | None = None,
    tol: float = AO_TOL,
    max_iter: int = AO_MAX_ITER,
) -> DesignSolution:
    """Alternate beamformers at fixed relaxed B and relaxed B at fixed beamformers.

    Stops once the relative beamformer change is ≤ `tol`, or as soon as a B-step
    raises the next W-step objective (that B-step is discarded), so the recorded
    objective never increases. B is then quantized and the beamformers re-solved;
    the cheapest design among the quantized placement and every feasible binary
    iterate is returned.
    """
    started = time.perf_counter()
    tolerances = tolerances or ToleranceConfig()
    settings = _settings(tolerances)
    try:
        ensure_placeable(instance)
    except StructuralInfeasibleError as e:
        return DesignSolution.infeasible(metadata={"reason": str(e)})
    fixings = NodeFixings.root(instance)
    b = fixings.relaxed_start() if b_init is None else np.asarray(b_init, dtype=float)

    def relax(**fixed):
        if robust:
            return solve_relaxation(build_robust_relaxation(instance, fixings, **fixed), settings)
        return solve_relaxation(build_relaxation(instance, fixings, **fixed), settings)

    previous = None
    previous_b = b
    trace: list[float] = []
    fallback: list[np.ndarray] = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        w_step = relax(fixed_b=b)
        if not w_step.usable:
            logger.debug("AO W-step %d: %s", iterations, w_step.status.value)
            b = previous_b
            break
        if trace and w_step.objective > trace[-1] * (1.0 + AO_ASCENT_RTOL):
            # The B-step made things worse; keep the placement that led here.
            logger.debug(
                "AO round %d: objective rose %.6g -> %.6g, keeping previous B",
                iterations, trace[-1], w_step.objective,
            )
            b = previous_b
            break
        beams = w_step.w_lifted if robust else w_step.w
        trace.append(w_step.objective)
        candidate = threshold(b)
        if candidate is not None and check_feasible(instance, candidate).feasible:
            fallback.append(candidate)
        if previous is not None and _beam_change(beams, previous) <= tol:
            break
        previous = beams
        b_step = relax(fixed_w=beams)
        if not b_step.usable:
            logger.debug("AO B-step %d: %s", iterations, b_step.status.value)
            break
        previous_b, b = b, b_step.b

    quantized = threshold(b)
    if quantized is None or not check_feasible(instance, quantized).feasible:
        quantized = round_binary(instance, b, tolerances.penalty_mu, tolerances.sca_tol, fixings, settings).b
    candidates = ([quantized] if quantized is not None else []) + fallback[::-1]
    design = DesignSolution.infeasible()
    tried: set[tuple[int, ...]] = set()
    for candidate in candidates:
        key = tuple(positions_of(candidate).tolist())
        if key in tried:
            continue
        tried.add(key)
        solved = fixed_design(instance, candidate, robust, settings)
        if solved.found and (not design.found or solved.avg_power < design.avg_power):
            design = solved
    design.iterations = iterations
    design.objective_trace = trace
    design.wall_s = time.perf_counter() - started
    logger.info("alternating optimization: %s after %d rounds", design.status.value, iterations)
    return design


# Search-based schemes


def ignore_motion_power(
    instance: InstanceData,
    robust: bool = False,
    tolerances: ToleranceConfig | None = None,
    workers: int = 1,
) -> DesignSolution:
    """Global search on Σ‖w_k‖² only; the design reports its true average power."""
    result = optimize(
        instance, robust, tolerances, objective=ObjectiveKind.RADIATED_POWER, workers=workers
    )
    result.design.metadata["search_objective"] = ObjectiveKind.RADIATED_POWER.value
    return result.design


def exhaustive_search(
    instance: InstanceData,
    robust: bool = False,
    tolerances: ToleranceConfig | None = None,
    with_coupling: bool = False,
) -> DesignSolution:
    """Minimum over every ordered placement that meets the geometry limits.

    Refuses instances whose N!/(N−M)! exceeds the enumeration budget.
    """
    tolerances = tolerances or ToleranceConfig()
    n, m = instance.n_positions, instance.n_elements
    count = math.perm(n, m)
    if count > tolerances.enumeration_budget:
        raise BudgetExceededError(
            f"{count} ordered placements exceed the enumeration budget of "
            f"{tolerances.enumeration_budget}"
        )
    started = time.perf_counter()
    settings = _settings(tolerances)
    best: DesignSolution | None = None
    evaluated = 0
    for placement in iter_placements(instance):
        evaluated += 1
        design = fixed_design(instance, selection_matrix(placement, n), robust, settings, with_coupling)
        if design.found and (best is None or design.avg_power < best.avg_power):
            best = design
    wall = time.perf_counter() - started
    if best is None:
        return DesignSolution.infeasible(iterations=evaluated, wall_s=wall)
    best.status = DesignStatus.OPTIMAL
    best.iterations = evaluated
    best.wall_s = wall
    logger.info("exhaustive search: %d placements, P=%.9g W", evaluated, best.avg_power)
    return best


def mc_optimal(
    instance: InstanceData,
    tolerances: ToleranceConfig | None = None,
    workers: int = 1,
) -> BnbResult:
    """Global search on the coupled SINR model."""
    if instance.coupling is None:
        raise InvalidInputError("instance has no coupling matrix")
    return optimize(instance, tolerances=tolerances, coupling=True, workers=workers)


def mc_blind(
    instance: InstanceData,
    tolerances: ToleranceConfig | None = None,
    workers: int = 1,
) -> DesignSolution:
    """Coupling-blind optimal placement, beamformers re-solved against the coupled SINR."""
    if instance.coupling is None:
        raise InvalidInputError("instance has no coupling matrix")
    started = time.perf_counter()
    blind = optimize(instance, tolerances=tolerances, workers=workers).design
    if not blind.found:
        return blind
    design = solve_fixed_B(instance, blind.b, with_coupling=True, settings=_settings(tolerances))
    design.nodes = blind.nodes
    design.iterations = blind.iterations
    design.wall_s = time.perf_counter() - started
    design.metadata["blind_power"] = blind.avg_power
    return design
