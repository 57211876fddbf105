"""Perfect-CSI formulations: relaxations, fixed-placement beamforming, rounding and penalty SCA."""

import logging
import math
import time
from collections.abc import Callable
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .conic import (
    Affine,
    ComplexAffine,
    ConicProgram,
    ProgramBuilder,
    SolveResult,
    SolverSettings,
    bmat,
    concat,
    solve,
)
from .errors import InvalidInputError, StructuralInfeasibleError
from .instance import (
    GEOMETRY_TOL,
    DesignSolution,
    InstanceData,
    check_feasible,
    effective_rows,
    ensure_placeable,
)
from .models import DesignStatus, ObjectiveKind, SolveStatus

logger = logging.getLogger(__name__)

BINARY_BAND = 0.01  # entries in (0.01, 0.99) count as fractional
MU_DECREASES = 5
MU_FACTOR = 5.0


def solve_with_retry(program: ConicProgram, settings: SolverSettings) -> SolveResult:
    """Solve once; on a numerical failure retry with tightened settings."""
    result = solve(program, settings)
    if result.status.usable or result.status == SolveStatus.PRIMAL_INFEASIBLE:
        return result
    logger.debug("%s: %s, retrying with tightened settings", program.name, result.status.value)
    retry = solve(program, settings.tightened())
    if not retry.status.usable and retry.status != SolveStatus.PRIMAL_INFEASIBLE:
        logger.warning("%s: solve failed twice (%s)", program.name, retry.status.value)
    return retry


# Fixings


class NodeFixings(BaseModel):
    """Determined and free selection variables of one search node.

    `state[m, n]` is -1 for free entries, otherwise the fixed value of b_m[n].
    Construction propagates consequences: a fixed 1 zeroes the rest of its column
    and every position closer than D_min in the other columns; a column with a
    single candidate left is forced to 1.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    state: np.ndarray
    infeasible: bool = False

    @classmethod
    def root(cls, instance: InstanceData) -> "NodeFixings":
        """Unreachable positions fixed to 0, everything else free."""
        state = np.full((instance.n_elements, instance.n_positions), -1, dtype=np.int8)
        for m, reach in enumerate(instance.reachable):
            blocked = np.ones(instance.n_positions, dtype=bool)
            blocked[reach] = False
            state[m, blocked] = 0
        return cls._settle(instance, state)

    @classmethod
    def from_matrix(cls, b: np.ndarray) -> "NodeFixings":
        state = np.asarray(np.round(b), dtype=np.int8).T.copy()
        state.setflags(write=False)
        return cls(state=state)

    @classmethod
    def _settle(cls, instance: InstanceData, state: np.ndarray) -> "NodeFixings":
        n_elements = state.shape[0]
        close = instance.distance_matrix < instance.config.min_distance_mm - GEOMETRY_TOL
        np.fill_diagonal(close, True)
        spread = np.zeros(n_elements, dtype=bool)

        def done(infeasible: bool = False) -> "NodeFixings":
            state.setflags(write=False)
            return cls(state=state, infeasible=infeasible)

        changed = True
        while changed:
            changed = False
            for m in range(n_elements):
                ones = np.flatnonzero(state[m] == 1)
                if len(ones) > 1:
                    return done(True)
                if len(ones) == 1:
                    if spread[m]:
                        continue
                    n = ones[0]
                    state[m, state[m] == -1] = 0
                    for m2 in range(n_elements):
                        if m2 == m:
                            continue
                        if np.any(state[m2, close[n]] == 1):
                            return done(True)
                        state[m2, close[n] & (state[m2] == -1)] = 0
                    spread[m] = True
                    changed = True
                else:
                    candidates = np.flatnonzero(state[m] == -1)
                    if not len(candidates):
                        return done(True)
                    if len(candidates) == 1:
                        state[m, candidates[0]] = 1
                        changed = True
        return done()

    def fix(self, instance: InstanceData, m: int, n: int, value: int) -> "NodeFixings":
        """Child fixings with b_m[n] = value, propagated."""
        current = int(self.state[m, n])
        if current != -1 and current != value:
            raise InvalidInputError(f"b[{m}][{n}] is already fixed to {current}")
        state = self.state.copy()
        state[m, n] = value
        return self._settle(instance, state)

    @property
    def determined(self) -> dict[tuple[int, int], int]:
        ms, ns = np.nonzero(self.state >= 0)
        return {(int(m), int(n)): int(self.state[m, n]) for m, n in zip(ms, ns, strict=True)}

    @property
    def free(self) -> list[tuple[int, int]]:
        ms, ns = np.nonzero(self.state < 0)
        return [(int(m), int(n)) for m, n in zip(ms, ns, strict=True)]

    @property
    def is_complete(self) -> bool:
        return not np.any(self.state < 0)

    def matrix(self) -> np.ndarray:
        """N×M selection matrix of a complete node."""
        if not self.is_complete:
            raise InvalidInputError("fixings leave free entries")
        return self.state.T.astype(float)

    def relaxed_start(self) -> np.ndarray:
        """Each column spread uniformly over its allowed positions."""
        allowed = (self.state != 0).astype(float)
        allowed /= np.maximum(allowed.sum(axis=1, keepdims=True), 1.0)
        return allowed.T


# Shared constraint blocks


def placement_expression(
    builder: ProgramBuilder, instance: InstanceData, fixings: NodeFixings
) -> Affine:
    """B (N×M) with determined entries as constants and free ones boxed in [0, 1]."""
    if fixings.state.shape != (instance.n_elements, instance.n_positions):
        raise InvalidInputError("fixings do not match the instance dimensions")
    if fixings.infeasible:
        raise InvalidInputError("fixings are inconsistent")
    n, m = instance.n_positions, instance.n_elements
    grid_state = fixings.state.T
    const = (grid_state == 1).astype(float)
    free_idx = np.flatnonzero(grid_state.ravel() == -1)
    if not len(free_idx):
        return Affine.constant(const)
    free = builder.real("b", len(free_idx))
    scatter = np.zeros((n * m, len(free_idx)))
    scatter[free_idx, np.arange(len(free_idx))] = 1.0
    builder.add_nonneg(free, "b-lower")
    builder.add_le(free, np.ones(len(free_idx)), "b-upper")
    return (free.lmul(scatter) + const.ravel()).reshape(n, m)


def add_geometry(builder: ProgramBuilder, instance: InstanceData, b: Affine) -> None:
    """One position per element, no shared positions, movement limits and relaxed D_min."""
    n, m = instance.n_positions, instance.n_elements
    cfg = instance.config
    if b.is_constant:
        return
    builder.add_zero(b.lmul(np.ones(n)) - 1.0, "one-position")
    builder.add_le(b.rmul(np.ones(m)), np.ones(n), "shared-position")
    builder.add_le((b * instance.move_h.T).lmul(np.ones(n)), cfg.max_move_h_mm, "max-move-h")
    builder.add_le((b * instance.move_v.T).lmul(np.ones(n)), cfg.max_move_v_mm, "max-move-v")
    if cfg.min_distance_mm <= 0 or m < 2:
        return
    radius = math.sqrt(max(instance.eta * m - cfg.min_distance_mm, 0.0))
    factor = instance.min_distance_factor
    root_eta = math.sqrt(instance.eta)
    for i in range(m):
        for j in range(i + 1, m):
            pair = concat([b[:, i], b[:, j]]).lmul(factor)
            rest = [b[:, o] * root_eta for o in range(m) if o not in (i, j)]
            builder.add_soc(radius, concat([pair, *rest]), "min-distance")


def add_lift(
    builder: ProgramBuilder, b: Affine, w: Any, x: ComplexAffine, tag: str = "lift", name: str = ""
) -> None:
    """X = BW through [[U, X, B], [Xᴴ, V, Wᴴ], [Bᵀ, W, I]] ⪰ 0 and Tr U ≤ M."""
    n, m = b.shape
    k = x.shape[1]
    u = builder.hermitian(f"u{name}", n)
    v = builder.hermitian(f"v{name}", k)
    w_h = w.H if isinstance(w, ComplexAffine) else np.conj(w).T
    block = bmat([[u, x, b], [x.H, v, w_h], [b.T, w, np.eye(m)]])
    builder.add_hermitian_psd(block, tag)
    builder.add_le(u.re.trace(), float(m), f"{tag}-trace")


def penalty_terms(b: Affine, point: np.ndarray) -> Affine:
    """First-order majorant of Σ(b − b²) around `point`."""
    point = np.asarray(point, dtype=float)
    return (b * (1.0 - 2.0 * point)).sum() + float(np.sum(point**2))


def is_binary(b: np.ndarray) -> bool:
    b = np.asarray(b)
    return not np.any((b > BINARY_BAND) & (b < 1.0 - BINARY_BAND))


def threshold(b: np.ndarray) -> np.ndarray | None:
    """Hard threshold at 0.5; None unless every column is one-hot."""
    out = (np.asarray(b) > 0.5).astype(float)
    if np.any(out.sum(axis=0) != 1.0):
        return None
    return out


# Beamforming at a fixed placement


class BeamformingResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    status: SolveStatus
    w: np.ndarray | None = None  # (M, K), watts^½
    power: float = float("inf")
    iterations: int = 0

    @property
    def feasible(self) -> bool:
        return self.status.usable and self.w is not None


def solve_beamforming(
    h_eff: np.ndarray,
    noise: np.ndarray,
    gamma: np.ndarray,
    p_ref: float = 1.0,
    settings: SolverSettings | None = None,
) -> BeamformingResult:
    """Minimum Σ‖w_k‖² subject to SINR_k ≥ γ_k.

    `h_eff` row k is the effective channel seen by user k, so that user k receives
    h_eff[k] @ w_j from stream j. Solved as an SOCP in units of √p_ref.
    """
    settings = settings or SolverSettings()
    h_eff = np.atleast_2d(np.asarray(h_eff, dtype=complex))
    k_users, m = h_eff.shape
    noise = np.broadcast_to(np.asarray(noise, dtype=float), (k_users,))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (k_users,))
    rows = h_eff * (math.sqrt(p_ref) / np.sqrt(noise))[:, None]

    builder = ProgramBuilder("beamforming")
    w = builder.complex("w", (m, k_users))
    norm = builder.real("norm")
    for k in range(k_users):
        g = w.lmul(rows[k])  # (K,)
        scale = math.sqrt(1.0 + 1.0 / gamma[k])
        builder.add_soc(g.re[k] * scale, concat([g.re, g.im, 1.0]), f"sinr-{k}")
        builder.add_zero(g.im[k], f"sinr-phase-{k}")
    builder.add_soc(norm, concat([w.re, w.im]), "norm")
    builder.minimize(norm)
    result = solve_with_retry(builder.build(), settings)
    if not result.status.usable:
        return BeamformingResult(status=result.status, iterations=result.iterations)
    beams = w.evaluate(result.x) * math.sqrt(p_ref)
    return BeamformingResult(
        status=result.status,
        w=beams,
        power=float(np.sum(np.abs(beams) ** 2)),
        iterations=result.iterations,
    )


def solve_fixed_B(
    instance: InstanceData,
    b: np.ndarray,
    with_coupling: bool = False,
    settings: SolverSettings | None = None,
) -> DesignSolution:
    """Optimal beamformers and average power for a given placement."""
    report = check_feasible(instance, b)
    if not report.feasible:
        return DesignSolution.infeasible(metadata={"violations": report.violations})
    cfg = instance.config
    rows = effective_rows(instance, b, with_coupling)
    bf = solve_beamforming(rows, cfg.noise_powers, cfg.sinr_targets, instance.power_unit, settings)
    if not bf.feasible:
        return DesignSolution.infeasible(
            b=np.asarray(b, dtype=float), iterations=bf.iterations,
            metadata={"solver_status": bf.status.value},
        )
    return DesignSolution.from_design(
        instance, b, bf.w, DesignStatus.FEASIBLE, iterations=bf.iterations
    )


# Relaxations


class Relaxation(BaseModel):
    """A built program plus the expressions needed to decode its solution."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    program: ConicProgram
    b: Affine
    w: Any = None  # ComplexAffine (M, K) or a constant array
    w_lifted: list[Any] | None = None  # robust: Hermitian M×M expressions
    power_unit: float = 1.0
    penalty_point: np.ndarray | None = None
    mu: float | None = None


class RelaxedPoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    status: SolveStatus
    bound: float = float("-inf")
    objective: float = float("nan")
    b: np.ndarray | None = None
    w: np.ndarray | None = None
    w_lifted: np.ndarray | None = None
    iterations: int = 0

    @property
    def usable(self) -> bool:
        return self.status.usable


def _evaluate(expr: Any, x: np.ndarray) -> np.ndarray:
    if isinstance(expr, Affine | ComplexAffine):
        return expr.evaluate(x)
    return np.asarray(expr)


def solve_relaxation(relaxation: Relaxation, settings: SolverSettings | None = None) -> RelaxedPoint:
    settings = settings or SolverSettings()
    result = solve_with_retry(relaxation.program, settings)
    if not result.status.usable:
        return RelaxedPoint(status=result.status, iterations=result.iterations)
    x = result.x
    unit = math.sqrt(relaxation.power_unit)
    w = None if relaxation.w is None else _evaluate(relaxation.w, x) * unit
    lifted = None
    if relaxation.w_lifted is not None:
        lifted = np.stack([_evaluate(e, x) for e in relaxation.w_lifted]) * relaxation.power_unit
    return RelaxedPoint(
        status=result.status,
        bound=result.lower_bound,
        objective=result.objective,
        b=np.clip(_evaluate(relaxation.b, x), 0.0, 1.0),
        w=w,
        w_lifted=lifted,
        iterations=result.iterations,
    )


def objective_expression(
    instance: InstanceData, b: Affine, radiated: Affine, kind: ObjectiveKind
) -> Affine:
    """Objective in watts; `radiated` is Σ‖w‖² in normalized units."""
    cfg = instance.config
    rad_w = radiated * instance.power_unit
    if ObjectiveKind(kind) == ObjectiveKind.RADIATED_POWER:
        return rad_w
    motion = (b * instance.energy.T).sum()
    return (motion + rad_w * cfg.t_data_s) / cfg.frame_s


def build_relaxation(
    instance: InstanceData,
    fixings: NodeFixings,
    objective: ObjectiveKind = ObjectiveKind.AVERAGE_POWER,
    penalty_point: np.ndarray | None = None,
    mu: float = 1e-2,
    fixed_b: np.ndarray | None = None,
    fixed_w: np.ndarray | None = None,
    coupling: bool = False,
) -> Relaxation:
    """Convex relaxation of the joint problem over the free selection entries.

    Variables (W, X, B, U, V): the SINR constraints act on X = BW through one
    SOC and one phase equality per user, X = BW is enforced by the lift, and the
    geometry constraints use the relaxed minimum-distance form. `penalty_point`
    adds the linearized binariness penalty scaled by 1/μ. `fixed_b` or
    `fixed_w` hold one factor constant (alternating steps). With `coupling`
    the SINR acts on X_MC = diag(Σ_m b_m)·C·X.
    """
    n, m, k_users = instance.n_positions, instance.n_elements, instance.n_users
    name = "relaxation" if penalty_point is None else "penalized-relaxation"
    builder = ProgramBuilder(name)
    if fixed_b is not None:
        b = Affine.constant(np.asarray(fixed_b, dtype=float))
    else:
        b = placement_expression(builder, instance, fixings)
    add_geometry(builder, instance, b)

    if fixed_w is not None:
        w: Any = np.asarray(fixed_w, dtype=complex) / math.sqrt(instance.power_unit)
        radiated: Affine = Affine.constant(float(np.sum(np.abs(w) ** 2)))
    else:
        w = builder.complex("w", (m, k_users))
        radiated = builder.real("radiated")
        builder.add_quad_epigraph(concat([w.re, w.im]), radiated, "radiated")

    if b.is_constant:
        x = w.lmul(b.const.reshape(n, m)) if isinstance(w, ComplexAffine) else ComplexAffine.constant(
            b.const.reshape(n, m) @ w
        )
    else:
        x = builder.complex("x", (n, k_users))
        add_lift(builder, b, w, x)

    signal = x
    if coupling:
        if instance.coupling is None:
            raise InvalidInputError("instance has no coupling matrix")
        cx = x.lmul(instance.coupling)
        occupancy = b.rmul(np.ones(m))
        if b.is_constant:
            signal = cx.lmul(np.diag(occupancy.const))
        else:
            signal = builder.complex("x_mc", (n, k_users))
            spread = np.zeros((n * n, n))
            spread[np.arange(n) * n + np.arange(n), np.arange(n)] = 1.0
            diag = occupancy.lmul(spread).reshape(n, n)
            u_mc = builder.hermitian("u_mc", n)
            v_mc = builder.hermitian("v_mc", k_users)
            block = bmat([[u_mc, signal, diag], [signal.H, v_mc, cx.H], [diag, cx, np.eye(n)]])
            builder.add_hermitian_psd(block, "coupling-lift")
            builder.add_le(u_mc.re.trace(), float(m), "coupling-lift-trace")

    channels = instance.scaled_channels
    gamma = instance.config.sinr_targets
    for k in range(k_users):
        g = signal.lmul(channels[k].conj())
        if isinstance(g, ComplexAffine) and not (g.re.is_constant and g.im.is_constant):
            scale = math.sqrt(1.0 + 1.0 / gamma[k])
            builder.add_soc(g.re[k] * scale, concat([g.re, g.im, 1.0]), f"sinr-{k}")
            builder.add_zero(g.im[k], f"sinr-phase-{k}")

    obj = objective_expression(instance, b, radiated, objective)
    if penalty_point is not None:
        obj = obj + penalty_terms(b, penalty_point) * (1.0 / mu)
    builder.minimize(obj)
    return Relaxation(
        program=builder.build(),
        b=b,
        w=w,
        power_unit=instance.power_unit,
        penalty_point=None if penalty_point is None else np.asarray(penalty_point, dtype=float),
        mu=mu if penalty_point is not None else None,
    )


# Penalty SCA


class PenaltyRun(BaseModel):
    """Outcome of the penalized iterations shared by rounding and the SCA solvers."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    b: np.ndarray | None = None
    last: RelaxedPoint | None = None
    objective_trace: list[float] = Field(default_factory=list)
    mu_trace: list[float] = Field(default_factory=list)
    iterations: int = 0
    mu: float = 1e-2
    failed: bool = False


def penalty_sca(
    build: Callable[[np.ndarray, float], Relaxation],
    start: np.ndarray,
    mu: float = 1e-2,
    tol: float = 1e-4,
    max_iter: int = 100,
    settings: SolverSettings | None = None,
) -> PenaltyRun:
    """Iterate the linearized penalty problem until the relative change in B is ≤ tol.

    A non-binary fixed point divides μ by 5 and continues from the current
    iterate, at most five times. The recorded objective is the exact penalized
    value P + (1/μ)Σ(b − b²) at each accepted iterate, with the μ it was taken
    at in `mu_trace`. For a fixed μ the sequence never increases: an iterate
    that would raise it ends the stage and the previous one is kept.
    """
    b = np.asarray(start, dtype=float)
    run = PenaltyRun(mu=mu)
    power: float | None = None
    for attempt in range(MU_DECREASES + 1):
        current = None if power is None else power + float(np.sum(b - b**2)) / run.mu
        for _ in range(max_iter):
            point = solve_relaxation(build(b, run.mu), settings)
            run.iterations += 1
            if not point.usable:
                logger.debug("penalty iteration %d: %s", run.iterations, point.status.value)
                run.failed = True
                run.b = b
                return run
            linear = float(np.sum(point.b * (1.0 - 2.0 * b)) + np.sum(b**2))
            point_power = point.objective - linear / run.mu
            value = point_power + float(np.sum(point.b - point.b**2)) / run.mu
            if current is not None and value > current:
                logger.debug(
                    "penalty iteration %d: value rose %.6g -> %.6g, stage ends",
                    run.iterations, current, value,
                )
                break
            run.objective_trace.append(value)
            run.mu_trace.append(run.mu)
            change = np.linalg.norm(point.b - b) / max(np.linalg.norm(b), 1e-12)
            b, power, current = point.b, point_power, value
            run.last = point
            if change <= tol:
                break
        if is_binary(b):
            break
        if attempt < MU_DECREASES:
            run.mu /= MU_FACTOR
            logger.debug("penalty fixed point not binary, mu -> %g", run.mu)
    run.b = b
    return run


class Rounding(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    b: np.ndarray | None = None
    iterations: int = 0
    mu: float = 1e-2

    @property
    def found(self) -> bool:
        return self.b is not None


def build_rounding(
    instance: InstanceData,
    target: np.ndarray,
    point: np.ndarray,
    mu: float,
    fixings: NodeFixings | None = None,
) -> Relaxation:
    """min ‖B − target‖_F + (1/μ)·linearized Σ(b − b²) over the relaxed geometry."""
    fixings = fixings or NodeFixings.root(instance)
    builder = ProgramBuilder("rounding")
    b = placement_expression(builder, instance, fixings)
    add_geometry(builder, instance, b)
    dist = builder.real("distance")
    builder.add_soc(dist, (b - np.asarray(target, dtype=float)).ravel(), "distance")
    builder.minimize(dist + penalty_terms(b, point) * (1.0 / mu))
    return Relaxation(program=builder.build(), b=b, penalty_point=point, mu=mu)


def round_binary(
    instance: InstanceData,
    b_relaxed: np.ndarray,
    mu: float = 1e-2,
    tol: float = 1e-4,
    fixings: NodeFixings | None = None,
    settings: SolverSettings | None = None,
    max_iter: int = 100,
) -> Rounding:
    """Nearby feasible binary placement for a relaxed B, or no placement."""
    target = np.clip(np.asarray(b_relaxed, dtype=float), 0.0, 1.0)
    direct = threshold(target)
    if direct is not None and is_binary(target) and check_feasible(instance, direct).feasible:
        return Rounding(b=direct, iterations=1, mu=mu)
    if fixings is not None and fixings.is_complete:
        b = fixings.matrix()
        return Rounding(b=b if check_feasible(instance, b).feasible else None, mu=mu)

    def build(point: np.ndarray, mu_now: float) -> Relaxation:
        return build_rounding(instance, target, point, mu_now, fixings)

    run = penalty_sca(build, target, mu, tol, max_iter, settings)
    candidate = None if run.b is None else threshold(run.b)
    if candidate is None or not check_feasible(instance, candidate).feasible:
        logger.debug("rounding produced no feasible placement after %d iterations", run.iterations)
        return Rounding(iterations=run.iterations, mu=run.mu)
    return Rounding(b=candidate, iterations=run.iterations, mu=run.mu)


def run_sca(
    instance: InstanceData,
    build: Callable[[NodeFixings, np.ndarray, float], Relaxation],
    finish: Callable[[np.ndarray], DesignSolution],
    b_init: np.ndarray | None = None,
    mu: float = 1e-2,
    tol: float = 1e-4,
    settings: SolverSettings | None = None,
    max_iter: int = 100,
    label: str = "sca",
) -> DesignSolution:
    """Drive the penalized iterations, quantize B and hand it to `finish`.

    Starts from `b_init` when given, otherwise from the relaxed point that spreads
    each element uniformly over the positions it can reach; the linearized penalty
    is constant there, so the first iterate is the plain relaxation. The converged B is
    thresholded (rounded when that fails) before the fixed-placement solve.
    """
    started = time.perf_counter()
    try:
        ensure_placeable(instance)
    except StructuralInfeasibleError as e:
        return DesignSolution.infeasible(metadata={"reason": str(e)})
    fixings = NodeFixings.root(instance)
    start = fixings.relaxed_start() if b_init is None else np.asarray(b_init, dtype=float)

    run = penalty_sca(lambda point, mu_now: build(fixings, point, mu_now), start, mu, tol, max_iter, settings)
    if run.failed and run.last is None:
        return DesignSolution.infeasible(
            iterations=run.iterations, wall_s=time.perf_counter() - started
        )
    b = threshold(run.b)
    if b is None or not check_feasible(instance, b).feasible:
        b = round_binary(instance, run.b, mu, tol, fixings, settings).b
    if b is None:
        return DesignSolution.infeasible(
            iterations=run.iterations,
            wall_s=time.perf_counter() - started,
            objective_trace=run.objective_trace,
        )
    design = finish(b)
    design.iterations = run.iterations
    design.objective_trace = run.objective_trace
    design.wall_s = time.perf_counter() - started
    design.metadata["mu"] = run.mu
    design.metadata["mu_trace"] = run.mu_trace
    logger.info(
        "%s: %s after %d iterations, P=%.6g W",
        label, design.status.value, run.iterations, design.avg_power,
    )
    return design


def sca_optimize(
    instance: InstanceData,
    b_init: np.ndarray | None = None,
    mu: float = 1e-2,
    tol: float = 1e-4,
    settings: SolverSettings | None = None,
    max_iter: int = 100,
    with_coupling: bool = False,
) -> DesignSolution:
    """Penalty-SCA joint design for perfect CSI."""

    def build(fixings: NodeFixings, point: np.ndarray, mu_now: float) -> Relaxation:
        return build_relaxation(
            instance, fixings, penalty_point=point, mu=mu_now, coupling=with_coupling
        )

    return run_sca(
        instance,
        build,
        lambda b: solve_fixed_B(instance, b, with_coupling, settings),
        b_init, mu, tol, settings, max_iter,
    )


# Oracles for the tree search


class PerfectOracles:
    """Bounding and rounding callbacks the tree search drives for perfect CSI."""

    label = "perfect"

    def __init__(
        self,
        instance: InstanceData,
        settings: SolverSettings | None = None,
        mu: float = 1e-2,
        sca_tol: float = 1e-4,
        coupling: bool = False,
        objective: ObjectiveKind = ObjectiveKind.AVERAGE_POWER,
    ):
        self.instance = instance
        self.settings = settings or SolverSettings()
        self.mu = mu
        self.sca_tol = sca_tol
        self.coupling = coupling
        self.objective = objective

    def root(self) -> NodeFixings:
        return NodeFixings.root(self.instance)

    def relax(self, fixings: NodeFixings, settings: SolverSettings | None = None) -> RelaxedPoint:
        relaxation = build_relaxation(
            self.instance, fixings, objective=self.objective, coupling=self.coupling
        )
        return solve_relaxation(relaxation, settings or self.settings)

    def fixed(self, b: np.ndarray) -> DesignSolution:
        design = solve_fixed_B(self.instance, b, self.coupling, self.settings)
        if design.found and self.objective == ObjectiveKind.RADIATED_POWER:
            design.metadata["search_objective"] = design.radiated_power
        return design

    def score(self, design: DesignSolution) -> float:
        """Value of a design under the search objective."""
        if self.objective == ObjectiveKind.RADIATED_POWER:
            return design.radiated_power
        return design.avg_power

    def upper(self, fixings: NodeFixings, point: RelaxedPoint) -> DesignSolution | None:
        if fixings.is_complete:
            return self.fixed(fixings.matrix())
        rounded = round_binary(
            self.instance, point.b, self.mu, self.sca_tol, fixings, self.settings
        )
        if not rounded.found:
            return None
        return self.fixed(rounded.b)
