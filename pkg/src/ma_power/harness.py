"""Monte Carlo harness: seeded trials, scheme dispatch, verification and metrics."""

import hashlib
import logging
import math
import time
from collections.abc import Callable
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .baselines import (
    alternating_optimization,
    antenna_selection,
    exhaustive_search,
    ignore_motion_power,
    mc_blind,
    mc_optimal,
    random_positions,
    upa_instance,
)
from .bnb import BnbTrace, optimize
from .channel import build_grid, free_space_pathloss, realize_channel, sample_paths
from .conic import SolverSettings
from .errors import InvalidInputError, MaPowerError
from .instance import (
    DesignSolution,
    InstanceData,
    average_power,
    build_instance,
    check_feasible,
    radiated_power,
    selection_matrix,
    sinr,
    worst_case_margin,
)
from .models import (
    CsiMode,
    DesignStatus,
    ExperimentRecord,
    ScenarioConfig,
    Scheme,
    SystemConfig,
    db_to_linear,
    linear_to_db,
)
from .perfect import sca_optimize
from .robust import MARGIN_TOL, sca_optimize_robust

logger = logging.getLogger(__name__)

POWER_RTOL = 1e-9
COUPLED_SCHEMES = (Scheme.MC_OPTIMAL, Scheme.MC_BLIND)


# Seeding


def substream(*parts) -> np.random.Generator:
    """Counter-based generator keyed by a hash of `parts`; identical across processes."""
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


def _sweep_key(config: ScenarioConfig, sweep_index: int) -> int:
    """Channels are shared across sweep points that leave the geometry unchanged."""
    axis = config.sweep.axis
    return sweep_index if axis is not None and axis.changes_geometry else 0


# Rate compensation and efficiency


def compensated_gamma(gamma: float, t_ma_s: float, t_data_s: float) -> float:
    """SINR target that keeps the frame-average rate when T_MA carries no data."""
    if gamma < 0 or t_ma_s < 0 or t_data_s <= 0:
        raise InvalidInputError("gamma and T_MA must be >= 0 and T_Data > 0")
    return (1.0 + gamma) ** ((t_data_s + t_ma_s) / t_data_s) - 1.0


def energy_efficiency(
    design: DesignSolution, targets: np.ndarray, config: SystemConfig, fixed_position: bool
) -> float | None:
    """Sum rate at the SINR targets per unit power (bits/J/Hz); None at zero power."""
    if not design.found:
        return None
    rate = float(np.sum(np.log2(1.0 + np.asarray(targets, dtype=float))))
    if fixed_position:
        power = design.radiated_power
        return rate / power if power > 0 else None
    if design.avg_power <= 0:
        return None
    return config.t_data_s * rate / (design.avg_power * config.frame_s)


# Trials


def sinr_target_for(config: ScenarioConfig, scheme: Scheme) -> float:
    gamma = db_to_linear(config.gamma_db)
    if config.compensate_rate and not scheme.fixed_position:
        return compensated_gamma(gamma, config.t_ma_s, config.t_data_s)
    return gamma


def build_trial(
    config: ScenarioConfig,
    sweep_index: int,
    seed: int,
    sinr_target: float | None = None,
) -> InstanceData:
    """Seeded instance for one (sweep point, seed); `config` is the unpinned scenario."""
    pinned = config.at_sweep_value(config.sweep_points[sweep_index])
    system = pinned.system_config(sinr_target)
    key = (config.scenario_id, seed, _sweep_key(config, sweep_index))
    grid = build_grid(pinned.grid.area_scale, pinned.grid.step_mm, pinned.grid.wavelength_mm)
    ch = pinned.channel
    pathloss = (
        free_space_pathloss(pinned.grid.wavelength_mm)
        if ch.reference_pathloss is None
        else ch.reference_pathloss
    )
    user_rngs = [substream("user", *key, k) for k in range(system.n_users)]
    distances = [g.uniform(ch.distance_min_m, ch.distance_max_m) for g in user_rngs]
    paths = sample_paths(
        system.n_users, ch.n_paths, distances, pathloss, ch.pathloss_exponent, user_rngs,
        normalize=ch.normalize_paths,
    )
    channels = [realize_channel(p, grid, system.kappa) for p in paths]
    return build_instance(grid, channels, system, rng=substream("initial", *key, system.n_elements))


class Verification(BaseModel):
    verified: bool
    min_sinr_margin_db: float | None = None
    worst_case_margin: float | None = None
    violations: list[str] = Field(default_factory=list)


def verify_design(
    scheme: Scheme, instance: InstanceData, design: DesignSolution
) -> Verification:
    """Re-check a design against the independent geometry, SINR and power oracles."""
    if not design.found or design.beamformers is None:
        return Verification(verified=False, violations=["no design"])
    b = design.b
    beams = design.beamformers
    target = instance
    violations: list[str] = []
    if scheme.fixed_position:
        target = upa_instance(instance)
        expected_power = radiated_power(beams)
    else:
        violations += check_feasible(instance, b).violations
        expected_power = average_power(b, beams, instance)

    coupled = scheme in COUPLED_SCHEMES
    values = sinr(target, b, beams, with_coupling=coupled)
    gammas = target.config.sinr_targets
    with np.errstate(divide="ignore"):
        margins_db = 10.0 * np.log10(values / gammas)
    if coupled:
        worst = float(np.min(values / gammas - 1.0))
    else:
        worst = min(
            worst_case_margin(target, b, beams, k, normalized=True) for k in range(target.n_users)
        )
    if worst < MARGIN_TOL:
        violations.append(f"sinr: worst margin {worst:.3g}")
    if not math.isclose(expected_power, design.avg_power, rel_tol=POWER_RTOL, abs_tol=1e-15):
        violations.append(f"power: reported {design.avg_power:.9g}, recomputed {expected_power:.9g}")
    return Verification(
        verified=not violations,
        min_sinr_margin_db=float(np.min(margins_db)),
        worst_case_margin=worst,
        violations=violations,
    )


# Scheme dispatch


def run_scheme(
    scheme: Scheme,
    instance: InstanceData,
    config: ScenarioConfig,
    rng: np.random.Generator | None = None,
) -> DesignSolution:
    robust = config.csi == CsiMode.IMPERFECT
    tol = config.tolerances
    settings = SolverSettings.from_tolerances(tol)
    if scheme in COUPLED_SCHEMES and robust:
        raise InvalidInputError("mutual coupling is only modelled for perfect CSI")
    match scheme:
        case Scheme.BNB:
            return optimize(instance, robust, tol).design
        case Scheme.SCA:
            if robust:
                return sca_optimize_robust(instance, mu=tol.penalty_mu, tol=tol.sca_tol, settings=settings)
            return sca_optimize(instance, mu=tol.penalty_mu, tol=tol.sca_tol, settings=settings)
        case Scheme.RANDOM:
            if rng is None:
                raise InvalidInputError("random placement needs a generator")
            return random_positions(instance, rng, robust, tol)
        case Scheme.ANTENNA_SELECTION:
            return antenna_selection(instance, robust, tol)
        case Scheme.AO:
            return alternating_optimization(instance, robust, tol)
        case Scheme.IGNORE_MOTION:
            return ignore_motion_power(instance, robust, tol)
        case Scheme.EXHAUSTIVE:
            return exhaustive_search(instance, robust, tol)
        case Scheme.MC_OPTIMAL:
            return mc_optimal(instance, tol).design
        case Scheme.MC_BLIND:
            return mc_blind(instance, tol)
    raise InvalidInputError(f"unknown scheme {scheme}")


class DesignEntry(BaseModel):
    """Placement and beamformers of one record, enough to re-verify it."""

    sweep_index: int
    seed: int
    scheme: Scheme
    positions: list[int]
    n_rows: int
    beam_re: list
    beam_im: list

    @classmethod
    def from_design(cls, sweep_index: int, seed: int, scheme: Scheme, design: DesignSolution) -> "DesignEntry":
        beams = np.asarray(design.beamformers)
        return cls(
            sweep_index=sweep_index,
            seed=seed,
            scheme=scheme,
            positions=[int(p) for p in design.positions],
            n_rows=int(design.b.shape[0]),
            beam_re=beams.real.tolist(),
            beam_im=beams.imag.tolist(),
        )

    def to_design(self, instance: InstanceData) -> DesignSolution:
        """Rebuild the design with its power breakdown recomputed on `instance`."""
        b = selection_matrix(self.positions, self.n_rows)
        beams = np.asarray(self.beam_re) + 1j * np.asarray(self.beam_im)
        w, lifted = (None, beams) if beams.ndim == 3 else (beams, None)
        if self.scheme.fixed_position:
            design = DesignSolution.from_design(upa_instance(instance), b, w, DesignStatus.FEASIBLE, w_lifted=lifted)
            design.motion_energy = 0.0
            design.avg_power = design.radiated_power
            return design
        return DesignSolution.from_design(instance, b, w, DesignStatus.FEASIBLE, w_lifted=lifted)


class PointOutcome(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    record: ExperimentRecord
    entry: DesignEntry | None = None
    design: DesignSolution | None = None


def _db(value: float | None) -> float | None:
    return None if value is None or not math.isfinite(value) else linear_to_db(value)


def evaluate(
    config: ScenarioConfig, sweep_index: int, seed: int, scheme: Scheme
) -> PointOutcome:
    """Run and verify one scheme on one seeded instance; failures land in the record."""
    value = config.sweep_points[sweep_index]
    base = {
        "scenario_id": config.scenario_id,
        "sweep_index": sweep_index,
        "sweep_value": value,
        "seed": seed,
        "scheme": scheme,
    }
    started = time.perf_counter()
    try:
        gamma = sinr_target_for(config.at_sweep_value(value), scheme)
        instance = build_trial(config, sweep_index, seed, gamma)
        rng = substream("scheme", config.scenario_id, seed, sweep_index, scheme.value)
        design = run_scheme(scheme, instance, config.at_sweep_value(value), rng)
    except MaPowerError as e:
        logger.warning("%s seed %d point %d: %s", scheme.value, seed, sweep_index, e)
        record = ExperimentRecord(
            **base, status=DesignStatus.INFEASIBLE, error=str(e), wall_s=time.perf_counter() - started
        )
        return PointOutcome(record=record)

    check = verify_design(scheme, instance, design) if design.found else None
    fields = {
        "status": design.status,
        "iterations": design.iterations,
        "nodes": design.nodes,
        "wall_s": design.wall_s or time.perf_counter() - started,
        "gap": design.gap,
    }
    if design.found:
        fields.update(
            avg_power_w=design.avg_power,
            avg_power_db=_db(design.avg_power),
            radiated_power_w=design.radiated_power,
            radiated_power_db=_db(design.radiated_power),
            motion_energy_j=design.motion_energy,
            min_sinr_margin_db=check.min_sinr_margin_db,
            worst_case_margin=check.worst_case_margin,
            energy_efficiency=energy_efficiency(
                design, instance.config.sinr_targets, instance.config, scheme.fixed_position
            ),
            verified=check.verified,
            error="; ".join(check.violations) or None,
        )
    record = ExperimentRecord(**base, **fields)
    entry = DesignEntry.from_design(sweep_index, seed, scheme, design) if design.found else None
    return PointOutcome(record=record, entry=entry, design=design)


def _run_point(config: ScenarioConfig, sweep_index: int, seed: int) -> list[PointOutcome]:
    outcomes = []
    for scheme in config.schemes:
        outcome = evaluate(config, sweep_index, seed, scheme)
        outcome.design = None
        outcomes.append(outcome)
    return outcomes


class ExperimentResult(BaseModel):
    """Records of one scenario with the config echo and the designs behind them."""

    config: ScenarioConfig
    records: list[ExperimentRecord] = Field(default_factory=list)
    designs: list[DesignEntry] = Field(default_factory=list)


def run_experiment(
    config: ScenarioConfig,
    workers: int | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> ExperimentResult:
    """Every scheme on every (sweep point, seed); rows sorted canonically."""
    workers = workers or config.workers
    tasks = [
        (sweep_index, config.seeds.base + i)
        for sweep_index in range(len(config.sweep_points))
        for i in range(config.seeds.count)
    ]
    outcomes: list[PointOutcome] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_point, config, s, seed) for s, seed in tasks]
            for done, future in enumerate(futures, start=1):
                outcomes.extend(future.result())
                if progress:
                    progress(done, len(tasks))
    else:
        for done, (s, seed) in enumerate(tasks, start=1):
            outcomes.extend(_run_point(config, s, seed))
            if progress:
                progress(done, len(tasks))
    outcomes.sort(key=lambda o: o.record.sort_key)
    logger.info("scenario %s: %d records", config.scenario_id, len(outcomes))
    return ExperimentResult(
        config=config,
        records=[o.record for o in outcomes],
        designs=[o.entry for o in outcomes if o.entry is not None],
    )


def summarize(result: ExperimentResult) -> list[dict]:
    """Mean power and success counts per (sweep value, scheme)."""
    groups: dict[tuple, list[ExperimentRecord]] = {}
    for r in result.records:
        groups.setdefault((r.sweep_index, r.sweep_value, r.scheme.value), []).append(r)
    rows = []
    for (index, value, scheme), records in sorted(groups.items(), key=lambda kv: kv[0][:1] + kv[0][2:]):
        powers = [r.avg_power_w for r in records if r.avg_power_w is not None]
        mean = float(np.mean(powers)) if powers else None
        rows.append(
            {
                "sweep_index": index,
                "sweep_value": value,
                "scheme": scheme,
                "records": len(records),
                "solved": len(powers),
                "verified": sum(r.verified for r in records),
                "mean_avg_power_w": mean,
                "mean_avg_power_db": _db(mean),
            }
        )
    return rows


def trace_run(
    config: ScenarioConfig, seed: int, sweep_index: int = 0, scheme: Scheme = Scheme.BNB
) -> list[dict]:
    """Convergence rows: BnB bounds per iteration, or the SCA objective sequence."""
    value = config.sweep_points[sweep_index]
    pinned = config.at_sweep_value(value)
    instance = build_trial(config, sweep_index, seed, sinr_target_for(pinned, scheme))
    robust = pinned.csi == CsiMode.IMPERFECT
    if scheme == Scheme.BNB:
        trace: BnbTrace = optimize(instance, robust, pinned.tolerances).trace
        return trace.rows()
    if scheme == Scheme.SCA:
        design = run_scheme(scheme, instance, pinned)
        mus = design.metadata.get("mu_trace", [None] * len(design.objective_trace))
        return [
            {"iteration": i, "objective": v, "mu": mu}
            for i, (v, mu) in enumerate(zip(design.objective_trace, mus, strict=True))
        ]
    raise InvalidInputError("traces exist for bnb and sca only")
