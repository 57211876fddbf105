"""Pydantic models for system configuration, scenarios and experiment records."""

import json
import math
from enum import Enum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ConeKind(str, Enum):
    ZERO = "zero"
    NONNEG = "nonneg"
    SOC = "soc"
    PSD = "psd"


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    INACCURATE = "inaccurate"  # iteration limit hit with residuals below accept_tol
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"
    MAX_ITER = "max_iter"

    @property
    def usable(self) -> bool:
        return self in (SolveStatus.OPTIMAL, SolveStatus.INACCURATE)


class DesignStatus(str, Enum):
    OPTIMAL = "optimal"
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    TOL_REACHED = "tol-reached"


class NodeState(str, Enum):
    EXTERNAL = "external"
    INTERNAL = "internal"
    DISCARDED = "discarded"


class ObjectiveKind(str, Enum):
    AVERAGE_POWER = "average-power"
    RADIATED_POWER = "radiated-power"


class PerturbMode(str, Enum):
    BALL = "ball"
    SPHERE = "sphere"


class CsiMode(str, Enum):
    PERFECT = "perfect"
    IMPERFECT = "imperfect"


class Scheme(str, Enum):
    BNB = "bnb"
    SCA = "sca"
    RANDOM = "random"
    ANTENNA_SELECTION = "as"
    AO = "ao"
    IGNORE_MOTION = "ignore-motion"
    EXHAUSTIVE = "es"
    MC_OPTIMAL = "mc-optimal"
    MC_BLIND = "mc-blind"

    @property
    def fixed_position(self) -> bool:
        """Schemes whose antennas stay put for the whole frame."""
        return self == Scheme.ANTENNA_SELECTION


class SweepAxis(str, Enum):
    GAMMA_DB = "gamma_db"
    AREA_SCALE = "area_scale"
    N_ELEMENTS = "n_elements"
    T_MA = "t_ma_s"
    KAPPA = "kappa"
    STEP = "step_mm"

    @property
    def changes_geometry(self) -> bool:
        return self in (SweepAxis.AREA_SCALE, SweepAxis.N_ELEMENTS, SweepAxis.STEP)


# Unit conversions


def db_to_linear(value_db: float) -> float:
    return 10.0 ** (value_db / 10.0)


def linear_to_db(value: float) -> float:
    """10·log10, with -inf for zero and nan for negative input."""
    if value > 0:
        return 10.0 * math.log10(value)
    if value == 0:
        return float("-inf")
    return float("nan")


def dbm_to_watts(value_dbm: float) -> float:
    return 10.0 ** ((value_dbm - 30.0) / 10.0)


class SystemConfig(BaseModel):
    """Physical parameters of one instance: users, QoS, drivers and frame timing."""

    model_config = ConfigDict(frozen=True)

    n_elements: int = Field(ge=1)
    n_users: int = Field(ge=1)
    noise_power_w: list[float]
    sinr_target: list[float]
    min_distance_mm: float = Field(default=15.0, ge=0)
    speed_h_mm_per_ms: float = Field(default=0.94, gt=0)
    speed_v_mm_per_ms: float = Field(default=0.94, gt=0)
    driver_power_h_w: float = Field(default=8.0, gt=0)
    driver_power_v_w: float = Field(default=8.0, gt=0)
    t_ma_s: float = Field(default=0.03, gt=0)
    t_data_s: float = Field(default=0.27, gt=0)
    kappa: float = Field(default=0.0, ge=0)
    coupling: bool = False
    alpha_mc: float = Field(default=0.75, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _broadcast_per_user(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        k = data.get("n_users", 1)
        for name in ("noise_power_w", "sinr_target"):
            value = data.get(name)
            if isinstance(value, int | float):
                data[name] = [float(value)] * k
            elif isinstance(value, list | tuple) and len(value) == 1:
                data[name] = list(value) * k
        return data

    @field_validator("noise_power_w", "sinr_target")
    @classmethod
    def _positive(cls, v: list[float]) -> list[float]:
        if any(x <= 0 for x in v):
            raise ValueError("per-user noise powers and SINR targets must be positive")
        return v

    @model_validator(mode="after")
    def _per_user_lengths(self):
        for name in ("noise_power_w", "sinr_target"):
            if len(getattr(self, name)) != self.n_users:
                raise ValueError(f"{name} needs 1 or {self.n_users} entries")
        return self

    @property
    def noise_powers(self) -> np.ndarray:
        return np.asarray(self.noise_power_w, dtype=float)

    @property
    def sinr_targets(self) -> np.ndarray:
        return np.asarray(self.sinr_target, dtype=float)

    @property
    def frame_s(self) -> float:
        return self.t_ma_s + self.t_data_s

    @property
    def max_move_h_mm(self) -> float:
        # mm/ms × s → mm
        return self.speed_h_mm_per_ms * self.t_ma_s * 1000.0

    @property
    def max_move_v_mm(self) -> float:
        return self.speed_v_mm_per_ms * self.t_ma_s * 1000.0


# Scenario configuration


class GridConfig(BaseModel):
    area_scale: float = Field(default=2.0, gt=0)
    step_mm: float = Field(default=2.0, gt=0)
    wavelength_mm: float = Field(default=60.0, gt=0)


class ChannelConfig(BaseModel):
    n_paths: int = Field(default=16, ge=1)
    pathloss_exponent: float = Field(default=2.2, gt=0)
    reference_pathloss: float | None = None  # None: free space at 1 m
    distance_min_m: float = Field(default=20.0, gt=0)
    distance_max_m: float = Field(default=80.0, gt=0)
    normalize_paths: bool = False

    @model_validator(mode="after")
    def _check_range(self):
        if self.distance_max_m < self.distance_min_m:
            raise ValueError("distance_max_m must be >= distance_min_m")
        return self


class SweepSpec(BaseModel):
    axis: SweepAxis | None = None
    values: list[float] = Field(default_factory=list)


class SeedSpec(BaseModel):
    count: int = Field(default=200, ge=1)
    base: int = Field(default=0, ge=0)


class ToleranceConfig(BaseModel):
    bnb_gap: float = Field(default=1e-4, gt=0)
    bnb_relative: bool = False
    node_budget: int = Field(default=100_000, ge=1)
    sca_tol: float = Field(default=1e-4, gt=0)
    penalty_mu: float = Field(default=1e-2, gt=0)
    enumeration_budget: int = Field(default=10_000, ge=1)
    solver_tol_abs: float = Field(default=1e-8, gt=0)
    solver_tol_rel: float = Field(default=1e-8, gt=0)
    solver_max_iter: int = Field(default=200, ge=1)


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for key, value in top.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


class ScenarioConfig(BaseModel):
    """One Monte Carlo scenario. Defaults follow the full-scale simulation setup."""

    scenario_id: str = "default"
    n_elements: int = Field(default=4, ge=1)
    n_users: int = Field(default=4, ge=1)
    gamma_db: float = 5.0
    noise_dbm: float = -80.0
    min_distance_mm: float = Field(default=15.0, ge=0)
    speed_mm_per_ms: float = Field(default=0.94, gt=0)
    driver_power_w: float = Field(default=8.0, gt=0)
    t_ma_s: float = Field(default=0.03, gt=0)
    t_data_s: float = Field(default=0.27, gt=0)
    kappa: float = Field(default=0.0, ge=0)
    csi: CsiMode = CsiMode.PERFECT
    coupling: bool = False
    alpha_mc: float = Field(default=0.75, gt=0)
    compensate_rate: bool = False
    grid: GridConfig = Field(default_factory=GridConfig)
    channel: ChannelConfig = Field(default_factory=ChannelConfig)
    schemes: list[Scheme] = Field(default_factory=lambda: [Scheme.BNB])
    sweep: SweepSpec = Field(default_factory=SweepSpec)
    seeds: SeedSpec = Field(default_factory=SeedSpec)
    tolerances: ToleranceConfig = Field(default_factory=ToleranceConfig)
    workers: int = Field(default=1, ge=1)

    @classmethod
    def load(cls, path: Path | None = None, overrides: dict | None = None) -> "ScenarioConfig":
        """Scenario from flag overrides with a JSON file, when given, applied on top."""
        data = dict(overrides or {})
        if path is not None:
            data = _merge(data, json.loads(Path(path).read_text(encoding="utf-8")))
        return cls.model_validate(data)

    @property
    def sweep_points(self) -> list[float | None]:
        if self.sweep.axis is None or not self.sweep.values:
            return [None]
        return list(self.sweep.values)

    def at_sweep_value(self, value: float | None) -> "ScenarioConfig":
        """Copy of this scenario with the sweep axis pinned to `value`."""
        axis = self.sweep.axis
        if axis is None or value is None:
            return self
        if axis == SweepAxis.AREA_SCALE:
            return self.model_copy(update={"grid": self.grid.model_copy(update={"area_scale": value})})
        if axis == SweepAxis.STEP:
            return self.model_copy(update={"grid": self.grid.model_copy(update={"step_mm": value})})
        if axis == SweepAxis.N_ELEMENTS:
            return self.model_copy(update={"n_elements": int(round(value))})
        return self.model_copy(update={axis.value: value})

    def system_config(self, sinr_target: float | None = None) -> SystemConfig:
        """SystemConfig for one trial; `sinr_target` overrides the linear γ (rate compensation)."""
        gamma = db_to_linear(self.gamma_db) if sinr_target is None else sinr_target
        return SystemConfig(
            n_elements=self.n_elements,
            n_users=self.n_users,
            noise_power_w=dbm_to_watts(self.noise_dbm),
            sinr_target=gamma,
            min_distance_mm=self.min_distance_mm,
            speed_h_mm_per_ms=self.speed_mm_per_ms,
            speed_v_mm_per_ms=self.speed_mm_per_ms,
            driver_power_h_w=self.driver_power_w,
            driver_power_v_w=self.driver_power_w,
            t_ma_s=self.t_ma_s,
            t_data_s=self.t_data_s,
            kappa=self.kappa if self.csi == CsiMode.IMPERFECT else 0.0,
            coupling=self.coupling,
            alpha_mc=self.alpha_mc,
        )


# Records


class ExperimentRecord(BaseModel):
    """One (scheme, seed, sweep point) outcome; CSV columns follow field order."""

    scenario_id: str
    sweep_index: int
    sweep_value: float | None = None
    seed: int
    scheme: Scheme
    status: DesignStatus
    avg_power_w: float | None = None
    avg_power_db: float | None = None
    radiated_power_w: float | None = None
    radiated_power_db: float | None = None
    motion_energy_j: float | None = None
    min_sinr_margin_db: float | None = None
    worst_case_margin: float | None = None
    energy_efficiency: float | None = None
    iterations: int = 0
    nodes: int = 0
    wall_s: float = 0.0
    gap: float | None = None
    verified: bool = False
    error: str | None = None

    @property
    def sort_key(self) -> tuple:
        return (self.scenario_id, self.sweep_index, self.seed, self.scheme.value)
