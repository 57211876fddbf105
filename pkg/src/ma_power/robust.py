"""Imperfect-CSI formulations: S-lemma LMIs, lifted relaxations, rank-one extraction and robust SCA."""

import logging
import math
from collections.abc import Sequence
from typing import Any

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict
from scipy.optimize import minimize_scalar

from .conic import Affine, ComplexAffine, ProgramBuilder, SolverSettings, concat
from .instance import (
    DesignSolution,
    InstanceData,
    check_feasible,
    worst_case_margin,
)
from .models import DesignStatus, ObjectiveKind, SolveStatus
from .perfect import (
    NodeFixings,
    Relaxation,
    RelaxedPoint,
    add_geometry,
    add_lift,
    objective_expression,
    placement_expression,
    penalty_terms,
    round_binary,
    run_sca,
    solve_relaxation,
    solve_with_retry,
)

logger = logging.getLogger(__name__)

RANK_ONE_TOL = 1e-6
MARGIN_TOL = -1e-6  # noise units


class RobustBlocks(BaseModel):
    """Per-user data of the S-lemma constraints in normalized units.

    frames[k] is G̃_k = [s_k·G_kᴴ, ĥ_k]·√p_ref/σ_k with s_k = ‖ψ̄_k‖, so the
    error ball becomes ‖δ‖ ≤ κ_k = ε_k/s_k and the LMI reads
    blkdiag(q I, −q κ_k² − γ_k) − G̃_kᴴ X̃_k G̃_k ⪰ 0.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    frames: list[np.ndarray]  # (rows, L_k + 1) each
    kappa: np.ndarray
    gamma: np.ndarray
    power_unit: float

    @classmethod
    def from_channels(
        cls,
        frms: Sequence[np.ndarray],
        pcvs: Sequence[np.ndarray],
        radii: Sequence[float],
        noise: np.ndarray,
        gamma: np.ndarray,
        power_unit: float,
    ) -> "RobustBlocks":
        frames, kappa = [], []
        for k, (g, psi) in enumerate(zip(frms, pcvs, strict=True)):
            g = np.asarray(g, dtype=complex)
            psi = np.asarray(psi, dtype=complex).ravel()
            s = float(np.linalg.norm(psi))
            scale = math.sqrt(power_unit / noise[k])
            frames.append(np.column_stack([s * g.conj().T, g.conj().T @ psi]) * scale)
            kappa.append(radii[k] / s if s > 0 else 0.0)
        return cls(
            frames=frames,
            kappa=np.asarray(kappa),
            gamma=np.asarray(gamma, dtype=float),
            power_unit=power_unit,
        )

    @classmethod
    def from_instance(cls, instance: InstanceData) -> "RobustBlocks":
        cfg = instance.config
        return cls.from_channels(
            [ch.frm for ch in instance.channels],
            [ch.nominal_pcv for ch in instance.channels],
            [ch.error_radius for ch in instance.channels],
            cfg.noise_powers,
            cfg.sinr_targets,
            instance.power_unit,
        )

    @property
    def n_users(self) -> int:
        return len(self.frames)

    def restricted(self, b: np.ndarray) -> "RobustBlocks":
        """Frames seen through a fixed placement: Bᵀ G̃_k."""
        b = np.asarray(b, dtype=float)
        return self.model_copy(update={"frames": [b.T @ f for f in self.frames]})

    def interference(self, lifted: Sequence[Any], k: int) -> Any:
        """X̃_k = γ_k Σ_{k′≠k} X_k′ − X_k for expressions or arrays."""
        total = None
        for j, x in enumerate(lifted):
            if j == k:
                continue
            total = x if total is None else total + x
        own = lifted[k]
        return -own if total is None else total * self.gamma[k] - own

    def lmi_value(self, interference: np.ndarray, k: int, q: float) -> np.ndarray:
        """Numeric LMI matrix for a normalized interference matrix."""
        g = self.frames[k]
        n_paths = g.shape[1] - 1
        corner = np.zeros((n_paths + 1, n_paths + 1))
        corner[np.arange(n_paths), np.arange(n_paths)] = q
        corner[-1, -1] = -q * self.kappa[k] ** 2 - self.gamma[k]
        mat = corner - g.conj().T @ interference @ g
        return (mat + mat.conj().T) / 2.0

    def best_multiplier(self, interference: np.ndarray, k: int) -> tuple[float, float]:
        """Multiplier q ≥ 0 maximizing λ_min of the LMI, and that λ_min."""

        def neg_min_eig(q: float) -> float:
            return -float(scipy.linalg.eigvalsh(self.lmi_value(interference, k, q))[0])

        g = self.frames[k]
        size = float(np.linalg.norm(g.conj().T @ interference @ g, 2))
        if self.kappa[k] == 0:
            hi = 10.0 * (size + self.gamma[k] + 1.0)
        else:
            hi = 10.0 * (size + self.gamma[k] + 1.0) / min(self.kappa[k] ** 2, 1.0)
        res = minimize_scalar(neg_min_eig, bounds=(0.0, hi), method="bounded",
                              options={"xatol": 1e-10 * max(1.0, hi)})
        return float(res.x), -float(res.fun)


def normalized_lifted(instance: InstanceData, b: np.ndarray, w: np.ndarray) -> np.ndarray:
    """B W_k Bᵀ / p_ref for vectors (M, K) or lifted (K, M, M) beamformers."""
    w = np.asarray(w)
    mats = w if w.ndim == 3 else np.einsum("mk,nk->kmn", w, w.conj())
    b = np.asarray(b, dtype=float)
    return np.einsum("nm,kmp,qp->knq", b, mats, b) / instance.power_unit


def slemma_feasible(instance: InstanceData, b: np.ndarray, w: np.ndarray, k: int, tol: float = 0.0) -> bool:
    """Whether some q ≥ 0 makes the LMI of user k PSD (up to `tol`)."""
    blocks = RobustBlocks.from_instance(instance)
    lifted = normalized_lifted(instance, b, w)
    _, lam = blocks.best_multiplier(blocks.interference(list(lifted), k), k)
    return lam >= -tol


def build_slemma_constraint(
    builder: ProgramBuilder,
    blocks: RobustBlocks,
    k: int,
    interference: ComplexAffine,
) -> Affine | None:
    """Robust SINR of user k; returns the multiplier q_k (None when κ_k = 0).

    With κ_k = 0 the ball is a point and the nominal constraint
    ĥᴴX̃ĥ + γ ≤ 0 is added instead of the LMI.
    """
    g = blocks.frames[k]
    gamma = float(blocks.gamma[k])
    if blocks.kappa[k] == 0:
        h = g[:, -1]
        value = interference.lmul(h.conj()).rmul(h)
        builder.add_le(value.re, -gamma, f"robust-sinr-{k}")
        return None
    size = g.shape[1]
    q = builder.real(f"q{k}")
    builder.add_nonneg(q, f"multiplier-{k}")
    diag = np.zeros((size * size, 1))
    diag[np.arange(size - 1) * (size + 1), 0] = 1.0
    diag[-1, 0] = -blocks.kappa[k] ** 2
    corner = np.zeros((size, size))
    corner[-1, -1] = -gamma
    quad = interference.lmul(g.conj().T).rmul(g)
    quad = (quad + quad.H) * 0.5
    lmi = -quad + (q.reshape(1).lmul(diag).reshape(size, size) + corner)
    builder.add_hermitian_psd(lmi, f"slemma-{k}")
    return q


def build_robust_relaxation(
    instance: InstanceData,
    fixings: NodeFixings,
    objective: ObjectiveKind = ObjectiveKind.AVERAGE_POWER,
    penalty_point: np.ndarray | None = None,
    mu: float = 1e-2,
    fixed_b: np.ndarray | None = None,
    fixed_w: np.ndarray | None = None,
) -> Relaxation:
    """SDR of the robust joint problem with the two-stage lift X̂_k = B W_k Bᵀ.

    Per user: W_k ⪰ 0, Y_k = B W_k through one lift (order N + 2M) and
    X̂_k = B Y_kᴴ through another (order 2N + M), each with its trace bound.
    The rank-one requirement on W_k is dropped. `fixed_w` holds (K, M, M)
    matrices in watts constant.
    """
    n, m, k_users = instance.n_positions, instance.n_elements, instance.n_users
    blocks = RobustBlocks.from_instance(instance)
    builder = ProgramBuilder("robust-relaxation" if penalty_point is None else "robust-penalized")
    if fixed_b is not None:
        b = Affine.constant(np.asarray(fixed_b, dtype=float))
    else:
        b = placement_expression(builder, instance, fixings)
    add_geometry(builder, instance, b)

    beams: list[Any] = []
    if fixed_w is not None:
        const = np.asarray(fixed_w, dtype=complex) / instance.power_unit
        beams = [ComplexAffine.constant(c) for c in const]
        traces: Affine = Affine.constant(float(np.real(np.trace(const, axis1=1, axis2=2)).sum()))
    else:
        for k in range(k_users):
            w_k = builder.hermitian(f"w{k}", m)
            builder.add_hermitian_psd(w_k, f"beam-psd-{k}")
            beams.append(w_k)
        traces = concat([w.re.trace() for w in beams]).sum()

    lifted = []
    for k in range(k_users):
        y = builder.complex(f"y{k}", (n, m))
        x_hat = builder.hermitian(f"xhat{k}", n)
        add_lift(builder, b, beams[k], y, tag=f"beam-lift-{k}", name=f"_w{k}")
        add_lift(builder, b, y.H, x_hat, tag=f"cov-lift-{k}", name=f"_x{k}")
        lifted.append(x_hat)
    for k in range(k_users):
        build_slemma_constraint(builder, blocks, k, blocks.interference(lifted, k))

    obj = objective_expression(instance, b, traces, objective)
    if penalty_point is not None:
        obj = obj + penalty_terms(b, penalty_point) * (1.0 / mu)
    builder.minimize(obj)
    return Relaxation(
        program=builder.build(),
        b=b,
        w_lifted=beams if fixed_w is None else [np.asarray(c) for c in const],
        power_unit=instance.power_unit,
        penalty_point=None if penalty_point is None else np.asarray(penalty_point, dtype=float),
        mu=mu if penalty_point is not None else None,
    )


# Fixed placement


class RobustBeamformingResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    status: SolveStatus
    w_lifted: np.ndarray | None = None  # (K, M, M) watts
    power: float = float("inf")
    multipliers: list[float | None] = []
    iterations: int = 0

    @property
    def feasible(self) -> bool:
        return self.status.usable and self.w_lifted is not None


def solve_robust_beamforming(
    blocks: RobustBlocks, settings: SolverSettings | None = None
) -> RobustBeamformingResult:
    """Minimum Σ Tr W_k with W_k ⪰ 0 and the S-lemma constraints of every user.

    `blocks` must already be restricted to the selected antennas (frames with M
    rows); the result is in watts.
    """
    settings = settings or SolverSettings()
    m = blocks.frames[0].shape[0]
    builder = ProgramBuilder("robust-beamforming")
    beams = []
    for k in range(blocks.n_users):
        w_k = builder.hermitian(f"w{k}", m)
        builder.add_hermitian_psd(w_k, f"beam-psd-{k}")
        beams.append(w_k)
    qs = [
        build_slemma_constraint(builder, blocks, k, blocks.interference(beams, k))
        for k in range(blocks.n_users)
    ]
    builder.minimize(concat([w.re.trace() for w in beams]).sum())
    program = builder.build()
    result = solve_with_retry(program, settings)
    if not result.status.usable:
        return RobustBeamformingResult(status=result.status, iterations=result.iterations)
    mats = np.stack([w.evaluate(result.x) for w in beams]) * blocks.power_unit
    return RobustBeamformingResult(
        status=result.status,
        w_lifted=mats,
        power=float(np.real(np.trace(mats, axis1=1, axis2=2)).sum()),
        multipliers=[None if q is None else float(q.evaluate(result.x)) for q in qs],
        iterations=result.iterations,
    )


def extract_rank_one(w: np.ndarray) -> tuple[np.ndarray, float]:
    """Principal component √λ₁·u₁ of a PSD matrix and the ratio λ₂/λ₁."""
    w = np.asarray(w, dtype=complex)
    w = (w + w.conj().T) / 2.0
    lam, vec = scipy.linalg.eigh(w)
    top = float(lam[-1])
    if top <= 0:
        return np.zeros(w.shape[0], dtype=complex), 0.0
    second = float(lam[-2]) if len(lam) > 1 else 0.0
    return math.sqrt(top) * vec[:, -1], max(second, 0.0) / top


def finish_robust_design(
    instance: InstanceData,
    b: np.ndarray,
    w_lifted: np.ndarray,
    status: DesignStatus,
    **kwargs,
) -> DesignSolution:
    """Extract beamforming vectors, keeping the matrices when extraction is not robust-feasible."""
    vectors, residuals = zip(*(extract_rank_one(w) for w in w_lifted), strict=True)
    w = np.column_stack(vectors)
    residuals = [float(r) for r in residuals]
    if max(residuals) > RANK_ONE_TOL:
        margins = [
            worst_case_margin(instance, b, w, k, normalized=True) for k in range(instance.n_users)
        ]
        if min(margins) < MARGIN_TOL:
            logger.warning(
                "relaxation not tight (λ₂/λ₁ up to %.3g); keeping matrix beamformers", max(residuals)
            )
            return DesignSolution.from_design(
                instance, b, None, status, w_lifted=w_lifted,
                rank_one_residuals=residuals, tightness_warning=True, **kwargs,
            )
    return DesignSolution.from_design(
        instance, b, w, status, w_lifted=w_lifted, rank_one_residuals=residuals, **kwargs
    )


def solve_robust_fixed_B(
    instance: InstanceData,
    b: np.ndarray,
    lifted: bool = False,
    settings: SolverSettings | None = None,
) -> DesignSolution:
    """Robust beamformers for a fixed placement.

    The default substitutes X̂_k = B W_k Bᵀ directly; `lifted` solves the same
    problem through the lifted relaxation with B held constant.
    """
    report = check_feasible(instance, b)
    if not report.feasible:
        return DesignSolution.infeasible(metadata={"violations": report.violations})
    b = np.asarray(b, dtype=float)
    if lifted:
        relaxation = build_robust_relaxation(instance, NodeFixings.from_matrix(b), fixed_b=b)
        point = solve_relaxation(relaxation, settings)
        if not point.usable:
            return DesignSolution.infeasible(b=b, iterations=point.iterations)
        return finish_robust_design(
            instance, b, point.w_lifted, DesignStatus.FEASIBLE, iterations=point.iterations
        )
    blocks = RobustBlocks.from_instance(instance).restricted(b)
    res = solve_robust_beamforming(blocks, settings)
    if not res.feasible:
        return DesignSolution.infeasible(
            b=b, iterations=res.iterations, metadata={"solver_status": res.status.value}
        )
    return finish_robust_design(
        instance, b, res.w_lifted, DesignStatus.FEASIBLE,
        iterations=res.iterations, metadata={"multipliers": res.multipliers},
    )


def sca_optimize_robust(
    instance: InstanceData,
    b_init: np.ndarray | None = None,
    mu: float = 1e-2,
    tol: float = 1e-4,
    settings: SolverSettings | None = None,
    max_iter: int = 100,
) -> DesignSolution:
    """Penalty-SCA joint design under the norm-bounded CSI error model."""

    def build(fixings: NodeFixings, point: np.ndarray, mu_now: float) -> Relaxation:
        return build_robust_relaxation(instance, fixings, penalty_point=point, mu=mu_now)

    return run_sca(
        instance,
        build,
        lambda b: solve_robust_fixed_B(instance, b, settings=settings),
        b_init, mu, tol, settings, max_iter, label="robust-sca",
    )


class RobustOracles:
    """Bounding and rounding callbacks the tree search drives for imperfect CSI."""

    label = "robust"

    def __init__(
        self,
        instance: InstanceData,
        settings: SolverSettings | None = None,
        mu: float = 1e-2,
        sca_tol: float = 1e-4,
        objective: ObjectiveKind = ObjectiveKind.AVERAGE_POWER,
    ):
        self.instance = instance
        self.settings = settings or SolverSettings()
        self.mu = mu
        self.sca_tol = sca_tol
        self.objective = objective

    def root(self) -> NodeFixings:
        return NodeFixings.root(self.instance)

    def relax(self, fixings: NodeFixings, settings: SolverSettings | None = None) -> RelaxedPoint:
        relaxation = build_robust_relaxation(self.instance, fixings, objective=self.objective)
        return solve_relaxation(relaxation, settings or self.settings)

    def fixed(self, b: np.ndarray) -> DesignSolution:
        return solve_robust_fixed_B(self.instance, b, settings=self.settings)

    def score(self, design: DesignSolution) -> float:
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
