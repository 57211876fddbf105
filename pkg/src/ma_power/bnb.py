"""Best-first branch-and-bound over binary selection matrices."""

import heapq
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .conic import SolverSettings
from .errors import InvalidInputError, StructuralInfeasibleError
from .instance import DesignSolution, InstanceData, check_feasible, ensure_placeable
from .models import DesignStatus, NodeState, ObjectiveKind, SolveStatus, ToleranceConfig
from .perfect import NodeFixings, PerfectOracles, RelaxedPoint, is_binary, threshold
from .robust import RobustOracles

logger = logging.getLogger(__name__)

PRUNE_TOL = 1e-12
TIE_TOL = 1e-12


class BoundingOracles(Protocol):
    """Callbacks for one problem family (perfect or robust CSI)."""

    instance: InstanceData
    settings: SolverSettings
    label: str

    def root(self) -> NodeFixings: ...

    def relax(self, fixings: NodeFixings, settings: SolverSettings | None = None) -> RelaxedPoint: ...

    def fixed(self, b: np.ndarray) -> DesignSolution: ...

    def score(self, design: DesignSolution) -> float: ...

    def upper(self, fixings: NodeFixings, point: RelaxedPoint) -> DesignSolution | None: ...


class BnbNode(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: int
    fixings: NodeFixings
    depth: int = 0
    lower_bound: float = float("-inf")
    upper_bound: float = float("inf")
    b_relaxed: np.ndarray | None = None
    b_rounded: np.ndarray | None = None
    design: DesignSolution | None = None
    leaf: bool = False
    state: NodeState = NodeState.EXTERNAL


class TraceEntry(BaseModel):
    iteration: int
    lower_bound: float
    upper_bound: float
    open_nodes: int
    node_id: int | None = None
    branch: tuple[int, int] | None = None
    wall_s: float = 0.0


class BnbTrace(BaseModel):
    entries: list[TraceEntry] = Field(default_factory=list)

    def record(self, **kwargs) -> TraceEntry:
        entry = TraceEntry(iteration=len(self.entries), **kwargs)
        self.entries.append(entry)
        return entry

    def rows(self) -> list[dict]:
        return [
            {
                "iteration": e.iteration,
                "lower_bound": e.lower_bound,
                "upper_bound": e.upper_bound,
                "open_nodes": e.open_nodes,
                "wall_s": e.wall_s,
            }
            for e in self.entries
        ]


class BnbResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    design: DesignSolution
    trace: BnbTrace
    lower_bound: float
    upper_bound: float


def branch_index(
    b_lower: np.ndarray | None,
    b_upper: np.ndarray | None,
    free: list[tuple[int, int]],
) -> tuple[int, int]:
    """Free entry (m, n) where the relaxed and rounded placements disagree most.

    Matrices are N×M, so entry (m, n) is b[n, m]. Ties go to the smallest (m, n).
    Without a rounded placement the most fractional entry is taken; without a
    relaxed one the first free entry.
    """
    if not free:
        raise ValueError("no free entries to branch on")
    ordered = sorted(free)
    if b_lower is None:
        return ordered[0]
    if b_upper is not None:
        scores = [abs(b_lower[n, m] - b_upper[n, m]) for m, n in ordered]
        best = max(scores)
        return next(idx for idx, s in zip(ordered, scores, strict=True) if s >= best - TIE_TOL)
    scores = [abs(b_lower[n, m] - 0.5) for m, n in ordered]
    best = min(scores)
    return next(idx for idx, s in zip(ordered, scores, strict=True) if s <= best + TIE_TOL)


class SearchTree:
    """External nodes keyed on (lower bound, id)."""

    def __init__(self):
        self._heap: list[tuple[float, int]] = []
        self.nodes: dict[int, BnbNode] = {}

    def push(self, node: BnbNode) -> None:
        node.state = NodeState.EXTERNAL
        self.nodes[node.id] = node
        heapq.heappush(self._heap, (node.lower_bound, node.id))

    @property
    def external(self) -> list[BnbNode]:
        return [n for n in self.nodes.values() if n.state == NodeState.EXTERNAL]

    @property
    def open_count(self) -> int:
        return len(self.external)

    @property
    def lower_bound(self) -> float:
        """Smallest bound among external nodes (+inf when none is left)."""
        return min((n.lower_bound for n in self.external), default=float("inf"))

    def select_node(self) -> BnbNode | None:
        """Pop the external node with the smallest bound, lowest id first."""
        while self._heap:
            _, node_id = heapq.heappop(self._heap)
            node = self.nodes[node_id]
            if node.state == NodeState.EXTERNAL:
                node.state = NodeState.INTERNAL
                return node
        return None

    def prune(self, upper_bound: float) -> int:
        """Discard external nodes whose bound exceeds the incumbent."""
        count = 0
        for node in self.external:
            if node.lower_bound > upper_bound - PRUNE_TOL:
                node.state = NodeState.DISCARDED
                count += 1
        return count


def _bound_node(
    oracles: BoundingOracles,
    node_id: int,
    fixings: NodeFixings,
    parent_bound: float,
    depth: int,
    leaf_tol: float = 1e-6,
) -> BnbNode | None:
    """Relax, round and evaluate one node; None when its subdomain is empty.

    A binary relaxed placement closes the node when its fixed-placement value
    matches the bound within `leaf_tol`.
    """
    if fixings.infeasible:
        return None
    node = BnbNode(id=node_id, fixings=fixings, depth=depth, lower_bound=parent_bound)
    if fixings.is_complete:
        b = fixings.matrix()
        if not check_feasible(oracles.instance, b).feasible:
            return None
        design = oracles.fixed(b)
        if not design.found:
            return None
        value = oracles.score(design)
        node.lower_bound = node.upper_bound = value
        node.b_relaxed = node.b_rounded = b
        node.design = design
        node.leaf = True
        return node

    point = oracles.relax(fixings)
    if point.status == SolveStatus.PRIMAL_INFEASIBLE:
        return None
    if not point.usable:
        logger.warning("node %d: relaxation failed (%s), keeping parent bound", node_id, point.status.value)
        return node
    node.lower_bound = max(point.bound, parent_bound)
    node.b_relaxed = point.b

    binary = threshold(point.b) if is_binary(point.b) else None
    if binary is not None and check_feasible(oracles.instance, binary).feasible:
        design = oracles.fixed(binary)
        if design.found:
            node.design = design
            node.b_rounded = binary
            node.upper_bound = oracles.score(design)
            node.leaf = node.upper_bound <= node.lower_bound + leaf_tol * max(1.0, abs(node.lower_bound))
            return node

    design = oracles.upper(fixings, point)
    if design is not None and design.found:
        node.design = design
        node.b_rounded = design.b
        node.upper_bound = oracles.score(design)
    return node


def _gap(lower: float, upper: float, relative: bool) -> float:
    if not math.isfinite(upper):
        return float("inf")
    gap = upper - lower
    if relative:
        return gap / max(abs(upper), 1e-12)
    return gap


def solve(
    oracles: BoundingOracles,
    gap: float = 1e-4,
    relative: bool = False,
    node_budget: int = 100_000,
    workers: int = 1,
) -> BnbResult:
    """Best-first search until UB − LB ≤ gap or the node budget runs out.

    The two children of a branched node may be bounded concurrently
    (`workers` > 1); they are merged in child order.
    """
    started = time.perf_counter()
    instance = oracles.instance
    trace = BnbTrace()
    try:
        ensure_placeable(instance)
    except StructuralInfeasibleError as e:
        design = DesignSolution.infeasible(metadata={"reason": str(e)})
        return BnbResult(design=design, trace=trace, lower_bound=float("inf"), upper_bound=float("inf"))

    tree = SearchTree()
    next_id = 0
    incumbent: DesignSolution | None = None
    upper = float("inf")
    lower = float("-inf")

    def elapsed() -> float:
        return time.perf_counter() - started

    def accept(node: BnbNode) -> None:
        nonlocal incumbent, upper
        if node.design is not None and node.upper_bound < upper:
            incumbent, upper = node.design, node.upper_bound
            logger.debug("node %d: new incumbent %.9g", node.id, upper)

    root = _bound_node(oracles, next_id, oracles.root(), float("-inf"), 0)
    next_id += 1
    nodes = 1
    if root is None:
        logger.info("%s search: root relaxation infeasible", oracles.label)
        design = DesignSolution.infeasible(nodes=nodes, wall_s=elapsed())
        return BnbResult(design=design, trace=trace, lower_bound=float("inf"), upper_bound=upper)
    accept(root)
    if not root.leaf:
        tree.push(root)
        tree.prune(upper)
    lower = min(tree.lower_bound, upper)
    trace.record(lower_bound=lower, upper_bound=upper, open_nodes=tree.open_count,
                 node_id=root.id, wall_s=elapsed())

    pool = ThreadPoolExecutor(max_workers=2) if workers > 1 else None
    try:
        while tree.open_count:
            if _gap(lower, upper, relative) <= gap:
                break
            if nodes >= node_budget:
                logger.info("%s search: node budget %d reached", oracles.label, node_budget)
                break
            node = tree.select_node()
            if node is None:
                break
            m, n = branch_index(node.b_relaxed, node.b_rounded, node.fixings.free)
            children = [
                (next_id, node.fixings.fix(instance, m, n, 0)),
                (next_id + 1, node.fixings.fix(instance, m, n, 1)),
            ]
            next_id += 2
            args = [(oracles, cid, fx, node.lower_bound, node.depth + 1) for cid, fx in children]
            if pool is not None:
                bounded = list(pool.map(lambda a: _bound_node(*a), args))
            else:
                bounded = [_bound_node(*a) for a in args]
            nodes += sum(1 for _, fx in children if not fx.infeasible)
            for child in bounded:
                if child is None:
                    continue
                accept(child)
                if not child.leaf:
                    tree.push(child)
            pruned = tree.prune(upper)
            lower = max(lower, min(tree.lower_bound, upper))
            logger.debug(
                "node %d branched on b[%d][%d]: LB=%.9g UB=%.9g open=%d pruned=%d",
                node.id, m, n, lower, upper, tree.open_count, pruned,
            )
            trace.record(lower_bound=lower, upper_bound=upper, open_nodes=tree.open_count,
                         node_id=node.id, branch=(m, n), wall_s=elapsed())
    finally:
        if pool is not None:
            pool.shutdown()

    if not tree.open_count:
        lower = upper
    final_gap = _gap(lower, upper, relative)
    if incumbent is None:
        logger.info("%s search: no feasible placement after %d nodes", oracles.label, nodes)
        design = DesignSolution.infeasible(nodes=nodes, wall_s=elapsed())
        return BnbResult(design=design, trace=trace, lower_bound=lower, upper_bound=upper)

    design = incumbent.model_copy(deep=True)
    design.status = DesignStatus.OPTIMAL if final_gap <= gap else DesignStatus.TOL_REACHED
    design.nodes = nodes
    design.iterations = len(trace.entries)
    design.wall_s = elapsed()
    design.gap = final_gap
    design.metadata["lower_bound"] = lower
    logger.info(
        "%s search: %s, UB=%.9g LB=%.9g after %d nodes (%.2fs)",
        oracles.label, design.status.value, upper, lower, nodes, design.wall_s,
    )
    return BnbResult(design=design, trace=trace, lower_bound=lower, upper_bound=upper)


def make_oracles(
    instance: InstanceData,
    robust: bool = False,
    tolerances: ToleranceConfig | None = None,
    objective: ObjectiveKind = ObjectiveKind.AVERAGE_POWER,
    coupling: bool = False,
) -> BoundingOracles:
    tolerances = tolerances or ToleranceConfig()
    settings = SolverSettings.from_tolerances(tolerances)
    if robust:
        if coupling:
            raise InvalidInputError("mutual coupling is only modelled for perfect CSI")
        return RobustOracles(
            instance, settings, tolerances.penalty_mu, tolerances.sca_tol, objective
        )
    return PerfectOracles(
        instance, settings, tolerances.penalty_mu, tolerances.sca_tol, coupling, objective
    )


def optimize(
    instance: InstanceData,
    robust: bool = False,
    tolerances: ToleranceConfig | None = None,
    objective: ObjectiveKind = ObjectiveKind.AVERAGE_POWER,
    coupling: bool = False,
    workers: int = 1,
) -> BnbResult:
    """Globally optimal joint design for perfect or imperfect CSI."""
    tolerances = tolerances or ToleranceConfig()
    oracles = make_oracles(instance, robust, tolerances, objective, coupling)
    return solve(
        oracles,
        gap=tolerances.bnb_gap,
        relative=tolerances.bnb_relative,
        node_budget=tolerances.node_budget,
        workers=workers,
    )
