"""Schedule synthesis: compile a grounded walk into sensor directives.

Observation needs are grouped per subtask (observe nodes, traverse runs,
panoramic areas), each solved with deterministic greedy set cover over the
coverage index, then wrapped in trigger policies: the first walk node starts
immediately, every downstream node activates just in time via a predicted
arrival (OnEta). Compiled schedules are cached in a ProgrammingMemory keyed
by the grounded structure, so re-planning an identical walk costs nothing.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .jsonio import canonical_digest, read_json, write_json
from .planner import SUBTASK_COVER_AREA, SUBTASK_OBSERVE, SUBTASK_TRAVERSE, Subtask
from .stg import (
    ActivationInterval,
    ActivationPlan,
    NodeDirective,
    ObjectiveParams,
    TrajectoryGraph,
    Trigger,
    UngroundedError,
    evaluate_objective,
    is_grounded,
)
from .world import WorldModel, path_length

DEFAULT_ETA_LEAD_S = 5.0
DEFAULT_MAX_DURATION_S = 60.0

#: nominal pedestrian speed used only for meta-level objective projection
NOMINAL_WALK_SPEED_MPS = 1.4


class UncoverableError(ValueError):
    """The cover universe contains nodes no candidate sensor can see."""

    def __init__(self, uncovered):
        self.uncovered = sorted(uncovered)
        super().__init__(f"uncoverable nodes: {self.uncovered}")


# ---------------------------------------------------------------------------
# set cover
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoverRequirement:
    """Universe of nodes to see and, per sensor, what it sees of them."""

    universe: tuple[str, ...]
    candidates: dict[str, frozenset[str]]

    @staticmethod
    def build(universe, candidates) -> "CoverRequirement":
        uni = tuple(universe)
        uni_set = set(uni)
        clipped = {
            sensor: frozenset(covered) & uni_set
            for sensor, covered in candidates.items()
        }
        return CoverRequirement(universe=uni, candidates=clipped)

    @staticmethod
    def for_nodes(nodes, world: WorldModel) -> "CoverRequirement":
        """Requirement over ``nodes`` with candidates from the coverage index."""
        nodes = list(nodes)
        cands: dict[str, set[str]] = {}
        for nid in nodes:
            for sensor in world.coverage_index.get(nid, ()):
                cands.setdefault(sensor, set()).add(nid)
        return CoverRequirement.build(nodes, cands)


def greedy_set_cover(req: CoverRequirement) -> list[str]:
    """Classic greedy cover; ties go to the smallest sensor id.

    Returns sensors in pick order. Raises UncoverableError (listing the
    nodes) when the union of candidates misses part of the universe.
    """
    uncovered = set(req.universe)
    reachable = set()
    for covered in req.candidates.values():
        reachable |= covered
    missing = uncovered - reachable
    if missing:
        raise UncoverableError(missing)

    picks: list[str] = []
    while uncovered:
        best_sensor = None
        best_gain = 0
        for sensor in sorted(req.candidates):
            gain = len(req.candidates[sensor] & uncovered)
            if gain > best_gain:
                best_gain = gain
                best_sensor = sensor
        picks.append(best_sensor)
        uncovered -= req.candidates[best_sensor]
    return picks


def indoor_path_camera_search(
    a: str, b: str, world: WorldModel
) -> tuple[list[str], list[str], list[str]]:
    """Shortest traversable path a->b plus a minimal greedy camera set.

    Returns (path, sensors, gaps); gaps are path nodes nothing covers,
    excluded from the cover universe. Raises ValueError when disconnected.
    """
    from . import world as world_mod

    res = world_mod.shortest_path(a, b, world, traversable_only=True)
    if res is None:
        raise ValueError(f"no traversable path from {a!r} to {b!r}")
    path = res[0]
    gaps = [n for n in path if not world.coverage_index.get(n)]
    observable = [n for n in path if world.coverage_index.get(n)]
    sensors = greedy_set_cover(CoverRequirement.for_nodes(observable, world)) if observable else []
    return path, sensors, gaps


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass
class Schedule:
    """Per-node directives for a walk, plus bookkeeping.

    gaps lists walk/area nodes that no sensor covers (they get no directive);
    static_plan projects the clock-triggered directives (AtTime/Immediate)
    into concrete intervals; meta carries solver statistics.
    """

    walk: tuple[str, ...]
    directives: tuple[NodeDirective, ...]
    gaps: tuple[str, ...] = ()
    static_plan: ActivationPlan = field(default_factory=ActivationPlan)
    meta: dict = field(default_factory=dict)

    def directive_for(self, node: str) -> NodeDirective | None:
        for d in self.directives:
            if d.node == node:
                return d
        return None

    def to_dict(self) -> dict:
        return {
            "walk": list(self.walk),
            "directives": [d.to_dict() for d in self.directives],
            "gaps": list(self.gaps),
            "static_plan": self.static_plan.to_dict(),
            "meta": self.meta,
        }

    @staticmethod
    def from_dict(d: dict) -> "Schedule":
        return Schedule(
            walk=tuple(d["walk"]),
            directives=tuple(NodeDirective.from_dict(x) for x in d["directives"]),
            gaps=tuple(d.get("gaps", ())),
            static_plan=ActivationPlan.from_dict(d.get("static_plan", {"intervals": []})),
            meta=d.get("meta", {}),
        )


def static_projection(directives) -> ActivationPlan:
    """Concrete intervals for the clock-triggered directives only."""
    intervals = []
    for d in directives:
        if d.trigger.kind == "immediate":
            start = 0.0
        elif d.trigger.kind == "at_time":
            start = d.trigger.at_s
        else:
            continue
        for sensor in d.sensors:
            intervals.append(
                ActivationInterval(
                    sensor=sensor, start_s=start, end_s=start + d.max_duration_s, node=d.node
                )
            )
    return ActivationPlan(intervals)


# ---------------------------------------------------------------------------
# programming memory
# ---------------------------------------------------------------------------


class ProgrammingMemory:
    """Compiled-schedule cache keyed by grounded-walk signature."""

    def __init__(self):
        self.entries: dict[str, dict] = {}
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def lookup(self, signature: str) -> Schedule | None:
        with self._lock:
            raw = self.entries.get(signature)
            if raw is None:
                self.misses += 1
                return None
            self.hits += 1
            return Schedule.from_dict(raw)

    def store(self, signature: str, schedule: Schedule) -> None:
        with self._lock:
            self.entries[signature] = schedule.to_dict()

    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def save(self, path) -> None:
        write_json(path, {"entries": dict(sorted(self.entries.items()))})

    @staticmethod
    def load(path) -> "ProgrammingMemory":
        pmem = ProgrammingMemory()
        try:
            raw = read_json(path)
        except FileNotFoundError:
            return pmem
        pmem.entries = dict(raw.get("entries", {}))
        return pmem


def schedule_signature(walk, subtasks, world_digest: str) -> str:
    return canonical_digest(
        {
            "walk": list(walk),
            "subtasks": [s.to_dict() for s in subtasks],
            "world_digest": world_digest,
        }
    )


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


def _traverse_runs(subtasks) -> list[tuple[int, int]]:
    """(start, end) index ranges (inclusive) of maximal traverse runs."""
    runs = []
    start = None
    for i, sub in enumerate(subtasks):
        if sub.kind == SUBTASK_TRAVERSE:
            if start is None:
                start = i
        else:
            if start is not None:
                runs.append((start, i - 1))
                start = None
    if start is not None:
        runs.append((start, len(subtasks) - 1))
    return runs


def synthesize(
    stg_star: TrajectoryGraph,
    subtasks,
    world: WorldModel,
    params: ObjectiveParams | None = None,
    pmem: ProgrammingMemory | None = None,
    lead_s: float = DEFAULT_ETA_LEAD_S,
    max_duration_s: float = DEFAULT_MAX_DURATION_S,
) -> Schedule:
    """Compile the grounded walk into a Schedule. Refuses ungrounded input.

    Sensor selection per subtask kind: observe nodes get the single best
    covering sensor; traverse runs get a greedy cover over their observable
    nodes; panoramic areas get a greedy cover over the area. Unobservable
    traverse/area nodes are reported as gaps; an unobservable observe node is
    an error since the query cannot be answered without it.
    """
    params = params or ObjectiveParams()
    if not is_grounded(stg_star, world):
        raise UngroundedError("ungrounded")
    subtasks = list(subtasks)
    walk = list(stg_star.tau_V)
    if [s.node for s in subtasks] != walk:
        raise ValueError("subtasks do not align with the grounded walk")

    signature = schedule_signature(walk, subtasks, world.digest)
    if pmem is not None:
        cached = pmem.lookup(signature)
        if cached is not None:
            return cached

    sensors_by_node: dict[int, list[str]] = {}
    gaps: list[str] = []
    cover_sizes: list[int] = []
    solver_calls = 0

    for i, sub in enumerate(subtasks):
        if sub.kind == SUBTASK_OBSERVE:
            req = CoverRequirement.for_nodes([sub.node], world)
            picked = greedy_set_cover(req)
            solver_calls += 1
            cover_sizes.append(len(picked))
            sensors_by_node[i] = picked
        elif sub.kind == SUBTASK_COVER_AREA:
            area = list(sub.area) or [sub.node]
            observable = [n for n in area if world.coverage_index.get(n)]
            gaps.extend(n for n in area if not world.coverage_index.get(n))
            if not observable:
                raise UncoverableError(area)
            picked = greedy_set_cover(CoverRequirement.for_nodes(observable, world))
            solver_calls += 1
            cover_sizes.append(len(picked))
            sensors_by_node[i] = picked

    for start, end in _traverse_runs(subtasks):
        run_nodes = walk[start : end + 1]
        observable = [n for n in run_nodes if world.coverage_index.get(n)]
        gaps.extend(n for n in run_nodes if not world.coverage_index.get(n))
        if not observable:
            continue
        picked = greedy_set_cover(CoverRequirement.for_nodes(observable, world))
        solver_calls += 1
        cover_sizes.append(len(picked))
        cover_map = {
            s: set(world.sensors[s].covers) for s in picked
        }
        for idx in range(start, end + 1):
            node = walk[idx]
            mine = sorted(s for s in picked if node in cover_map[s])
            if mine:
                sensors_by_node[idx] = mine

    directives: list[NodeDirective] = []
    for i, node in enumerate(walk):
        sensors = sensors_by_node.get(i)
        if not sensors:
            continue
        trigger = Trigger.immediate() if i == 0 else Trigger.on_eta(lead_s)
        directives.append(
            NodeDirective(
                node=node,
                sensors=tuple(sensors),
                trigger=trigger,
                max_duration_s=max_duration_s,
            )
        )

    schedule = Schedule(
        walk=tuple(walk),
        directives=tuple(directives),
        gaps=tuple(sorted(set(gaps))),
        static_plan=static_projection(directives),
        meta={
            "solver_calls": solver_calls,
            "cover_sizes": cover_sizes,
            "signature": signature,
        },
    )

    report = evaluate_objective(
        stg_star,
        nominal_plan(schedule, NOMINAL_WALK_SPEED_MPS, world),
        nominal_witness(walk, NOMINAL_WALK_SPEED_MPS, world),
        world,
        params,
    )
    schedule.meta["objective"] = report.to_dict()

    if pmem is not None:
        pmem.store(signature, schedule)
    return schedule


# ---------------------------------------------------------------------------
# nominal projections (scoring aid; the simulator resolves real timings)
# ---------------------------------------------------------------------------


def walk_arcs(walk, world: WorldModel) -> list[float]:
    """Cumulative arc-length positions of walk nodes, in meters."""
    arcs = [0.0]
    for a, b in zip(walk, walk[1:]):
        edge = world.edge_between(a, b)
        if edge is not None:
            arcs.append(arcs[-1] + edge.length_m)
            continue
        from . import world as world_mod

        res = world_mod.shortest_path(a, b, world, traversable_only=False)
        if res is None:
            raise ValueError(f"walk nodes {a!r}, {b!r} are not connected")
        arcs.append(arcs[-1] + res[1])
    return arcs


def nominal_witness(walk, speed_mps: float, world: WorldModel, hold_s: float = 1.0):
    """Witness windows for a walk traversed at constant nominal speed."""
    arcs = walk_arcs(walk, world)
    return [
        (node, arc / speed_mps, arc / speed_mps + hold_s)
        for node, arc in zip(walk, arcs)
    ]


def nominal_plan(schedule: Schedule, speed_mps: float, world: WorldModel) -> ActivationPlan:
    """Project directives to concrete intervals assuming nominal motion."""
    arcs = walk_arcs(schedule.walk, world)
    arc_of = {}
    for node, arc in zip(schedule.walk, arcs):
        arc_of.setdefault(node, arc)
    intervals: list[ActivationInterval] = []
    for d in schedule.directives:
        trig = d.trigger
        if trig.kind == "immediate":
            start = 0.0
        elif trig.kind == "at_time":
            start = trig.at_s
        else:
            eta_nominal = arc_of.get(d.node, 0.0) / speed_mps
            start = max(0.0, eta_nominal - (trig.lead_s or 0.0))
        for sensor in d.sensors:
            intervals.append(
                ActivationInterval(
                    sensor=sensor,
                    start_s=start,
                    end_s=start + d.max_duration_s,
                    node=d.node,
                    dynamic=trig.kind == "on_eta",
                )
            )
    return ActivationPlan(intervals)
