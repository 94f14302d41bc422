"""Core trajectory-graph types: hypotheses, directives, objective scoring.

A TrajectoryGraph bundles the relevant location subgraph (V, E), the witness
walk (tau_V), an optional per-node sensor directive map (sigma), and the list
of structural hypotheses the plan rests on. A graph is *grounded* once every
hypothesis is Verified and every consecutive walk pair is traversable; only
grounded graphs may be turned into activation plans (verify-before-commit).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from . import world as world_mod
from .world import WorldModel

# hypothesis kinds
VALID_EXIT = "ValidExit"
PATH_TRAVERSABLE = "PathTraversable"
FACILITY_EXISTS = "FacilityExists"
COVERAGE_AVAILABLE = "CoverageAvailable"
HYPOTHESIS_KINDS = (VALID_EXIT, PATH_TRAVERSABLE, FACILITY_EXISTS, COVERAGE_AVAILABLE)

# hypothesis statuses
UNVERIFIED = "Unverified"
VERIFIED = "Verified"
REFUTED = "Refuted"


class UngroundedError(RuntimeError):
    """An operation that requires a grounded graph was given an ungrounded one."""


class MissingDirectiveError(RuntimeError):
    """A walk node lacks a directive where one is required."""


class InvalidTransitionError(RuntimeError):
    """A hypothesis status change other than Unverified -> Verified/Refuted."""


# ---------------------------------------------------------------------------
# hypotheses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hypothesis:
    """One explicit, verifiable assumption behind a planned walk.

    Field usage per kind:
      ValidExit           scope (node ids), toward (node id)
      PathTraversable     a, b
      FacilityExists      scope, tag
      CoverageAvailable   node
    """

    id: str
    kind: str
    status: str = UNVERIFIED
    scope: tuple[str, ...] = ()
    toward: str | None = None
    a: str | None = None
    b: str | None = None
    tag: str | None = None
    node: str | None = None
    evidence: dict | None = None
    reason: str | None = None

    def verified(self, evidence: dict) -> "Hypothesis":
        if self.status != UNVERIFIED:
            raise InvalidTransitionError(f"{self.id}: {self.status} -> Verified")
        return replace(self, status=VERIFIED, evidence=evidence)

    def refuted(self, reason: str) -> "Hypothesis":
        if self.status != UNVERIFIED:
            raise InvalidTransitionError(f"{self.id}: {self.status} -> Refuted")
        return replace(self, status=REFUTED, reason=reason)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "status": self.status,
            "scope": list(self.scope),
            "toward": self.toward,
            "a": self.a,
            "b": self.b,
            "tag": self.tag,
            "node": self.node,
            "evidence": self.evidence,
            "reason": self.reason,
        }

    @staticmethod
    def from_dict(d: dict) -> "Hypothesis":
        return Hypothesis(
            id=d["id"],
            kind=d["kind"],
            status=d.get("status", UNVERIFIED),
            scope=tuple(d.get("scope", ())),
            toward=d.get("toward"),
            a=d.get("a"),
            b=d.get("b"),
            tag=d.get("tag"),
            node=d.get("node"),
            evidence=d.get("evidence"),
            reason=d.get("reason"),
        )


# ---------------------------------------------------------------------------
# directives and plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trigger:
    """Activation policy for one directive.

    kind is one of "immediate", "at_time" (fires at at_s), or "on_eta"
    (fires when the predicted arrival at the node drops to lead_s).
    """

    kind: str
    at_s: float | None = None
    lead_s: float | None = None

    @staticmethod
    def immediate() -> "Trigger":
        return Trigger("immediate")

    @staticmethod
    def at_time(t_s: float) -> "Trigger":
        return Trigger("at_time", at_s=float(t_s))

    @staticmethod
    def on_eta(lead_s: float) -> "Trigger":
        return Trigger("on_eta", lead_s=float(lead_s))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "at_s": self.at_s, "lead_s": self.lead_s}

    @staticmethod
    def from_dict(d: dict) -> "Trigger":
        return Trigger(kind=d["kind"], at_s=d.get("at_s"), lead_s=d.get("lead_s"))


@dataclass(frozen=True)
class NodeDirective:
    """Sensors to point at one node, plus when to turn them on.

    release_on_confirm ends the directive once its node is sighted; blanket
    always-on directives (baseline behavior) keep running regardless.
    """

    node: str
    sensors: tuple[str, ...]
    trigger: Trigger
    max_duration_s: float
    release_on_confirm: bool = True

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "sensors": list(self.sensors),
            "trigger": self.trigger.to_dict(),
            "max_duration_s": self.max_duration_s,
            "release_on_confirm": self.release_on_confirm,
        }

    @staticmethod
    def from_dict(d: dict) -> "NodeDirective":
        return NodeDirective(
            node=d["node"],
            sensors=tuple(d["sensors"]),
            trigger=Trigger.from_dict(d["trigger"]),
            max_duration_s=float(d["max_duration_s"]),
            release_on_confirm=bool(d.get("release_on_confirm", True)),
        )


@dataclass(frozen=True)
class ActivationInterval:
    sensor: str
    start_s: float
    end_s: float
    node: str | None = None
    dynamic: bool = False

    def to_dict(self) -> dict:
        return {
            "sensor": self.sensor,
            "start_s": self.start_s,
            "end_s": self.end_s,
            "node": self.node,
            "dynamic": self.dynamic,
        }


@dataclass
class ActivationPlan:
    intervals: list[ActivationInterval] = field(default_factory=list)

    def sensors(self) -> set[str]:
        """Union of sensors ever active."""
        return {iv.sensor for iv in self.intervals}

    def normalized(self) -> "ActivationPlan":
        """Merge overlapping/touching intervals per sensor; sorted output."""
        by_sensor: dict[str, list[ActivationInterval]] = {}
        for iv in self.intervals:
            if iv.start_s >= iv.end_s:
                raise ValueError(f"interval for {iv.sensor}: start >= end")
            by_sensor.setdefault(iv.sensor, []).append(iv)
        merged: list[ActivationInterval] = []
        for sensor in sorted(by_sensor):
            run: ActivationInterval | None = None
            for iv in sorted(by_sensor[sensor], key=lambda x: (x.start_s, x.end_s)):
                if run is not None and iv.start_s <= run.end_s:
                    run = replace(run, end_s=max(run.end_s, iv.end_s))
                else:
                    if run is not None:
                        merged.append(run)
                    run = iv
            if run is not None:
                merged.append(run)
        return ActivationPlan(merged)

    def to_dict(self) -> dict:
        return {"intervals": [iv.to_dict() for iv in self.intervals]}

    @staticmethod
    def from_dict(d: dict) -> "ActivationPlan":
        return ActivationPlan(
            [
                ActivationInterval(
                    sensor=raw["sensor"],
                    start_s=float(raw["start_s"]),
                    end_s=float(raw["end_s"]),
                    node=raw.get("node"),
                    dynamic=bool(raw.get("dynamic", False)),
                )
                for raw in d.get("intervals", [])
            ]
        )


@dataclass(frozen=True)
class ObjectiveParams:
    lam: float = 0.1
    cost_per_sensor_second: float = 0.01
    overlap_weight: float = 0.05

    def __post_init__(self):
        for name in ("lam", "cost_per_sensor_second", "overlap_weight"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")

    def to_dict(self) -> dict:
        return {
            "lam": self.lam,
            "cost_per_sensor_second": self.cost_per_sensor_second,
            "overlap_weight": self.overlap_weight,
        }

    @staticmethod
    def from_dict(d: dict) -> "ObjectiveParams":
        return ObjectiveParams(
            lam=float(d.get("lam", 0.1)),
            cost_per_sensor_second=float(d.get("cost_per_sensor_second", 0.01)),
            overlap_weight=float(d.get("overlap_weight", 0.05)),
        )


# ---------------------------------------------------------------------------
# the graph itself
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryGraph:
    """The (V, E, tau_V, sigma) quadruple plus its hypothesis list."""

    V: frozenset[str]
    E: frozenset[tuple[str, str]]
    tau_V: tuple[str, ...]
    sigma: dict[str, NodeDirective] = field(default_factory=dict)
    hypotheses: tuple[Hypothesis, ...] = ()

    def __post_init__(self):
        self.V = frozenset(self.V)
        self.E = frozenset(tuple(sorted(e)) for e in self.E)
        self.tau_V = tuple(self.tau_V)
        self.hypotheses = tuple(self.hypotheses)
        missing = [n for n in self.tau_V if n not in self.V]
        if missing:
            raise ValueError(f"tau_V nodes missing from V: {missing}")
        for x, y in zip(self.tau_V, self.tau_V[1:]):
            if tuple(sorted((x, y))) not in self.E:
                raise ValueError(f"consecutive tau_V pair ({x}, {y}) not connected in E")

    def to_dict(self) -> dict:
        return {
            "V": sorted(self.V),
            "E": [list(e) for e in sorted(self.E)],
            "tau_V": list(self.tau_V),
            "sigma": {n: d.to_dict() for n, d in sorted(self.sigma.items())},
            "hypotheses": [h.to_dict() for h in self.hypotheses],
        }

    @staticmethod
    def from_dict(d: dict) -> "TrajectoryGraph":
        return TrajectoryGraph(
            V=frozenset(d["V"]),
            E=frozenset(tuple(e) for e in d["E"]),
            tau_V=tuple(d["tau_V"]),
            sigma={n: NodeDirective.from_dict(x) for n, x in d.get("sigma", {}).items()},
            hypotheses=tuple(Hypothesis.from_dict(h) for h in d.get("hypotheses", [])),
        )


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def is_grounded(stg: TrajectoryGraph, world: WorldModel) -> bool:
    """True iff every hypothesis is Verified and the walk is traversable.

    Consecutive walk pairs are checked against the world's traversable edge
    set, not against E, so a stale or hand-edited graph cannot pass.
    """
    if any(h.status != VERIFIED for h in stg.hypotheses):
        return False
    for x, y in zip(stg.tau_V, stg.tau_V[1:]):
        try:
            if world_mod.shortest_path(x, y, world) is None:
                return False
        except world_mod.UnknownNodeError:
            return False
    return True


@dataclass(frozen=True)
class ObjectiveReport:
    fidelity: float
    cost: float
    score: float

    def to_dict(self) -> dict:
        return {"fidelity": self.fidelity, "cost": self.cost, "score": self.score}


def _peak_simultaneous(intervals: list[tuple[float, float]]) -> int:
    """Max number of simultaneously open intervals (closed-interval overlap)."""
    if not intervals:
        return 0
    events: list[tuple[float, int]] = []
    for s, e in intervals:
        events.append((s, 1))
        events.append((e, -1))
    # closed intervals: at a shared boundary the opener counts before the closer
    events.sort(key=lambda ev: (ev[0], -ev[1]))
    peak = cur = 0
    for _, delta in events:
        cur += delta
        peak = max(peak, cur)
    return peak


def evaluate_objective(
    stg: TrajectoryGraph,
    plan: ActivationPlan,
    witness: list[tuple[str, float, float]],
    world: WorldModel,
    params: ObjectiveParams,
) -> ObjectiveReport:
    """Score a plan against a timed witness: fidelity minus weighted cost.

    witness entries are (node, window_start_s, window_end_s): the node must be
    observed at some point inside its window. Fidelity is the fraction of
    witness nodes for which an active covering sensor overlaps the window.
    Cost is sensor-seconds plus an overlap penalty: for each witness node,
    (peak simultaneous covering sensors - 1), clamped at zero.
    """
    for node, ws, we in witness:
        if ws >= we:
            raise ValueError(f"witness window for {node}: start >= end")

    covered = 0
    overlap_units = 0
    for node, ws, we in witness:
        covering = set(world.coverage_index.get(node, ()))
        live: list[tuple[float, float]] = []
        for iv in plan.intervals:
            if iv.sensor not in covering:
                continue
            lo, hi = max(iv.start_s, ws), min(iv.end_s, we)
            if lo <= hi:
                live.append((lo, hi))
        if live:
            covered += 1
        overlap_units += max(0, _peak_simultaneous(live) - 1)

    fidelity = covered / len(witness) if witness else 0.0
    duration_cost = sum(iv.end_s - iv.start_s for iv in plan.intervals)
    cost = params.cost_per_sensor_second * duration_cost + params.overlap_weight * overlap_units
    score = fidelity - params.lam * cost
    return ObjectiveReport(fidelity=fidelity, cost=cost, score=score)


def induced_plan(
    stg: TrajectoryGraph, start_time_s: float, world: WorldModel
) -> ActivationPlan:
    """Expand sigma into activation intervals. Refuses ungrounded graphs.

    AtTime and Immediate directives become fixed intervals; OnEta directives
    become placeholder intervals flagged dynamic (their real bounds are only
    known at simulation time).
    """
    if not is_grounded(stg, world):
        raise UngroundedError("ungrounded")
    intervals: list[ActivationInterval] = []
    for node in stg.tau_V:
        directive = stg.sigma.get(node)
        if directive is None:
            raise MissingDirectiveError(f"no directive for walk node {node!r}")
        trig = directive.trigger
        if trig.kind == "immediate":
            start = start_time_s
            dynamic = False
        elif trig.kind == "at_time":
            start = trig.at_s
            dynamic = False
        elif trig.kind == "on_eta":
            start = start_time_s
            dynamic = True
        else:
            raise ValueError(f"unknown trigger kind {trig.kind!r}")
        for sensor in directive.sensors:
            intervals.append(
                ActivationInterval(
                    sensor=sensor,
                    start_s=start,
                    end_s=start + directive.max_duration_s,
                    node=node,
                    dynamic=dynamic,
                )
            )
    return ActivationPlan(intervals)
