"""Hypothesis verification: turn a hypothesized graph into a grounded one.

The verifying toolkit is a set of deterministic world queries (doors_verify,
path_traversable, facility_exists, coverage_available, resolve_ambiguity).
ground() walks the hypothesis list in walk order, resolves each hypothesis
from the SpatialMemory cache or a fresh toolkit call, commits verified
detours into the walk, and repairs refuted path segments within a bounded
budget. The output either satisfies is_grounded or is an explicit failure;
there is no third state.
"""

from __future__ import annotations

import logging
import re
import threading
from dataclasses import dataclass, field

from . import world as world_mod
from .jsonio import canonical_dumps, read_json, write_json
from .planner import SUBTASK_TRAVERSE, Subtask, hypothesize
from .stg import (
    COVERAGE_AVAILABLE,
    FACILITY_EXISTS,
    PATH_TRAVERSABLE,
    UNVERIFIED,
    VALID_EXIT,
    Hypothesis,
    TrajectoryGraph,
    is_grounded,
)
from .world import WorldModel

log = logging.getLogger(__name__)

DEFAULT_MAX_REPAIRS = 3


# ---------------------------------------------------------------------------
# toolkit ops
# ---------------------------------------------------------------------------


def doors_verify(scope, world: WorldModel) -> list[str]:
    """Door nodes reachable from the scope through one traversable edge."""
    scope = list(scope)
    if not scope:
        raise ValueError("doors_verify: empty scope")
    for nid in scope:
        if nid not in world.nodes:
            raise world_mod.UnknownNodeError(nid)
    scope_set = set(scope)
    found: set[str] = set()
    for nid in scope_set:
        for neighbor, edge in world.adj[nid].items():
            if not edge.traversable:
                continue
            if world.nodes[neighbor].kind == "door":
                found.add(neighbor)
    return sorted(found)


def path_traversable(a: str, b: str, world: WorldModel) -> dict:
    """Connectivity verdict over traversable edges, with the path as evidence."""
    res = world_mod.shortest_path(a, b, world, traversable_only=True)
    if res is None:
        return {"ok": False, "path": None, "length_m": None}
    path, length = res
    return {"ok": True, "path": path, "length_m": length}


def facility_exists(scope, tag: str, world: WorldModel) -> list[str]:
    """Nodes in scope whose tags contain ``tag``, sorted by id."""
    scope = list(scope)
    if not scope:
        raise ValueError("facility_exists: empty scope")
    out = []
    for nid in scope:
        node = world.node(nid)
        if tag in node.tags:
            out.append(nid)
    return sorted(out)


def coverage_available(node: str, world: WorldModel) -> list[str]:
    """Sensors covering the node (coverage-index query as a toolkit op)."""
    return list(world_mod.sensors_covering(node, world))


def resolve_ambiguity(candidates, next_waypoint: str, world: WorldModel) -> str | None:
    """Pick the candidate that is topologically consistent with the goal.

    Keeps candidates with a traversable path to next_waypoint, then the
    minimum path length, then the smallest id. None when nothing survives.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("resolve_ambiguity: empty candidate list")
    best: tuple[float, str] | None = None
    for cand in sorted(candidates):
        res = world_mod.shortest_path(cand, next_waypoint, world, traversable_only=True)
        if res is None:
            continue
        key = (res[1], cand)
        if best is None or key < best:
            best = key
    return best[1] if best else None


# ---------------------------------------------------------------------------
# evidence and memory
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Evidence:
    toolkit_op: str
    inputs: dict
    result: object
    world_digest: str

    def to_dict(self) -> dict:
        return {
            "toolkit_op": self.toolkit_op,
            "inputs": self.inputs,
            "result": self.result,
            "world_digest": self.world_digest,
        }

    @staticmethod
    def from_dict(d: dict) -> "Evidence":
        return Evidence(
            toolkit_op=d["toolkit_op"],
            inputs=d["inputs"],
            result=d["result"],
            world_digest=d["world_digest"],
        )


class SpatialMemory:
    """Cache of verified topological facts, keyed by (scope, op, args).

    Entries are bound to one world digest and dropped wholesale when the
    world changes. Lookups and inserts are guarded by a lock: concurrent
    readers are safe and writes are linearizable (single writer per key;
    duplicate writes store equal Evidence, so races are benign).
    """

    def __init__(self, world_digest: str | None = None):
        self.world_digest = world_digest
        self.entries: dict[str, Evidence] = {}
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def bind_world(self, digest: str) -> None:
        with self._lock:
            if self.world_digest != digest:
                self.entries = {}
                self.world_digest = digest

    def lookup(self, key: str) -> Evidence | None:
        with self._lock:
            ev = self.entries.get(key)
            if ev is None:
                self.misses += 1
            else:
                self.hits += 1
            return ev

    def store(self, key: str, evidence: Evidence) -> None:
        with self._lock:
            self.entries[key] = evidence

    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        write_json(
            path,
            {
                "world_digest": self.world_digest,
                "entries": {k: ev.to_dict() for k, ev in sorted(self.entries.items())},
            },
        )

    @staticmethod
    def load(path) -> "SpatialMemory":
        try:
            raw = read_json(path)
        except FileNotFoundError:
            return SpatialMemory()
        mem = SpatialMemory(world_digest=raw.get("world_digest"))
        mem.entries = {
            k: Evidence.from_dict(v) for k, v in raw.get("entries", {}).items()
        }
        return mem


def memory_key(op: str, scope, args: dict) -> str:
    return canonical_dumps({"op": op, "scope": sorted(scope), "args": args})


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------


@dataclass
class TraceEntry:
    hypothesis_id: str
    kind: str
    calls: int = 0
    cache_hits: int = 0
    outcome: str = "pending"

    def to_dict(self) -> dict:
        return {
            "hypothesis_id": self.hypothesis_id,
            "kind": self.kind,
            "calls": self.calls,
            "cache_hits": self.cache_hits,
            "outcome": self.outcome,
        }


@dataclass
class VerificationTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    repairs_used: int = 0

    @property
    def total_rounds(self) -> int:
        return sum(e.calls for e in self.entries)

    @property
    def total_cache_hits(self) -> int:
        return sum(e.cache_hits for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "repairs_used": self.repairs_used,
            "total_rounds": self.total_rounds,
            "total_cache_hits": self.total_cache_hits,
        }


@dataclass
class GroundingResult:
    ok: bool
    stg: TrajectoryGraph
    subtasks: tuple[Subtask, ...]
    trace: VerificationTrace
    failure: str | None = None


# ---------------------------------------------------------------------------
# the verification loop
# ---------------------------------------------------------------------------

_TOOLKIT = {
    "doors_verify": lambda args, world: doors_verify(args["scope"], world),
    "path_traversable": lambda args, world: path_traversable(args["a"], args["b"], world),
    "facility_exists": lambda args, world: facility_exists(args["scope"], args["tag"], world),
    "coverage_available": lambda args, world: coverage_available(args["node"], world),
    "resolve_ambiguity": lambda args, world: resolve_ambiguity(
        args["candidates"], args["next_waypoint"], world
    ),
}


def run_toolkit_op(op: str, args: dict, world: WorldModel):
    """Re-runnable dispatch used both by ground() and by evidence audits."""
    return _TOOLKIT[op](args, world)


class _Grounder:
    def __init__(self, world, memory, max_repairs):
        self.world = world
        self.memory = memory
        self.max_repairs = max_repairs
        self.trace = VerificationTrace()

    def invoke(self, entry: TraceEntry, op: str, scope, args: dict):
        key = memory_key(op, scope, args)
        cached = self.memory.lookup(key)
        if cached is not None:
            entry.cache_hits += 1
            return cached.result
        result = run_toolkit_op(op, args, self.world)
        entry.calls += 1
        self.memory.store(
            key,
            Evidence(toolkit_op=op, inputs=args, result=result, world_digest=self.world.digest),
        )
        return result


def _next_hid(hyps) -> int:
    top = 0
    for h in hyps:
        m = re.fullmatch(r"h(\d+)", h.id)
        if m:
            top = max(top, int(m.group(1)))
    return top + 1


def _pair_index(walk: list[str], a: str, b: str) -> int | None:
    for i in range(len(walk) - 1):
        if walk[i] == a and walk[i + 1] == b:
            return i
    return None


def ground(
    stg0: TrajectoryGraph,
    subtasks,
    world: WorldModel,
    memory: SpatialMemory | None = None,
    max_repairs: int = DEFAULT_MAX_REPAIRS,
) -> GroundingResult:
    """Verify every hypothesis of ``stg0`` and commit the verified route.

    Hypotheses are resolved in walk order, each through the memory cache
    first. A PathTraversable pair verified by a multi-hop detour (the direct
    edge is blocked) has the detour spliced into the walk; a refuted pair
    triggers a bounded repair that re-routes around unreachable traverse
    nodes. Both rewrites re-run hypothesize on the new segment. Verified
    facts persist in the memory for reuse across queries.
    """
    if stg0.sigma:
        raise ValueError("ground expects a hypothesized graph with empty sigma")
    if memory is None:
        memory = SpatialMemory(world.digest)
    memory.bind_world(world.digest)

    g = _Grounder(world, memory, max_repairs)
    walk: list[str] = list(stg0.tau_V)
    subs: list[Subtask] = list(subtasks)
    if [s.node for s in subs] != walk:
        raise ValueError("subtasks do not align with the walk")
    hyps: list[Hypothesis] = list(stg0.hypotheses)
    next_id = _next_hid(hyps)
    failure: str | None = None

    def regenerate(segment: list[str], seg_subs: list[Subtask]) -> list[Hypothesis]:
        nonlocal next_id
        fresh = hypothesize(segment, seg_subs, world, id_start=next_id)
        next_id += len(fresh)
        return fresh

    def splice(pair_at: int, path: list[str]) -> list[Hypothesis]:
        """Replace walk[pair_at : pair_at+2] span's direct hop with ``path``."""
        inner = path[1:-1]
        walk[pair_at + 1 : pair_at + 1] = inner
        subs[pair_at + 1 : pair_at + 1] = [
            Subtask(node=n, kind=SUBTASK_TRAVERSE) for n in inner
        ]
        seg_subs = [
            Subtask(node=path[0], kind=SUBTASK_TRAVERSE),
            *(Subtask(node=n, kind=SUBTASK_TRAVERSE) for n in inner),
            Subtask(node=path[-1], kind=SUBTASK_TRAVERSE),
        ]
        return regenerate(path, seg_subs)

    i = 0
    while i < len(hyps):
        h = hyps[i]
        if h.status != UNVERIFIED:
            i += 1
            continue
        entry = TraceEntry(hypothesis_id=h.id, kind=h.kind)

        if h.kind == COVERAGE_AVAILABLE:
            sensors = g.invoke(entry, "coverage_available", [h.node], {"node": h.node})
            if sensors:
                hyps[i] = h.verified(
                    Evidence("coverage_available", {"node": h.node}, sensors, world.digest).to_dict()
                )
                entry.outcome = "verified"
            else:
                hyps[i] = h.refuted(f"no sensor covers {h.node}")
                entry.outcome = "refuted"
                failure = f"{h.id}: CoverageAvailable({h.node}) refuted: no covering sensor"

        elif h.kind == FACILITY_EXISTS:
            found = g.invoke(
                entry,
                "facility_exists",
                h.scope,
                {"scope": sorted(h.scope), "tag": h.tag},
            )
            if found:
                hyps[i] = h.verified(
                    Evidence(
                        "facility_exists",
                        {"scope": sorted(h.scope), "tag": h.tag},
                        found,
                        world.digest,
                    ).to_dict()
                )
                entry.outcome = "verified"
            else:
                hyps[i] = h.refuted(f"no node in scope tagged {h.tag!r}")
                entry.outcome = "refuted"
                failure = f"{h.id}: FacilityExists({h.tag}) refuted"

        elif h.kind == VALID_EXIT:
            args = {"scope": sorted(h.scope)}
            doors = g.invoke(entry, "doors_verify", h.scope, args)
            chosen = None
            if len(doors) == 1:
                chosen = doors[0]
            elif len(doors) > 1:
                amb_args = {"candidates": doors, "next_waypoint": h.toward}
                chosen = g.invoke(entry, "resolve_ambiguity", doors, amb_args)
            if chosen is not None:
                hyps[i] = h.verified(
                    Evidence(
                        "doors_verify",
                        args,
                        {"doors": doors, "chosen": chosen},
                        world.digest,
                    ).to_dict()
                )
                entry.outcome = "verified"
            else:
                why = "no adjacent exit" if not doors else f"no exit reaches {h.toward}"
                hyps[i] = h.refuted(why)
                entry.outcome = "refuted"
                failure = f"{h.id}: ValidExit refuted: {why}"

        elif h.kind == PATH_TRAVERSABLE:
            verdict = g.invoke(
                entry, "path_traversable", [h.a, h.b], {"a": h.a, "b": h.b}
            )
            if verdict["ok"]:
                hyps[i] = h.verified(
                    Evidence(
                        "path_traversable", {"a": h.a, "b": h.b}, verdict, world.digest
                    ).to_dict()
                )
                pair_at = _pair_index(walk, h.a, h.b)
                path = verdict["path"]
                if pair_at is not None and len(path) > 2:
                    # the pair is only connected by a detour; commit it
                    fresh = splice(pair_at, path)
                    hyps[i + 1 : i + 1] = fresh
                    entry.outcome = "verified+spliced"
                else:
                    entry.outcome = "verified"
            else:
                pair_at = _pair_index(walk, h.a, h.b)
                repaired = False
                if pair_at is not None and g.trace.repairs_used < max_repairs:
                    repaired = _repair(
                        g, entry, walk, subs, hyps, i, pair_at, regenerate
                    )
                if repaired:
                    g.trace.repairs_used += 1
                    entry.outcome = "repaired"
                    # the refuted pair hypothesis was replaced in situ; do not
                    # advance i so the regenerated segment is processed next
                    g.trace.entries.append(entry)
                    continue
                hyps[i] = h.refuted("no traversable path")
                entry.outcome = "refuted"
                failure = f"{h.id}: PathTraversable({h.a}, {h.b}) refuted"

        else:
            hyps[i] = h.refuted(f"unknown hypothesis kind {h.kind!r}")
            entry.outcome = "refuted"
            failure = f"{h.id}: unknown kind {h.kind!r}"

        g.trace.entries.append(entry)
        if failure is not None:
            break
        i += 1

    # assemble the (possibly rewritten) graph
    nodes = set(stg0.V) | set(walk)
    edges = {
        (min(e.a, e.b), max(e.a, e.b))
        for e in world.edges
        if e.a in nodes and e.b in nodes
    }
    out = TrajectoryGraph(
        V=frozenset(nodes),
        E=frozenset(edges),
        tau_V=tuple(walk),
        sigma={},
        hypotheses=tuple(hyps),
    )

    if failure is None and is_grounded(out, world):
        return GroundingResult(
            ok=True, stg=out, subtasks=tuple(subs), trace=g.trace, failure=None
        )
    if failure is None:
        failure = "walk failed final traversability audit"
    log.debug("grounding failed: %s", failure)
    return GroundingResult(
        ok=False, stg=out, subtasks=tuple(subs), trace=g.trace, failure=failure
    )


def _repair(g, entry, walk, subs, hyps, hyp_at, pair_at, regenerate) -> bool:
    """Re-route around unreachable traverse nodes after a refuted pair.

    Scans forward from the broken pair for the nearest downstream walk node
    that (a) is reachable from the pair's left end over traversable edges and
    (b) skips only traverse-subtask nodes. On success the dead span and its
    pending hypotheses are replaced by the re-routed segment.
    """
    left = walk[pair_at]
    limit = len(walk)
    for j in range(pair_at + 2, limit):
        # only traverse nodes may be dropped
        if any(s.kind != SUBTASK_TRAVERSE for s in subs[pair_at + 1 : j]):
            return False
        verdict = g.invoke(
            entry,
            "path_traversable",
            [left, walk[j]],
            {"a": left, "b": walk[j]},
        )
        if not verdict["ok"]:
            continue
        path = verdict["path"]
        dropped = set(walk[pair_at + 1 : j]) - set(path)
        walk[pair_at + 1 : j] = path[1:-1]
        subs[pair_at + 1 : j] = [
            Subtask(node=n, kind=SUBTASK_TRAVERSE) for n in path[1:-1]
        ]
        seg_subs = [Subtask(node=n, kind=SUBTASK_TRAVERSE) for n in path]
        fresh = regenerate(path, seg_subs)

        # drop the refuted hypothesis plus any pending ones that reference
        # removed nodes; the regenerated segment re-covers its own pairs
        def refers_dropped(h: Hypothesis) -> bool:
            if h.kind == PATH_TRAVERSABLE:
                return h.a in dropped or h.b in dropped
            if h.kind == VALID_EXIT:
                return any(s in dropped for s in h.scope)
            if h.kind == COVERAGE_AVAILABLE:
                return h.node in dropped
            return False

        tail = [
            h
            for h in hyps[hyp_at + 1 :]
            if not (h.status == UNVERIFIED and refers_dropped(h))
        ]
        hyps[hyp_at:] = fresh + tail
        return True
    return False
