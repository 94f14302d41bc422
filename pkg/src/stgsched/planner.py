"""Intent planning: constrained query grammar -> hypothesized trajectory graph.

The planner parses a small line-oriented grammar, anchors each location
reference to candidate nodes, picks one candidate per anchor and chains them
into a witness walk, and emits the explicit hypotheses that walk rests on.
Everything here is deliberately optimistic: routes are chained over all edges
regardless of their traversable flag, because traversability is exactly what
the grounding stage exists to verify. The result is the hypothesized graph
(sigma empty, all hypotheses Unverified).

Grammar:
    WATCH <ref> | COUNT <ref>                               (panoramic)
    FOCUS <ref>                                             (focal)
    TRACK <target> FROM <ref> TO <ref> [BETWEEN <a> AND <b>] (track)
    ROUTE <ref> (THEN <ref>)+                               (hybrid)
where <ref> and <target> are double-quoted strings and times are integer
seconds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

from . import world as world_mod
from .stg import (
    COVERAGE_AVAILABLE,
    FACILITY_EXISTS,
    PATH_TRAVERSABLE,
    VALID_EXIT,
    Hypothesis,
    TrajectoryGraph,
)
from .world import WorldModel

TASK_FOCAL = "Focal"
TASK_PANORAMIC = "Panoramic"
TASK_TRACK = "Track"
TASK_HYBRID = "Hybrid"

SUBTASK_OBSERVE = "observe"
SUBTASK_TRAVERSE = "traverse"
SUBTASK_COVER_AREA = "cover_area"


class GrammarError(ValueError):
    def __init__(self, message: str, pos: int):
        self.pos = pos
        super().__init__(f"grammar error at position {pos}: {message}")


class AnchorError(ValueError):
    """A location reference resolved to zero candidate nodes."""


class DecompositionError(ValueError):
    """No candidate combination yields a connected walk."""


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Query:
    raw: str
    task: str
    refs: tuple[str, ...]
    time_window: tuple[int, int] | None = None
    target_desc: str | None = None

    def to_dict(self) -> dict:
        return {
            "raw": self.raw,
            "task": self.task,
            "refs": list(self.refs),
            "time_window": list(self.time_window) if self.time_window else None,
            "target_desc": self.target_desc,
        }


def _tokenize(text: str) -> list[tuple[str, object, int]]:
    tokens: list[tuple[str, object, int]] = []
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c == '"':
            j = text.find('"', i + 1)
            if j < 0:
                raise GrammarError("unterminated quoted string", i)
            tokens.append(("STRING", text[i + 1 : j], i))
            i = j + 1
        elif c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            tokens.append(("NUMBER", int(text[i:j]), i))
            i = j
        elif c.isalpha():
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("WORD", text[i:j], i))
            i = j
        else:
            raise GrammarError(f"unexpected character {c!r}", i)
    return tokens


class _Cursor:
    def __init__(self, tokens, text_len):
        self.tokens = tokens
        self.i = 0
        self.text_len = text_len

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def take(self, kind: str, value=None):
        tok = self.peek()
        if tok is None:
            raise GrammarError(f"expected {value or kind}, got end of input", self.text_len)
        if tok[0] != kind or (value is not None and tok[1] != value):
            raise GrammarError(f"expected {value or kind}, got {tok[1]!r}", tok[2])
        self.i += 1
        return tok[1]

    def done(self):
        tok = self.peek()
        if tok is not None:
            raise GrammarError(f"unexpected trailing input {tok[1]!r}", tok[2])


def parse_query(text: str) -> Query:
    """Parse one grammar line into a structured Query.

    Raises GrammarError (with character position) on malformed input.
    """
    tokens = _tokenize(text)
    if not tokens:
        raise GrammarError("empty query", 0)
    cur = _Cursor(tokens, len(text))
    kind, head, pos = tokens[0]
    if kind != "WORD":
        raise GrammarError(f"expected a command word, got {head!r}", pos)

    if head in ("WATCH", "COUNT"):
        cur.take("WORD")
        ref = cur.take("STRING")
        cur.done()
        return Query(raw=text, task=TASK_PANORAMIC, refs=(ref,))
    if head == "FOCUS":
        cur.take("WORD")
        ref = cur.take("STRING")
        cur.done()
        return Query(raw=text, task=TASK_FOCAL, refs=(ref,))
    if head == "TRACK":
        cur.take("WORD")
        target = cur.take("STRING")
        cur.take("WORD", "FROM")
        start = cur.take("STRING")
        cur.take("WORD", "TO")
        end = cur.take("STRING")
        window = None
        if cur.peek() is not None:
            cur.take("WORD", "BETWEEN")
            t0 = cur.take("NUMBER")
            cur.take("WORD", "AND")
            t1 = cur.take("NUMBER")
            window = (t0, t1)
        cur.done()
        return Query(
            raw=text,
            task=TASK_TRACK,
            refs=(start, end),
            time_window=window,
            target_desc=target,
        )
    if head == "ROUTE":
        cur.take("WORD")
        refs = [cur.take("STRING")]
        while cur.peek() is not None:
            cur.take("WORD", "THEN")
            refs.append(cur.take("STRING"))
        if len(refs) < 2:
            raise GrammarError("ROUTE needs at least one THEN segment", len(text))
        cur.done()
        return Query(raw=text, task=TASK_HYBRID, refs=tuple(refs))
    raise GrammarError(f"unknown command {head!r}", pos)


# ---------------------------------------------------------------------------
# anchoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnchorRef:
    """One resolved location reference."""

    ref: str
    candidates: tuple[str, ...]
    match: str  # "name" | "substring" | "tag"
    tag: str | None = None

    def to_dict(self) -> dict:
        return {
            "ref": self.ref,
            "candidates": list(self.candidates),
            "match": self.match,
            "tag": self.tag,
        }


@dataclass(frozen=True)
class Anchoring:
    task: str
    anchors: tuple[AnchorRef, ...]
    connectors: tuple[str, ...]


def _resolve_ref(ref: str, world: WorldModel) -> AnchorRef:
    exact = sorted(n.id for n in world.nodes.values() if n.name == ref)
    if exact:
        return AnchorRef(ref=ref, candidates=tuple(exact), match="name")
    low = ref.lower()
    sub = sorted(n.id for n in world.nodes.values() if low in n.name.lower())
    if sub:
        return AnchorRef(ref=ref, candidates=tuple(sub), match="substring")
    tag_forms = {low, low.replace(" ", "_")}
    for tag in sorted(tag_forms):
        tagged = sorted(n.id for n in world.nodes.values() if tag in n.tags)
        if tagged:
            return AnchorRef(ref=ref, candidates=tuple(tagged), match="tag", tag=tag)
    raise AnchorError(f"reference {ref!r} resolves to no node (name, substring, or tag)")


def anchor(query: Query, world: WorldModel) -> Anchoring:
    """Resolve every ref to candidate nodes and infer connector candidates.

    Connector inference: consecutive anchors on different floors of one
    building pull in that building's elevator/stair nodes; anchors in
    different buildings pull in the door nodes of both buildings.
    """
    anchors = tuple(_resolve_ref(ref, world) for ref in query.refs)
    connectors: set[str] = set()
    for left, right in zip(anchors, anchors[1:]):
        for a_id in left.candidates:
            na = world.nodes[a_id]
            for b_id in right.candidates:
                nb = world.nodes[b_id]
                if na.building is None or nb.building is None:
                    continue
                if na.building == nb.building:
                    if (
                        na.floor is not None
                        and nb.floor is not None
                        and na.floor != nb.floor
                    ):
                        connectors.update(
                            world.vertical_connectors_of_building(na.building)
                        )
                else:
                    connectors.update(world.doors_of_building(na.building))
                    connectors.update(world.doors_of_building(nb.building))
    return Anchoring(task=query.task, anchors=anchors, connectors=tuple(sorted(connectors)))


# ---------------------------------------------------------------------------
# decomposition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Subtask:
    node: str
    kind: str
    area: tuple[str, ...] = ()
    facility_tag: str | None = None

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "kind": self.kind,
            "area": list(self.area),
            "facility_tag": self.facility_tag,
        }

    @staticmethod
    def from_dict(d: dict) -> "Subtask":
        return Subtask(
            node=d["node"],
            kind=d["kind"],
            area=tuple(d.get("area", ())),
            facility_tag=d.get("facility_tag"),
        )


def _components(world: WorldModel) -> dict[str, int]:
    """Connected components over ALL edges (traversability ignored)."""
    comp: dict[str, int] = {}
    cid = 0
    for start in sorted(world.nodes):
        if start in comp:
            continue
        stack = [start]
        comp[start] = cid
        while stack:
            u = stack.pop()
            for v in world.adj[u]:
                if v not in comp:
                    comp[v] = cid
                    stack.append(v)
        cid += 1
    return comp


def decompose(anchoring: Anchoring, world: WorldModel) -> tuple[list[str], list[Subtask]]:
    """Choose one candidate per anchor and chain them into a walk.

    Candidate choice prefers reachability to the rest of the chain, then the
    lexicographically smallest id. The chain is routed with shortest paths
    over all edges (optimistically; traversability is verified later).
    Returns (walk, subtasks aligned to walk).
    """
    comp = _components(world)
    anchors = anchoring.anchors

    chosen: list[str] = []
    if len(anchors) == 1:
        chosen = [anchors[0].candidates[0]]
    else:
        # a feasible chain needs one component holding a candidate of every
        # anchor; scan pairs first so the error names the broken link
        comp_sets = [
            {comp[c] for c in a.candidates} for a in anchors
        ]
        feasible = set.intersection(*comp_sets)
        if not feasible:
            running = comp_sets[0]
            for i in range(1, len(anchors)):
                running = running & comp_sets[i]
                if not running:
                    raise DecompositionError(
                        "no connected chain between "
                        f"{anchors[i - 1].ref!r} and {anchors[i].ref!r}"
                    )
        target_comp = None
        for cand in anchors[0].candidates:  # lexicographic: candidates sorted
            if comp[cand] in feasible:
                target_comp = comp[cand]
                chosen.append(cand)
                break
        for a in anchors[1:]:
            pick = next(c for c in a.candidates if comp[c] == target_comp)
            chosen.append(pick)

    walk: list[str] = [chosen[0]]
    for nxt in chosen[1:]:
        if nxt == walk[-1]:
            continue
        seg = world_mod.shortest_path(walk[-1], nxt, world, traversable_only=False)
        if seg is None:  # unreachable despite component check: defensive
            raise DecompositionError(f"no path from {walk[-1]!r} to {nxt!r}")
        walk.extend(seg[0][1:])

    anchor_nodes = set(chosen)
    subtasks: list[Subtask] = []
    for node in walk:
        if anchoring.task == TASK_PANORAMIC:
            a = anchors[0]
            subtasks.append(
                Subtask(
                    node=node,
                    kind=SUBTASK_COVER_AREA,
                    area=a.candidates,
                    facility_tag=a.tag,
                )
            )
        elif node in anchor_nodes:
            subtasks.append(Subtask(node=node, kind=SUBTASK_OBSERVE))
        else:
            subtasks.append(Subtask(node=node, kind=SUBTASK_TRAVERSE))
    return walk, subtasks


# ---------------------------------------------------------------------------
# hypothesis emission
# ---------------------------------------------------------------------------


def _building_run(walk: list[str], idx: int, building: str, world: WorldModel) -> tuple[str, ...]:
    """Maximal contiguous walk segment around idx sharing ``building``."""
    lo = idx
    while lo > 0 and world.nodes[walk[lo - 1]].building == building:
        lo -= 1
    hi = idx
    while hi + 1 < len(walk) and world.nodes[walk[hi + 1]].building == building:
        hi += 1
    return tuple(walk[lo : hi + 1])


def hypothesize(
    walk: list[str],
    subtasks: list[Subtask],
    world: WorldModel,
    id_start: int = 1,
) -> list[Hypothesis]:
    """Emit the walk's structural hypotheses, all Unverified.

    Rules: every observe node needs coverage; every consecutive pair needs a
    traversable path; every building exit/entry transition needs a valid
    exit; every panoramic facility tag needs a matching facility.
    """
    if len(subtasks) != len(walk):
        raise ValueError("subtasks must align 1:1 with the walk")
    out: list[Hypothesis] = []
    seq = id_start

    def hid() -> str:
        nonlocal seq
        h = f"h{seq}"
        seq += 1
        return h

    def next_goal(after: int) -> str:
        for j in range(after + 1, len(walk)):
            if subtasks[j].kind in (SUBTASK_OBSERVE, SUBTASK_COVER_AREA):
                return walk[j]
        return walk[-1]

    emitted_facility: set[tuple[tuple[str, ...], str]] = set()

    for i, node in enumerate(walk):
        sub = subtasks[i]
        if sub.kind == SUBTASK_OBSERVE:
            out.append(Hypothesis(id=hid(), kind=COVERAGE_AVAILABLE, node=node))
        if (
            sub.kind == SUBTASK_COVER_AREA
            and sub.facility_tag
            and (sub.area, sub.facility_tag) not in emitted_facility
        ):
            emitted_facility.add((sub.area, sub.facility_tag))
            out.append(
                Hypothesis(
                    id=hid(), kind=FACILITY_EXISTS, scope=sub.area, tag=sub.facility_tag
                )
            )
        if i + 1 < len(walk):
            u, v = node, walk[i + 1]
            bu = world.nodes[u].building
            bv = world.nodes[v].building
            if bu != bv:
                if bu is not None:
                    scope = _building_run(walk, i, bu, world)
                else:
                    scope = _building_run(walk, i + 1, bv, world)
                out.append(
                    Hypothesis(
                        id=hid(), kind=VALID_EXIT, scope=scope, toward=next_goal(i)
                    )
                )
            out.append(Hypothesis(id=hid(), kind=PATH_TRAVERSABLE, a=u, b=v))
    return out


# ---------------------------------------------------------------------------
# blueprint and planner interface
# ---------------------------------------------------------------------------


@dataclass
class IntentBlueprint:
    anchors: tuple[AnchorRef, ...]
    connectors: tuple[str, ...]
    walk: tuple[str, ...]
    subtasks: tuple[Subtask, ...]
    hypotheses: tuple[Hypothesis, ...]

    def to_dict(self) -> dict:
        return {
            "anchors": [a.to_dict() for a in self.anchors],
            "connectors": list(self.connectors),
            "walk": list(self.walk),
            "subtasks": [s.to_dict() for s in self.subtasks],
            "hypotheses": [h.to_dict() for h in self.hypotheses],
        }


class PlannerInterface(Protocol):
    """Anything that maps (Query, WorldModel) to an IntentBlueprint."""

    def plan(self, query: Query, world: WorldModel) -> IntentBlueprint: ...


class ReferencePlanner:
    """Deterministic planner: anchor, decompose, hypothesize."""

    def plan(self, query: Query, world: WorldModel) -> IntentBlueprint:
        anchoring = anchor(query, world)
        walk, subtasks = decompose(anchoring, world)
        hyps = hypothesize(walk, subtasks, world)
        waypoints = tuple(
            n
            for n in walk
            if not any(n in a.candidates for a in anchoring.anchors)
        )
        connectors = tuple(sorted(set(anchoring.connectors) | set(waypoints)))
        return IntentBlueprint(
            anchors=anchoring.anchors,
            connectors=connectors,
            walk=tuple(walk),
            subtasks=tuple(subtasks),
            hypotheses=tuple(hyps),
        )


def build_blueprint(query: Query, world: WorldModel) -> IntentBlueprint:
    return ReferencePlanner().plan(query, world)


def blueprint_to_stg(blueprint: IntentBlueprint, world: WorldModel) -> TrajectoryGraph:
    """Assemble the hypothesized graph G0 (sigma empty, all Unverified)."""
    nodes: set[str] = set(blueprint.walk)
    for a in blueprint.anchors:
        nodes.update(a.candidates)
    nodes.update(blueprint.connectors)
    for s in blueprint.subtasks:
        nodes.update(s.area)
    edges = {
        (min(e.a, e.b), max(e.a, e.b))
        for e in world.edges
        if e.a in nodes and e.b in nodes
    }
    return TrajectoryGraph(
        V=frozenset(nodes),
        E=frozenset(edges),
        tau_V=blueprint.walk,
        sigma={},
        hypotheses=blueprint.hypotheses,
    )
