"""World model: spatial graph, camera network, and the coverage index.

A world is an immutable snapshot of a site. Spatial nodes (rooms, corridors,
doors, elevators, stairs, outdoor segments) sit in a local cartesian frame in
meters and are joined by weighted undirected edges. Cameras each cover an
explicit set of nodes; the coverage index is the exact inverse map and every
downstream stage queries coverage only through it.

Conventions:
  * camera heading 0 degrees points along +x, angles grow counterclockwise;
  * at most one edge per unordered node pair, lengths strictly positive;
  * shortest paths run over traversable edges and break ties by the
    lexicographically smallest node-id sequence, so equal worlds always
    give byte-equal routes.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

from .jsonio import canonical_digest

# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

NODE_KINDS = ("room", "corridor", "door", "elevator", "stair", "outdoor_segment")
EDGE_KINDS = ("intra_floor", "vertical", "indoor_outdoor")
SENSOR_KINDS = ("camera",)

#: node kinds that are connectors and therefore may not be isolated
CONNECTOR_KINDS = ("door", "elevator", "stair")

#: the only coordinate reference the loader accepts
WORLD_CRS = "site-local-cartesian-meters"

_NODE_KEYS = {"id", "name", "kind", "pos", "building", "floor", "tags"}
_EDGE_KEYS = {"a", "b", "kind", "traversable", "length_m"}
_SENSOR_KEYS = {"id", "kind", "node", "pos", "heading_deg", "fov_deg", "range_m", "covers"}
_TOP_KEYS = {"meta", "nodes", "edges", "sensors"}


class WorldFormatError(ValueError):
    """Raised when a document is not structurally parseable as a world."""


class WorldValidationError(ValueError):
    """Raised when a parsed world violates one or more invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid world: " + "; ".join(self.violations))


class UnknownNodeError(KeyError):
    """Raised when an operation references a node id the world lacks."""


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpatialNode:
    id: str
    name: str
    kind: str
    pos: tuple[float, float]
    building: str | None = None
    floor: int | None = None
    tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class SpatialEdge:
    a: str
    b: str
    kind: str
    traversable: bool
    length_m: float

    def other(self, node_id: str) -> str:
        return self.b if node_id == self.a else self.a


@dataclass(frozen=True)
class Sensor:
    """A camera with a fixed pose and an explicit coverage list."""

    id: str
    kind: str
    node: str
    pos: tuple[float, float]
    heading_deg: float
    fov_deg: float
    range_m: float
    covers: tuple[str, ...] = ()


class WorldModel:
    """Validated, effectively immutable world snapshot.

    Construct via :func:`load_world` for JSON documents or pass fully built
    component lists (the benchmark generator does the latter). Mutating a
    WorldModel after construction is unsupported; every op treats it as
    read-only, which also makes it safe to share across threads.
    """

    def __init__(self, nodes, edges, sensors, meta=None):
        self.meta: dict = dict(meta or {})
        self.nodes: dict[str, SpatialNode] = {n.id: n for n in nodes}
        self.edges: list[SpatialEdge] = list(edges)
        self.sensors: dict[str, Sensor] = {s.id: s for s in sensors}

        # adjacency: node id -> {neighbor id -> edge}
        self.adj: dict[str, dict[str, SpatialEdge]] = {nid: {} for nid in self.nodes}
        for e in self.edges:
            if e.a in self.adj and e.b in self.adj:
                self.adj[e.a][e.b] = e
                self.adj[e.b][e.a] = e

        violations = _validate(self)
        if violations:
            raise WorldValidationError(violations)

        # coverage index: exact inverse of the covers lists, defined for
        # every node (possibly empty)
        index: dict[str, set[str]] = {nid: set() for nid in self.nodes}
        for s in self.sensors.values():
            for nid in s.covers:
                index[nid].add(s.id)
        self.coverage_index: dict[str, tuple[str, ...]] = {
            nid: tuple(sorted(ids)) for nid, ids in index.items()
        }

        self.digest: str = canonical_digest(world_document(self))

    # -- lookups ------------------------------------------------------------

    def node(self, node_id: str) -> SpatialNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNodeError(node_id) from None

    def neighbors(self, node_id: str) -> dict[str, SpatialEdge]:
        if node_id not in self.adj:
            raise UnknownNodeError(node_id)
        return self.adj[node_id]

    def edge_between(self, a: str, b: str) -> SpatialEdge | None:
        return self.adj.get(a, {}).get(b)

    def nodes_of_building(self, building: str) -> list[str]:
        return sorted(n.id for n in self.nodes.values() if n.building == building)

    def doors_of_building(self, building: str) -> list[str]:
        return sorted(
            n.id
            for n in self.nodes.values()
            if n.building == building and n.kind == "door"
        )

    def vertical_connectors_of_building(self, building: str) -> list[str]:
        return sorted(
            n.id
            for n in self.nodes.values()
            if n.building == building and n.kind in ("elevator", "stair")
        )

    def buildings(self) -> list[str]:
        return sorted({n.building for n in self.nodes.values() if n.building})


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _validate(world: WorldModel) -> list[str]:
    bad: list[str] = []

    crs = world.meta.get("crs")
    if crs is not None and crs != WORLD_CRS:
        bad.append(f"meta.crs must be {WORLD_CRS!r}, got {crs!r}")

    for n in world.nodes.values():
        if n.kind not in NODE_KINDS:
            bad.append(f"node {n.id}: unknown kind {n.kind!r}")
        if len(n.pos) != 2 or not all(math.isfinite(c) for c in n.pos):
            bad.append(f"node {n.id}: pos must be two finite coordinates")
        if n.floor is not None and not isinstance(n.floor, int):
            bad.append(f"node {n.id}: floor must be an integer when present")

    seen_pairs: set[tuple[str, str]] = set()
    for e in world.edges:
        if e.a == e.b:
            bad.append(f"edge {e.a}--{e.b}: self-loops are not allowed")
            continue
        if e.a not in world.nodes or e.b not in world.nodes:
            bad.append(f"edge {e.a}--{e.b}: endpoint missing from nodes")
            continue
        pair = (min(e.a, e.b), max(e.a, e.b))
        if pair in seen_pairs:
            bad.append(f"edge {e.a}--{e.b}: duplicate edge for this node pair")
        seen_pairs.add(pair)
        if e.kind not in EDGE_KINDS:
            bad.append(f"edge {e.a}--{e.b}: unknown kind {e.kind!r}")
        if not (math.isfinite(e.length_m) and e.length_m > 0):
            bad.append(f"edge {e.a}--{e.b}: length_m must be finite and > 0")

    for n in world.nodes.values():
        if n.kind in CONNECTOR_KINDS and not world.adj.get(n.id):
            bad.append(f"node {n.id}: {n.kind} nodes need at least one incident edge")

    for s in world.sensors.values():
        if s.kind not in SENSOR_KINDS:
            bad.append(f"sensor {s.id}: unknown kind {s.kind!r}")
        if s.id in world.nodes:
            bad.append(f"sensor {s.id}: id collides with a spatial node id")
        if s.node not in world.nodes:
            bad.append(f"sensor {s.id}: mounted at unknown node {s.node!r}")
        if not (0 < s.fov_deg <= 360):
            bad.append(f"sensor {s.id}: fov_deg must be in (0, 360]")
        if not (math.isfinite(s.range_m) and s.range_m > 0):
            bad.append(f"sensor {s.id}: range_m must be finite and > 0")
        for nid in s.covers:
            if nid not in world.nodes:
                bad.append(f"sensor {s.id}: covers unknown node {nid!r}")

    return bad


# ---------------------------------------------------------------------------
# loading / dumping
# ---------------------------------------------------------------------------


def _reject_unknown(keys, allowed, where, strict, bad):
    if not strict:
        return
    extra = set(keys) - allowed
    if extra:
        bad.append(f"{where}: unknown keys {sorted(extra)}")


def load_world(document, strict: bool = False) -> WorldModel:
    """Build a :class:`WorldModel` from a JSON-shaped dict.

    Args:
        document: parsed JSON object (top-level dict).
        strict: reject unknown keys instead of ignoring them.

    Raises:
        WorldFormatError: malformed structure (wrong types, missing fields).
        WorldValidationError: structural invariant violations.
    """
    if not isinstance(document, dict):
        raise WorldFormatError("world document must be a JSON object")

    format_bad: list[str] = []
    _reject_unknown(document.keys(), _TOP_KEYS, "top level", strict, format_bad)

    meta = document.get("meta", {})
    if not isinstance(meta, dict):
        raise WorldFormatError("meta must be an object")

    nodes: list[SpatialNode] = []
    ids: set[str] = set()
    for i, raw in enumerate(document.get("nodes", [])):
        if not isinstance(raw, dict):
            raise WorldFormatError(f"nodes[{i}] must be an object")
        _reject_unknown(raw.keys(), _NODE_KEYS, f"nodes[{i}]", strict, format_bad)
        try:
            node = SpatialNode(
                id=str(raw["id"]),
                name=str(raw.get("name", raw["id"])),
                kind=str(raw["kind"]),
                pos=(float(raw["pos"][0]), float(raw["pos"][1])),
                building=raw.get("building"),
                floor=raw.get("floor"),
                tags=tuple(str(t) for t in raw.get("tags", [])),
            )
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise WorldFormatError(f"nodes[{i}]: {exc!r}") from exc
        if node.id in ids:
            format_bad.append(f"duplicate node id {node.id!r}")
        ids.add(node.id)
        nodes.append(node)

    edges: list[SpatialEdge] = []
    for i, raw in enumerate(document.get("edges", [])):
        if not isinstance(raw, dict):
            raise WorldFormatError(f"edges[{i}] must be an object")
        _reject_unknown(raw.keys(), _EDGE_KEYS, f"edges[{i}]", strict, format_bad)
        try:
            edges.append(
                SpatialEdge(
                    a=str(raw["a"]),
                    b=str(raw["b"]),
                    kind=str(raw["kind"]),
                    traversable=bool(raw.get("traversable", True)),
                    length_m=float(raw["length_m"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise WorldFormatError(f"edges[{i}]: {exc!r}") from exc

    node_by_id = {n.id: n for n in nodes}
    sensors: list[Sensor] = []
    sensor_ids: set[str] = set()
    for i, raw in enumerate(document.get("sensors", [])):
        if not isinstance(raw, dict):
            raise WorldFormatError(f"sensors[{i}] must be an object")
        _reject_unknown(raw.keys(), _SENSOR_KEYS, f"sensors[{i}]", strict, format_bad)
        try:
            sensor = Sensor(
                id=str(raw["id"]),
                kind=str(raw.get("kind", "camera")),
                node=str(raw["node"]),
                pos=(float(raw["pos"][0]), float(raw["pos"][1])),
                heading_deg=float(raw.get("heading_deg", 0.0)) % 360.0,
                fov_deg=float(raw.get("fov_deg", 360.0)),
                range_m=float(raw.get("range_m", 10.0)),
                covers=tuple(sorted(str(n) for n in raw["covers"]))
                if raw.get("covers") is not None
                else (),
            )
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise WorldFormatError(f"sensors[{i}]: {exc!r}") from exc
        if sensor.id in sensor_ids:
            format_bad.append(f"duplicate sensor id {sensor.id!r}")
        sensor_ids.add(sensor.id)
        sensors.append(sensor)

    if format_bad:
        raise WorldValidationError(format_bad)

    # geometric fallback: sensors without an explicit covers list get one
    # derived from their pose
    stage = WorldModel.__new__(WorldModel)
    stage.nodes = node_by_id  # just enough of a world for derive_coverage
    filled: list[Sensor] = []
    for s in sensors:
        if s.covers:
            filled.append(s)
        else:
            covered = derive_coverage(s, stage)
            filled.append(
                Sensor(
                    id=s.id,
                    kind=s.kind,
                    node=s.node,
                    pos=s.pos,
                    heading_deg=s.heading_deg,
                    fov_deg=s.fov_deg,
                    range_m=s.range_m,
                    covers=tuple(sorted(covered)),
                )
            )

    return WorldModel(nodes, edges, filled, meta)


def world_document(world: WorldModel) -> dict:
    """Canonical JSON-ready dict for a world (stable ordering throughout)."""
    return {
        "meta": dict(world.meta) if world.meta else {"crs": WORLD_CRS},
        "nodes": [
            {
                "id": n.id,
                "name": n.name,
                "kind": n.kind,
                "pos": [n.pos[0], n.pos[1]],
                "building": n.building,
                "floor": n.floor,
                "tags": list(n.tags),
            }
            for n in sorted(world.nodes.values(), key=lambda n: n.id)
        ],
        "edges": [
            {
                "a": e.a,
                "b": e.b,
                "kind": e.kind,
                "traversable": e.traversable,
                "length_m": e.length_m,
            }
            for e in sorted(world.edges, key=lambda e: (min(e.a, e.b), max(e.a, e.b)))
        ],
        "sensors": [
            {
                "id": s.id,
                "kind": s.kind,
                "node": s.node,
                "pos": [s.pos[0], s.pos[1]],
                "heading_deg": s.heading_deg,
                "fov_deg": s.fov_deg,
                "range_m": s.range_m,
                "covers": list(s.covers),
            }
            for s in sorted(world.sensors.values(), key=lambda s: s.id)
        ],
    }


# ---------------------------------------------------------------------------
# coverage
# ---------------------------------------------------------------------------


def derive_coverage(sensor: Sensor, world) -> set[str]:
    """Node ids inside the sensor's circular sector.

    A node is covered when its distance from the sensor is at most range_m
    and the bearing to it deviates from heading_deg by at most fov_deg / 2.
    The node at the sensor's own position is always covered (distance 0,
    bearing undefined). Heading 0 points along +x; angles counterclockwise.
    """
    out: set[str] = set()
    half = sensor.fov_deg / 2.0
    sx, sy = sensor.pos
    for node in world.nodes.values():
        dx = node.pos[0] - sx
        dy = node.pos[1] - sy
        dist = math.hypot(dx, dy)
        if dist > sensor.range_m:
            continue
        if dist == 0.0:
            out.add(node.id)
            continue
        bearing = math.degrees(math.atan2(dy, dx))
        diff = abs((bearing - sensor.heading_deg + 180.0) % 360.0 - 180.0)
        if diff <= half:
            out.add(node.id)
    return out


def sensors_covering(node_id: str, world: WorldModel) -> tuple[str, ...]:
    """Sorted sensor ids covering ``node_id`` (exact coverage_index lookup)."""
    if node_id not in world.nodes:
        raise UnknownNodeError(node_id)
    return world.coverage_index[node_id]


# ---------------------------------------------------------------------------
# shortest paths
# ---------------------------------------------------------------------------


def _dijkstra(world: WorldModel, source: str, traversable_only: bool) -> dict[str, float]:
    dist = {source: 0.0}
    heap: list[tuple[float, str]] = [(0.0, source)]
    done: set[str] = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for v, edge in world.adj[u].items():
            if traversable_only and not edge.traversable:
                continue
            nd = d + edge.length_m
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def shortest_path(
    a: str, b: str, world: WorldModel, traversable_only: bool = True
) -> tuple[list[str], float] | None:
    """Minimum-length path from ``a`` to ``b``, or None when disconnected.

    Among equal-length shortest paths the lexicographically smallest node-id
    sequence is returned, so results are deterministic. ``a == b`` gives
    ([a], 0.0). Set ``traversable_only=False`` to route over every edge
    regardless of its traversable flag.
    """
    if a not in world.nodes:
        raise UnknownNodeError(a)
    if b not in world.nodes:
        raise UnknownNodeError(b)
    if a == b:
        return [a], 0.0

    dist_a = _dijkstra(world, a, traversable_only)
    if b not in dist_a:
        return None
    dist_b = _dijkstra(world, b, traversable_only)
    total = dist_a[b]
    tol = 1e-9 * max(1.0, total)

    # walk the shortest-path DAG greedily: at each node take the smallest
    # neighbor id that still lies on some shortest continuation to b
    path = [a]
    u = a
    while u != b:
        nxt = None
        for v in sorted(world.adj[u]):
            edge = world.adj[u][v]
            if traversable_only and not edge.traversable:
                continue
            if v not in dist_b or v not in dist_a:
                continue
            if abs(dist_a[u] + edge.length_m - dist_a[v]) > tol:
                continue
            if abs(dist_a[v] + dist_b[v] - total) > tol:
                continue
            nxt = v
            break
        if nxt is None:  # numeric corner: fall back to plain predecessor walk
            return None
        path.append(nxt)
        u = nxt
    return path, total


def path_length(path: list[str], world: WorldModel) -> float:
    """Sum of edge lengths along ``path`` (consecutive nodes must be adjacent)."""
    total = 0.0
    for x, y in zip(path, path[1:]):
        edge = world.edge_between(x, y)
        if edge is None:
            raise ValueError(f"nodes {x!r} and {y!r} are not adjacent")
        total += edge.length_m
    return total
