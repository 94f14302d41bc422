"""Discrete-time execution of schedules against a moving target.

The target follows a timed node trajectory; sensors activate according to
their directives; each active sensor covering the target's current node
detects it with fixed probability per tick. Downstream directives fire just
in time using a constant-velocity Kalman filter over arc length along the
planned walk, updated whenever the target is first sighted at a walk node.

Detection randomness is counter-based (keyed by seed, episode, sensor and
step) so distinct schedules replay the exact same luck: a sensor that is
active in two schedules at the same step sees the same coin flip in both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .jsonio import stable_uniform
from .scheduler import Schedule, static_projection, walk_arcs
from .stg import NodeDirective, Trigger
from .world import WorldModel


class MalformedScheduleError(ValueError):
    pass


class TrajectoryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KalmanParams:
    q_process: float = 0.05
    r_meas: float = 1.0


@dataclass(frozen=True)
class SimConfig:
    dt_s: float = 1.0
    p_detect: float = 0.9
    frame_size_mb: float = 0.8
    eta_lead_s: float = 5.0
    kalman: KalmanParams = field(default_factory=KalmanParams)
    static_velocity_mps: float = 1.4
    seed: int = 0
    timeout_s: float = 600.0


@dataclass(frozen=True)
class TargetTrajectory:
    """Timed ground-truth motion: (node, arrival_time) waypoints.

    The target occupies each waypoint node until the next arrival time,
    lingers dwell_s at the last one, then leaves the scene. Consecutive
    waypoints must be adjacent in the spatial graph and times must rise
    strictly.
    """

    waypoints: tuple[tuple[str, float], ...]
    dwell_s: float = 60.0
    deviates: bool = False

    def __post_init__(self):
        object.__setattr__(
            self,
            "waypoints",
            tuple((str(n), float(t)) for n, t in self.waypoints),
        )
        if not self.waypoints:
            raise TrajectoryError("trajectory needs at least one waypoint")
        times = [t for _, t in self.waypoints]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise TrajectoryError("waypoint times must be strictly increasing")

    def validate_adjacency(self, world: WorldModel) -> None:
        for (a, _), (b, _) in zip(self.waypoints, self.waypoints[1:]):
            if world.edge_between(a, b) is None:
                raise TrajectoryError(f"waypoints {a!r} and {b!r} are not adjacent")

    def node_at(self, t: float) -> str | None:
        """Node occupied at time t, or None when off scene."""
        if t < self.waypoints[0][1]:
            return None
        node = None
        for n, at in self.waypoints:
            if at <= t:
                node = n
            else:
                break
        last_at = self.waypoints[-1][1]
        if t > last_at + self.dwell_s:
            return None
        return node

    def to_dict(self) -> dict:
        return {
            "waypoints": [[n, t] for n, t in self.waypoints],
            "dwell_s": self.dwell_s,
            "deviates": self.deviates,
        }

    @staticmethod
    def from_dict(d: dict) -> "TargetTrajectory":
        return TargetTrajectory(
            waypoints=tuple((n, t) for n, t in d["waypoints"]),
            dwell_s=d.get("dwell_s", 60.0),
            deviates=d.get("deviates", False),
        )


# ---------------------------------------------------------------------------
# constant-velocity Kalman filter over arc length
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KalmanEtaState:
    """State (arc position s in meters, speed v in m/s) with covariance."""

    s: float
    v: float
    p: tuple[tuple[float, float], tuple[float, float]]
    last_update_s: float = 0.0

    def cov(self) -> np.ndarray:
        return np.array(self.p, dtype=float)


def _as_p(mat: np.ndarray) -> tuple[tuple[float, float], tuple[float, float]]:
    sym = (mat + mat.T) / 2.0
    return ((float(sym[0, 0]), float(sym[0, 1])), (float(sym[1, 0]), float(sym[1, 1])))


def kalman_init(arc_m: float, v0: float, t: float, params: KalmanParams) -> KalmanEtaState:
    """Start the filter at a sighted arc position with a speed prior."""
    p0 = ((params.r_meas, 0.0), (0.0, 1.0))
    return KalmanEtaState(s=float(arc_m), v=float(v0), p=p0, last_update_s=t)


def kalman_step(
    state: KalmanEtaState,
    dt: float,
    measurement: float | None,
    params: KalmanParams,
) -> KalmanEtaState:
    """Predict forward dt seconds, then fold in an arc measurement if given.

    Uses the Joseph-form covariance update and re-symmetrizes, which keeps
    the covariance positive semidefinite over long predict-only stretches.
    """
    if dt < 0 or not math.isfinite(dt):
        raise ValueError("dt must be finite and non-negative")
    x = np.array([state.s, state.v], dtype=float)
    p = state.cov()
    if dt > 0:
        f = np.array([[1.0, dt], [0.0, 1.0]])
        q = np.array([[0.0, 0.0], [0.0, params.q_process * dt]])
        x = f @ x
        p = f @ p @ f.T + q
    if measurement is not None:
        if not math.isfinite(measurement):
            raise ValueError("measurement must be finite")
        h = np.array([[1.0, 0.0]])
        r = params.r_meas
        innovation = measurement - x[0]
        s_inn = float(p[0, 0] + r)
        k = (p @ h.T) / s_inn
        x = x + (k * innovation).ravel()
        ikh = np.eye(2) - k @ h
        p = ikh @ p @ ikh.T + (k * r) @ k.T
    return KalmanEtaState(
        s=float(x[0]),
        v=float(x[1]),
        p=_as_p(p),
        last_update_s=state.last_update_s + dt,
    )


@dataclass(frozen=True)
class EtaEstimate:
    mean_s: float
    std_s: float


MIN_SPEED_MPS = 0.05


def eta(state: KalmanEtaState, arc_target_m: float, v_min: float = MIN_SPEED_MPS) -> EtaEstimate:
    """Time-to-arc estimate with a first-order uncertainty propagation.

    Mean is clamped at zero once the believed position passes the target.
    When the believed speed is at or below v_min the estimate is undefined
    and (inf, inf) is returned so callers keep sensors armed.
    """
    if state.v <= v_min:
        return EtaEstimate(mean_s=math.inf, std_s=math.inf)
    remaining = arc_target_m - state.s
    mean = remaining / state.v
    grad = np.array([-1.0 / state.v, -remaining / (state.v * state.v)])
    var = float(grad @ state.cov() @ grad)
    std = math.sqrt(max(var, 0.0))
    return EtaEstimate(mean_s=max(mean, 0.0), std_s=std)


# ---------------------------------------------------------------------------
# episode execution
# ---------------------------------------------------------------------------


@dataclass
class ExecutionReport:
    completed: bool
    latency_s: float
    tfp: int
    bandwidth_mb: float
    detections: list[dict] = field(default_factory=list)
    terminated_early: bool = False
    steps: int = 0

    def to_dict(self) -> dict:
        return {
            "completed": self.completed,
            "latency_s": self.latency_s,
            "tfp": self.tfp,
            "bandwidth_mb": self.bandwidth_mb,
            "detections": self.detections,
            "terminated_early": self.terminated_early,
            "steps": self.steps,
        }


_ARMED, _ACTIVE, _DONE = "armed", "active", "done"


class _DirectiveState:
    __slots__ = ("directive", "walk_index", "status", "activated_at")

    def __init__(self, directive: NodeDirective, walk_index: int | None):
        self.directive = directive
        self.walk_index = walk_index
        self.status = _ARMED
        self.activated_at = 0.0


def run_episode(
    schedule: Schedule,
    world: WorldModel,
    trajectory: TargetTrajectory,
    config: SimConfig,
    episode_id: str = "",
) -> ExecutionReport:
    """Simulate one target pass against a schedule; returns the tally.

    Every tick, active sensors each contribute one processed frame; active
    sensors covering the target's node then draw for detection. The first
    sighting at a planned walk node feeds the arrival filter and confirms
    that node's directive. The episode ends early once the final walk node
    is confirmed; latency is that instant, or the timeout when it never is.
    """
    if not schedule.walk:
        raise MalformedScheduleError("schedule has an empty walk")
    for node in schedule.walk:
        if node not in world.nodes:
            raise MalformedScheduleError(f"walk node {node!r} missing from the world")
    trajectory.validate_adjacency(world)

    arcs = walk_arcs(schedule.walk, world)
    arc_of: dict[str, float] = {}
    index_of: dict[str, int] = {}
    for i, node in enumerate(schedule.walk):
        arc_of.setdefault(node, arcs[i])
        index_of.setdefault(node, i)
    final_node = schedule.walk[-1]

    states = [
        _DirectiveState(d, index_of.get(d.node)) for d in schedule.directives
    ]

    filt: KalmanEtaState | None = None
    confirmed: set[str] = set()
    max_confirmed_index = -1
    seen: set[str] = set()
    detections: list[dict] = []
    frames = 0
    completed = False
    latency = config.timeout_s
    seed_key = str(config.seed)

    step = 0
    t = 0.0
    while t <= config.timeout_s + 1e-9:
        if filt is not None and t > filt.last_update_s:
            filt = kalman_step(filt, t - filt.last_update_s, None, config.kalman)

        active_sensors: set[str] = set()
        for st in states:
            d = st.directive
            trig = d.trigger
            if st.status == _ARMED:
                if d.release_on_confirm and d.node in confirmed:
                    st.status = _DONE
                elif trig.kind == "immediate":
                    st.status = _ACTIVE
                    st.activated_at = t
                elif trig.kind == "at_time":
                    if t >= trig.at_s:
                        if t < trig.at_s + d.max_duration_s:
                            st.status = _ACTIVE
                            st.activated_at = trig.at_s
                        else:
                            st.status = _DONE
                elif trig.kind == "on_eta":
                    if filt is not None:
                        est = eta(filt, arc_of.get(d.node, 0.0))
                        if est.mean_s <= (trig.lead_s or 0.0):
                            st.status = _ACTIVE
                            st.activated_at = t
            if st.status == _ACTIVE:
                if t >= st.activated_at + d.max_duration_s:
                    st.status = _DONE
                elif (
                    trig.kind == "on_eta"
                    and filt is not None
                    and st.walk_index is not None
                    and st.walk_index + 1 < len(arcs)
                    and filt.s >= arcs[st.walk_index + 1]
                ):
                    st.status = _DONE
            if st.status == _ACTIVE:
                active_sensors.update(d.sensors)

        frames += len(active_sensors)

        node = trajectory.node_at(t)
        if node is not None and active_sensors:
            covering = set(world.coverage_index.get(node, ()))
            hits = [
                sensor
                for sensor in sorted(active_sensors & covering)
                if stable_uniform(seed_key, episode_id, sensor, str(step))
                < config.p_detect
            ]
            if hits and node not in seen:
                seen.add(node)
                detections.append({"t_s": t, "node": node, "sensor": hits[0]})
                if node in arc_of:
                    confirmed.add(node)
                    meas = arc_of[node]
                    if filt is None:
                        filt = kalman_init(
                            meas, config.static_velocity_mps, t, config.kalman
                        )
                    else:
                        filt = kalman_step(filt, 0.0, meas, config.kalman)
                    for st in states:
                        if (
                            st.directive.node == node
                            and st.directive.release_on_confirm
                            and st.status != _DONE
                        ):
                            st.status = _DONE
                    if node == final_node:
                        completed = True
                        latency = t
                        break

        step += 1
        t = step * config.dt_s

    return ExecutionReport(
        completed=completed,
        latency_s=latency,
        tfp=frames,
        bandwidth_mb=frames * config.frame_size_mb,
        detections=detections,
        terminated_early=completed,
        steps=step,
    )


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

#: effectively "the whole episode" for always-on directives
UNBOUNDED_DURATION_S = 1e9


def _best_sensor(node: str, world: WorldModel) -> str | None:
    covering = world.coverage_index.get(node, ())
    return covering[0] if covering else None


def baseline_static(
    walk,
    world: WorldModel,
    config: SimConfig,
    window_s: float = 30.0,
    start_s: float = 0.0,
) -> Schedule:
    """Precomputed clock windows centered on nominal arrival times.

    Each walk node gets one sensor active for a fixed window around the
    arrival predicted from the assumed constant pedestrian speed. The
    window start is clamped to the episode start.
    """
    walk = list(walk)
    arcs = walk_arcs(walk, world)
    directives = []
    gaps = []
    seen_nodes = set()
    for node, arc in zip(walk, arcs):
        if node in seen_nodes:
            continue
        seen_nodes.add(node)
        sensor = _best_sensor(node, world)
        if sensor is None:
            gaps.append(node)
            continue
        center = start_s + arc / config.static_velocity_mps
        begin = max(start_s, center - window_s / 2.0)
        end = center + window_s / 2.0
        directives.append(
            NodeDirective(
                node=node,
                sensors=(sensor,),
                trigger=Trigger.at_time(begin),
                max_duration_s=end - begin,
            )
        )
    directives_t = tuple(directives)
    return Schedule(
        walk=tuple(walk),
        directives=directives_t,
        gaps=tuple(sorted(set(gaps))),
        static_plan=static_projection(directives_t),
        meta={"paradigm": "static", "window_s": window_s},
    )


def baseline_parallel(walk, world: WorldModel, extra_nodes=()) -> Schedule:
    """Everything on at once: every sensor covering the route, full episode."""
    walk = list(walk)
    region = sorted(set(walk) | set(extra_nodes))
    chosen: dict[str, str] = {}
    gaps = []
    for node in region:
        covering = world.coverage_index.get(node, ())
        if not covering:
            gaps.append(node)
        for sensor in covering:
            if sensor not in chosen:
                chosen[sensor] = node
    directives = tuple(
        NodeDirective(
            node=chosen[sensor],
            sensors=(sensor,),
            trigger=Trigger.immediate(),
            max_duration_s=UNBOUNDED_DURATION_S,
            release_on_confirm=False,
        )
        for sensor in sorted(chosen)
    )
    return Schedule(
        walk=tuple(walk),
        directives=directives,
        gaps=tuple(sorted(set(gaps))),
        static_plan=static_projection(directives),
        meta={"paradigm": "parallel"},
    )


def trajectory_from_walk(
    walk, world: WorldModel, speed_mps: float, start_s: float = 0.0, dwell_s: float = 60.0
) -> TargetTrajectory:
    """Ground-truth trajectory walking the route at constant speed."""
    arcs = walk_arcs(walk, world)
    waypoints = [(node, start_s + arc / speed_mps) for node, arc in zip(walk, arcs)]
    return TargetTrajectory(waypoints=tuple(waypoints), dwell_s=dwell_s)
