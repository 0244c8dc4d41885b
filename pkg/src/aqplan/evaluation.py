"""Open-loop trajectory metrics and a small closed-loop kinematic harness.

Closed-loop protocol (this repository's own, not an official benchmark):

* the ego is a unicycle with a 4.0 m x 1.8 m footprint; each tick it steers
  toward the next planned waypoint with the bearing clamped to +-40 deg and
  the longitudinal acceleration clamped to the reward acceleration limit;
* the adversary is an axis-aligned box following a scripted trajectory;
* the policy sees only the ego's own history plus an intent tag written into
  ``reasoning_text`` by :func:`rule_based_intent`, a geometric stand-in for
  scene reasoning from camera input;
* a clean run scores 5; a collision scores 5 * max(0, 1 - impact / reference),
  where the reference speed is the ego/adversary closing speed at t = 0.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from shapely.geometry import Polygon, box

from .data import DT, EgoState, UnifiedClip
from .errors import ContractError

HORIZONS = (1.0, 2.0, 3.0)
EGO_HALF_EXTENTS = (2.0, 0.9)
STEER_LIMIT = math.radians(40.0)
SCENARIO_KINDS = ("stationary", "frontal", "side")
MAX_SCORE = 5.0


# ---------------------------------------------------------------------------
# open loop
# ---------------------------------------------------------------------------


def _horizon_index(k: float, dt: float, n: int) -> int:
    idx = int(round(k / dt)) - 1
    if idx >= n or idx < 0 or abs((idx + 1) * dt - k) > 1e-9:
        raise ContractError(f"no waypoint at {k:g} s with dt={dt} and {n} waypoints")
    return idx


def l2_at_horizons(pred, gt, dt: float = DT, horizons: Sequence[float] = HORIZONS) -> dict[str, float]:
    """Euclidean error at the waypoints lying 1, 2 and 3 s ahead, plus their mean."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise ContractError(f"pred {pred.shape} and gt {gt.shape} differ")
    if pred.shape[0] * dt < max(horizons) - 1e-9:
        raise ContractError(f"horizon {pred.shape[0] * dt:g} s shorter than {max(horizons):g} s")
    out = {}
    for k in horizons:
        i = _horizon_index(k, dt, pred.shape[0])
        out[f"L2@{k:g}s"] = float(np.linalg.norm(pred[i] - gt[i]))
    out["avg"] = float(np.mean([out[f"L2@{k:g}s"] for k in horizons]))
    return out


def mean_l2(preds: np.ndarray, gts: np.ndarray, dt: float = DT) -> dict[str, float]:
    rows = [l2_at_horizons(p, g, dt) for p, g in zip(preds, gts)]
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


@dataclass
class ObstacleBox:
    """Axis-aligned box whose center follows ``centers`` on a ``dt`` grid starting at ``t0``."""

    centers: np.ndarray  # (T, 2)
    half_extents: tuple[float, float] = (2.0, 0.9)
    t0: float = DT
    dt: float = DT

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        if min(self.half_extents) <= 0:
            raise ContractError("obstacle half extents must be positive")

    def index_at(self, t: float) -> int:
        i = int(round((t - self.t0) / self.dt))
        if i < 0 or i >= len(self.centers):
            raise ContractError(f"obstacle trajectory does not cover t={t:g} s")
        return i

    def center_at(self, t: float) -> np.ndarray:
        return self.centers[self.index_at(t)]

    def velocity_at(self, t: float) -> np.ndarray:
        i = self.index_at(t)
        if len(self.centers) < 2:
            return np.zeros(2)
        j = min(i + 1, len(self.centers) - 1)
        i0 = j - 1
        return (self.centers[j] - self.centers[i0]) / self.dt

    def polygon(self, t: float) -> Polygon:
        cx, cy = self.center_at(t)
        hl, hw = self.half_extents
        return box(cx - hl, cy - hw, cx + hl, cy + hw)


def _inside(p: np.ndarray, c: np.ndarray, half: tuple[float, float], ego_half: tuple[float, float]) -> bool:
    return abs(p[0] - c[0]) <= half[0] + ego_half[0] and abs(p[1] - c[1]) <= half[1] + ego_half[1]


def collision_rate(
    preds: Sequence[np.ndarray],
    scenes: Sequence[Sequence[ObstacleBox]],
    dt: float = DT,
    ego_half_extents: tuple[float, float] = EGO_HALF_EXTENTS,
    horizons: Sequence[float] = HORIZONS,
) -> dict[str, float]:
    """Percentage of clips whose planned waypoints hit an obstacle box by each horizon."""
    if len(preds) != len(scenes):
        raise ContractError(f"{len(preds)} predictions but {len(scenes)} scenes")
    if not preds:
        raise ContractError("collision_rate needs at least one clip")
    first_hit = []
    for pred, boxes in zip(preds, scenes):
        hit_t = math.inf
        for i, p in enumerate(np.asarray(pred, float)):
            t = (i + 1) * dt
            if any(_inside(p, b.center_at(t), b.half_extents, ego_half_extents) for b in boxes):
                hit_t = t
                break
        first_hit.append(hit_t)
    first_hit = np.array(first_hit)
    out = {f"CR@{k:g}s": float(100.0 * np.mean(first_hit <= k + 1e-9)) for k in horizons}
    out["avg"] = float(np.mean([out[f"CR@{k:g}s"] for k in horizons]))
    return out


def lane_traffic_scene(gt, offset: float = 3.5, dt: float = DT, half_extents=EGO_HALF_EXTENTS) -> list[ObstacleBox]:
    """Two vehicles pacing the logged path in the neighbouring lanes (left and right).

    Logs carry no agent tracks here, so open-loop collision rate measures how
    often a plan drifts a full lane away from the logged path.
    """
    gt = np.asarray(gt, float)
    return [ObstacleBox(gt + np.array([0.0, sign * offset]), tuple(half_extents), t0=dt, dt=dt) for sign in (1.0, -1.0)]


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------


@dataclass
class ScenarioSpec:
    kind: str
    ego_init: EgoState  # world frame; heading taken from velocity (or +x when stationary)
    adversary: ObstacleBox  # t0 = 0
    duration: float
    name: str = ""

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ContractError(f"unknown scenario kind {self.kind!r}")
        v = self.adversary.velocity_at(0.0)
        if self.kind == "stationary" and np.linalg.norm(v) > 1e-9:
            raise ContractError("stationary adversary must not move")
        if self.kind == "frontal" and not v[0] < 0:
            raise ContractError("frontal adversary must move toward the ego (negative x velocity)")
        if self.kind == "side" and abs(v[1]) <= 1e-9:
            raise ContractError("side adversary must have a crossing y velocity")
        if self.adversary.t0 != 0.0:
            raise ContractError("closed-loop adversary trajectories start at t=0")
        needed = int(round(self.duration / self.adversary.dt)) + 1
        if len(self.adversary.centers) < needed:
            raise ContractError("adversary trajectory shorter than the scenario duration")

    @property
    def reference_speed(self) -> float:
        return float(np.linalg.norm(np.asarray(self.ego_init.velocity) - self.adversary.velocity_at(0.0)))


@dataclass
class RolloutTrace:
    kind: str
    ego_poses: list[tuple[float, float, float]] = field(default_factory=list)  # x, y, yaw
    adversary_poses: list[tuple[float, float]] = field(default_factory=list)
    collided: bool = False
    impact_speed: float | None = None
    collision_time: float | None = None
    replans: int = 0
    reference_speed: float = 0.0
    invalid: bool = False
    intents: list[str] = field(default_factory=list)


def _straight_adversary(start, velocity, duration: float, half_extents, dt: float = DT) -> ObstacleBox:
    t = dt * np.arange(int(round(duration / dt)) + 2)
    centers = np.asarray(start, float) + np.outer(t, np.asarray(velocity, float))
    return ObstacleBox(centers, tuple(half_extents), t0=0.0, dt=dt)


def make_scenario(
    kind: str,
    ego_speed: float = 8.0,
    gap: float = 40.0,
    adversary_speed: float = 5.0,
    cross_x: float = 6.5,
    cross_time: float = 3.0,
    duration: float = 8.0,
    dt: float = DT,
) -> ScenarioSpec:
    """Scripted scenarios; ``gap`` is bumper-to-bumper distance along x."""
    ego = EgoState(0.0, (0.0, 0.0), (ego_speed, 0.0), (0.0, 0.0))
    ego_l = EGO_HALF_EXTENTS[0]
    car = (2.0, 0.9)
    if kind == "stationary":
        adv = _straight_adversary((ego_l + gap + car[0], 0.0), (0.0, 0.0), duration, car, dt)
    elif kind == "frontal":
        adv = _straight_adversary((ego_l + gap + car[0], 0.0), (-adversary_speed, 0.0), duration, car, dt)
    elif kind == "side":
        # crossing from the left; reaches the ego lane edge at cross_time
        side_car = (car[1], car[0])
        y0 = EGO_HALF_EXTENTS[1] + side_car[1] + adversary_speed * cross_time
        adv = _straight_adversary((cross_x, y0), (0.0, -adversary_speed), duration, side_car, dt)
    else:
        raise ContractError(f"unknown scenario kind {kind!r}")
    return ScenarioSpec(kind, ego, adv, duration, name=f"{kind}-v{ego_speed:g}")


def scenario_suite(n_per_kind: int = 4, seed: int = 0) -> list[ScenarioSpec]:
    rng = np.random.default_rng(seed)
    out = []
    for kind in SCENARIO_KINDS:
        for _ in range(n_per_kind):
            v = rng.uniform(6.0, 10.0)
            if kind == "stationary":
                out.append(make_scenario(kind, ego_speed=v, gap=rng.uniform(35.0, 45.0)))
            elif kind == "frontal":
                # close enough that a braking ego is still reached before the end
                out.append(make_scenario(kind, ego_speed=v, gap=rng.uniform(30.0, 40.0),
                                         adversary_speed=rng.uniform(4.0, 6.0), duration=10.0))
            else:
                out.append(make_scenario(kind, ego_speed=v, adversary_speed=rng.uniform(3.0, 6.0),
                                         cross_x=rng.uniform(5.0, 8.0), cross_time=rng.uniform(2.5, 3.5)))
    return out


def _to_frame(points: np.ndarray, origin, yaw: float) -> np.ndarray:
    c, s = math.cos(-yaw), math.sin(-yaw)
    d = np.asarray(points, float) - np.asarray(origin, float)
    return d @ np.array([[c, s], [-s, c]])


def _rot(vec, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([c * vec[0] - s * vec[1], s * vec[0] + c * vec[1]])


def rule_based_intent(ego_xy, ego_yaw: float, ego_speed: float, adversary: ObstacleBox, t: float) -> str:
    """Geometric scene reasoning: pick a maneuver tag from the adversary's relative motion."""
    rel = _to_frame(adversary.center_at(t)[None], ego_xy, ego_yaw)[0]
    rel_v = _rot(adversary.velocity_at(t), -ego_yaw)
    hl, hw = adversary.half_extents
    corridor = EGO_HALF_EXTENTS[1] + max(hl, hw) + 0.5
    clear_len = EGO_HALF_EXTENTS[0] + max(hl, hw)
    if rel[0] < -clear_len or rel[0] > 80.0:
        return "straight"
    in_lane = abs(rel[1]) < corridor
    if in_lane and rel[0] > 0:
        if np.linalg.norm(rel_v) < 0.5:
            return "stop"
        if rel_v[0] < -0.5:
            return "right-turn"
        return "straight"
    if rel[1] * rel_v[1] < 0 and abs(rel_v[1]) > 0.5:
        t_adv = (abs(rel[1]) - corridor) / abs(rel_v[1])
        t_ego = (rel[0] + clear_len) / max(ego_speed, 0.1)
        return "accelerate" if t_ego < t_adv else "stop"
    return "straight"


def _ego_polygon(x: float, y: float, yaw: float) -> Polygon:
    hl, hw = EGO_HALF_EXTENTS
    corners = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    c, s = math.cos(yaw), math.sin(yaw)
    pts = corners @ np.array([[c, s], [-s, c]]) + np.array([x, y])
    return Polygon(pts)


Policy = Callable[[UnifiedClip], np.ndarray]


def closed_loop_rollout(
    policy: Policy,
    scenario: ScenarioSpec,
    replan_hz: float = 2.0,
    acc_limit: float = 6.0,
    history_len: int = 7,
    horizon: int = 10,
    intent_fn=rule_based_intent,
) -> RolloutTrace:
    """Roll the ego forward under ``policy`` with state feedback; stop at the first collision."""
    if replan_hz <= 0:
        raise ContractError("replan_hz must be positive")
    dt = scenario.adversary.dt
    n_steps = int(round(scenario.duration / dt))
    replan_every = 1.0 / replan_hz

    x, y = scenario.ego_init.position
    vx, vy = scenario.ego_init.velocity
    v = math.hypot(vx, vy)
    yaw = math.atan2(vy, vx) if v > 1e-9 else 0.0
    # assume constant velocity before the scenario starts
    hist: list[tuple[float, float, float, float, float, float, float]] = []
    for k in range(history_len - 1, 0, -1):
        hist.append((-k * dt, x - vx * k * dt, y - vy * k * dt, vx, vy, 0.0, 0.0))
    hist.append((0.0, x, y, vx, vy, 0.0, 0.0))

    trace = RolloutTrace(scenario.kind, reference_speed=scenario.reference_speed)
    trace.ego_poses.append((x, y, yaw))
    trace.adversary_poses.append(tuple(scenario.adversary.center_at(0.0)))

    def collided_at(t):
        return _ego_polygon(x, y, yaw).intersects(scenario.adversary.polygon(t))

    def record_collision(t, ego_vel):
        trace.collided = True
        trace.collision_time = t
        trace.impact_speed = float(np.linalg.norm(ego_vel - scenario.adversary.velocity_at(t)))

    if collided_at(0.0):
        record_collision(0.0, np.array([vx, vy]))
        return trace

    plan_world = None
    plan_t = 0.0
    next_replan = 0.0
    for step in range(n_steps):
        t = step * dt
        if t >= next_replan - 1e-9:
            intent = intent_fn((x, y), yaw, v, scenario.adversary, t)
            trace.intents.append(intent)
            obs = _observation(hist[-history_len:], (x, y), yaw, t, intent, horizon)
            plan = np.asarray(policy(obs), dtype=np.float64)
            trace.replans += 1
            if plan.shape != (horizon, 2) or not np.isfinite(plan).all():
                trace.invalid = True
                return trace
            c, s = math.cos(yaw), math.sin(yaw)
            plan_world = plan @ np.array([[c, s], [-s, c]]) + np.array([x, y])
            plan_t = t
            next_replan += replan_every
        j = min(max(int(round((t + dt - plan_t) / dt)) - 1, 0), horizon - 1)
        target = _to_frame(plan_world[j][None], (x, y), yaw)[0]
        dist = float(np.hypot(*target))
        bearing = math.atan2(target[1], target[0]) if dist > 1e-6 else 0.0
        bearing = max(-STEER_LIMIT, min(STEER_LIMIT, bearing))
        v_goal = 2.0 * dist / dt - v
        acc = max(-acc_limit, min(acc_limit, (v_goal - v) / dt))
        v_new = max(0.0, v + acc * dt)
        acc = (v_new - v) / dt
        travel = 0.5 * (v + v_new) * dt
        chord = yaw + bearing
        x += travel * math.cos(chord)
        y += travel * math.sin(chord)
        yaw_rate = 2.0 * bearing / dt
        yaw += 2.0 * bearing
        v = v_new
        vel = np.array([v * math.cos(yaw), v * math.sin(yaw)])
        acc_vec = acc * np.array([math.cos(yaw), math.sin(yaw)]) + v * yaw_rate * np.array([-math.sin(yaw), math.cos(yaw)])
        hist.append((t + dt, x, y, vel[0], vel[1], acc_vec[0], acc_vec[1]))
        trace.ego_poses.append((x, y, yaw))
        trace.adversary_poses.append(tuple(scenario.adversary.center_at(t + dt)))
        if collided_at(t + dt):
            record_collision(t + dt, vel)
            break
    return trace


def _observation(hist, xy, yaw: float, t_now: float, intent: str, horizon: int) -> UnifiedClip:
    states = []
    for t, hx, hy, hvx, hvy, hax, hay in hist:
        p = _to_frame(np.array([[hx, hy]]), xy, yaw)[0]
        vv = _rot((hvx, hvy), -yaw)
        aa = _rot((hax, hay), -yaw)
        states.append(EgoState(round(t - t_now, 9), (float(p[0]), float(p[1])), (float(vv[0]), float(vv[1])), (float(aa[0]), float(aa[1]))))
    last = states[-1]
    states[-1] = EgoState(0.0, (0.0, 0.0), last.velocity, last.acceleration)
    return UnifiedClip("rollout", "synthetic", states, np.zeros((horizon, 2)), f"Intent: {intent}.")


def run_scenarios(policy: Policy, scenarios: Sequence[ScenarioSpec], replan_hz: float = 2.0, threads: int = 1, **kw) -> list[RolloutTrace]:
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda s: closed_loop_rollout(policy, s, replan_hz, **kw), scenarios))
    return [closed_loop_rollout(policy, s, replan_hz, **kw) for s in scenarios]


def trace_score(trace: RolloutTrace) -> float:
    if not trace.collided:
        return MAX_SCORE
    ref = trace.reference_speed
    if ref <= 0:
        return 0.0
    return MAX_SCORE * max(0.0, 1.0 - trace.impact_speed / ref)


def score_scenarios(traces_by_kind) -> dict[str, float]:
    """Per-kind mean score and collision rate (%), plus their averages over kinds.

    Accepts either a kind -> traces mapping or a flat list of traces.
    """
    if not isinstance(traces_by_kind, dict):
        traces_by_kind = group_traces(traces_by_kind)
    out: dict[str, float] = {}
    for kind, traces in traces_by_kind.items():
        if not traces:
            raise ContractError(f"no traces for scenario kind {kind!r}")
        out[f"score@{kind}"] = float(np.mean([trace_score(t) for t in traces]))
        out[f"CR@{kind}"] = float(100.0 * np.mean([t.collided for t in traces]))
    kinds = list(traces_by_kind)
    out["score@avg"] = float(np.mean([out[f"score@{k}"] for k in kinds]))
    out["CR@avg"] = float(np.mean([out[f"CR@{k}"] for k in kinds]))
    return out


def group_traces(traces: Sequence[RolloutTrace]) -> dict[str, list[RolloutTrace]]:
    grouped: dict[str, list[RolloutTrace]] = {}
    for tr in traces:
        grouped.setdefault(tr.kind, []).append(tr)
    return grouped


class ZeroMotionPolicy:
    def __init__(self, horizon: int = 10):
        self.horizon = horizon

    def __call__(self, clip: UnifiedClip) -> np.ndarray:
        return np.zeros((self.horizon, 2))


class ConstantVelocityPolicy:
    """Extrapolates the current ego velocity; a non-learned reference."""

    def __init__(self, horizon: int = 10, dt: float = DT):
        self.horizon, self.dt = horizon, dt

    def __call__(self, clip: UnifiedClip) -> np.ndarray:
        v = np.asarray(clip.history[-1].velocity)
        return np.outer(self.dt * np.arange(1, self.horizon + 1), v)


class PlannerPolicy:
    """Adapts a Planner to the closed-loop policy interface (one decode per call)."""

    def __init__(self, planner):
        self.planner = planner

    def __call__(self, clip: UnifiedClip) -> np.ndarray:
        return self.planner.predict([clip])[0]
