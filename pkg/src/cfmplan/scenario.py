"""Synthetic 2D driving scenes, expert plans, penalties, and datasets.

World conventions: the ego vehicle sits at the origin heading +x, all
distances are meters, and a plan is T=8 waypoints spaced dt=0.5 s apart
(4 s horizon).  Obstacles are disks moving at constant velocity; lanes
are polyline centerlines with a lateral half-width.

Scene generation is deterministic in (kind, seed).  Five kinds:

* ``straight``    one long lane, optional parked clutter off-road
* ``fork``        a shared stem splitting into two symmetric branches,
                  two expert plans (left / right)
* ``turn``        an L-shaped lane with a circular arc
* ``obstacle_avoid``  a three-lane band with a disk blocking the ego
                  lane; the expert shifts laterally around it
* ``lead_stop``   a stopped lead vehicle close ahead; the expert brakes
                  to a halt
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels, jsonio
from .errors import ConfigError, DataFormatError, ShapeError
from .seeding import derive, rng_from

T_STEPS = 8
DT = 0.5
V_MAX = 20.0
KAPPA_MAX = 0.3
R_EGO = 1.0
HALF_WIDTH = 4.0
SHARPNESS = 4.0
# The curvature limit is numerically tiny (0.3 1/m) next to meter-scale
# margins, so its softplus needs a much sharper knee for feasible plans
# to register as penalty-free.
KAPPA_SHARPNESS = 50.0

SCENE_KINDS = ("straight", "fork", "turn", "obstacle_avoid", "lead_stop")
COMMANDS = ("left", "straight", "right")

DATASET_FORMAT = "cfmplan-dataset"
DATASET_VERSION = 1


# ---------------------------------------------------------------------------
# geometry types


@dataclass(eq=False)
class Lane:
    """Polyline centerline with constant half-width."""

    points: np.ndarray
    half_width: float = HALF_WIDTH

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2 \
                or self.points.shape[0] < 2:
            raise ShapeError("lane polyline must be (P>=2, 2), got %s"
                             % (self.points.shape,))
        seg = np.diff(self.points, axis=0)
        self._seg_len = np.sqrt((seg * seg).sum(1))
        self._cum = np.concatenate([[0.0], np.cumsum(self._seg_len)])

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def point_at(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        """Position and unit tangent at arc length s (clamped to range)."""
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(max(i, 0), len(self._seg_len) - 1)
        seg_len = self._seg_len[i]
        u = 0.0 if seg_len == 0 else (s - self._cum[i]) / seg_len
        a, b = self.points[i], self.points[i + 1]
        tangent = (b - a) / (seg_len if seg_len > 0 else 1.0)
        return a + u * (b - a), tangent

    def project(self, p) -> tuple[float, float]:
        """Arc length and distance of the closest centerline point."""
        p = np.asarray(p, dtype=np.float64)
        a = self.points[:-1]
        b = self.points[1:]
        ab = b - a
        ab2 = np.maximum((ab * ab).sum(1), 1e-300)
        t = np.clip(((p - a) * ab).sum(1) / ab2, 0.0, 1.0)
        closest = a + t[:, None] * ab
        d2 = ((p - closest) ** 2).sum(1)
        i = int(d2.argmin())
        s = self._cum[i] + t[i] * self._seg_len[i]
        return float(s), float(math.sqrt(d2[i]))

    def resample(self, spacing: float) -> np.ndarray:
        """Points every ``spacing`` meters of arc length, both ends kept."""
        n = max(1, int(math.ceil(self.length / spacing)))
        ss = np.linspace(0.0, self.length, n + 1)
        return np.array([self.point_at(s)[0] for s in ss])


@dataclass(eq=False)
class Obstacle:
    """Disk with constant-velocity motion."""

    position: np.ndarray
    velocity: np.ndarray
    radius: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(2)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(2)
        if not 0.0 < self.radius <= 5.0:
            raise ConfigError("obstacle radius must be in (0, 5], got %r"
                              % self.radius)

    def position_at(self, t: float) -> np.ndarray:
        return self.position + self.velocity * t


@dataclass(eq=False)
class EgoState:
    position: np.ndarray
    heading: float
    speed: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(2)


@dataclass(eq=False)
class Trajectory:
    """T waypoints at times (i+1)*dt relative to the ego at the origin."""

    waypoints: np.ndarray
    dt: float = DT

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 2:
            raise ShapeError("waypoints must be (T, 2), got %s"
                             % (self.waypoints.shape,))

    @property
    def t_steps(self) -> int:
        return self.waypoints.shape[0]

    def step_speeds(self) -> np.ndarray:
        """Per-step speeds, first step measured from the origin."""
        q = np.vstack([np.zeros((1, 2)), self.waypoints])
        e = np.diff(q, axis=0)
        return np.sqrt((e * e).sum(1)) / self.dt

    def final_speed(self) -> float:
        return float(self.step_speeds()[-1])


@dataclass(eq=False)
class Scene:
    kind: str
    seed: int
    ego: EgoState
    lanes: list[Lane]
    obstacles: list[Obstacle]
    _pack: tuple | None = field(default=None, repr=False)

    def geom_pack(self):
        """Kernel-ready arrays (cached): obstacles and lane segments."""
        if self._pack is None:
            if self.obstacles:
                obs = np.array([[o.position[0], o.position[1],
                                 o.velocity[0], o.velocity[1], o.radius]
                                for o in self.obstacles])
            else:
                obs = np.zeros((0, 5))
            seg_a, seg_b, seg_hw = [], [], []
            for lane in self.lanes:
                seg_a.append(lane.points[:-1])
                seg_b.append(lane.points[1:])
                seg_hw.append(np.full(len(lane.points) - 1, lane.half_width))
            self._pack = (np.ascontiguousarray(obs),
                          np.ascontiguousarray(np.vstack(seg_a)),
                          np.ascontiguousarray(np.vstack(seg_b)),
                          np.ascontiguousarray(np.concatenate(seg_hw)))
        return self._pack


@dataclass(eq=False)
class ConstraintScore:
    collision: float
    road_departure: float
    kinematic: float
    total: float

    @classmethod
    def from_terms(cls, terms) -> "ConstraintScore":
        return cls(float(terms[0]), float(terms[1]), float(terms[2]),
                   float(terms[0] + terms[1] + terms[2]))


@dataclass(eq=False)
class ExpertPlan:
    trajectory: Trajectory
    mode: int
    command: int  # index into COMMANDS

    @property
    def command_name(self) -> str:
        return COMMANDS[self.command]


# ---------------------------------------------------------------------------
# scene generation


def _straight_lane(y: float = 0.0, x0: float = -5.0, x1: float = 90.0,
                   half_width: float = HALF_WIDTH) -> Lane:
    return Lane(np.array([[x0, y], [x1, y]]), half_width)


def _branch_lane(stem_end: float, angle: float) -> Lane:
    """Stem along +x, then a heading ramp to ``angle`` over 14 m, then
    60 m straight.  Curvature stays far below the kinematic limit."""
    pts = [np.array([-5.0, 0.0]), np.array([stem_end, 0.0])]
    heading = 0.0
    pos = pts[-1].copy()
    ramp_len = 14.0
    ds = 1.0
    n_ramp = int(ramp_len / ds)
    for i in range(n_ramp):
        heading = angle * (i + 1) / n_ramp
        pos = pos + ds * np.array([math.cos(heading), math.sin(heading)])
        pts.append(pos.copy())
    tail = np.array([math.cos(angle), math.sin(angle)])
    for _ in range(30):
        pos = pos + 2.0 * tail
        pts.append(pos.copy())
    return Lane(np.array(pts))


def _turn_lane(entry: float, radius: float, sign: float) -> Lane:
    pts = [np.array([-5.0, 0.0]), np.array([entry, 0.0])]
    center = np.array([entry, sign * radius])
    n_arc = max(8, int(radius * math.pi / 2 / 2.0))
    for i in range(1, n_arc + 1):
        phi = (math.pi / 2) * i / n_arc
        p = center + radius * np.array([math.sin(phi) * 1.0,
                                        -sign * math.cos(phi)])
        pts.append(p)
    tangent = np.array([math.cos(sign * math.pi / 2),
                        math.sin(sign * math.pi / 2)])
    end = pts[-1]
    for i in range(1, 21):
        pts.append(end + tangent * 2.0 * i)
    return Lane(np.array(pts))


def generate_scene(kind: str, seed: int) -> Scene:
    """Deterministically build one scene of the given kind."""
    if kind not in SCENE_KINDS:
        raise ConfigError("unknown scene kind %r (choose from %s)"
                          % (kind, SCENE_KINDS))
    rng = rng_from(seed, "scene", kind)
    lanes: list[Lane] = []
    obstacles: list[Obstacle] = []

    if kind == "straight":
        lanes = [_straight_lane()]
        speed = rng.uniform(3.0, 12.0)
        for _ in range(rng.integers(0, 3)):
            side = 1.0 if rng.uniform() < 0.5 else -1.0
            obstacles.append(Obstacle(
                position=[rng.uniform(10.0, 60.0),
                          side * rng.uniform(9.0, 14.0)],
                velocity=[0.0, 0.0], radius=rng.uniform(0.5, 1.5)))
    elif kind == "fork":
        stem = rng.uniform(4.0, 8.0)
        angle = rng.uniform(0.35, 0.5)
        lanes = [_branch_lane(stem, angle), _branch_lane(stem, -angle)]
        speed = rng.uniform(5.0, 10.0)
    elif kind == "turn":
        entry = rng.uniform(8.0, 14.0)
        radius = rng.uniform(12.0, 20.0)
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        lanes = [_turn_lane(entry, radius, sign)]
        speed = rng.uniform(4.0, 9.0)
    elif kind == "obstacle_avoid":
        lanes = [_straight_lane(0.0), _straight_lane(2.8),
                 _straight_lane(5.6)]
        speed = rng.uniform(7.0, 11.0)
        obstacles.append(Obstacle(
            position=[rng.uniform(17.0, 22.0), 0.0],
            velocity=[0.0, 0.0], radius=rng.uniform(0.8, 1.2)))
        if rng.uniform() < 0.5:
            obstacles.append(Obstacle(
                position=[rng.uniform(10.0, 50.0), -rng.uniform(9.0, 13.0)],
                velocity=[0.0, 0.0], radius=rng.uniform(0.5, 1.2)))
    else:  # lead_stop
        lanes = [_straight_lane()]
        gap = rng.uniform(5.5, 7.5)
        radius = rng.uniform(0.6, 0.9)
        free = gap - radius - 3.6
        speed = rng.uniform(0.55, 0.95) * math.sqrt(5.0 * free)
        obstacles.append(Obstacle(position=[gap, 0.0], velocity=[0.0, 0.0],
                                  radius=radius))

    ego = EgoState(position=[0.0, 0.0], heading=0.0, speed=float(speed))
    return Scene(kind=kind, seed=seed, ego=ego, lanes=lanes,
                 obstacles=obstacles)


# ---------------------------------------------------------------------------
# expert plans


def _follow_lane(lane: Lane, distances: np.ndarray) -> np.ndarray:
    s0, _ = lane.project(np.zeros(2))
    return np.array([lane.point_at(s0 + d)[0] for d in distances])


def _cruise_distances(speed: float) -> np.ndarray:
    return speed * DT * (np.arange(T_STEPS) + 1.0)


def _avoid_path(speed: float, shift: float) -> np.ndarray:
    """Waypoints along a smoothstep lateral shift, arc-length spaced."""
    xs = np.arange(0.0, 90.0, 0.25)
    u = np.clip((xs - 1.0) / 14.0, 0.0, 1.0)
    ys = shift * (3.0 * u * u - 2.0 * u ** 3)
    pts = np.column_stack([xs, ys])
    seg = np.diff(pts, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(np.sqrt((seg * seg).sum(1)))])
    targets = speed * DT * (np.arange(T_STEPS) + 1.0)
    out = np.empty((T_STEPS, 2))
    out[:, 0] = np.interp(targets, cum, pts[:, 0])
    out[:, 1] = np.interp(targets, cum, pts[:, 1])
    return out


def _stop_distances(speed: float, decel: float = 2.5) -> np.ndarray:
    ts = DT * (np.arange(T_STEPS) + 1.0)
    t_stop = speed / decel
    s_stop = speed * speed / (2.0 * decel)
    s = speed * ts - 0.5 * decel * ts ** 2
    return np.where(ts >= t_stop, s_stop, s)


def expert_trajectories(scene: Scene) -> list[ExpertPlan]:
    """Feasible demonstration plans: two for forks, one otherwise."""
    speed = scene.ego.speed
    if scene.kind == "fork":
        plans = []
        for idx, lane in enumerate(scene.lanes):
            wp = _follow_lane(lane, _cruise_distances(speed))
            side = lane.points[-1][1]
            command = 0 if side > 0 else 2
            plans.append(ExpertPlan(Trajectory(wp), mode=idx,
                                    command=command))
        return plans
    if scene.kind == "obstacle_avoid":
        wp = _avoid_path(speed, shift=5.6)
        return [ExpertPlan(Trajectory(wp), mode=0, command=0)]
    if scene.kind == "lead_stop":
        dists = _stop_distances(speed)
        wp = np.column_stack([dists, np.zeros(T_STEPS)])
        return [ExpertPlan(Trajectory(wp), mode=0, command=1)]
    if scene.kind == "turn":
        lane = scene.lanes[0]
        wp = _follow_lane(lane, _cruise_distances(speed))
        sign = lane.points[-1][1] - lane.points[0][1]
        command = 0 if sign > 0 else 2
        return [ExpertPlan(Trajectory(wp), mode=0, command=command)]
    wp = _follow_lane(scene.lanes[0], _cruise_distances(speed))
    return [ExpertPlan(Trajectory(wp), mode=0, command=1)]


# ---------------------------------------------------------------------------
# penalties, hard checks, reward


def penalty_terms(waypoints: np.ndarray, scene: Scene,
                  want_grad: bool = False):
    """Raw kernel call: terms (3,) and optionally d(term)/d(waypoint)."""
    obs, seg_a, seg_b, seg_hw = scene.geom_pack()
    wp = np.ascontiguousarray(waypoints, dtype=np.float64)
    if wp.ndim != 2 or wp.shape[1] != 2:
        raise ShapeError("waypoints must be (T, 2), got %s" % (wp.shape,))
    return _kernels.penalty_eval(wp, obs, seg_a, seg_b, seg_hw, DT, R_EGO,
                                 V_MAX, KAPPA_MAX, SHARPNESS,
                                 KAPPA_SHARPNESS, want_grad)


def constraint_eval(traj: Trajectory, scene: Scene) -> ConstraintScore:
    terms, _ = penalty_terms(traj.waypoints, scene)
    return ConstraintScore.from_terms(terms)


def collision_free(traj: Trajectory, scene: Scene,
                   upto: int | None = None) -> bool:
    """Hard disk-overlap check against moving obstacles.

    ``upto`` limits the check to the first ``upto`` waypoints (a shorter
    horizon); None checks the full plan.
    """
    n = traj.t_steps if upto is None else min(upto, traj.t_steps)
    for obs in scene.obstacles:
        for i in range(n):
            p = obs.position_at((i + 1) * traj.dt)
            d = float(np.hypot(*(traj.waypoints[i] - p)))
            if d <= obs.radius + R_EGO:
                return False
    return True


def on_road(traj: Trajectory, scene: Scene) -> bool:
    """True when every waypoint lies inside some lane corridor."""
    for wp in traj.waypoints:
        inside = False
        for lane in scene.lanes:
            _, dist = lane.project(wp)
            if dist <= lane.half_width:
                inside = True
                break
        if not inside:
            return False
    return True


def _match_lane(traj: Trajectory, scene: Scene) -> Lane:
    best, best_cost = scene.lanes[0], float("inf")
    for lane in scene.lanes:
        cost = float(np.mean([lane.project(p)[1] for p in traj.waypoints]))
        if cost < best_cost:
            best, best_cost = lane, cost
    return best


def ep_reward(traj: Trajectory, scene: Scene) -> float:
    """Normalized forward progress along the best-matching lane, [0, 1]."""
    lane = _match_lane(traj, scene)
    s0, _ = lane.project(scene.ego.position)
    s1, _ = lane.project(traj.waypoints[-1])
    progress = max(0.0, s1 - s0)
    return float(min(1.0, progress / (traj.t_steps * traj.dt * V_MAX)))


# ---------------------------------------------------------------------------
# scene tokens


AGENT_DIM = 8
MAP_DIM = 8
MAP_SPACING = 2.0


def scene_tokens(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Agent and map token matrices for the conditioning encoder.

    Agent rows: [px, py, vx, vy, radius, is_null, is_ego, 0]; the ego
    vehicle is always the first row (its speed sets the longitudinal
    scale of every plan), followed by one row per obstacle, or a null
    row (flag set) when there are none so the attention block always has
    a second key.  Map rows: [px, py, tx, ty, half_width, 0, 0, 0]
    sampled every 2 m of arc length per lane, endpoints included.
    """
    n = max(1, len(scene.obstacles))
    agents = np.zeros((1 + n, AGENT_DIM))
    agents[0, 0:2] = scene.ego.position
    agents[0, 2] = scene.ego.speed * np.cos(scene.ego.heading)
    agents[0, 3] = scene.ego.speed * np.sin(scene.ego.heading)
    agents[0, 4] = R_EGO
    agents[0, 6] = 1.0
    if scene.obstacles:
        for i, o in enumerate(scene.obstacles):
            agents[1 + i, 0:2] = o.position
            agents[1 + i, 2:4] = o.velocity
            agents[1 + i, 4] = o.radius
    else:
        agents[1, 5] = 1.0
    rows = []
    for lane in scene.lanes:
        pts = lane.resample(MAP_SPACING)
        for p in pts:
            s, _ = lane.project(p)
            _, tangent = lane.point_at(min(s, lane.length - 1e-6))
            rows.append([p[0], p[1], tangent[0], tangent[1],
                         lane.half_width, 0.0, 0.0, 0.0])
    return agents, np.asarray(rows)


# ---------------------------------------------------------------------------
# dataset records and JSONL IO


@dataclass(eq=False)
class Record:
    kind: str
    seed: int
    mode: int
    modes_total: int
    command: int
    ep: float
    trajectory: Trajectory
    _scene: Scene | None = field(default=None, repr=False)

    def scene(self) -> Scene:
        if self._scene is None:
            self._scene = generate_scene(self.kind, self.seed)
        return self._scene


def dataset_build(counts: dict[str, int], seed: int, path) -> int:
    """Generate scenes, derive expert records, write JSONL; returns the
    record count.  Scene seeds derive from (seed, kind, index) so kinds
    and indices never collide."""
    total_scenes = 0
    for kind, n in counts.items():
        if kind not in SCENE_KINDS:
            raise ConfigError("unknown scene kind %r in dataset counts"
                              % kind)
        if n < 0:
            raise ConfigError("negative scene count for %r" % kind)
        total_scenes += n
    if total_scenes == 0:
        raise ConfigError("dataset config requests zero scenes")
    path = Path(path)
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "t_steps": T_STEPS,
        "dt": DT,
        "seed": int(seed),
        "counts": {k: int(v) for k, v in counts.items()},
    }
    lines = [jsonio.dumps_canonical(header)]
    n_records = 0
    for kind in sorted(counts):
        for idx in range(counts[kind]):
            scene_seed = derive(seed, "data", kind, idx)
            scene = generate_scene(kind, scene_seed)
            plans = expert_trajectories(scene)
            for plan in plans:
                rec = {
                    "kind": kind,
                    "seed": int(scene_seed),
                    "mode": plan.mode,
                    "modes_total": len(plans),
                    "command": plan.command_name,
                    "ep": ep_reward(plan.trajectory, scene),
                    "waypoints": [float(v) for v in
                                  plan.trajectory.waypoints.ravel()],
                }
                lines.append(jsonio.dumps_canonical(rec))
                n_records += 1
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataFormatError("cannot write dataset %s: %s" % (path, exc))
    return n_records


def load_dataset(path) -> tuple[dict, list[Record]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataFormatError("cannot read dataset %s: %s" % (path, exc))
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataFormatError("%s: empty dataset file" % path)
    header = jsonio.loads(lines[0])
    if not isinstance(header, dict) \
            or header.get("format") != DATASET_FORMAT:
        raise DataFormatError("%s: missing dataset header" % path)
    if header.get("version") != DATASET_VERSION:
        raise DataFormatError("%s: unsupported dataset version %r"
                              % (path, header.get("version")))
    t_steps = int(header["t_steps"])
    dt = float(header["dt"])
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        row = jsonio.loads(line)
        try:
            wp = np.asarray(row["waypoints"], dtype=np.float64)
            wp = wp.reshape(t_steps, 2)
            records.append(Record(
                kind=row["kind"], seed=int(row["seed"]),
                mode=int(row["mode"]), modes_total=int(row["modes_total"]),
                command=COMMANDS.index(row["command"]),
                ep=float(row["ep"]),
                trajectory=Trajectory(wp, dt=dt)))
        except (KeyError, ValueError) as exc:
            raise DataFormatError("%s:%d: bad record (%s)"
                                  % (path, lineno, exc))
    return header, records
