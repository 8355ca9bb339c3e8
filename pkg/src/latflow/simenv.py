"""Planar 3-link arm with a gripper flag, disc obstacles and scripted experts.

Coordinates are metres in the arm plane (x, y); point clouds lift them to 3D
with a height coordinate. Actions are 4-vectors in [-1, 1]: three joint
velocity commands scaled by ``JOINT_RATE`` and a gripper command (> 0 closes).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

LINKS = np.array([0.4, 0.3, 0.25])
JOINT_RATE = 2.0  # rad/s at |action| = 1
DT = 0.05
T_MAX = 100
D_A = 4
D_OBS = 10
D_CTX = 5
SUCCESS_RADIUS = 0.02
HOLD_STEPS = 10
HOME_Q = np.array([0.4, 1.3, 0.9])
TASKS = ("reach", "pick-place", "obstacle-reach")

MARKER_HEIGHT = 0.15
OBSTACLE_HEIGHT = 0.1
CLOUD_JITTER = 0.002
CROP_BOUNDS = (np.array([-1.2, -1.2, -0.05]), np.array([1.2, 1.2, 0.3]))


# --------------------------------------------------------------- kinematics


def joint_positions(q: np.ndarray) -> np.ndarray:
    """(4, 2) base, elbow, wrist and end-effector positions."""
    ang = np.cumsum(q)
    steps = LINKS[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return np.vstack([np.zeros(2), np.cumsum(steps, axis=0)])


def forward_kinematics(q: np.ndarray) -> np.ndarray:
    return joint_positions(q)[-1]


def jacobian(q: np.ndarray, point_link: int = 3, frac: float = 1.0) -> np.ndarray:
    """2x3 Jacobian of a point at ``frac`` along link ``point_link`` (1-based)."""
    ang = np.cumsum(q)
    J = np.zeros((2, 3))
    for i in range(point_link):
        for j in range(i, point_link):
            length = LINKS[j] * (frac if j == point_link - 1 else 1.0)
            J[0, i] -= length * np.sin(ang[j])
            J[1, i] += length * np.cos(ang[j])
    return J


@dataclass(frozen=True)
class ArmState:
    q: np.ndarray
    gripper_closed: bool = False
    ee: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64))
        if self.ee is None:
            object.__setattr__(self, "ee", forward_kinematics(self.q))


@dataclass
class Obstacle:
    center: np.ndarray
    radius: float

    def to_json(self) -> dict:
        return {"center": [float(v) for v in self.center], "radius": float(self.radius)}


@dataclass
class TaskScene:
    kind: str
    goal: np.ndarray
    obstacles: list[Obstacle] = field(default_factory=list)
    obj: np.ndarray | None = None
    q0: np.ndarray = field(default_factory=lambda: HOME_Q.copy())
    seed: int = 0
    t_max: int = T_MAX

    def to_json(self) -> dict:
        return {
            "format": "latflow-scene",
            "version": 1,
            "kind": self.kind,
            "goal": [float(v) for v in self.goal],
            "object": None if self.obj is None else [float(v) for v in self.obj],
            "obstacles": [o.to_json() for o in self.obstacles],
            "q0": [float(v) for v in self.q0],
            "seed": int(self.seed),
            "t_max": int(self.t_max),
        }

    @classmethod
    def from_json(cls, d: dict) -> "TaskScene":
        if d.get("format") != "latflow-scene" or d.get("version") != 1:
            raise ValueError("not a version-1 scene description")
        return cls(
            kind=d["kind"],
            goal=np.array(d["goal"], dtype=np.float64),
            obstacles=[Obstacle(np.array(o["center"], dtype=np.float64), float(o["radius"])) for o in d["obstacles"]],
            obj=None if d.get("object") is None else np.array(d["object"], dtype=np.float64),
            q0=np.array(d["q0"], dtype=np.float64),
            seed=int(d["seed"]),
            t_max=int(d["t_max"]),
        )


def save_scene(scene: TaskScene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_json(), indent=2, sort_keys=True) + "\n")


def load_scene(path) -> TaskScene:
    return TaskScene.from_json(json.loads(Path(path).read_text()))


# ----------------------------------------------------------------- geometry


def segment_point_distance(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    s = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(a + s * ab - p))


def in_collision(q: np.ndarray, obstacles: list[Obstacle]) -> bool:
    pts = joint_positions(q)
    for ob in obstacles:
        for i in range(3):
            if segment_point_distance(pts[i], pts[i + 1], ob.center) < ob.radius:
                return True
    return False


# ---------------------------------------------------------------- dynamics


@dataclass
class EnvState:
    arm: ArmState
    obj: np.ndarray | None = None
    grasped: bool = False
    grasp_ever: bool = False


def step(state: ArmState, action: np.ndarray, dt: float = DT, obstacles: list[Obstacle] = ()) -> tuple[ArmState, bool]:
    """Euler step of the joint-velocity kinematics; returns (next state, collision flag)."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    q = state.q + dt * JOINT_RATE * a[:3]
    nxt = ArmState(q, bool(a[3] > 0.0))
    return nxt, in_collision(q, list(obstacles))


class ArmEnv:
    """Stateful wrapper tracking the object, grasping, and the observation history."""

    def __init__(self, scene: TaskScene, dt: float = DT):
        self.scene = scene
        self.dt = dt
        self.reset()

    def reset(self) -> np.ndarray:
        self.state = EnvState(ArmState(self.scene.q0.copy()), None if self.scene.obj is None else self.scene.obj.copy())
        self.states = [self.state.arm]
        self.collisions = [in_collision(self.state.arm.q, self.scene.obstacles)]
        self.grasp_log = [False]
        self.t = 0
        return self.observation()

    def target(self) -> np.ndarray:
        if self.scene.kind == "pick-place" and not self.state.grasped:
            return self.state.obj
        return self.scene.goal

    def observation(self) -> np.ndarray:
        arm = self.state.arm
        obj = self.state.obj if self.state.obj is not None else np.zeros(2)
        return np.concatenate([arm.q, arm.ee, [float(arm.gripper_closed)], self.scene.goal, obj])

    def context(self) -> np.ndarray:
        """[flag, target offset, nearest-obstacle offset], offsets rotated into the end-effector frame."""
        arm = self.state.arm
        phi = float(np.sum(arm.q))
        rot = np.array([[np.cos(phi), np.sin(phi)], [-np.sin(phi), np.cos(phi)]])
        tgt = rot @ (self.target() - arm.ee)
        obs_off = np.zeros(2)
        if self.scene.obstacles:
            d = [np.linalg.norm(o.center - arm.ee) - o.radius for o in self.scene.obstacles]
            ob = self.scene.obstacles[int(np.argmin(d))]
            obs_off = rot @ (ob.center - arm.ee)
        return np.concatenate([[1.0], tgt, obs_off])

    def step(self, action: np.ndarray) -> np.ndarray:
        arm, hit = step(self.state.arm, action, self.dt, self.scene.obstacles)
        st = self.state
        if st.obj is not None:
            if arm.gripper_closed and not st.grasped and np.linalg.norm(arm.ee - st.obj) <= SUCCESS_RADIUS:
                st.grasped = True
                st.grasp_ever = True
            elif not arm.gripper_closed:
                st.grasped = False
            if st.grasped:
                st.obj = arm.ee.copy()
        st.arm = arm
        self.states.append(arm)
        self.collisions.append(hit)
        self.grasp_log.append(st.grasped)
        self.t += 1
        return self.observation()

    def success(self) -> bool:
        return success_check(self.scene, self.states, self.collisions, self.grasp_log)


def _held(dist: np.ndarray, start: int = 0) -> bool:
    run = 0
    for d in dist[start:]:
        run = run + 1 if d <= SUCCESS_RADIUS else 0
        if run >= HOLD_STEPS:
            return True
    return False


def success_check(scene: TaskScene, states: list[ArmState], collisions: list[bool] | None = None,
                  grasped: list[bool] | None = None) -> bool:
    """Reach: within SUCCESS_RADIUS of the goal for HOLD_STEPS consecutive steps.

    Pick-place additionally needs a grasp (recorded when the gripper closed
    within SUCCESS_RADIUS of the object) before the hold at the goal, with the
    object still held. Obstacle-reach needs the reach criterion and no collision.
    """
    ee = np.array([s.ee for s in states])
    dist = np.linalg.norm(ee - scene.goal, axis=1)
    if scene.kind == "reach":
        return _held(dist)
    if scene.kind == "obstacle-reach":
        return _held(dist) and not any(collisions or [])
    if scene.kind == "pick-place":
        if not grasped or not any(grasped):
            return False
        first = grasped.index(True)
        held_dist = np.where(np.asarray(grasped, dtype=bool), dist, np.inf)
        return _held(held_dist, first)
    raise ValueError(f"unknown task {scene.kind!r}")


# ------------------------------------------------------------------ scenes


def _polar(r, theta):
    return np.array([r * np.cos(theta), r * np.sin(theta)])


def sample_scene(kind: str, rng: np.random.Generator, seed: int = 0) -> TaskScene:
    if kind not in TASKS:
        raise ValueError(f"unknown task {kind!r}")
    q0 = HOME_Q + rng.uniform(-0.1, 0.1, size=3)
    ee0 = forward_kinematics(q0)
    for _ in range(1000):
        goal = _polar(rng.uniform(0.4, 0.8), rng.uniform(0.1, 1.4))
        if np.linalg.norm(goal - ee0) > 0.25:
            break
    scene = TaskScene(kind, goal, q0=q0, seed=seed)
    if kind == "pick-place":
        for _ in range(1000):
            obj = _polar(rng.uniform(0.4, 0.8), rng.uniform(0.1, 1.4))
            if np.linalg.norm(obj - goal) > 0.25 and np.linalg.norm(obj - ee0) > 0.15:
                break
        scene.obj = obj
    elif kind == "obstacle-reach":
        for _ in range(1000):
            goal = _polar(rng.uniform(0.55, 0.8), rng.uniform(0.1, 1.4))
            if np.linalg.norm(goal - ee0) < 0.4:
                continue
            mid = 0.5 * (ee0 + goal)
            perp = np.array([-(goal - ee0)[1], (goal - ee0)[0]])
            perp /= np.linalg.norm(perp)
            center = mid + rng.uniform(-0.05, 0.05) * perp
            radius = rng.uniform(0.05, 0.08)
            ob = Obstacle(center, radius)
            if (np.linalg.norm(goal - center) > radius + 0.08 and np.linalg.norm(ee0 - center) > radius + 0.08
                    and np.linalg.norm(center) > 0.45 and not in_collision(q0, [ob])):
                scene.goal = goal
                scene.obstacles = [ob]
                break
        else:
            raise RuntimeError("could not place obstacle")
    return scene


# ------------------------------------------------------------------ expert


def _dls(J: np.ndarray, v: np.ndarray, damping: float = 1e-2) -> np.ndarray:
    return J.T @ np.linalg.solve(J @ J.T + damping * np.eye(2), v)


def _waypoints(scene: TaskScene, start: np.ndarray) -> list[np.ndarray]:
    pts = []
    if scene.obstacles:
        ob = scene.obstacles[0]
        d = scene.goal - start
        perp = np.array([-d[1], d[0]]) / np.linalg.norm(d)
        # pass between the base and the obstacle: going round the far side would sweep the links through it
        side = -1.0 if perp @ ob.center >= 0 else 1.0
        pts.append(ob.center + side * perp * (ob.radius + 0.12))
    pts.append(scene.goal)
    return pts


class ScriptedExpert:
    """Waypoint-following task-space P controller with link-point obstacle repulsion."""

    def __init__(self, scene: TaskScene, gain: float = 5.0, vmax: float = 0.6, repulse: float = 1.5,
                 margin: float = 0.08, switch_radius: float = 0.05):
        self.scene = scene
        self.gain, self.vmax, self.repulse, self.margin = gain, vmax, repulse, margin
        self.switch_radius = switch_radius
        start = forward_kinematics(scene.q0)
        self.pre = [] if scene.kind != "pick-place" else [scene.obj]
        self.route = _waypoints(scene, start)
        self.wp = 0

    def __call__(self, env: ArmEnv) -> np.ndarray:
        arm = env.state.arm
        pick = self.scene.kind == "pick-place"
        grip = -1.0
        if pick:
            if not env.state.grasped:
                target = env.state.obj
                grip = 1.0 if np.linalg.norm(arm.ee - target) <= 0.5 * SUCCESS_RADIUS else -1.0
            else:
                target = self.scene.goal
                grip = 1.0
        else:
            while self.wp < len(self.route) - 1 and np.linalg.norm(self.route[self.wp] - arm.ee) < self.switch_radius:
                self.wp += 1
            target = self.route[self.wp]
        v = self.gain * (target - arm.ee)
        speed = np.linalg.norm(v)
        if speed > self.vmax:
            v *= self.vmax / speed
        dq = _dls(jacobian(arm.q), v)
        for ob in self.scene.obstacles:
            for link in (2, 3):
                for frac in (0.25, 0.5, 0.75, 1.0):
                    pts = joint_positions(arm.q)
                    p = pts[link - 1] + frac * (pts[link] - pts[link - 1])
                    away = p - ob.center
                    d = np.linalg.norm(away) - ob.radius
                    if d < self.margin:
                        push = self.repulse * (self.margin - d) / self.margin * away / np.linalg.norm(away)
                        dq += jacobian(arm.q, link, frac).T @ push
        a = np.clip(dq / JOINT_RATE, -1.0, 1.0)
        return np.concatenate([a, [grip]])


@dataclass
class Demonstration:
    task: str
    seed: int
    dt: float
    actions: np.ndarray  # (L, d_a) env-scale commands
    observations: np.ndarray  # (L, d_obs) observation before each action
    contexts: np.ndarray  # (L, d_ctx)
    cloud: np.ndarray  # (N, 3)
    scene: TaskScene
    noise_level: float = 0.0

    @property
    def length(self) -> int:
        return self.actions.shape[0]


def run_expert(scene: TaskScene, noise_level: float = 0.0, rng: np.random.Generator | None = None) -> tuple[ArmEnv, dict]:
    env = ArmEnv(scene)
    expert = ScriptedExpert(scene)
    acts, obs, ctx = [], [], []
    for _ in range(scene.t_max):
        o, c = env.observation(), env.context()
        a = expert(env)
        if noise_level > 0:
            a = a.copy()
            a[:3] = np.clip(a[:3] + noise_level * rng.standard_normal(3), -1.0, 1.0)
        obs.append(o)
        ctx.append(c)
        acts.append(a)
        env.step(a)
        if env.success():
            break
    return env, {"actions": np.array(acts), "observations": np.array(obs), "contexts": np.array(ctx)}


def scripted_expert(scene: TaskScene, noise_level: float = 0.0, rng: np.random.Generator | None = None,
                    n_points: int = 1024) -> Demonstration | None:
    """Roll out the expert; None when it fails the task (caller resamples)."""
    rng = rng if rng is not None else np.random.default_rng(scene.seed)
    env, rec = run_expert(scene, noise_level, rng)
    if not env.success():
        log.info("expert failed on %s scene seed=%d", scene.kind, scene.seed)
        return None
    cloud = render_point_cloud(scene, n_points, np.random.default_rng([scene.seed, 7]))
    return Demonstration(scene.kind, scene.seed, DT, rec["actions"], rec["observations"], rec["contexts"],
                         cloud, scene, noise_level)


# ------------------------------------------------------------ point clouds


def render_point_cloud(scene: TaskScene, n_points: int, rng: np.random.Generator,
                       background_frac: float = 0.1) -> np.ndarray:
    """Uniform samples on obstacle walls, goal marker (raised disc) and object, plus background clutter.

    Background points sit below the table and are removed by workspace cropping.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    n_bg = int(round(background_frac * n_points))
    n_fg = n_points - n_bg
    parts = [("goal", None)]
    if scene.obj is not None:
        parts.append(("object", None))
    parts += [("obstacle", ob) for ob in scene.obstacles]
    # markers get fixed shares, obstacle walls split the rest by circumference
    n_marker = n_fg // (4 if scene.obstacles else len(parts))
    counts = []
    rest = n_fg
    circ = [2 * np.pi * ob.radius for kind, ob in parts if kind == "obstacle"]
    for kind, ob in parts:
        if kind != "obstacle":
            counts.append(n_marker)
            rest -= n_marker
    obst_counts = []
    if circ:
        share = np.floor(rest * np.array(circ) / sum(circ)).astype(int)
        share[0] += rest - share.sum()
        obst_counts = list(share)
    elif counts:
        counts[0] += rest
    pts = []
    oi = 0
    ci = 0
    for kind, ob in parts:
        if kind == "obstacle":
            n = obst_counts[oi]
            oi += 1
            theta = rng.uniform(0.0, 2 * np.pi, n)
            z = rng.uniform(0.0, OBSTACLE_HEIGHT, n)
            xy = ob.center + ob.radius * np.stack([np.cos(theta), np.sin(theta)], 1)
            pts.append(np.column_stack([xy, z]))
        else:
            n = counts[ci]
            ci += 1
            center = scene.goal if kind == "goal" else scene.obj
            r = 0.02 * np.sqrt(rng.uniform(0.0, 1.0, n))
            theta = rng.uniform(0.0, 2 * np.pi, n)
            xy = center + np.stack([r * np.cos(theta), r * np.sin(theta)], 1)
            z = np.full(n, MARKER_HEIGHT if kind == "goal" else 0.03)
            pts.append(np.column_stack([xy, z]))
    cloud = np.vstack(pts) if pts else np.zeros((0, 3))
    cloud = cloud + rng.uniform(-CLOUD_JITTER, CLOUD_JITTER, cloud.shape)
    bg = np.column_stack([rng.uniform(-1.0, 1.0, (n_bg, 2)), np.full(n_bg, -0.5)])
    return np.vstack([cloud, bg])


def generate_demonstrations(kind: str, n: int, seed: int, noise_level: float = 0.0,
                            max_reject_frac: float = 0.1) -> list[Demonstration]:
    """``n`` successful expert demos; aborts when the rejected-scene rate exceeds ``max_reject_frac``."""
    demos, rejected, i = [], 0, 0
    while len(demos) < n:
        scene_seed = seed * 100_003 + i
        i += 1
        rng = np.random.default_rng(scene_seed)
        scene = sample_scene(kind, rng, seed=scene_seed)
        demo = scripted_expert(scene, noise_level, rng)
        if demo is None:
            rejected += 1
            if rejected > max(1, max_reject_frac * n):
                raise RuntimeError(f"expert rejected {rejected} of {i} {kind} scenes (> {max_reject_frac:.0%})")
            continue
        demos.append(demo)
    return demos


def rollout(scene: TaskScene, actions: np.ndarray) -> ArmEnv:
    env = ArmEnv(scene)
    for a in actions:
        env.step(a)
    return env


def with_obstacle_shift(scene: TaskScene, shift: np.ndarray) -> TaskScene:
    obs = [Obstacle(o.center + shift, o.radius) for o in scene.obstacles]
    return replace(scene, obstacles=obs)
