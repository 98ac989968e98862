"""A 2-D tabletop with a drawer, a cup and a faucet handle.

The effector is a point that moves by clamped deltas; objects move only
through contact rules. Two observation domains exist: the robot domain
(plain state features) and the demonstrator domain (a fixed affine scramble
of the same quantities plus nuisance channels), so that a video encoder has
a real domain gap to bridge.
"""

from __future__ import annotations

import contextlib
import enum
import json
import math
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import HiddenLabelAccess, WrongDomain

A_MAX = 0.05
HORIZON = 60
N_FRAMES = 16
CONTACT_RADIUS = 0.06
HANDLE_HALF_WIDTH = 0.1  # the handle is a bar across the drawer axis
CUP_RADIUS = 0.1
FAUCET_RADIUS = 0.1
CUP_CLEARANCE = CUP_RADIUS + 0.04  # how wide scripted experts steer around the cup
N_VARIANTS = 4
N_COLORS = 3
FAUCET_LIMIT = math.pi / 2
STATE_DIM = 6  # effector x/y, drawer extent, cup x/y, faucet angle
FEATURE_DIM = 15

# success thresholds
DRAWER_CLOSED = 0.1
DRAWER_OPEN = 0.9
DRAWER_HALF = 0.5
CUP_PUSH = 0.15
FAUCET_TURN = 0.6


class TaskLabel(enum.IntEnum):
    CloseDrawer = 0
    PushCup = 1
    TurnFaucetRight = 2
    OpenDrawer = 3
    PushCupReverse = 4
    TurnFaucetLeft = 5


ROBOT_TASKS = (TaskLabel.CloseDrawer, TaskLabel.PushCup, TaskLabel.TurnFaucetRight)


class Domain(str, enum.Enum):
    Robot = "robot"
    Demonstrator = "demonstrator"


@dataclass(frozen=True)
class WorldLayout:
    variant_id: int
    drawer_slot: tuple[float, float]
    drawer_axis: tuple[float, float]  # unit, points in the opening direction
    drawer_travel: float
    cup: tuple[float, float]
    cup_target: tuple[float, float]  # unit push direction for PushCup
    faucet_pivot: tuple[float, float]
    faucet_length: float
    colors: tuple[int, int, int]
    home: tuple[float, float]

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "WorldLayout":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


_BASE = dict(
    drawer_slot=(0.22, 0.55),
    drawer_angle=math.pi / 2,
    drawer_travel=0.25,
    cup=(0.5, 0.42),
    cup_angle=0.0,
    faucet_pivot=(0.78, 0.82),
    faucet_length=0.12,
    home=(0.5, 0.12),
)


def _unit(angle: float) -> tuple[float, float]:
    return (math.cos(angle), math.sin(angle))


def _perturbed_layout(variant_id: int, rng: np.random.Generator, jitter: float, turn: float) -> WorldLayout:
    def shift(p):
        return tuple(float(np.clip(c + rng.uniform(-jitter, jitter), 0.1, 0.9)) for c in p)

    return WorldLayout(
        variant_id=variant_id,
        drawer_slot=shift(_BASE["drawer_slot"]),
        drawer_axis=_unit(_BASE["drawer_angle"] + rng.uniform(-turn, turn)),
        drawer_travel=_BASE["drawer_travel"],
        cup=shift(_BASE["cup"]),
        cup_target=_unit(_BASE["cup_angle"] + rng.uniform(-turn, turn)),
        faucet_pivot=shift(_BASE["faucet_pivot"]),
        faucet_length=_BASE["faucet_length"],
        colors=tuple(int(c) for c in rng.integers(0, N_COLORS, size=3)),
        home=shift(_BASE["home"]),
    )


def make_layout(variant: int, seed: int = 0) -> WorldLayout:
    """Layout of environment variant ``variant``; a pure function of (seed, variant)."""
    if not 0 <= variant < N_VARIANTS:
        raise ValueError(f"variant must be in [0, {N_VARIANTS})")
    rng = np.random.default_rng([seed, variant, 101])
    return _perturbed_layout(variant, rng, jitter=0.06, turn=0.25)


@dataclass(frozen=True)
class WorldState:
    effector: tuple[float, float]
    drawer_extent: float
    cup: tuple[float, float]
    faucet_angle: float
    t: int = 0

    def as_array(self) -> np.ndarray:
        return np.array([*self.effector, self.drawer_extent, *self.cup, self.faucet_angle])

    @classmethod
    def from_array(cls, row, t: int = 0) -> "WorldState":
        row = [float(v) for v in row]
        return cls((row[0], row[1]), row[2], (row[3], row[4]), row[5], t)


def drawer_handle(layout: WorldLayout, extent):
    slot, axis = np.asarray(layout.drawer_slot), np.asarray(layout.drawer_axis)
    return slot + np.multiply.outer(np.asarray(extent) * layout.drawer_travel, axis)


def _handle_distance(layout: WorldLayout, point, extent):
    """Distance from ``point`` to the handle bar, which lies across the drawer axis."""
    axis = np.asarray(layout.drawer_axis)
    rel = np.asarray(point) - drawer_handle(layout, extent)
    across = np.array([-axis[1], axis[0]])
    lateral = np.clip(rel @ across, -HANDLE_HALF_WIDTH, HANDLE_HALF_WIDTH)
    return np.linalg.norm(rel - lateral[..., None] * across, axis=-1)


def faucet_tip(layout: WorldLayout, angle):
    angle = np.asarray(angle)
    offs = layout.faucet_length * np.stack([np.sin(angle), -np.cos(angle)], axis=-1)
    return np.asarray(layout.faucet_pivot) + offs


def clamp_action(action) -> np.ndarray:
    return np.clip(np.asarray(action, dtype=np.float64), -A_MAX, A_MAX)


def step_array(layout: WorldLayout, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Transition on raw state rows, shape (..., 6) with actions (..., 2)."""
    a = clamp_action(a)
    eff = s[..., 0:2]
    extent, cup, angle = s[..., 2], s[..., 3:5], s[..., 5]
    out = np.empty_like(s)
    out[..., 0:2] = np.clip(eff + a, 0.0, 1.0)

    near = _handle_distance(layout, eff, extent) < CONTACT_RADIUS
    along = a @ np.asarray(layout.drawer_axis)
    out[..., 2] = np.clip(extent + np.where(near, along / layout.drawer_travel, 0.0), 0.0, 1.0)

    rel = cup - eff
    pushing = (np.linalg.norm(rel, axis=-1) < CUP_RADIUS) & (np.sum(rel * a, axis=-1) > 0.0)
    out[..., 3:5] = np.clip(cup + np.where(pushing[..., None], a, 0.0), 0.0, 1.0)

    touching = np.linalg.norm(eff - faucet_tip(layout, angle), axis=-1) < FAUCET_RADIUS
    tangent = np.stack([np.cos(angle), np.sin(angle)], axis=-1)
    turn = np.sum(a * tangent, axis=-1) / layout.faucet_length
    out[..., 5] = np.clip(angle + np.where(touching, turn, 0.0), -FAUCET_LIMIT, FAUCET_LIMIT)
    return out


def step(layout: WorldLayout, state: WorldState, action) -> WorldState:
    row = step_array(layout, state.as_array(), np.asarray(action, dtype=np.float64))
    return WorldState.from_array(row, state.t + 1)


# -- hidden-label bookkeeping -------------------------------------------------

class LabelAudit:
    """Counts robot-data hidden-label reads per named scope (thread-local scope stack)."""

    def __init__(self):
        self.reads: Counter = Counter()
        self._lock = threading.Lock()
        self._local = threading.local()

    @property
    def scope(self) -> str:
        stack = getattr(self._local, "stack", None)
        return stack[-1] if stack else "unscoped"

    @contextlib.contextmanager
    def scoped(self, name: str) -> Iterator[None]:
        stack = getattr(self._local, "stack", None)
        if stack is None:
            stack = self._local.stack = []
        stack.append(name)
        try:
            yield
        finally:
            stack.pop()

    def record(self) -> None:
        with self._lock:
            self.reads[self.scope] += 1

    def reset(self) -> None:
        with self._lock:
            self.reads.clear()


LABEL_AUDIT = LabelAudit()


@dataclass(frozen=True)
class Trajectory:
    id: int
    states: np.ndarray  # (H+1, 6)
    actions: np.ndarray  # (H, 2)
    layout: WorldLayout
    domain: Domain
    labels: tuple[TaskLabel, ...] = ()
    stripped: bool = False

    def __post_init__(self):
        if self.states.shape[0] != self.actions.shape[0] + 1:
            raise ValueError("need exactly one more state than actions")

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    @property
    def hidden_label(self) -> Optional[TaskLabel]:
        if self.stripped:
            raise HiddenLabelAccess(f"trajectory {self.id} is a label-stripped view")
        if self.domain == Domain.Robot:
            LABEL_AUDIT.record()
        return self.labels[0] if self.labels else None

    @property
    def all_labels(self) -> tuple[TaskLabel, ...]:
        if self.stripped:
            raise HiddenLabelAccess(f"trajectory {self.id} is a label-stripped view")
        if self.domain == Domain.Robot:
            LABEL_AUDIT.record()
        return self.labels

    def strip(self) -> "Trajectory":
        return replace(self, labels=(), stripped=True)

    def state(self, t: int) -> WorldState:
        return WorldState.from_array(self.states[t], t)


def replay(layout: WorldLayout, start: np.ndarray, actions: np.ndarray) -> np.ndarray:
    out = [np.asarray(start, dtype=np.float64)]
    for a in actions:
        out.append(step_array(layout, out[-1], a))
    return np.stack(out)


# -- success predicates -------------------------------------------------------

def _task_fires(states: np.ndarray, layout: WorldLayout, task: TaskLabel) -> bool:
    first, last = states[0], states[-1]
    if task == TaskLabel.CloseDrawer:
        return last[2] < DRAWER_CLOSED and first[2] >= DRAWER_HALF
    if task == TaskLabel.OpenDrawer:
        return last[2] > DRAWER_OPEN and first[2] <= DRAWER_HALF
    push = float((last[3:5] - first[3:5]) @ np.asarray(layout.cup_target))
    if task == TaskLabel.PushCup:
        return push >= CUP_PUSH
    if task == TaskLabel.PushCupReverse:
        return push <= -CUP_PUSH
    turn = last[5] - first[5]
    if task == TaskLabel.TurnFaucetRight:
        return turn >= FAUCET_TURN
    return turn <= -FAUCET_TURN


def success(trajectory: Trajectory, task: TaskLabel) -> bool:
    if trajectory.domain != Domain.Robot:
        raise WrongDomain("success is only defined on robot-domain trajectories")
    return _task_fires(trajectory.states, trajectory.layout, TaskLabel(task))


def satisfied_tasks(states: np.ndarray, layout: WorldLayout) -> tuple[TaskLabel, ...]:
    return tuple(t for t in TaskLabel if _task_fires(states, layout, t))


# -- data generation ----------------------------------------------------------

def initial_state(layout: WorldLayout, rng: np.random.Generator, drawer_open: bool = True) -> np.ndarray:
    eff = np.clip(np.asarray(layout.home) + rng.uniform(-0.05, 0.05, size=2), 0.0, 1.0)
    extent = rng.uniform(0.7, 1.0) if drawer_open else rng.uniform(0.0, 0.3)
    return np.array([eff[0], eff[1], extent, layout.cup[0], layout.cup[1], 0.0])


def _p_control(eff: np.ndarray, target: np.ndarray, gain: float, speed: float) -> np.ndarray:
    return np.clip(gain * (target - eff), -speed, speed)


def _p_control_straight(eff: np.ndarray, target: np.ndarray, gain: float, speed: float) -> np.ndarray:
    a = gain * (target - eff)
    norm = np.linalg.norm(a)
    return a * (speed / norm) if norm > speed else a


def gen_random_robot_trajectory(layout: WorldLayout, seed: int, horizon: int = HORIZON,
                                traj_id: Optional[int] = None) -> Trajectory:
    """Drive the effector through three uniformly sampled waypoints."""
    rng = np.random.default_rng([seed, 202])
    s = initial_state(layout, rng)
    waypoints = rng.uniform(0.0, 1.0, size=(3, 2))
    budget = horizon // 3
    states, actions = [s], []
    wp, since = 0, 0
    for _ in range(horizon):
        if wp < 2 and since >= budget:
            wp, since = wp + 1, 0
        a = _p_control(s[:2], waypoints[wp], 0.5, A_MAX)
        s = step_array(layout, s, a)
        states.append(s)
        actions.append(a)
        since += 1
    states = np.stack(states)
    return Trajectory(
        id=seed if traj_id is None else traj_id,
        states=states,
        actions=np.stack(actions),
        layout=layout,
        domain=Domain.Robot,
        labels=satisfied_tasks(states, layout),
    )


def _expert_plan(task: TaskLabel, layout: WorldLayout, s0: np.ndarray) -> list[np.ndarray]:
    """Pre-approach, contact and end points; the final two segments do the manipulation."""
    if task in (TaskLabel.CloseDrawer, TaskLabel.OpenDrawer):
        axis = np.asarray(layout.drawer_axis)
        slot = np.asarray(layout.drawer_slot)
        top = slot + (layout.drawer_travel + 0.08) * axis
        bottom = slot - 0.08 * axis
        if task == TaskLabel.CloseDrawer:
            return [top + 0.04 * axis, top, slot - 0.07 * axis]
        return [bottom - 0.04 * axis, bottom, slot + (layout.drawer_travel + 0.07) * axis]
    if task in (TaskLabel.PushCup, TaskLabel.PushCupReverse):
        d = np.asarray(layout.cup_target) * (1.0 if task == TaskLabel.PushCup else -1.0)
        cup = s0[3:5]
        return [cup - CUP_CLEARANCE * d, cup - 0.04 * d, cup + 0.22 * d]
    sign = 1.0 if task == TaskLabel.TurnFaucetRight else -1.0
    tip = faucet_tip(layout, s0[5])
    tangent = sign * np.array([math.cos(s0[5]), math.sin(s0[5])])
    return [tip - 0.1 * tangent, tip - 0.035 * tangent, tip + 0.16 * tangent]


def _detour(plan: list[np.ndarray], start: np.ndarray, n_free: int, center: np.ndarray,
            clearance: float) -> tuple[list[np.ndarray], int]:
    out, here = [], start
    added = 0
    for i, target in enumerate(plan):
        if i < n_free:
            seg = target - here
            length = np.linalg.norm(seg)
            if length > 1e-9:
                u = np.clip((center - here) @ seg / length ** 2, 0.0, 1.0)
                closest = here + u * seg
                gap = np.linalg.norm(center - closest)
                if gap < clearance:
                    side = closest - center if gap > 1e-9 else np.array([-seg[1], seg[0]]) / length
                    side = side / np.linalg.norm(side)
                    out.append(np.clip(center + 1.3 * clearance * side, 0.02, 0.98))
                    added += 1
        out.append(target)
        here = target
    return out, n_free + added


def _route(plan: list[np.ndarray], s0: np.ndarray, layout: WorldLayout, task: TaskLabel) -> list[np.ndarray]:
    """Insert detours so approach segments clear the objects the task must not touch."""
    n_free = len(plan) - 2
    obstacles = []
    if task not in (TaskLabel.PushCup, TaskLabel.PushCupReverse):
        obstacles.append((s0[3:5], CUP_CLEARANCE))
    if task not in (TaskLabel.TurnFaucetRight, TaskLabel.TurnFaucetLeft):
        obstacles.append((faucet_tip(layout, s0[5]), 0.1))
    else:
        obstacles.append((faucet_tip(layout, s0[5]), 0.09))
    if task in (TaskLabel.PushCup, TaskLabel.PushCupReverse):
        obstacles.append((s0[3:5], CUP_CLEARANCE))
    for center, clearance in obstacles:
        plan, n_free = _detour(plan, s0[:2], n_free, np.asarray(center), clearance)
    return plan


def run_expert(task: TaskLabel, layout: WorldLayout, rng: np.random.Generator, horizon: int = HORIZON,
               nuisance: bool = True) -> tuple[np.ndarray, np.ndarray]:
    drawer_open = task != TaskLabel.OpenDrawer
    s = initial_state(layout, rng, drawer_open=drawer_open)
    if nuisance:
        s[:2] = np.clip(s[:2] + rng.uniform(-0.08, 0.08, size=2), 0.0, 1.0)
        speed = A_MAX * rng.uniform(0.8, 1.0)
        idle = int(rng.integers(0, 5))
    else:
        speed, idle = A_MAX, 0
    plan = [np.clip(p, 0.0, 1.0) for p in _expert_plan(task, layout, s)]
    if nuisance and rng.random() < 0.5:
        via = 0.5 * (s[:2] + plan[0]) + rng.normal(0.0, 0.06, size=2)
        plan = [np.clip(via, 0.05, 0.95)] + plan
    plan = _route(plan, s, layout, task)
    states, actions = [s], []
    wp = 0
    for t in range(horizon):
        if t < idle or wp >= len(plan):
            a = np.zeros(2)
        else:
            final = wp == len(plan) - 1
            a = _p_control_straight(s[:2], plan[wp], 1.0 if final else 0.7, speed)
            if np.linalg.norm(plan[wp] - s[:2]) < (0.01 if final else 0.03):
                wp += 1
        s = step_array(layout, s, a)
        states.append(s)
        actions.append(a)
    return np.stack(states), np.stack(actions)


def demonstrator_layout(seed: int) -> WorldLayout:
    """A randomly perturbed scene; demonstrators perform in diverse settings."""
    rng = np.random.default_rng([seed, 303])
    return _perturbed_layout(-1, rng, jitter=0.08, turn=0.3)


def gen_demonstrator_video(task: TaskLabel, layout: Optional[WorldLayout], seed: int,
                           traj_id: Optional[int] = None) -> tuple[Trajectory, "VideoFeatures"]:
    """Scripted demonstration of ``task`` rendered in the demonstrator domain.

    ``layout=None`` draws a perturbed scene from the seed.
    """
    rng = np.random.default_rng([seed, 404, int(task)])
    if layout is None:
        layout = demonstrator_layout(seed)
    else:
        jitter = rng.uniform(-0.02, 0.02, size=3 * 2)
        layout = replace(
            layout,
            drawer_slot=tuple(np.asarray(layout.drawer_slot) + jitter[0:2]),
            cup=tuple(np.asarray(layout.cup) + jitter[2:4]),
            faucet_pivot=tuple(np.asarray(layout.faucet_pivot) + jitter[4:6]),
        )
    states, actions = run_expert(TaskLabel(task), layout, rng)
    traj = Trajectory(
        id=seed if traj_id is None else traj_id,
        states=states,
        actions=actions,
        layout=layout,
        domain=Domain.Demonstrator,
        labels=(TaskLabel(task),),
    )
    return traj, render_features(traj, Domain.Demonstrator)


def gen_scripted_robot_trajectory(task: TaskLabel, layout: WorldLayout, seed: int,
                                  traj_id: Optional[int] = None) -> Trajectory:
    """Robot-domain scripted demonstration (unannotated-demonstrations protocol)."""
    rng = np.random.default_rng([seed, 505, int(task)])
    states, actions = run_expert(TaskLabel(task), layout, rng)
    return Trajectory(
        id=seed if traj_id is None else traj_id,
        states=states,
        actions=actions,
        layout=layout,
        domain=Domain.Robot,
        labels=satisfied_tasks(states, layout),
    )


# -- rendering ----------------------------------------------------------------

@dataclass(frozen=True)
class VideoFeatures:
    frames: np.ndarray  # (N_FRAMES, FEATURE_DIM)
    domain: Domain

    def __post_init__(self):
        if self.frames.shape[0] != N_FRAMES:
            raise ValueError(f"videos have exactly {N_FRAMES} frames")


def subsample_indices(n_states: int) -> np.ndarray:
    if n_states >= N_FRAMES:
        return np.linspace(0, n_states - 1, N_FRAMES).round().astype(int)
    return np.concatenate([np.arange(n_states), np.full(N_FRAMES - n_states, n_states - 1)])


def state_features(states: np.ndarray, layout: WorldLayout) -> np.ndarray:
    """Robot-domain per-frame features for raw state rows (..., 6)."""
    states = np.asarray(states, dtype=np.float64)
    sem = states.copy()
    sem[..., 5] = sem[..., 5] / FAUCET_LIMIT
    onehot = np.zeros(3 * N_COLORS)
    for i, c in enumerate(layout.colors):
        onehot[i * N_COLORS + c] = 1.0
    return np.concatenate([sem, np.broadcast_to(onehot, sem.shape[:-1] + onehot.shape)], axis=-1)


_SCRAMBLE_SEED = 20240917
NOISE_SIGMA = 0.2
SCRAMBLE_MIX = 0.6
LIGHT_RANGE = (0.5, 2.5)


def _scramble() -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(_SCRAMBLE_SEED)
    mixing = np.eye(STATE_DIM) + SCRAMBLE_MIX * rng.normal(size=(STATE_DIM, STATE_DIM)) / math.sqrt(STATE_DIM)
    scale = np.exp(rng.uniform(np.log(0.7), np.log(1.4), size=STATE_DIM))
    offset = rng.uniform(-0.2, 0.2, size=STATE_DIM)
    return mixing * scale[None, :], offset


SCRAMBLE_MATRIX, SCRAMBLE_OFFSET = _scramble()


def render_features(trajectory: Trajectory, domain: Domain) -> VideoFeatures:
    """Per-frame observation features of a trajectory seen from ``domain``."""
    domain = Domain(domain)
    idx = subsample_indices(trajectory.states.shape[0])
    states = trajectory.states[idx]
    layout = trajectory.layout
    if domain == Domain.Robot:
        return VideoFeatures(state_features(states, layout), domain)
    sem = states.copy()
    sem[:, 5] = sem[:, 5] / FAUCET_LIMIT
    sem = sem @ SCRAMBLE_MATRIX + SCRAMBLE_OFFSET
    noise_rng = np.random.default_rng([trajectory.id & 0xFFFFFFFF, 606])
    noise = noise_rng.normal(0.0, NOISE_SIGMA, size=(N_FRAMES, 4))
    colors = np.array(layout.colors, dtype=np.float64) / (N_COLORS - 1)
    light = noise_rng.uniform(*LIGHT_RANGE, size=2)
    extra = np.broadcast_to(np.concatenate([colors, light]), (N_FRAMES, 5))
    return VideoFeatures(np.concatenate([sem, noise, extra], axis=1), domain)


# -- dataset files ------------------------------------------------------------

def _fmt(x: float) -> float:
    return float(f"{x:.17g}")


def trajectory_to_json(traj: Trajectory) -> str:
    rec = {
        "id": traj.id,
        "domain": traj.domain.value,
        "variant_id": traj.layout.variant_id,
        "layout": traj.layout.to_dict(),
        "states": [[_fmt(v) for v in row] for row in traj.states],
        "actions": [[_fmt(v) for v in row] for row in traj.actions],
    }
    if traj.labels:
        rec["hidden_label"] = traj.labels[0].name
        rec["all_labels"] = [t.name for t in traj.labels]
    return json.dumps(rec)


def trajectory_from_json(line: str) -> Trajectory:
    rec = json.loads(line)
    labels = tuple(TaskLabel[n] for n in rec.get("all_labels", [rec["hidden_label"]] if "hidden_label" in rec else []))
    return Trajectory(
        id=int(rec["id"]),
        states=np.array(rec["states"], dtype=np.float64),
        actions=np.array(rec["actions"], dtype=np.float64),
        layout=WorldLayout.from_dict(rec["layout"]),
        domain=Domain(rec["domain"]),
        labels=labels,
    )


def save_jsonl(trajectories: Iterable[Trajectory], path) -> None:
    with open(path, "w") as fh:
        for traj in trajectories:
            fh.write(trajectory_to_json(traj) + "\n")


def load_jsonl(path) -> list[Trajectory]:
    with open(path) as fh:
        return [trajectory_from_json(line) for line in fh if line.strip()]
