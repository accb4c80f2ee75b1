"""1D slide world: an agent pushes an object along a line toward a goal zone.

The agent accelerates left/right but is stopped by a barrier in the middle of
the world, so the only way to get the object into the goal zone (right of the
barrier) is to hit it at the right speed. On contact the agent hands its whole
velocity to the object and stops.

State vectors are ordered ``[agent_pos, agent_vel, obj_pos, obj_vel]``.
"""
from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

STATE_DIM = 4
ACTION_DIM = 1
OBJECT_IDX = (2, 3)


@dataclass(frozen=True)
class SlideParams:
    world_lo: float = 0.0
    world_hi: float = 1.0
    barrier_pos: float = 0.5
    agent_halfwidth: float = 0.025
    obj_halfwidth: float = 0.025
    accel_scale: float = 0.04
    dt: float = 1.0
    damping: float = 0.9
    drag: float = 0.8
    goal_halfwidth: float = 0.05
    goal_lo: float = 0.6
    goal_hi: float = 0.95
    agent_init: tuple = (0.05, 0.35)
    obj_init: tuple = (0.4, 0.48)
    episode_length: int = 30

    @property
    def agent_max(self):
        return self.barrier_pos - self.agent_halfwidth

    @property
    def agent_min(self):
        return self.world_lo + self.agent_halfwidth

    @property
    def obj_max(self):
        return self.world_hi - self.obj_halfwidth

    @property
    def contact_dist(self):
        return self.agent_halfwidth + self.obj_halfwidth


@dataclass(frozen=True)
class SlideState:
    agent_pos: float
    agent_vel: float
    obj_pos: float
    obj_vel: float

    def to_array(self):
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, x):
        return cls(*(float(v) for v in np.asarray(x, dtype=float).reshape(STATE_DIM)))


@dataclass(frozen=True)
class Goal:
    center: float
    halfwidth: float = 0.05


def reset(params: SlideParams, rng):
    agent = rng.uniform(*params.agent_init)
    obj = rng.uniform(*params.obj_init)
    goal = Goal(float(rng.uniform(params.goal_lo, params.goal_hi)), params.goal_halfwidth)
    return SlideState(float(agent), 0.0, float(obj), 0.0), goal


def step(params: SlideParams, s: SlideState, a):
    """Advance one step; returns ``(next_state, contact)``.

    Contact is detected on the swept agent path (limited by the barrier), so
    a fast agent cannot tunnel through the object.
    """
    a = float(np.clip(np.asarray(a, dtype=float).reshape(-1)[0], -1.0, 1.0))
    p = params
    ov = p.drag * s.obj_vel
    op = s.obj_pos
    av = p.damping * (s.agent_vel + p.accel_scale * a * p.dt)
    ap = s.agent_pos + av * p.dt

    contact = False
    touch = op - p.contact_dist
    if av > ov and min(ap, p.agent_max) >= touch:
        contact = True
        ap = touch
        ov = av
        av = 0.0
    elif ap > p.agent_max:
        ap = p.agent_max
        av = 0.0
    if ap < p.agent_min:
        ap = p.agent_min
        av = 0.0

    op = op + ov * p.dt
    if op > p.obj_max:
        op = p.obj_max
        ov = 0.0
    return SlideState(ap, av, op, ov), contact


def ground_truth_influence(params: SlideParams, s: SlideState) -> bool:
    """True iff full acceleration in either direction makes contact and
    changes the object state."""
    for a in (1.0, -1.0):
        nxt, contact = step(params, s, a)
        if contact and (nxt.obj_pos, nxt.obj_vel) != (s.obj_pos, s.obj_vel):
            return True
    return False


def achieved_goal(s) -> float:
    if isinstance(s, SlideState):
        return s.obj_pos
    return float(np.asarray(s)[OBJECT_IDX[0]])


def task_reward(s, goal: Goal) -> float:
    return 0.0 if abs(achieved_goal(s) - goal.center) <= goal.halfwidth else -1.0


def goal_reward(achieved, desired, halfwidth):
    """Vectorized sparse reward on arrays of achieved/desired goal positions."""
    return np.where(np.abs(np.asarray(achieved) - np.asarray(desired)) <= halfwidth, 0.0, -1.0)


def dataset_std(states):
    """Per-dimension std; exactly 0 for constant dimensions."""
    states = np.asarray(states, dtype=float)
    return np.where(np.ptp(states, axis=0) == 0, 0.0, states.std(axis=0))


def add_observation_noise(states, level, rng, ref_std=None):
    """Gaussian noise with per-dimension std ``level * std(states)``.

    ``ref_std`` overrides the dataset std (for noising several arrays with one
    reference). Only the passed states are touched.
    """
    states = np.asarray(states, dtype=float)
    if level < 0:
        raise ValueError("noise level must be non-negative")
    if level == 0:
        return states.copy()
    std = dataset_std(states) if ref_std is None else np.asarray(ref_std, dtype=float)
    return states + rng.standard_normal(states.shape) * (level * std)


def _track(params, vel, target):
    return float(np.clip((target / params.damping - vel) / params.accel_scale, -1.0, 1.0))


def _rollout_plan(params, s, steps, backoff, v):
    actions = []
    hit = False
    for i in range(steps):
        if hit:
            a = _track(params, s.agent_vel, 0.0)
        elif i < backoff:
            a = -1.0
        else:
            a = _track(params, s.agent_vel, v)
        s, contact = step(params, s, a)
        hit = hit or contact
        actions.append(a)
    return actions, s


def plan_hit(params: SlideParams, s: SlideState, goal: Goal, steps, max_backoff=6, n_grid=24):
    """Open-loop action sequence putting the object as close to the goal
    center as a (back off, then approach at constant speed) plan allows.

    Searches the backoff length exhaustively and the approach speed on a grid
    followed by a local refinement, simulating each candidate exactly.
    """
    best = (np.inf, [0.0] * steps)
    v_max = params.accel_scale * params.damping / (1.0 - params.damping)
    for backoff in range(max_backoff + 1):
        grid = np.linspace(0.005, v_max, n_grid)
        width = grid[1] - grid[0]
        for _ in range(3):
            errs = []
            for v in grid:
                actions, end = _rollout_plan(params, s, steps, backoff, v)
                err = abs(end.obj_pos - goal.center)
                errs.append(err)
                if err < best[0]:
                    best = (err, actions)
            v0 = grid[int(np.argmin(errs))]
            grid = np.linspace(max(v0 - width, 1e-3), v0 + width, 9)
            width = grid[1] - grid[0]
        if best[0] < 0.1 * goal.halfwidth:
            break
    return best[1]


class ScriptedPolicy:
    """Oracle controller built on ``plan_hit``; replans at episode start.

    With ``push_only`` it simply accelerates right every step.
    """

    def __init__(self, params: SlideParams, push_only=False):
        self.params = params
        self.push_only = push_only
        self._plan = []

    def begin(self, s, goal):
        if not self.push_only:
            self._plan = plan_hit(self.params, s, goal, self.params.episode_length)

    def __call__(self, s, goal, t):
        if self.push_only:
            return 1.0
        return self._plan[t] if t < len(self._plan) else 0.0


class SlideEnv:
    """Stateful wrapper with a goal-conditioned ``reset``/``step`` loop."""

    def __init__(self, params: SlideParams | None = None):
        self.params = params or SlideParams()
        self.state = None
        self.goal = None
        self.t = 0

    def reset(self, rng):
        self.state, self.goal = reset(self.params, rng)
        self.t = 0
        return self.state

    def step(self, a):
        self.state, contact = step(self.params, self.state, a)
        self.t += 1
        done = self.t >= self.params.episode_length
        return self.state, task_reward(self.state, self.goal), done, {"contact": contact}
