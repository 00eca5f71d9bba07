"""Discrete lane / speed / headway driving world.

A stand-in for the highway and roundabout domains: the ego vehicle picks a
lane, a speed bin, and follows a lead vehicle at some headway bin. Each step
the lead vehicle's speed is redrawn uniformly; the headway closes by one bin
when the lead is slower, opens by one when it is faster. A lane change puts a
fresh lead vehicle ahead at a uniformly drawn headway. Headway 0 is a
collision and ends the episode.

Task weights are ``(alpha, beta, kappa, target_lane, target_speed,
target_headway)``; the per-step reward is read off the post-transition state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from basis_irl.envs.base import CapacityError, StateIndex, TaskSpec, task_onehot
from basis_irl.mdp import TabularMDP

LANE_LEFT, LANE_RIGHT, FASTER, SLOWER, IDLE = range(5)
ACTION_NAMES = ("lane-left", "lane-right", "faster", "slower", "idle")


@dataclass(frozen=True)
class LaneWorldConfig:
    lanes: int = 3
    speed_bins: int = 5
    headway_bins: int = 5
    horizon: int = 40
    collision_penalty: float = 10.0
    speed_range: tuple[float, float] = (20.0, 30.0)  # m/s covered by the speed bins
    headway_range: tuple[float, float] = (0.0, 40.0)  # m covered by the headway bins

    def validate(self) -> None:
        if self.lanes < 2:
            raise ValueError("lanes must be >= 2")
        if self.speed_bins < 2 or self.headway_bins < 2:
            raise ValueError("speed_bins and headway_bins must be >= 2")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    def speed_bin(self, mps: float) -> int:
        return _nearest(np.linspace(*self.speed_range, self.speed_bins), mps)

    def headway_bin(self, metres: float) -> int:
        return _nearest(np.linspace(*self.headway_range, self.headway_bins), metres)


def _nearest(grid: np.ndarray, x: float) -> int:
    return int(np.argmin(np.abs(grid - x)))


@dataclass(frozen=True)
class LaneWorldState:
    lane: int
    speed: int
    headway: int
    t: int = 0

    @property
    def key(self) -> tuple:
        return (self.lane, self.speed, self.headway)

    @property
    def crashed(self) -> bool:
        return self.headway == 0


class LaneWorld:
    num_actions = 5

    def __init__(self, config: LaneWorldConfig = LaneWorldConfig(), num_tasks: int = 10):
        config.validate()
        self.config = config
        self.num_tasks = num_tasks
        self.horizon = config.horizon
        self.feature_dim = config.lanes + config.speed_bins + config.headway_bins
        self.obs_dim = self.feature_dim + num_tasks
        self.index = None

    def reset(self, task: TaskSpec | None, rng: np.random.Generator):
        cfg = self.config
        state = LaneWorldState(
            int(rng.integers(cfg.lanes)), int(rng.integers(cfg.speed_bins)), int(rng.integers(1, cfg.headway_bins)), 0
        )
        return state, self.observe(state, task)

    def step(self, state: LaneWorldState, action: int, task: TaskSpec | None, rng: np.random.Generator):
        if not 0 <= action < self.num_actions:
            raise ValueError(f"invalid action {action}; LaneWorld has {self.num_actions}")
        lane, speed, changed = self._control(state, action)
        if changed:
            headway = int(rng.integers(1, self.config.headway_bins))
        else:
            lead = int(rng.integers(self.config.speed_bins))
            headway = self._follow(state.headway, speed, lead)
        nxt = LaneWorldState(lane, speed, headway, state.t + 1)
        reward = self.reward(nxt, task)
        done = nxt.crashed or nxt.t >= self.horizon
        return nxt, self.observe(nxt, task), reward, done

    def _control(self, state: LaneWorldState, action: int):
        cfg = self.config
        lane, speed = state.lane, state.speed
        if action == LANE_LEFT:
            lane = max(lane - 1, 0)
        elif action == LANE_RIGHT:
            lane = min(lane + 1, cfg.lanes - 1)
        elif action == FASTER:
            speed = min(speed + 1, cfg.speed_bins - 1)
        elif action == SLOWER:
            speed = max(speed - 1, 0)
        return lane, speed, lane != state.lane

    def _follow(self, headway: int, speed: int, lead: int) -> int:
        return int(np.clip(headway + np.sign(lead - speed), 0, self.config.headway_bins - 1))

    def reward(self, state: LaneWorldState, task: TaskSpec | None) -> float:
        if task is None:
            return 0.0
        alpha, beta, kappa, t_lane, t_speed, t_head = task.reward_weights
        r = -alpha * abs(state.speed - t_speed) - beta * abs(state.lane - t_lane) - kappa * abs(state.headway - t_head)
        if state.crashed:
            r -= self.config.collision_penalty
        return float(r)

    def is_terminal(self, state: LaneWorldState) -> bool:
        return state.crashed

    def state_id(self, state: LaneWorldState) -> int | None:
        return None if self.index is None else self.index(state.key)

    def observe(self, state: LaneWorldState, task: TaskSpec | None = None) -> np.ndarray:
        tid = None if task is None or task.id >= self.num_tasks else task.id
        return np.concatenate([self.features(state.key), task_onehot(self.num_tasks, tid)])

    def features(self, key) -> np.ndarray:
        cfg = self.config
        lane, speed, headway = key
        out = np.zeros(self.feature_dim)
        out[lane] = 1.0
        out[cfg.lanes + speed] = 1.0
        out[cfg.lanes + cfg.speed_bins + headway] = 1.0
        return out

    def transition_distribution(self, key, action: int):
        """All successors of ``(key, action)`` as (prob, next_key)."""
        cfg = self.config
        lane, speed, changed = self._control(LaneWorldState(*key), action)
        if changed:
            p = 1.0 / (cfg.headway_bins - 1)
            return [(p, (lane, speed, h)) for h in range(1, cfg.headway_bins)]
        out = {}
        for lead in range(cfg.speed_bins):
            k2 = (lane, speed, self._follow(key[2], speed, lead))
            out[k2] = out.get(k2, 0.0) + 1.0 / cfg.speed_bins
        return sorted((p, k) for k, p in out.items())

    def initial_keys(self):
        cfg = self.config
        for lane in range(cfg.lanes):
            for speed in range(cfg.speed_bins):
                for h in range(1, cfg.headway_bins):
                    yield (lane, speed, h)


class LaneIndex(StateIndex):
    env: LaneWorld = None

    def key(self, i: int):
        return self.keys[i]

    def features(self, ids: np.ndarray) -> np.ndarray:
        return np.array([self.env.features(self.keys[i]) for i in ids])


def enumerate_laneworld(env: LaneWorld, tasks: list[TaskSpec], gamma: float, max_states: int = 200_000) -> TabularMDP:
    """Exact tabular form. Collision states are absorbing with zero reward;
    the collision penalty is charged on the transition into them."""
    cfg = env.config
    keys = [(l, s, h) for l in range(cfg.lanes) for s in range(cfg.speed_bins) for h in range(cfg.headway_bins)]
    if len(keys) > max_states:
        raise CapacityError(f"{len(keys)} states exceed the cap of {max_states}")
    index = LaneIndex(keys)
    index.env = env
    S, A = len(keys), env.num_actions
    terminal = np.array([k[2] == 0 for k in keys])
    rows, cols, vals = [], [], []
    K = max(len(tasks), 1)
    reward = np.zeros((K, S, A))
    for s, key in enumerate(keys):
        for a in range(A):
            if terminal[s]:
                rows.append(s * A + a)
                cols.append(s)
                vals.append(1.0)
                continue
            for p, k2 in env.transition_distribution(key, a):
                rows.append(s * A + a)
                cols.append(index(k2))
                vals.append(p)
                nxt = LaneWorldState(*k2)
                for k, task in enumerate(tasks):
                    reward[k, s, a] += p * env.reward(nxt, task)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(S * A, S))
    d0 = np.zeros(S)
    init = [index(k) for k in env.initial_keys()]
    d0[init] = 1.0 / len(init)
    mdp = TabularMDP(S, A, P, reward, gamma, d0, terminal, state_index=index)
    env.index = index
    return mdp


def lane_occupancy_rewards(mdp: TabularMDP, lanes: int) -> np.ndarray:
    """``(lanes, S, A)`` tables: 1 for every step spent in that lane (non-terminal)."""
    keys = mdp.state_index.keys
    out = np.zeros((lanes, mdp.num_states, mdp.num_actions))
    for s, (lane, _, h) in enumerate(keys):
        if h > 0:
            out[lane, s, :] = 1.0
    return out


def laneworld_tasks(config: LaneWorldConfig, K: int = 10, seed: int = 0) -> tuple[list[TaskSpec], TaskSpec]:
    """K random driving preferences plus a held-out test preference.

    The test task follows at about 10 m while holding 28 m/s in the left lane.
    """
    rng = np.random.default_rng(seed)
    test_weights = (1.0, 1.0, 1.0, 0.0, float(config.speed_bin(28.0)), float(config.headway_bin(10.0)))
    seen = {test_weights}
    tasks = []
    while len(tasks) < K:
        w = (
            float(rng.choice([0.5, 1.0, 2.0])),
            float(rng.choice([0.5, 1.0, 2.0])),
            float(rng.choice([0.5, 1.0, 2.0])),
            float(rng.integers(config.lanes)),
            float(rng.integers(config.speed_bins)),
            float(rng.integers(1, config.headway_bins)),
        )
        if w in seen:
            continue
        seen.add(w)
        tasks.append(TaskSpec(len(tasks), w, "lane {3:.0f}, speed bin {4:.0f}, headway bin {5:.0f}".format(*w)))
    test = TaskSpec(K, test_weights, "held out: ~10 m headway at ~28 m/s in the left lane")
    return tasks, test
