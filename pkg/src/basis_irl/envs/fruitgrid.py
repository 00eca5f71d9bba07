"""Fruit-picking gridworld.

The agent walks on an ``n x n`` grid with four cardinal moves; walking into a
wall leaves it in place. Entering a cell holding a fruit collects it and pays
the task weight of that fruit's color. With respawn on, the collected fruit
reappears on a uniformly chosen empty cell, so every color keeps its count.

Observations are flattened occupancy planes: one ``n x n`` plane per color,
then the agent's plane, then the task one-hot. With ``egocentric`` set, the
color planes are instead ``(2n-1) x (2n-1)`` windows centred on the agent
(the agent plane stays absolute and carries the wall information).
"""

from __future__ import annotations

import itertools
from math import comb
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from basis_irl.envs.base import CapacityError, StateIndex, TaskSpec, task_onehot
from basis_irl.mdp import TabularMDP

# up, down, left, right
MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])
COLOR_NAMES = ("red", "orange", "green", "blue", "purple", "yellow")


@dataclass(frozen=True)
class FruitGridConfig:
    grid_size: int = 5
    colors: int = 3
    fruits_per_color: int = 3
    horizon: int = 50
    respawn: bool = True
    egocentric: bool = False

    def validate(self) -> None:
        if self.grid_size < 2 or self.colors < 1 or self.fruits_per_color < 1:
            raise ValueError("grid_size >= 2, colors >= 1 and fruits_per_color >= 1 required")
        if self.grid_size**2 <= self.colors * self.fruits_per_color + 1:
            raise ValueError("grid too small for the agent plus all fruits")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True)
class FruitGridState:
    agent: int
    fruits: tuple  # per color: sorted tuple of cell indices
    t: int = 0

    @property
    def key(self) -> tuple:
        return (self.agent, self.fruits)


class FruitGrid:
    num_actions = 4

    def __init__(self, config: FruitGridConfig = FruitGridConfig(), num_tasks: int = 3):
        config.validate()
        self.config = config
        self.num_tasks = num_tasks
        self.horizon = config.horizon
        self.n = config.grid_size
        self.cells = self.n * self.n
        self.window = 2 * self.n - 1 if config.egocentric else self.n
        self.feature_dim = config.colors * self.window**2 + self.cells
        self.obs_dim = self.feature_dim + num_tasks
        self.index = None
        rc = np.array([divmod(c, self.n) for c in range(self.cells)])
        dest = rc[:, None, :] + MOVES[None]
        inside = np.all((dest >= 0) & (dest < self.n), axis=2)
        self.move_table = np.where(inside, dest[..., 0] * self.n + dest[..., 1], np.arange(self.cells)[:, None])
        self._rc = rc

    # -- episode interface -------------------------------------------------

    def reset(self, task: TaskSpec | None, rng: np.random.Generator):
        cfg = self.config
        cells = rng.choice(self.cells, size=1 + cfg.colors * cfg.fruits_per_color, replace=False)
        fruits = tuple(
            tuple(sorted(int(x) for x in cells[1 + c * cfg.fruits_per_color : 1 + (c + 1) * cfg.fruits_per_color]))
            for c in range(cfg.colors)
        )
        state = FruitGridState(int(cells[0]), fruits, 0)
        return state, self.observe(state, task)

    def step(self, state: FruitGridState, action: int, task: TaskSpec | None, rng: np.random.Generator):
        if not 0 <= action < self.num_actions:
            raise ValueError(f"invalid action {action}; FruitGrid has {self.num_actions}")
        new = int(self.move_table[state.agent, action])
        fruits, color = self._collect(state.fruits, new)
        reward = 0.0
        if color is not None:
            reward = self.color_reward(task, color)
            if self.config.respawn:
                empty = self._empty_cells(new, fruits)
                cell = int(empty[rng.integers(len(empty))])
                fruits = self._with_fruit(fruits, color, cell)
        nxt = FruitGridState(new, fruits, state.t + 1)
        done = nxt.t >= self.horizon
        return nxt, self.observe(nxt, task), reward, done

    def color_reward(self, task: TaskSpec | None, color: int) -> float:
        if task is None:
            return 0.0
        return float(task.reward_weights[color])

    def is_terminal(self, state) -> bool:
        return False

    def state_id(self, state: FruitGridState) -> int | None:
        return None if self.index is None else self.index(state.key)

    def collected_color(self, state: FruitGridState, action: int) -> int | None:
        new = int(self.move_table[state.agent, action])
        return self._collect(state.fruits, new)[1]

    # -- observations ------------------------------------------------------

    def observe(self, state: FruitGridState, task: TaskSpec | None = None) -> np.ndarray:
        return np.concatenate([self.features(state.key), self._task_code(task)])

    def features(self, key) -> np.ndarray:
        agent, fruits = key
        n, w = self.n, self.window
        out = np.zeros(self.feature_dim)
        ar, ac = divmod(agent, n)
        for c, cells in enumerate(fruits):
            for cell in cells:
                if self.config.egocentric:
                    fr, fc = divmod(cell, n)
                    out[c * w * w + (fr - ar + n - 1) * w + (fc - ac + n - 1)] = 1.0
                else:
                    out[c * w * w + cell] = 1.0
        out[self.config.colors * w * w + agent] = 1.0
        return out

    def features_batch(self, agents: np.ndarray, fruit_cells: np.ndarray) -> np.ndarray:
        """Vectorised features; ``fruit_cells`` is ``(M, colors, per_color)``, -1 for absent."""
        n, w = self.n, self.window
        M = len(agents)
        out = np.zeros((M, self.feature_dim))
        ar, ac = self._rc[agents, 0], self._rc[agents, 1]
        rows = np.arange(M)
        for c in range(fruit_cells.shape[1]):
            for j in range(fruit_cells.shape[2]):
                cell = fruit_cells[:, c, j]
                ok = cell >= 0
                fr, fc = self._rc[np.where(ok, cell, 0), 0], self._rc[np.where(ok, cell, 0), 1]
                if self.config.egocentric:
                    col = c * w * w + (fr - ar + n - 1) * w + (fc - ac + n - 1)
                else:
                    col = c * w * w + cell
                out[rows[ok], col[ok]] = 1.0
        out[rows, self.config.colors * w * w + agents] = 1.0
        return out

    def _task_code(self, task: TaskSpec | None) -> np.ndarray:
        tid = None if task is None or task.id >= self.num_tasks else task.id
        return task_onehot(self.num_tasks, tid)

    # -- dynamics helpers ----------------------------------------------------

    @staticmethod
    def _collect(fruits: tuple, cell: int):
        for c, cells in enumerate(fruits):
            if cell in cells:
                return fruits[:c] + (tuple(x for x in cells if x != cell),) + fruits[c + 1 :], c
        return fruits, None

    def _empty_cells(self, agent: int, fruits: tuple) -> np.ndarray:
        taken = np.zeros(self.cells, dtype=bool)
        taken[agent] = True
        for cells in fruits:
            taken[list(cells)] = True
        return np.flatnonzero(~taken)

    @staticmethod
    def _with_fruit(fruits: tuple, color: int, cell: int) -> tuple:
        return fruits[:color] + (tuple(sorted(fruits[color] + (cell,))),) + fruits[color + 1 :]

    def transition_distribution(self, key, action: int):
        """All successors of ``(key, action)`` as (prob, next_key, collected_color)."""
        agent, fruits = key
        new = int(self.move_table[agent, action])
        fruits, color = self._collect(fruits, new)
        if color is None or not self.config.respawn:
            return [(1.0, (new, fruits), color)]
        empty = self._empty_cells(new, fruits)
        p = 1.0 / len(empty)
        return [(p, (new, self._with_fruit(fruits, color, int(e))), color) for e in empty]

    def initial_keys(self):
        """Every initial configuration; all are equally likely."""
        cfg = self.config
        seen = set()
        for agent in range(self.cells):
            rest = [c for c in range(self.cells) if c != agent]
            for cells in _color_placements(rest, cfg.colors, cfg.fruits_per_color):
                key = (agent, cells)
                if key not in seen:
                    seen.add(key)
                    yield key


def _color_placements(cells, colors, per_color):
    if colors == 0:
        yield ()
        return
    for chosen in itertools.combinations(cells, per_color):
        remaining = [c for c in cells if c not in chosen]
        for rest in _color_placements(remaining, colors - 1, per_color):
            yield (chosen,) + rest


class FruitGridIndex:
    """Arithmetic state index for one fruit per color with respawn."""

    def __init__(self, env: FruitGrid, states: np.ndarray):
        self.env = env
        self.states = states  # (S, 1 + colors): agent, fruit of color 0, 1, ...
        self.radix = env.cells ** np.arange(states.shape[1])
        self.lookup = np.full(env.cells ** states.shape[1], -1, dtype=np.int64)
        self.lookup[states @ self.radix] = np.arange(len(states))

    def __len__(self) -> int:
        return len(self.states)

    def __call__(self, key) -> int:
        agent, fruits = key
        code = agent + sum(cells[0] * self.radix[c + 1] for c, cells in enumerate(fruits))
        idx = int(self.lookup[code])
        if idx < 0:
            raise KeyError(key)
        return idx

    def key(self, i: int):
        row = self.states[i]
        return (int(row[0]), tuple((int(x),) for x in row[1:]))

    def features(self, ids: np.ndarray) -> np.ndarray:
        rows = self.states[ids]
        return self.env.features_batch(rows[:, 0], rows[:, 1:, None])


class GenericIndex(StateIndex):
    env: FruitGrid = None

    def key(self, i: int):
        return self.keys[i]

    def features(self, ids: np.ndarray) -> np.ndarray:
        return np.array([self.env.features(self.keys[i]) for i in ids])


def enumerate_fruitgrid(env: FruitGrid, tasks: list[TaskSpec], gamma: float, max_states: int = 200_000) -> TabularMDP:
    cfg = env.config
    if cfg.fruits_per_color == 1 and cfg.respawn:
        return _enumerate_fast(env, tasks, gamma, max_states)
    return _enumerate_generic(env, tasks, gamma, max_states)


def _count_states(env: FruitGrid) -> int:
    cfg = env.config
    total, free = env.cells, env.cells - 1
    for _ in range(cfg.colors):
        total *= comb(free, cfg.fruits_per_color)
        free -= cfg.fruits_per_color
    return total


def _enumerate_generic(env: FruitGrid, tasks, gamma, max_states):
    keys, lookup = [], {}
    frontier = []
    init = []
    for key in env.initial_keys():
        lookup[key] = len(keys)
        keys.append(key)
        init.append(lookup[key])
        if len(keys) > max_states:
            raise CapacityError(f"more than {max_states} states")
    frontier = list(keys)
    rows, cols, vals, colors = [], [], [], []
    A = env.num_actions
    expanded = {}
    while frontier:
        nxt_frontier = []
        for key in frontier:
            s = lookup[key]
            for a in range(A):
                for p, k2, color in env.transition_distribution(key, a):
                    if k2 not in lookup:
                        lookup[k2] = len(keys)
                        keys.append(k2)
                        nxt_frontier.append(k2)
                        if len(keys) > max_states:
                            raise CapacityError(f"more than {max_states} states")
                    rows.append(s * A + a)
                    cols.append(lookup[k2])
                    vals.append(p)
                expanded[(s, a)] = color
        frontier = nxt_frontier
    S = len(keys)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(S * A, S))
    collected = np.full((S, A), -1)
    for (s, a), color in expanded.items():
        if color is not None:
            collected[s, a] = color
    d0 = np.zeros(S)
    d0[init] = 1.0 / len(init)
    index = GenericIndex(keys, lookup)
    index.env = env
    mdp = TabularMDP(S, A, P, _reward_tables(collected, tasks, env), gamma, d0, state_index=index)
    mdp.collected = collected
    env.index = index
    return mdp


def _enumerate_fast(env: FruitGrid, tasks, gamma, max_states):
    cfg = env.config
    n2, C, A = env.cells, cfg.colors, env.num_actions
    S = _count_states(env)
    if S > max_states:
        raise CapacityError(f"{S} states exceed the cap of {max_states}")
    states = np.array(list(itertools.permutations(range(n2), C + 1)), dtype=np.int64)
    index = FruitGridIndex(env, states)
    radix = index.radix
    codes = states @ radix
    rows_all, cols_all, vals_all = [], [], []
    collected = np.full((S, A), -1)
    sid = np.arange(S)
    for a in range(A):
        new = env.move_table[states[:, 0], a]
        hit = states[:, 1:] == new[:, None]
        color = np.where(hit.any(axis=1), hit.argmax(axis=1), -1)
        collected[:, a] = color
        stay = color < 0
        moved = codes + (new - states[:, 0]) * radix[0]
        rows_all.append(sid[stay] * A + a)
        cols_all.append(index.lookup[moved[stay]])
        vals_all.append(np.ones(stay.sum()))
        for c in range(C):
            sel = color == c
            if not sel.any():
                continue
            base = states[sel].copy()
            base[:, 0] = new[sel]
            # candidate respawn cells: anything not occupied after the pickup
            cand = np.broadcast_to(np.arange(n2), (len(base), n2))
            others = np.delete(base[:, 1:], c, axis=1)
            free = (cand != base[:, :1]) & np.all(cand[:, :, None] != others[:, None, :], axis=2)
            r_idx, cell = np.nonzero(free)
            nxt = base[r_idx].copy()
            nxt[:, 1 + c] = cell
            rows_all.append(sid[sel][r_idx] * A + a)
            cols_all.append(index.lookup[nxt @ radix])
            vals_all.append(np.full(len(r_idx), 1.0 / (n2 - C)))
    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    vals = np.concatenate(vals_all)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(S * A, S))
    d0 = np.full(S, 1.0 / S)
    mdp = TabularMDP(S, A, P, _reward_tables(collected, tasks, env), gamma, d0, state_index=index)
    mdp.collected = collected
    env.index = index
    return mdp


def _reward_tables(collected: np.ndarray, tasks, env: FruitGrid) -> np.ndarray:
    K = max(len(tasks), 1)
    reward = np.zeros((K,) + collected.shape)
    for k, task in enumerate(tasks):
        w = np.append(np.asarray(task.reward_weights, dtype=float), 0.0)  # index -1 -> 0
        reward[k] = w[collected]
    return reward


def color_indicator_rewards(mdp: TabularMDP, colors: int) -> np.ndarray:
    """``(colors, S, A)`` tables: 1 where the move collects that color."""
    col = mdp.collected
    return np.stack([(col == c).astype(float) for c in range(colors)])


def fruitgrid_tasks(colors: int = 3, K: int | None = None) -> tuple[list[TaskSpec], TaskSpec]:
    """Pure single-color pre-training tasks plus the mixed held-out task."""
    K = colors if K is None else K
    tasks = []
    for k in range(K):
        w = np.zeros(colors)
        w[k % colors] = 1.0
        tasks.append(TaskSpec(k, tuple(w), f"collect {COLOR_NAMES[k % colors]} only"))
    mixed = np.zeros(colors)
    mixed[: min(colors, 3)] = (0.8, 0.2, 0.0)[: min(colors, 3)]
    test = TaskSpec(K, tuple(mixed), "mixed preference: 80% red, 20% orange, 0% green")
    return tasks, test
