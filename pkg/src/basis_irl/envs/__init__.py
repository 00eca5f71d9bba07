"""Multi-task environments and their exact tabular forms."""

from __future__ import annotations

from basis_irl.envs.base import CapacityError, TaskSpec, task_onehot
from basis_irl.envs.fruitgrid import (
    FruitGrid,
    FruitGridConfig,
    FruitGridState,
    color_indicator_rewards,
    enumerate_fruitgrid,
    fruitgrid_tasks,
)
from basis_irl.envs.laneworld import (
    LaneWorld,
    LaneWorldConfig,
    LaneWorldState,
    enumerate_laneworld,
    lane_occupancy_rewards,
    laneworld_tasks,
)

ENV_KINDS = ("fruitgrid", "laneworld")


def make_env(kind: str, num_tasks: int, **config):
    if kind == "fruitgrid":
        return FruitGrid(FruitGridConfig(**config), num_tasks)
    if kind == "laneworld":
        return LaneWorld(LaneWorldConfig(**config), num_tasks)
    raise ValueError(f"unknown environment kind {kind!r}; expected one of {ENV_KINDS}")


def action_count(env) -> int:
    return env.num_actions


def make_task_suite(env, K: int, seed: int = 0) -> tuple[list[TaskSpec], TaskSpec]:
    if K < 1:
        raise ValueError("K must be >= 1")
    if isinstance(env, FruitGrid):
        return fruitgrid_tasks(env.config.colors, K)
    if isinstance(env, LaneWorld):
        return laneworld_tasks(env.config, K, seed)
    raise TypeError(f"unsupported environment {type(env).__name__}")


def enumerate_tabular(env, tasks: list[TaskSpec], gamma: float, max_states: int = 200_000):
    """Exact TabularMDP of ``env``; also attaches the state index to ``env``."""
    if isinstance(env, FruitGrid):
        return enumerate_fruitgrid(env, tasks, gamma, max_states)
    if isinstance(env, LaneWorld):
        return enumerate_laneworld(env, tasks, gamma, max_states)
    raise TypeError(f"unsupported environment {type(env).__name__}")


def behavior_tables(env, mdp):
    """Per-category indicator reward tables used for behavior distributions."""
    if isinstance(env, FruitGrid):
        return color_indicator_rewards(mdp, env.config.colors)
    return lane_occupancy_rewards(mdp, env.config.lanes)


__all__ = [
    "CapacityError",
    "TaskSpec",
    "task_onehot",
    "FruitGrid",
    "FruitGridConfig",
    "FruitGridState",
    "LaneWorld",
    "LaneWorldConfig",
    "LaneWorldState",
    "ENV_KINDS",
    "make_env",
    "action_count",
    "make_task_suite",
    "enumerate_tabular",
    "behavior_tables",
]
