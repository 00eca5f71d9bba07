from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class CapacityError(RuntimeError):
    """Raised when a tabular enumeration would exceed the state cap."""


@dataclass(frozen=True)
class TaskSpec:
    id: int
    reward_weights: tuple[float, ...]
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "reward_weights", tuple(float(x) for x in self.reward_weights))


@dataclass
class StateIndex:
    """Maps environment state keys to tabular row indices (generic, dict based)."""

    keys: list
    lookup: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lookup:
            self.lookup = {k: i for i, k in enumerate(self.keys)}

    def __len__(self) -> int:
        return len(self.keys)

    def __call__(self, key) -> int:
        return self.lookup[key]


def task_onehot(num_tasks: int, task_id: int | None) -> np.ndarray:
    """One-hot task code; ``None`` gives the all-zero vector used during IRL."""
    v = np.zeros(num_tasks)
    if task_id is not None:
        v[task_id] = 1.0
    return v
