import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from basis_irl.envs import enumerate_tabular, make_env, make_task_suite

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_grid():
    """3x3 FruitGrid, two colors, one fruit each, with its exact MDP."""
    env = make_env("fruitgrid", 2, grid_size=3, colors=2, fruits_per_color=1, horizon=10, egocentric=True)
    tasks, test = make_task_suite(env, 2)
    mdp = enumerate_tabular(env, tasks + [test], 0.9)
    return env, tasks, test, mdp


@pytest.fixture(scope="session")
def tiny_lanes():
    env = make_env("laneworld", 3, lanes=2, speed_bins=3, headway_bins=4, horizon=12)
    tasks, test = make_task_suite(env, 3, seed=0)
    mdp = enumerate_tabular(env, tasks + [test], 0.9)
    return env, tasks, test, mdp


def tiny_pretrain_config(**kw):
    from basis_irl.pretrain import PretrainConfig

    base = dict(K=2, d=4, total_iterations=300, episode_horizon=10, lr=1e-3, trunk_hidden=(32,), head_hidden=(32,))
    return PretrainConfig(**{"buffer_capacity": 5000, **base, **kw})


@pytest.fixture(scope="session")
def tiny_basis(tiny_grid):
    """A basis pre-trained on the 3x3 grid (about 15 s)."""
    from basis_irl.pretrain import run_pretraining

    env, tasks, _, _ = tiny_grid
    return run_pretraining(tiny_pretrain_config(), env, tasks)


# one line per acceptance criterion, printed after the test session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
