import numpy as np
import pytest
from conftest import tiny_pretrain_config

from basis_irl import demos as D
from basis_irl import mdp as X
from basis_irl.envs import make_env


@pytest.fixture(scope="module")
def expert(tiny_grid):
    env, _, test, mdp = tiny_grid
    return D.make_expert(env, mdp, 2, test)


class TestExpert:
    def test_reference_return(self, expert, tiny_grid):
        _, _, _, mdp = tiny_grid
        # frozen from soft value iteration on the enumerated 504-state grid
        assert expert.reference_return == pytest.approx(4.186567554707787, abs=1e-8)
        assert expert.reference_return == pytest.approx(X.finite_horizon_return(mdp, expert.table, 2, 10))

    def test_greedy_expert_not_worse(self, tiny_grid, expert):
        env, _, test, mdp = tiny_grid
        greedy = D.make_expert(env, mdp, 2, test, greedy=True)
        assert greedy.reference_return >= expert.reference_return - 1e-9
        assert set(np.unique(greedy.table)) <= {0.0, 1.0}

    def test_learned_mode_wraps_policy(self, tiny_grid, expert):
        env, _, test, mdp = tiny_grid
        again = D.make_expert(env, mdp, 2, test, mode="learned", learned=expert.policy)
        assert again.reference_return == pytest.approx(expert.reference_return)
        with pytest.raises(ValueError):
            D.make_expert(env, mdp, 2, test, mode="learned")
        with pytest.raises(ValueError):
            D.make_expert(env, mdp, 2, test, mode="oracle")

    def test_train_learned_expert(self, tiny_grid, expert):
        env, _, test, mdp = tiny_grid

        def factory(k):
            return make_env("fruitgrid", k, grid_size=3, colors=2, fruits_per_color=1, horizon=10, egocentric=True)

        policy = D.train_learned_expert(factory, test, tiny_pretrain_config(total_iterations=200))
        learned = D.make_expert(env, mdp, 2, test, mode="learned", learned=policy)
        assert learned.reference_return > 0.7 * expert.reference_return


class TestSampling:
    def test_task_code_zeroed_and_deterministic(self, tiny_grid, expert):
        env = tiny_grid[0]
        a = D.sample_demos(expert, env, 4, seed=5)
        b = D.sample_demos(expert, env, 4, seed=5)
        for ta, tb in zip(a.trajectories, b.trajectories):
            np.testing.assert_array_equal(ta.observations, tb.observations)
            np.testing.assert_array_equal(ta.actions, tb.actions)
            assert not ta.observations[:, env.feature_dim :].any()
            assert len(ta) == env.horizon
        assert a.has_rewards and len(a.sealed_rewards()) == 4

    def test_subset_is_prefix(self, tiny_grid, expert):
        demos = D.sample_demos(expert, tiny_grid[0], 5, seed=0)
        sub = demos.subset(2)
        assert sub.trajectories == demos.trajectories[:2]
        with pytest.raises(ValueError):
            demos.subset(6)

    def test_rewards_match_true_reward(self, tiny_grid, expert):
        env, _, _, mdp = tiny_grid
        demos = D.sample_demos(expert, env, 6, seed=2)
        obs, acts = demos.steps()
        # every logged reward is one of the test-task fruit weights
        assert set(np.round(np.concatenate(demos.sealed_rewards()), 9)) <= {0.0, 0.8, 0.2}
        assert len(obs) == len(acts) == 60

    def test_empty_request(self, tiny_grid, expert):
        with pytest.raises(ValueError):
            D.sample_demos(expert, tiny_grid[0], 0)


class TestFileFormat:
    def test_round_trip(self, tiny_grid, expert, tmp_path):
        demos = D.sample_demos(expert, tiny_grid[0], 3, seed=1)
        path = tmp_path / "d.txt"
        D.write_demos(path, demos)
        back = D.read_demos(path)
        assert not back.has_rewards
        assert back.env_hash == demos.env_hash and back.task_id == 2
        for a, b in zip(demos.trajectories, back.trajectories):
            np.testing.assert_array_equal(a.observations, b.observations)
            np.testing.assert_array_equal(a.actions, b.actions)
        sealed = D.read_demos(path, with_rewards=True).sealed_rewards()
        for a, b in zip(demos.sealed_rewards(), sealed):
            np.testing.assert_allclose(a, b, rtol=1e-9)

    def test_no_rewards_in_learner_file(self, tiny_grid, expert, tmp_path):
        demos = D.sample_demos(expert, tiny_grid[0], 3, seed=1)
        path = tmp_path / "d.txt"
        D.write_demos(path, demos)
        text = path.read_text()
        assert "reward" not in text
        assert all(line.split()[0] in ("demos", "traj") or line.startswith("obs=") for line in text.splitlines())
        with pytest.raises(ValueError):
            D.read_demos(path).sealed_rewards()

    @pytest.mark.parametrize(
        "text", ["", "nonsense\n", "demos 1 obs_dim=2 env=x task=0\ntraj 0 1\nobs=1,0 act=0\n", "demos 2 obs_dim=2 env=x task=0\ntraj 0 1\nobs=1,0 action=0\n"]
    )
    def test_malformed(self, tmp_path, text):
        p = tmp_path / "bad.txt"
        p.write_text(text)
        with pytest.raises(D.DemoFormatError):
            D.read_demos(p)

    def test_env_hash_tracks_config(self):
        a = make_env("fruitgrid", 2, grid_size=3, colors=2, fruits_per_color=1)
        b = make_env("fruitgrid", 2, grid_size=4, colors=2, fruits_per_color=1)
        assert D.env_hash(a) == D.env_hash(make_env("fruitgrid", 2, grid_size=3, colors=2, fruits_per_color=1))
        assert D.env_hash(a) != D.env_hash(b)
