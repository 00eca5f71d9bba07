import csv

import numpy as np
import pytest
from conftest import tiny_pretrain_config

from basis_irl import evaluation as E
from basis_irl import mdp as X
from basis_irl.pretrain import PretrainConfig, ReplayBuffer, boltzmann, collect_episode, holdout_reward_loss, run_pretraining


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(3, 2)
        for i in range(5):
            buf.push(np.full(2, i), i % 2, float(i), np.zeros(2), 0, 0, False)
        assert len(buf) == 3 and buf.pushed == 5
        np.testing.assert_array_equal(buf.rewards[buf.oldest_first()], [2, 3, 4])

    def test_sampling_without_replacement(self, rng):
        buf = ReplayBuffer(10, 1)
        for i in range(4):
            buf.push(np.zeros(1), 0, float(i), np.zeros(1), 0, 0, False)
        batch = buf.sample(8, rng)
        assert sorted(batch.rewards.tolist()) == [0, 1, 2, 3]

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            ReplayBuffer(0, 2)
        buf = ReplayBuffer(2, 2)
        with pytest.raises(ValueError):
            buf.sample(1, rng)
        with pytest.raises(ValueError):
            buf.push(np.zeros(3), 0, 0.0, np.zeros(2), 0, 0, False)


class TestConfig:
    @pytest.mark.parametrize("field,value", [("K", 0), ("gamma", 1.0), ("lr", 0.0), ("holdout_fraction", 1.0)])
    def test_rejects(self, field, value):
        with pytest.raises(ValueError):
            PretrainConfig(**{field: value}).validate()

    def test_task_count_must_match(self, tiny_grid):
        env, tasks, _, _ = tiny_grid
        with pytest.raises(ValueError):
            run_pretraining(tiny_pretrain_config(K=3, total_iterations=1), env, tasks)


class TestEpisodes:
    def test_boltzmann(self):
        p = boltzmann(np.array([0.0, 1.0]), 1.0)
        np.testing.assert_allclose(p, [1 / (1 + np.e), np.e / (1 + np.e)])

    def test_next_actions_chain(self, tiny_grid, rng):
        env, tasks, _, _ = tiny_grid
        out, total = collect_episode(env, tasks[0], lambda o: np.full(4, 0.25), env.horizon, rng)
        assert len(out) == env.horizon
        for (o1, a1, r, n1, na, done), (o2, a2, *_) in zip(out, out[1:]):
            np.testing.assert_array_equal(n1, o2)
            assert na == a2 and done == 0.0
        assert total == pytest.approx(sum(t[2] for t in out))


class TestRun:
    def test_learns_each_task(self, tiny_basis, tiny_grid):
        env, tasks, _, mdp = tiny_grid
        for k, task in enumerate(tasks):
            pol = E.policy_table(tiny_basis.model, env, mdp, "greedy", pref=k, task_id=k)
            got = X.finite_horizon_return(mdp, pol, k, env.horizon)
            best = X.finite_horizon_return(mdp, X.greedy_policy(X.soft_value_iteration(mdp, k, temperature=0.05)), k, env.horizon)
            assert got >= 0.8 * best, (k, got, best)

    def test_cumulants_span_rewards(self, tiny_basis):
        assert holdout_reward_loss(tiny_basis.model, tiny_basis.holdout) < 1e-2

    def test_log_rows(self, tiny_basis):
        assert len(tiny_basis.log) == 300
        assert set(r["task"] for r in tiny_basis.log) == {0, 1}

    def test_same_seed_is_bit_identical(self, tiny_grid, tmp_path):
        env, tasks, _, _ = tiny_grid
        cfg = tiny_pretrain_config(total_iterations=12)
        a = run_pretraining(cfg, env, tasks, log_path=tmp_path / "a.csv")
        b = run_pretraining(cfg, env, tasks, log_path=tmp_path / "b.csv")
        np.testing.assert_array_equal(a.model.params.data, b.model.params.data)
        assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
        with open(tmp_path / "a.csv") as fh:
            head = next(csv.reader(fh))
        assert head == ["iteration", "task", "return", "loss_q", "loss_reward", "loss_itd"]
        c = run_pretraining(tiny_pretrain_config(total_iterations=12, seed=1), env, tasks)
        assert not np.array_equal(a.model.params.data, c.model.params.data)

    def test_q_only_has_single_feature(self, tiny_grid):
        env, tasks, _, _ = tiny_grid
        res = run_pretraining(tiny_pretrain_config(total_iterations=10), env, tasks, q_only=True)
        m = res.model
        assert m.spec.d == 1
        np.testing.assert_array_equal(m.w, 1.0)
        assert np.isnan(res.log[-1]["loss_reward"])

    def test_target_sync(self, tiny_grid):
        env, tasks, _, _ = tiny_grid
        # the target head matches the online head exactly at sync points only
        seen = []

        def progress(it, row, model):
            same = np.array_equal(model.params.data[model.block("psi/")], model.params.data[model.block("psi_target/")])
            seen.append(same)

        run_pretraining(tiny_pretrain_config(total_iterations=30, target_update_interval=20), env, tasks, progress=progress)
        assert any(seen) and not all(seen)
