import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from basis_irl import demos as D
from basis_irl import evaluation as E
from basis_irl import irl as I
from basis_irl.mdp import Trajectory
from basis_irl.oracle import small_model


def random_trajs(rng, n, obs_dim=7, lengths=(2, 6)):
    out = []
    for _ in range(n):
        L = int(rng.integers(lengths[0], lengths[1] + 1))
        obs = rng.normal(size=(L, obs_dim))
        obs[:, 5:] = 0.0
        out.append(Trajectory(obs, rng.integers(3, size=L)))
    return out


def fast_cfg(**kw):
    return I.IRLConfig(**{"lr": 1e-3, "epochs": 3, "min_steps": 40, "eval_interval": 5, "patience": 3, **kw})


@pytest.fixture(scope="module")
def tiny_expert(tiny_grid):
    env, _, test, mdp = tiny_grid
    return D.make_expert(env, mdp, 2, test)


class TestInit:
    def test_copies_blocks_bit_for_bit(self, rng):
        basis = small_model(rng, num_prefs=2)
        irl = I.init_from_checkpoint(basis)
        for name in basis.params.names():
            if name != "w" and not name.startswith("psi_target/"):
                np.testing.assert_array_equal(irl.params[name], basis.params[name])
        np.testing.assert_array_equal(irl.w_e, basis.w.mean(axis=0))
        assert irl.spec.num_prefs == 1

    def test_target_synced(self, rng):
        irl = I.init_from_checkpoint(small_model(rng))
        np.testing.assert_array_equal(irl.params.data[irl.block("psi/")], irl.params.data[irl.block("psi_target/")])

    def test_random_model(self, rng):
        m = I.random_irl_model(small_model(rng).spec, rng)
        assert m.spec.num_prefs == 1 and not m.w_e.any()


class TestDemoArrays:
    def test_links_and_terminal_last_step(self, rng):
        trajs = random_trajs(rng, 3)
        arr = I.demo_arrays(trajs)
        assert len(arr) == sum(len(t) for t in trajs)
        ends = np.cumsum([len(t) for t in trajs]) - 1
        np.testing.assert_array_equal(np.flatnonzero(arr.dones), ends)
        np.testing.assert_array_equal(arr.next_obs[0], trajs[0].observations[1])
        assert arr.next_actions[0] == trajs[0].actions[1]

    def test_short_trajectory_skipped_with_warning(self, rng):
        trajs = random_trajs(rng, 2, lengths=(3, 3)) + random_trajs(rng, 1, lengths=(1, 1))
        with pytest.warns(UserWarning, match="fewer than 2"):
            arr = I.demo_arrays(trajs)
        assert len(arr.itd_rows) == 6 and len(arr) == 7

    def test_empty(self):
        with pytest.raises(ValueError):
            I.demo_arrays([])

    @given(st.integers(1, 8), st.integers(0, 10_000))
    def test_split_is_partition(self, n, seed):
        trajs = random_trajs(np.random.default_rng(seed), n)
        train, val = I.split_demos(trajs, 0.2, seed)
        assert len(train) + len(val) == n
        assert len(val) == (int(0.2 * n) if 0 < int(0.2 * n) < n else 0)
        ids = {id(t) for t in train} | {id(t) for t in val}
        assert ids == {id(t) for t in trajs}
        again, _ = I.split_demos(trajs, 0.2, seed)
        assert [id(t) for t in again] == [id(t) for t in train]


class TestGroups:
    def test_frozen_phi_and_trunk_stay_put(self, rng):
        model = I.init_from_checkpoint(small_model(rng))
        before = model.params.data.copy()
        I.run_irl(model, random_trajs(rng, 10), fast_cfg(val_fraction=0.0))
        for prefix in ("phi/", "trunk/"):
            sl = model.block(prefix)
            np.testing.assert_array_equal(model.params.data[sl], before[sl])
        assert not np.array_equal(model.params.data[model.block("psi/")], before[model.block("psi/")])
        assert not np.array_equal(model.w_e, before[model.block("w")])

    def test_unfrozen_phi_moves_only_phi_head(self, rng):
        model = I.init_from_checkpoint(small_model(rng))
        before = model.params.data.copy()
        I.run_irl(model, random_trajs(rng, 10), fast_cfg(freeze_phi=False, val_fraction=0.0))
        assert not np.array_equal(model.params.data[model.block("phi/")], before[model.block("phi/")])
        np.testing.assert_array_equal(model.params.data[model.block("trunk/")], before[model.block("trunk/")])

    def test_train_trunk(self, rng):
        model = I.random_irl_model(small_model(rng).spec, rng)
        before = model.params.data.copy()
        I.run_irl(model, random_trajs(rng, 10), fast_cfg(val_fraction=0.0), train_trunk=True)
        sl = model.block("trunk/")
        assert not np.array_equal(model.params.data[sl], before[sl])
        np.testing.assert_array_equal(model.params.data[model.block("phi/")], before[model.block("phi/")])

    def test_bc_only_fixed_preference(self, rng):
        model = I.init_from_checkpoint(small_model(rng))
        w = model.w_e.copy()
        res = I.run_irl(model, random_trajs(rng, 10), fast_cfg(), bc_only=True, train_w=False)
        np.testing.assert_array_equal(model.w_e, w)
        assert all(np.isnan(r["itd_loss"]) for r in res.log)

    def test_needs_single_preference(self, rng):
        with pytest.raises(ValueError):
            I.run_irl(small_model(rng, 2), random_trajs(rng, 3), fast_cfg())


class TestTraining:
    def test_deterministic(self, rng, tmp_path):
        trajs = random_trajs(rng, 12)
        base = small_model(rng)
        a = I.run_irl(I.init_from_checkpoint(base), trajs, fast_cfg(seed=4), log_path=tmp_path / "a.csv")
        b = I.run_irl(I.init_from_checkpoint(base), trajs, fast_cfg(seed=4), log_path=tmp_path / "b.csv")
        np.testing.assert_array_equal(a.model.params.data, b.model.params.data)
        assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()

    def test_restores_best_validation_parameters(self, rng):
        trajs = random_trajs(rng, 20)
        cfg = fast_cfg(min_steps=200, patience=50, seed=2)
        res = I.run_irl(I.init_from_checkpoint(small_model(rng)), trajs, cfg)
        _, held = I.split_demos(trajs, cfg.val_fraction, cfg.seed)
        val = I.demo_arrays(held)
        from basis_irl.model import loss_bc

        final = loss_bc(res.model, val.obs, val.actions, cfg.temperature)[0]
        assert final <= min(r["val_bc_loss"] for r in res.log) + 1e-12
        assert res.best_step is not None and res.best_step % cfg.eval_interval == 0

    def test_no_validation_without_enough_trajectories(self, rng):
        res = I.run_irl(I.init_from_checkpoint(small_model(rng)), random_trajs(rng, 3), fast_cfg())
        assert res.best_step is None
        assert all(np.isnan(r["val_bc_loss"]) for r in res.log)

    def test_min_steps_extends_epochs(self, rng):
        cfg = fast_cfg(epochs=1, min_steps=30, val_fraction=0.0, batch_size=64)
        res = I.run_irl(I.init_from_checkpoint(small_model(rng)), random_trajs(rng, 5), cfg)
        assert len(res.log) == 30  # one batch per epoch

    @pytest.mark.parametrize("field,value", [("epochs", 0), ("val_fraction", 1.0), ("bc_weight", -1.0), ("demo_counts", (0,))])
    def test_config_validation(self, field, value):
        with pytest.raises(ValueError):
            I.IRLConfig(**{field: value}).validate()

    def test_reward_fn(self, rng):
        model = I.init_from_checkpoint(small_model(rng))
        res = I.IRLResult(model)
        obs = rng.normal(size=(4, model.spec.obs_dim))
        acts = np.array([0, 1, 2, 0])
        np.testing.assert_allclose(res.reward_fn()(obs, acts), model.predict_reward(obs, acts, model.w_e))


class TestPolicies:
    def test_q_policy(self):
        q = np.array([[1.0, 3.0, 3.0], [0.0, 0.0, 0.0]])
        np.testing.assert_array_equal(I.q_policy(q, "greedy"), [[0, 1, 0], [1, 0, 0]])
        np.testing.assert_allclose(I.q_policy(q, "softmax", 1.0)[1], 1 / 3)

    def test_extract_policy_validation(self, rng):
        m = small_model(rng)
        with pytest.raises(ValueError):
            I.extract_policy(m, "epsilon")
        with pytest.raises(ValueError):
            I.extract_policy(m, "softmax", 0.0)


class TestOnGrid:
    def test_basis_recovers_reward_better_than_scratch(self, tiny_grid, tiny_basis, tiny_expert):
        env, _, test, mdp = tiny_grid
        demos = D.sample_demos(tiny_expert, env, 100, seed=1)
        ctx = E.GridContext(env, mdp, test, 2, tiny_expert, I.IRLConfig(lr=1e-3, epochs=20, min_steps=500), basis=tiny_basis.model)
        basis = E.run_cell(ctx, "basis", demos, 0)
        scratch = E.run_cell(ctx, "no_pretraining", demos, 0)
        assert basis["value_difference"] < 0.25 * tiny_expert.reference_return
        assert basis["reward_mse"] < 0.5 * scratch["reward_mse"]

    def test_pretraining_from_demonstrations(self, tiny_grid, tiny_basis):
        env, tasks, _, mdp = tiny_grid
        sets = [D.sample_demos(D.make_expert(env, mdp, k, tasks[k]), env, 5, seed=k).trajectories for k in range(2)]
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            model = I.run_irl_pretraining(tiny_basis.model.spec, sets, I.IRLConfig(), steps=20)
        assert model.spec.num_prefs == 2
        with pytest.raises(ValueError):
            I.run_irl_pretraining(tiny_basis.model.spec, sets[:1], I.IRLConfig(), steps=20)
