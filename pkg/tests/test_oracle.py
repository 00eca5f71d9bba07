import copy

import numpy as np
import scipy.sparse as sp

from basis_irl import mdp as X
from basis_irl import oracle as O


class TestChecks:
    def test_chain_softmax(self):
        r = O.check_chain_softmax()
        assert r.passed, r.line()

    def test_sf_solvers(self):
        assert O.check_sf_solvers().passed

    def test_gradients(self):
        for r in O.check_gradients():
            assert r.passed, r.line()

    def test_soft_vi_on_random_mdps(self):
        rng = np.random.default_rng(0)
        r = O.check_soft_vi([O.random_mdp(6, 2, rng, K=2) for _ in range(2)])
        assert r.passed, r.line()

    def test_enumeration(self, tiny_grid, tiny_lanes):
        for env, _, _, mdp in (tiny_grid, tiny_lanes):
            r = O.check_enumeration(env, mdp, pairs=5, samples=800)
            assert r.passed, r.line()

    def test_enumeration_detects_wrong_table(self, tiny_grid):
        env, _, _, mdp = tiny_grid
        S = mdp.num_states
        # shift every successor to the next state index
        shifted = copy.copy(mdp)
        P = mdp.transition.tocoo()
        shifted.transition = sp.csr_matrix((P.data, (P.row, (P.col + 1) % S)), shape=P.shape)
        assert not O.check_enumeration(env, shifted, pairs=5, samples=400).passed

    def test_result_line(self):
        r = O.CheckResult("x", False, 0.5, 0.1, "why")
        assert r.line() == "FAIL x: 0.5 (tol 0.1) why"


class TestTabularFit:
    def test_fit_matches_linear_solve(self):
        rng = np.random.default_rng(1)
        m = O.random_mdp(4, 2, rng)
        pi = rng.dirichlet(np.ones(2), size=4)
        phi = rng.uniform(-1, 1, size=(4, 2, 2))
        psi, steps = O.fit_tabular_sf(m, pi, phi, seed=1)
        assert steps < 50_000
        np.testing.assert_allclose(psi, X.exact_successor_features(m, pi, phi), atol=1e-2)

    def test_chain_by_hand_is_a_distribution(self):
        p = O.chain_softmax_by_hand(0.9, 0.3)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
