"""Self-checks against exact answers.

Each check returns a ``CheckResult``; ``run_suite`` runs all of them. The
checks compare learned or iterative quantities with closed forms:

* soft value iteration reaches its fixed point, and its softmax policy
  matches probabilities enumerated by hand on a 3-state chain,
* successor features from the dense, sparse and iterative solvers agree,
* successor features fitted by the consistency loss match the linear solve,
* analytic gradients of every loss match central differences, with
  stop-gradient blocks exactly zero,
* sampled environment transitions match the enumerated tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from basis_irl import mdp as X
from basis_irl import model as M
from basis_irl.envs import FruitGrid, FruitGridState, LaneWorldState, enumerate_tabular, make_env, make_task_suite
from basis_irl.nn import Adam, gradcheck


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tol: float
    detail: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark} {self.name}: {self.value:.3g} (tol {self.tol:g}) {self.detail}".rstrip()


def random_mdp(S: int, A: int, rng: np.random.Generator, K: int = 1, gamma: float = 0.9) -> X.TabularMDP:
    """Dense random MDP with Dirichlet transitions and uniform rewards in [-1, 1]."""
    P = rng.dirichlet(np.ones(S), size=(S, A))
    R = rng.uniform(-1, 1, size=(K, S, A))
    return X.TabularMDP(S, A, P, R, gamma, np.full(S, 1.0 / S))


def chain_mdp(gamma: float = 0.9) -> X.TabularMDP:
    """Three states in a row; action 0 steps left, action 1 steps right.

    Reward 1 for stepping right out of the middle state, 0.5 for staying put
    at the right end.
    """
    P = np.zeros((3, 2, 3))
    for s in range(3):
        P[s, 0, max(s - 1, 0)] = 1.0
        P[s, 1, min(s + 1, 2)] = 1.0
    R = np.zeros((3, 2))
    R[1, 1] = 1.0
    R[2, 1] = 0.5
    return X.TabularMDP(3, 2, P, R, gamma, np.array([1.0, 0.0, 0.0]))


def chain_softmax_by_hand(gamma: float, temperature: float, sweeps: int = 2000) -> np.ndarray:
    """Soft-optimal action probabilities of ``chain_mdp`` by explicit loops."""
    R = {(1, 1): 1.0, (2, 1): 0.5}
    q = [[0.0, 0.0] for _ in range(3)]
    for _ in range(sweeps):
        v = [temperature * np.log(sum(np.exp(x / temperature) for x in q[s])) for s in range(3)]
        q = [[R.get((s, a), 0.0) + gamma * v[max(s - 1, 0) if a == 0 else min(s + 1, 2)] for a in range(2)] for s in range(3)]
    out = np.zeros((3, 2))
    for s in range(3):
        z = [np.exp((x - max(q[s])) / temperature) for x in q[s]]
        out[s] = [x / sum(z) for x in z]
    return out


def check_soft_vi(mdps, temperature: float = 0.05, tol: float = 1e-6) -> CheckResult:
    worst = 0.0
    for m in mdps:
        for k in range(m.num_tasks):
            q = X.soft_value_iteration(m, k, tol=1e-9, temperature=temperature)
            worst = max(worst, X.bellman_residual(m, q, k, temperature))
    return CheckResult("soft value iteration fixed point", worst < tol, worst, tol, f"{len(mdps)} MDPs")


def check_chain_softmax(temperature: float = 0.5, tol: float = 1e-9) -> CheckResult:
    m = chain_mdp()
    q = X.soft_value_iteration(m, 0, tol=1e-13, temperature=temperature)
    err = float(np.abs(X.softmax_policy(q, temperature) - chain_softmax_by_hand(m.gamma, temperature)).max())
    return CheckResult("softmax policy on 3-state chain", err < tol, err, tol)


def check_sf_solvers(seed: int = 0, tol: float = 1e-8) -> CheckResult:
    rng = np.random.default_rng(seed)
    m = random_mdp(12, 3, rng)
    pi = rng.dirichlet(np.ones(3), size=12)
    phi = rng.normal(size=(12, 3, 4))
    dense = X.exact_successor_features(m, pi, phi)
    err = max(
        float(np.abs(X.exact_successor_features(m, pi, phi, method=k) - dense).max()) for k in ("sparse", "iterative")
    )
    return CheckResult("successor-feature solvers agree", err < tol, err, tol)


def tabular_model(S: int, A: int, d: int, rng: np.random.Generator) -> M.BasisModel:
    """Linear heads over one-hot states: every (s, a) entry is a free parameter."""
    spec = M.ModelSpec(feature_dim=S, num_tasks=0, d=d, num_actions=A, num_prefs=1, head_hidden=())
    return M.BasisModel.create(spec, rng)


def fit_tabular_sf(
    mdp: X.TabularMDP,
    policy: np.ndarray,
    phi: np.ndarray,
    lr: float = 1e-2,
    max_steps: int = 50_000,
    target_interval: int = 100,
    tol: float = 1e-4,
    seed: int = 0,
) -> tuple[np.ndarray, int]:
    """Successor features of ``policy`` learned by the consistency loss alone.

    Each step is one full sweep over every (s, a) pair with the bootstrap
    term taken in expectation over ``(s', a')``. Stops when the consistency
    residual against the online head falls below ``tol`` (checked at each
    target sync) or after ``max_steps``. A residual of ``tol`` bounds the
    sup-norm error by ``tol / (1 - gamma)``. Returns ``(psi, steps)``.
    """
    S, A = mdp.num_states, mdp.num_actions
    d = phi.shape[2]
    model = tabular_model(S, A, d, np.random.default_rng(seed))
    model.params["phi/W0"][...] = phi.reshape(S, A * d)
    model.params["phi/b0"][...] = 0.0
    obs = np.repeat(np.eye(S), A, axis=0)
    actions = np.tile(np.arange(A), S)
    batch = M.TransitionBatch(obs, actions, np.zeros(S * A), obs, actions, np.zeros(S * A, int), np.zeros(S * A))
    P_pi = mdp.state_action_transition(policy)
    fixed_phi = np.where(mdp.terminal[:, None, None], 0.0, phi).reshape(S * A, d)
    opt = Adam(model.params.size, lr, [model.block("psi/")])

    def table(head):
        return model._head(head, np.eye(S), None)[0].reshape(S * A, d)

    boot = mdp.gamma * (P_pi @ table("psi_target"))
    steps = 0
    while steps < max_steps:
        _, g = M.loss_itd(model, batch, mdp.gamma, fixed={"target": boot, "phi": fixed_phi})
        opt.step(model.params.data, g.data)
        steps += 1
        if steps % target_interval == 0:
            model.sync_target()
            psi = table("psi")
            boot = mdp.gamma * (P_pi @ psi)
            if np.abs(psi - fixed_phi - boot).max() < tol:
                break
    return table("psi").reshape(S, A, d), steps


def check_sf_equivalence(seed: int = 0, tol: float = 1e-2) -> CheckResult:
    rng = np.random.default_rng(seed)
    m = random_mdp(6, 2, rng)
    pi = rng.dirichlet(np.ones(2), size=6)
    phi = rng.uniform(-1, 1, size=(6, 2, 4))
    psi, steps = fit_tabular_sf(m, pi, phi, seed=seed)
    err = float(np.abs(psi - X.exact_successor_features(m, pi, phi)).max())
    return CheckResult("learned successor features match oracle", err <= tol, err, tol, f"{steps} steps")


def small_model(rng: np.random.Generator, num_prefs: int = 2) -> M.BasisModel:
    spec = M.ModelSpec(
        feature_dim=5,
        num_tasks=2,
        d=3,
        num_actions=3,
        num_prefs=num_prefs,
        trunk_hidden=(6,),
        head_hidden=(5,),
        trunk_activation="tanh",
    )
    model = M.BasisModel.create(spec, rng)
    model.params.data[model.block("w")] = rng.normal(size=model.w.size)
    # distinct target head so stop-gradient mistakes show up
    tgt = model.block("psi_target/")
    model.params.data[tgt] += 0.1 * rng.normal(size=tgt.stop - tgt.start)
    return model


def small_batch(model: M.BasisModel, rng: np.random.Generator, B: int = 7) -> M.TransitionBatch:
    spec = model.spec
    obs = rng.normal(size=(B, spec.obs_dim))
    nxt = rng.normal(size=(B, spec.obs_dim))
    return M.TransitionBatch(
        obs,
        rng.integers(spec.num_actions, size=B),
        rng.normal(size=B),
        nxt,
        rng.integers(spec.num_actions, size=B),
        rng.integers(spec.num_prefs, size=B),
        (rng.random(B) < 0.3).astype(float),
    )


def _zero(g, model, prefixes) -> bool:
    return all(not np.any(g.data[model.block(p)]) for p in prefixes)


def gradient_cases(seed: int = 0):
    """``(name, loss_fn, grads, model, must_be_zero, must_be_nonzero)`` for every loss."""
    rng = np.random.default_rng(seed)
    gamma, tau = 0.9, 0.7
    cases = []

    model = small_model(rng)
    batch = small_batch(model, rng)
    fixed = {"target": M.q_target(model, batch, gamma, tau)}
    _, g = M.loss_q(model, batch, gamma, tau)
    cases.append(("loss_q", lambda m=model, b=batch, f=fixed: M.loss_q(m, b, gamma, tau, fixed=f)[0], g, model, ["phi/", "psi_target/"], []))

    model = small_model(rng)
    batch = small_batch(model, rng)
    _, g = M.loss_reward(model, batch)
    cases.append(("loss_reward", lambda m=model, b=batch: M.loss_reward(m, b)[0], g, model, ["psi/", "psi_target/"], []))

    model = small_model(rng)
    batch = small_batch(model, rng)
    fixed = M.itd_fixed(model, batch, gamma)
    _, g = M.loss_itd(model, batch, gamma)
    cases.append(("loss_itd", lambda m=model, b=batch, f=fixed: M.loss_itd(m, b, gamma, fixed=f)[0], g, model, ["phi/", "psi_target/", "w"], []))

    model = small_model(rng, num_prefs=1)
    batch = small_batch(model, rng)
    obs = batch.obs.copy()
    obs[:, model.spec.feature_dim :] = 0.0
    _, g = M.loss_bc(model, obs, batch.actions, tau)
    cases.append(("loss_bc", lambda m=model, o=obs, a=batch.actions: M.loss_bc(m, o, a, tau)[0], g, model, ["phi/", "psi_target/"], []))

    for freeze in (True, False):
        model = small_model(rng, num_prefs=1)
        batch = small_batch(model, rng)
        fixed = M.itd_fixed(model, batch, gamma)
        if not freeze:
            fixed = {"target": fixed["target"]}
        _, g = M.loss_itd_e(model, batch, gamma, freeze_phi=freeze)
        zero = ["psi_target/", "w"] + (["phi/"] if freeze else [])
        name = "loss_itd_e" + ("" if freeze else " (phi trained)")

        def fn(m=model, b=batch, f=fixed, fr=freeze):
            return M.loss_itd_e(m, b, gamma, freeze_phi=fr, fixed=f)[0]

        cases.append((name, fn, g, model, zero, [] if freeze else ["phi/"]))
    return cases


def check_gradients(seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    out = []
    for name, fn, g, model, zero, nonzero in gradient_cases(seed):
        live = np.flatnonzero(g.data)
        err = gradcheck(fn, model.params, g.data, coords=np.arange(model.params.size), h=1e-6, floor=1e-6)
        blocks = _zero(g, model, zero) and all(np.any(g.data[model.block(p)]) for p in nonzero)
        detail = f"{len(live)} live coords" + ("" if blocks else "; stop-gradient block violated")
        out.append(CheckResult(f"gradient {name}", err < tol and blocks, err, tol, detail))
    return out


def _state(env, key):
    if isinstance(env, FruitGrid):
        return FruitGridState(key[0], key[1], 0)
    return LaneWorldState(*key, 0)


def check_enumeration(env, mdp: X.TabularMDP, pairs: int = 12, samples: int = 2000, seed: int = 0, z: float = 5.0):
    """Sampled next states of ``pairs`` random (s, a) against the table rows.

    Passes when every empirical frequency lies within ``z`` standard errors
    (plus 1e-3) of its tabulated probability.
    """
    rng = np.random.default_rng(seed)
    A = mdp.num_actions
    worst = 0.0
    cands = np.flatnonzero(~mdp.terminal)
    for s in rng.choice(cands, size=min(pairs, len(cands)), replace=False):
        a = int(rng.integers(A))
        row = mdp.transition.getrow(int(s) * A + a)
        p = dict(zip(row.indices.tolist(), row.data.tolist()))
        counts: dict[int, int] = {}
        state = _state(env, env.index.key(int(s)))
        for _ in range(samples):
            nxt = env.step(state, a, None, rng)[0]
            j = env.index(nxt.key)
            counts[j] = counts.get(j, 0) + 1
        for j in set(p) | set(counts):
            q = p.get(j, 0.0)
            se = np.sqrt(max(q * (1 - q), 1e-12) / samples)
            worst = max(worst, abs(counts.get(j, 0) / samples - q) / (z * se + 1e-3))
    return CheckResult(f"enumerated transitions of {type(env).__name__}", worst <= 1.0, worst, 1.0, "ratio to bound")


def desk_mdps(gamma: float = 0.9):
    """Small seeded MDPs for the fixed-point checks: random tables, a 3x3
    FruitGrid and the default LaneWorld."""
    rng = np.random.default_rng(0)
    mdps = [random_mdp(8, 3, rng, K=2, gamma=gamma) for _ in range(3)]
    envs = []
    fg = make_env("fruitgrid", 2, grid_size=3, colors=2, fruits_per_color=1, horizon=20)
    tasks, test = make_task_suite(fg, 2)
    mdps.append(enumerate_tabular(fg, tasks + [test], gamma))
    envs.append((fg, mdps[-1]))
    lw = make_env("laneworld", 3)
    tasks, test = make_task_suite(lw, 3)
    mdps.append(enumerate_tabular(lw, tasks + [test], gamma))
    envs.append((lw, mdps[-1]))
    return mdps, envs


def run_suite(seed: int = 0, temperature: float = 0.05) -> list[CheckResult]:
    mdps, envs = desk_mdps()
    results = [check_soft_vi(mdps, temperature), check_chain_softmax(), check_sf_solvers(seed), check_sf_equivalence(seed)]
    results += check_gradients(seed)
    results += [check_enumeration(env, m, seed=seed) for env, m in envs]
    return results
