"""Exact finite-MDP machinery: soft value iteration, successor features, rollouts.

Everything here is the brute-force reference layer. Learned quantities elsewhere
in the package are checked against these solvers.

Array conventions
-----------------
* Q tables are ``(S, A)`` arrays.
* Policy tables are ``(S, A)`` arrays whose rows sum to one.
* Successor-feature tables are ``(S, A, d)`` arrays.
* Transitions are stored sparse as an ``(S*A, S)`` CSR matrix, row ``s*A + a``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import logsumexp


class MDPValidationError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


@dataclass
class TabularMDP:
    """Finite MDP with one reward table per task.

    ``reward`` has shape ``(K, S, A)`` and holds expected one-step rewards.
    ``terminal`` is a boolean mask; terminal states must self-loop with zero
    reward. ``state_index`` is optional bookkeeping attached by environment
    enumeration (maps environment states to row indices).
    """

    num_states: int
    num_actions: int
    transition: sp.csr_matrix
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    terminal: np.ndarray = None
    state_index: Any = field(default=None, repr=False)

    def __post_init__(self):
        S, A = self.num_states, self.num_actions
        P = self.transition
        if not sp.issparse(P):
            P = np.asarray(P, dtype=float)
            if P.shape != (S, A, S):
                raise MDPValidationError(f"dense transition must be (S, A, S), got {P.shape}")
            P = P.reshape(S * A, S)
        self.transition = sp.csr_matrix(P, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        if self.reward.ndim == 2:
            self.reward = self.reward[None]
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        if self.terminal is None:
            self.terminal = np.zeros(S, dtype=bool)
        else:
            self.terminal = np.asarray(self.terminal, dtype=bool)
        self.validate()

    @property
    def num_tasks(self) -> int:
        return self.reward.shape[0]

    def validate(self) -> None:
        S, A = self.num_states, self.num_actions
        P = self.transition
        if P.shape != (S * A, S):
            raise MDPValidationError(f"transition shape {P.shape} != {(S * A, S)}")
        if P.nnz and P.data.min() < 0:
            raise MDPValidationError("negative transition probability")
        rows = np.asarray(P.sum(axis=1)).ravel()
        if np.abs(rows - 1.0).max(initial=0.0) > 1e-9:
            raise MDPValidationError("transition rows must sum to 1")
        if self.reward.shape[1:] != (S, A):
            raise MDPValidationError(f"reward shape {self.reward.shape} != (K, {S}, {A})")
        if not np.all(np.isfinite(self.reward)):
            raise MDPValidationError("non-finite reward")
        if not 0.0 <= self.gamma < 1.0:
            raise MDPValidationError(f"gamma must lie in [0, 1), got {self.gamma}")
        d0 = self.initial_dist
        if d0.shape != (S,) or d0.min() < 0 or abs(d0.sum() - 1.0) > 1e-9:
            raise MDPValidationError("initial_dist must be a probability vector over states")
        if self.terminal.shape != (S,):
            raise MDPValidationError("terminal mask has wrong shape")
        for s in np.flatnonzero(self.terminal):
            for a in range(A):
                row = P.getrow(s * A + a)
                if row.nnz != 1 or row.indices[0] != s:
                    raise MDPValidationError(f"terminal state {s} must self-loop")
            if np.any(self.reward[:, s, :] != 0):
                raise MDPValidationError(f"terminal state {s} must have zero reward")

    def dense_transition(self) -> np.ndarray:
        """``(S, A, S)`` dense copy; only sensible for small MDPs."""
        return self.transition.toarray().reshape(self.num_states, self.num_actions, self.num_states)

    def expected_next(self, values: np.ndarray) -> np.ndarray:
        """E[values(s') | s, a] as an ``(S, A, ...)`` array."""
        flat = values.reshape(self.num_states, -1)
        out = self.transition @ flat
        return np.asarray(out).reshape((self.num_states, self.num_actions) + values.shape[1:])

    def state_action_transition(self, policy: np.ndarray) -> sp.csr_matrix:
        """P_pi over state-action pairs: (s,a) -> (s',a') with P(s'|s,a) pi(a'|s').

        Rows for terminal states are zero, so successor quantities vanish there.
        """
        S, A = self.num_states, self.num_actions
        pi = np.where(self.terminal[:, None], 0.0, policy)
        rows = np.repeat(np.arange(S), A)
        cols = np.arange(S * A)
        spread = sp.csr_matrix((pi.ravel(), (rows, cols)), shape=(S, S * A))
        P = self.transition.multiply(~np.repeat(self.terminal, A)[:, None]).tocsr()
        return (P @ spread).tocsr()


def _check_task(mdp: TabularMDP, task: int) -> None:
    if not 0 <= task < mdp.num_tasks:
        raise IndexError(f"task {task} out of range for {mdp.num_tasks} tasks")


def soft_backup(mdp: TabularMDP, q: np.ndarray, reward: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """One application of Q <- r + gamma * P * tau*logsumexp(Q/tau)."""
    v = temperature * logsumexp(q / temperature, axis=1)
    v[mdp.terminal] = 0.0
    out = reward + mdp.gamma * mdp.expected_next(v)
    out[mdp.terminal] = 0.0
    return out


def soft_value_iteration(
    mdp: TabularMDP,
    task: int = 0,
    tol: float = 1e-8,
    max_iters: int = 100_000,
    temperature: float = 1.0,
    residuals: list | None = None,
) -> np.ndarray:
    """Fixed point of the log-sum-exp Bellman backup for one task.

    Returns the ``(S, A)`` soft Q table. The loop stops once the sup-norm
    residual ``|T(Q) - Q|`` falls to ``tol``; the returned table is the last
    iterate that met that bound. If ``residuals`` is given, per-sweep residuals
    are appended to it.
    """
    _check_task(mdp, task)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    reward = mdp.reward[task]
    q = np.zeros((mdp.num_states, mdp.num_actions))
    residual = np.inf
    for _ in range(max_iters):
        nxt = soft_backup(mdp, q, reward, temperature)
        residual = float(np.abs(nxt - q).max())
        if residuals is not None:
            residuals.append(residual)
        q = nxt
        # q is T(previous); its own residual is at most gamma * residual
        if mdp.gamma * residual <= tol:
            return q
    raise ConvergenceError("soft value iteration did not converge", residual)


def bellman_residual(mdp: TabularMDP, q: np.ndarray, task: int = 0, temperature: float = 1.0) -> float:
    return float(np.abs(soft_backup(mdp, q, mdp.reward[task], temperature) - q).max())


def softmax_policy(q: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise Boltzmann distribution exp(Q/tau) / sum exp(Q/tau)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValueError("Q table contains non-finite entries")
    z = q / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Deterministic argmax policy; ties go to the lowest action index."""
    q = np.asarray(q)
    out = np.zeros_like(q, dtype=float)
    out[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return out


def exact_successor_features(
    mdp: TabularMDP,
    policy: np.ndarray,
    phi: np.ndarray,
    gamma: float | None = None,
    method: str = "dense",
) -> np.ndarray:
    """Solve (I - gamma P_pi) psi = phi for every cumulant dimension.

    ``phi`` is ``(S, A, d)`` (or ``(S, A)`` for d=1). Terminal rows of phi are
    zeroed, so psi is zero on terminal states. ``method`` is ``dense`` (direct
    solve, the oracle), ``sparse`` (sparse LU, large MDPs) or ``iterative``
    (fixed-point sweeps to 1e-12, the cross-check).
    """
    gamma = mdp.gamma if gamma is None else gamma
    S, A = mdp.num_states, mdp.num_actions
    phi = np.asarray(phi, dtype=float)
    squeeze = phi.ndim == 2
    if squeeze:
        phi = phi[..., None]
    if phi.shape[:2] != (S, A) or phi.shape[2] < 1:
        raise ValueError(f"phi must be (S, A, d), got {phi.shape}")
    _check_policy(policy, S, A)
    d = phi.shape[2]
    rhs = np.where(mdp.terminal[:, None, None], 0.0, phi).reshape(S * A, d)
    P_pi = mdp.state_action_transition(policy)
    if method == "dense":
        M = np.eye(S * A) - gamma * P_pi.toarray()
        try:
            psi = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError as exc:
            raise FloatingPointError("singular successor-feature system") from exc
    elif method == "sparse":
        M = (sp.identity(S * A, format="csc") - gamma * P_pi).tocsc()
        lu = spla.splu(M)
        psi = lu.solve(rhs)
    elif method == "iterative":
        psi = rhs.copy()
        for _ in range(1_000_000):
            nxt = rhs + gamma * (P_pi @ psi)
            if np.abs(nxt - psi).max() <= 1e-12:
                psi = nxt
                break
            psi = nxt
        else:
            raise ConvergenceError("successor-feature sweeps did not converge", float(np.abs(nxt - psi).max()))
    else:
        raise ValueError(f"unknown method {method!r}")
    if not np.all(np.isfinite(psi)):
        raise FloatingPointError("successor-feature solve produced non-finite values")
    psi = psi.reshape(S, A, d)
    return psi[..., 0] if squeeze else psi


def _check_policy(policy: np.ndarray, S: int, A: int) -> None:
    policy = np.asarray(policy)
    if policy.shape != (S, A):
        raise ValueError(f"policy must be ({S}, {A}), got {policy.shape}")
    if policy.min() < 0 or np.abs(policy.sum(axis=1) - 1).max() > 1e-9:
        raise ValueError("policy rows must be probability vectors")


def policy_evaluation(mdp: TabularMDP, policy: np.ndarray, reward: np.ndarray | int = 0) -> np.ndarray:
    """Exact discounted Q^pi for a reward table (or task index)."""
    if isinstance(reward, (int, np.integer)):
        _check_task(mdp, reward)
        reward = mdp.reward[reward]
    if mdp.num_states * mdp.num_actions <= 4000:
        return exact_successor_features(mdp, policy, reward, method="dense")
    return exact_successor_features(mdp, policy, reward, method="sparse")


def state_distributions(mdp: TabularMDP, policy: np.ndarray, horizon: int, start: np.ndarray | None = None):
    """Yield the state-occupancy vector d_t for t = 0 .. horizon-1.

    Probability mass that reaches a terminal state stops contributing
    (episodes end there), matching rollouts that terminate early.
    """
    _check_policy(policy, mdp.num_states, mdp.num_actions)
    S, A = mdp.num_states, mdp.num_actions
    d = mdp.initial_dist.copy() if start is None else np.asarray(start, dtype=float)
    PT = mdp.transition.T.tocsr()
    for _ in range(horizon):
        yield d
        sa = (d[:, None] * policy).ravel()
        d = PT @ sa
        d[mdp.terminal] = 0.0


def finite_horizon_return(
    mdp: TabularMDP,
    policy: np.ndarray,
    reward: np.ndarray | int = 0,
    horizon: int = 1,
    discounted: bool = False,
) -> float:
    """Exact expected return of ``horizon``-step episodes from the initial distribution."""
    if isinstance(reward, (int, np.integer)):
        _check_task(mdp, reward)
        reward = mdp.reward[reward]
    r_pi = (policy * reward).sum(axis=1)
    total = 0.0
    for t, d in enumerate(state_distributions(mdp, policy, horizon)):
        total += (mdp.gamma ** t if discounted else 1.0) * float(d @ r_pi)
    return total


def discounted_value(mdp: TabularMDP, policy: np.ndarray, reward: np.ndarray | int = 0) -> float:
    """Exact infinite-horizon discounted return E_{s0}[V^pi(s0)]."""
    q = policy_evaluation(mdp, policy, reward)
    v = (policy * q).sum(axis=1)
    return float(mdp.initial_dist @ v)


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


class Policy(Protocol):
    """Anything that maps (observations, state ids) to action probabilities."""

    def action_probs(self, obs: np.ndarray, state_ids: np.ndarray | None) -> np.ndarray: ...


class Environment(Protocol):
    num_actions: int
    horizon: int

    def reset(self, task, rng: np.random.Generator): ...

    def step(self, state, action: int, task, rng: np.random.Generator): ...

    def state_id(self, state) -> int | None: ...

    def is_terminal(self, state) -> bool: ...


@dataclass
class TablePolicy:
    """Policy given as an explicit ``(S, A)`` table, looked up by state id."""

    probs: np.ndarray

    def action_probs(self, obs, state_ids):
        if state_ids is None:
            raise ValueError("TablePolicy needs tabular state ids")
        return self.probs[np.asarray(state_ids)]


@dataclass
class FunctionPolicy:
    fn: Callable[[np.ndarray], np.ndarray]

    def action_probs(self, obs, state_ids):
        return self.fn(np.atleast_2d(obs))


@dataclass
class Trajectory:
    """Ordered (observation, action) steps with an optional eval-only reward channel."""

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray | None = None
    states: list | None = None
    terminated: bool = False

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=float)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if len(self.observations) != len(self.actions):
            raise ValueError("observations and actions differ in length")
        if self.rewards is not None:
            self.rewards = np.asarray(self.rewards, dtype=float)
            if len(self.rewards) != len(self.actions):
                raise ValueError("reward list must match step count")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum()) if self.rewards is not None else float("nan")

    def discounted_return(self, gamma: float) -> float:
        return float(np.sum(self.rewards * gamma ** np.arange(len(self.rewards))))


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    # inverse-CDF draw: one uniform per step keeps streams aligned across policies
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(probs) - 1))


def rollout(env: Environment, policy: Policy, horizon: int, rng, task=None) -> Trajectory:
    """Run one episode of at most ``horizon`` steps.

    ``rng`` is a seed or a Generator. Episodes stop early on terminal states.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(rng)
    state, obs = env.reset(task, rng)
    observations, actions, rewards, states = [], [], [], []
    done = False
    for _ in range(horizon):
        sid = env.state_id(state)
        probs = policy.action_probs(obs[None], None if sid is None else np.array([sid]))[0]
        a = sample_action(probs, rng)
        observations.append(obs)
        actions.append(a)
        states.append(state)
        state, obs, r, done = env.step(state, a, task, rng)
        rewards.append(r)
        if done:
            break
    terminated = bool(done and env.is_terminal(state))
    return Trajectory(np.array(observations), np.array(actions), np.array(rewards), states, terminated)


class MDPEnv:
    """Adapter exposing a TabularMDP through the environment interface.

    States are integer ids; observations are one-hot state vectors.
    """

    def __init__(self, mdp: TabularMDP, horizon: int = 10**9):
        self.mdp = mdp
        self.num_actions = mdp.num_actions
        self.horizon = horizon
        self._rows = mdp.transition

    def reset(self, task, rng):
        s = sample_action(self.mdp.initial_dist, rng)
        return s, self.observe(s)

    def observe(self, s: int) -> np.ndarray:
        o = np.zeros(self.mdp.num_states)
        o[s] = 1.0
        return o

    def step(self, state, action, task, rng):
        if not 0 <= action < self.num_actions:
            raise ValueError(f"invalid action {action}")
        task = 0 if task is None else task
        row = self._rows.getrow(state * self.num_actions + action)
        nxt = int(row.indices[sample_action(row.data, rng)])
        r = float(self.mdp.reward[task, state, action])
        return nxt, self.observe(nxt), r, bool(self.mdp.terminal[nxt])

    def state_id(self, state) -> int:
        return int(state)

    def is_terminal(self, state) -> bool:
        return bool(self.mdp.terminal[state])


def expected_return(
    policy: Policy,
    env,
    task=0,
    episodes: int = 200,
    seed: int = 0,
    exact: bool = False,
    horizon: int | None = None,
    discounted: bool | None = None,
) -> tuple[float, float]:
    """Mean return and its standard error.

    With a TabularMDP: discounted returns, ``exact=True`` uses linear policy
    evaluation (standard error 0). With an environment: undiscounted returns of
    ``horizon``-step episodes estimated by Monte Carlo.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if isinstance(env, TabularMDP):
        mdp = env
        if exact:
            table = _table_for(policy, mdp)
            if horizon is None:
                return discounted_value(mdp, table, task), 0.0
            return finite_horizon_return(mdp, table, task, horizon, discounted=bool(discounted)), 0.0
        env = MDPEnv(mdp)
        discounted = True if discounted is None else discounted
        horizon = horizon or _effective_horizon(mdp.gamma)
        gamma = mdp.gamma
    else:
        discounted = False if discounted is None else discounted
        horizon = horizon or env.horizon
        gamma = getattr(env, "gamma", 1.0)
    seeds = np.random.SeedSequence(seed).spawn(episodes)
    returns = np.empty(episodes)
    for i, ss in enumerate(seeds):
        traj = rollout(env, policy, horizon, np.random.default_rng(ss), task)
        returns[i] = traj.discounted_return(gamma) if discounted else traj.episode_return
    sem = returns.std(ddof=1) / np.sqrt(episodes) if episodes > 1 else 0.0
    return float(returns.mean()), float(sem)


def _effective_horizon(gamma: float, eps: float = 1e-10) -> int:
    return 1 if gamma == 0 else int(np.ceil(np.log(eps) / np.log(gamma))) + 1


def _table_for(policy, mdp: TabularMDP) -> np.ndarray:
    if isinstance(policy, np.ndarray):
        return policy
    if isinstance(policy, TablePolicy):
        return policy.probs
    ids = np.arange(mdp.num_states)
    return policy.action_probs(np.eye(mdp.num_states), ids)
