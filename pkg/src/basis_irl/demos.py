"""Demonstrator construction and reward-free demonstration sets.

Demo file format (plain text)::

    demos <N> obs_dim=<D> env=<hash> task=<id>
    traj <id> <length>
    obs=<comma-separated reals> action=<int>
    ...

Rewards never appear in that file. They go to a sibling ``<path>.rewards``
file (one ``traj`` header then one reward per line) that only evaluation
code reads. All reals are written with 9 significant digits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from basis_irl import mdp as X
from basis_irl.envs import TaskSpec
from basis_irl.irl import q_policy
from basis_irl.mdp import FunctionPolicy, TablePolicy, Trajectory, rollout
from basis_irl.pretrain import PretrainConfig, run_pretraining


class DemoFormatError(ValueError):
    pass


def env_hash(env) -> str:
    """Short stable digest of an environment's configuration."""
    cfg = env.config
    payload = json.dumps({"kind": type(env).__name__, **cfg.__dict__, "num_tasks": env.num_tasks}, sort_keys=True)
    return hashlib.blake2b(payload.encode(), digest_size=8).hexdigest()


@dataclass
class Expert:
    """A demonstrator policy with its reference return on the test task."""

    policy: object
    reference_return: float
    mode: str
    task: TaskSpec
    table: np.ndarray | None = None  # (S, A) action probabilities when tabular


def make_expert(
    env,
    mdp: X.TabularMDP,
    task_index: int,
    task: TaskSpec,
    mode: str = "exact",
    temperature: float = 0.05,
    greedy: bool = False,
    tol: float = 1e-6,
    learned=None,
) -> Expert:
    """Soft-optimal expert for reward table ``task_index`` of ``mdp``.

    ``exact`` runs soft value iteration; ``learned`` wraps an already trained
    single-task policy passed as ``learned`` (a Policy over observations).
    The reference return is the exact finite-horizon return over
    ``env.horizon`` steps from the initial distribution.
    """
    if mode == "exact":
        q = X.soft_value_iteration(mdp, task_index, tol=tol, temperature=temperature)
        table = X.greedy_policy(q) if greedy else X.softmax_policy(q, temperature)
        policy = TablePolicy(table)
    elif mode == "learned":
        if learned is None:
            raise ValueError("learned mode needs a trained policy")
        policy = learned
        table = X._table_for(learned, mdp) if isinstance(learned, TablePolicy) else _model_table(learned, env, mdp)
    else:
        raise ValueError("mode must be 'exact' or 'learned'")
    ref = X.finite_horizon_return(mdp, table, task_index, env.horizon)
    return Expert(policy, ref, mode, task, table)


def train_learned_expert(env_factory, task: TaskSpec, cfg, greedy: bool = False, temperature: float = 0.05):
    """Single-task soft Q-learning on ``task``; returns an observation policy.

    ``env_factory(num_tasks)`` builds the environment. Training runs on a
    one-task copy, so the learned network sees a constant code of ``[1]``;
    the returned policy drops whatever task code it is given and supplies
    that constant instead, which makes it usable on any task count.
    """
    single = env_factory(1)
    solo = TaskSpec(0, task.reward_weights, task.description)
    pcfg = PretrainConfig(**{**cfg.to_dict(), "K": 1})
    model = run_pretraining(pcfg, single, [solo], q_only=True).model
    fdim = single.feature_dim
    w = model.w[0].copy()

    def probs(obs):
        obs = np.atleast_2d(obs)
        x = np.hstack([obs[:, :fdim], np.ones((len(obs), 1))])
        return q_policy(model.q_values(x, w), "greedy" if greedy else "softmax", temperature)

    return FunctionPolicy(probs)


def _model_table(policy, env, mdp, chunk: int = 20_000) -> np.ndarray:
    """Action probabilities of an observation-level policy at every enumerated state."""
    S = mdp.num_states
    out = np.empty((S, mdp.num_actions))
    code = np.zeros(env.obs_dim - env.feature_dim)
    for lo in range(0, S, chunk):
        ids = np.arange(lo, min(S, lo + chunk))
        obs = np.hstack([env.index.features(ids), np.broadcast_to(code, (len(ids), len(code)))])
        out[ids] = policy.action_probs(obs, ids)
    return out


@dataclass
class DemoSet:
    """Learner-facing trajectories plus a sealed reward channel.

    ``trajectories`` carry observations (task code zeroed) and actions only.
    ``sealed_rewards()`` is for evaluation code.
    """

    trajectories: list[Trajectory]
    env_hash: str
    task_id: int
    _rewards: list[np.ndarray] | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def has_rewards(self) -> bool:
        return self._rewards is not None

    def sealed_rewards(self) -> list[np.ndarray]:
        if self._rewards is None:
            raise ValueError("this demonstration set has no reward channel")
        return self._rewards

    def subset(self, n: int) -> "DemoSet":
        """The first ``n`` trajectories (nested prefixes give matched learning curves)."""
        if not 1 <= n <= len(self):
            raise ValueError(f"cannot take {n} of {len(self)} trajectories")
        rewards = None if self._rewards is None else self._rewards[:n]
        return DemoSet(self.trajectories[:n], self.env_hash, self.task_id, rewards)

    def steps(self):
        """Stacked ``(obs, actions)`` over all trajectories."""
        obs = np.concatenate([t.observations for t in self.trajectories])
        acts = np.concatenate([t.actions for t in self.trajectories])
        return obs, acts


def sample_demos(expert: Expert, env, N: int, horizon: int | None = None, seed: int = 0) -> DemoSet:
    """``N`` expert trajectories, one independent RNG stream per trajectory."""
    if N < 1:
        raise ValueError("N must be >= 1")
    horizon = env.horizon if horizon is None else horizon
    trajs, rewards = [], []
    for ss in np.random.SeedSequence(seed).spawn(N):
        tr = rollout(env, expert.policy, horizon, np.random.default_rng(ss), expert.task)
        obs = tr.observations.copy()
        obs[:, env.feature_dim :] = 0.0
        trajs.append(Trajectory(obs, tr.actions))
        rewards.append(tr.rewards)
    return DemoSet(trajs, env_hash(env), expert.task.id, rewards)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_demos(path: str | Path, demos: DemoSet) -> None:
    path = Path(path)
    obs_dim = demos.trajectories[0].observations.shape[1]
    lines = [f"demos {len(demos)} obs_dim={obs_dim} env={demos.env_hash} task={demos.task_id}"]
    for i, tr in enumerate(demos.trajectories):
        lines.append(f"traj {i} {len(tr)}")
        for o, a in zip(tr.observations, tr.actions):
            lines.append("obs=" + ",".join(_fmt(v) for v in o) + f" action={int(a)}")
    path.write_text("\n".join(lines) + "\n")
    if demos.has_rewards:
        rl = [f"rewards {len(demos)}"]
        for i, r in enumerate(demos.sealed_rewards()):
            rl.append(f"traj {i} {len(r)}")
            rl.extend(_fmt(v) for v in r)
        Path(str(path) + ".rewards").write_text("\n".join(rl) + "\n")


def _header_fields(line: str) -> dict:
    parts = line.split()
    if len(parts) != 5 or parts[0] != "demos":
        raise DemoFormatError(f"bad header line: {line!r}")
    out = {"N": int(parts[1])}
    for p in parts[2:]:
        k, _, v = p.partition("=")
        out[k] = v
    return out


def read_demos(path: str | Path, with_rewards: bool = False) -> DemoSet:
    """Parse a demo file; ``with_rewards`` also loads the sealed sibling file."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
        head = _header_fields(lines[0])
        N, obs_dim = head["N"], int(head["obs_dim"])
        trajs, i = [], 1
        for t in range(N):
            tag, tid, length = lines[i].split()
            if tag != "traj" or int(tid) != t:
                raise DemoFormatError(f"expected trajectory {t} at line {i + 1}")
            length = int(length)
            obs = np.empty((length, obs_dim))
            acts = np.empty(length, dtype=np.int64)
            for j in range(length):
                o, a = lines[i + 1 + j].split(" ")
                if not o.startswith("obs=") or not a.startswith("action="):
                    raise DemoFormatError(f"bad step line {i + 2 + j}")
                obs[j] = np.array(o[4:].split(","), dtype=float)
                acts[j] = int(a[7:])
            trajs.append(Trajectory(obs, acts))
            i += 1 + length
    except (IndexError, ValueError) as exc:
        if isinstance(exc, DemoFormatError):
            raise
        raise DemoFormatError(f"{path}: {exc}") from exc
    rewards = None
    if with_rewards:
        rewards = _read_rewards(Path(str(path) + ".rewards"), [len(t) for t in trajs])
    return DemoSet(trajs, head["env"], int(head["task"]), rewards)


def _read_rewards(path: Path, lengths: list[int]) -> list[np.ndarray]:
    lines = path.read_text().splitlines()
    if lines[0].split() != ["rewards", str(len(lengths))]:
        raise DemoFormatError(f"{path}: reward file does not match the demo file")
    out, i = [], 1
    for t, n in enumerate(lengths):
        if lines[i].split() != ["traj", str(t), str(n)]:
            raise DemoFormatError(f"{path}: trajectory {t} header mismatch")
        out.append(np.array(lines[i + 1 : i + 1 + n], dtype=float))
        i += 1 + n
    return out
