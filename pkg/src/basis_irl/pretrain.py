"""Multi-task RL pre-training of the cumulant / successor-feature basis.

Each iteration samples one task uniformly, plays one episode with Boltzmann
actions over the current ``psi . w_k``, stores the transitions, and then runs
a fixed number of gradient steps. A gradient step applies the soft Bellman
loss, the reward loss and the consistency (ITD) loss in that order, each on
its own uniformly drawn batch and with its own Adam state.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from basis_irl import model as M
from basis_irl.mdp import sample_action
from basis_irl.nn import Adam
from basis_irl.seeding import stream

log = logging.getLogger(__name__)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions, stored as float32."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.next_actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.task_ids = np.zeros(capacity, dtype=np.int64)
        self.dones = np.zeros(capacity, dtype=np.float32)
        self.size = 0
        self._next = 0
        self.pushed = 0

    def __len__(self) -> int:
        return self.size

    def push(self, obs, action, reward, next_obs, next_action, task_id, done) -> None:
        obs = np.asarray(obs)
        next_obs = np.asarray(next_obs)
        if obs.shape != (self.obs_dim,) or next_obs.shape != (self.obs_dim,):
            raise ValueError(f"observations must have shape ({self.obs_dim},)")
        i = self._next
        self.obs[i] = obs
        self.next_obs[i] = next_obs
        self.actions[i] = action
        self.next_actions[i] = next_action
        self.rewards[i] = reward
        self.task_ids[i] = task_id
        self.dones[i] = float(done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.pushed += 1

    def indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.choice(self.size, size=min(batch_size, self.size), replace=False)

    def gather(self, idx: np.ndarray) -> M.TransitionBatch:
        return M.TransitionBatch(
            self.obs[idx].astype(float),
            self.actions[idx],
            self.rewards[idx].astype(float),
            self.next_obs[idx].astype(float),
            self.next_actions[idx],
            self.task_ids[idx],
            self.dones[idx].astype(float),
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> M.TransitionBatch:
        return self.gather(self.indices(batch_size, rng))

    def oldest_first(self) -> np.ndarray:
        """Slot indices ordered from the oldest stored record to the newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self._next) % self.capacity


@dataclass
class PretrainConfig:
    env: str = "fruitgrid"
    K: int = 3
    d: int = 8
    gamma: float = 0.9
    total_iterations: int = 6000
    episode_horizon: int = 30
    gradient_steps_per_iteration: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    target_update_interval: int = 100
    exploration_temperature: float = 0.2
    soft_temperature: float = 0.05
    buffer_capacity: int = 100_000
    seed: int = 0
    trunk_hidden: tuple = ()
    head_hidden: tuple = (64,)
    holdout_fraction: float = 0.05

    def validate(self) -> None:
        counts = (
            "K",
            "d",
            "total_iterations",
            "episode_horizon",
            "gradient_steps_per_iteration",
            "batch_size",
            "target_update_interval",
            "buffer_capacity",
        )
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.lr <= 0 or self.exploration_temperature <= 0 or self.soft_temperature <= 0:
            raise ValueError("lr and temperatures must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_hidden"] = list(self.trunk_hidden)
        d["head_hidden"] = list(self.head_hidden)
        return d


@dataclass
class PretrainResult:
    model: M.BasisModel
    log: list[dict] = field(default_factory=list)
    holdout: ReplayBuffer | None = None
    buffer: ReplayBuffer | None = None


def model_spec_for(env, cfg: PretrainConfig, num_prefs: int | None = None) -> M.ModelSpec:
    return M.ModelSpec(
        feature_dim=env.feature_dim,
        num_tasks=cfg.K,
        d=cfg.d,
        num_actions=env.num_actions,
        num_prefs=cfg.K if num_prefs is None else num_prefs,
        trunk_hidden=tuple(cfg.trunk_hidden),
        head_hidden=tuple(cfg.head_hidden),
    )


def boltzmann(q: np.ndarray, temperature: float) -> np.ndarray:
    z = (q - q.max()) / temperature
    p = np.exp(z)
    return p / p.sum()


def collect_episode(env, task, policy_fn, horizon: int, rng: np.random.Generator):
    """Play one episode; return the transitions with logged next actions.

    ``policy_fn(obs) -> action probabilities``. On truncation at the horizon
    the successor action is drawn from the policy and the transition is not
    marked done; only true terminal states set ``done``.
    """
    state, obs = env.reset(task, rng)
    a = sample_action(policy_fn(obs), rng)
    out = []
    total = 0.0
    for t in range(horizon):
        state, next_obs, r, done = env.step(state, a, task, rng)
        total += r
        terminal = env.is_terminal(state)
        if terminal:
            out.append((obs, a, r, next_obs, 0, 1.0))
            break
        a_next = sample_action(policy_fn(next_obs), rng)
        out.append((obs, a, r, next_obs, a_next, 0.0))
        if done or t == horizon - 1:
            break
        obs, a = next_obs, a_next
    return out, total


def run_pretraining(
    cfg: PretrainConfig,
    env,
    tasks,
    log_path: str | Path | None = None,
    model: M.BasisModel | None = None,
    progress=None,
    q_only: bool = False,
) -> PretrainResult:
    """Train a BasisModel on ``tasks`` (K task specs whose ids index ``w``).

    ``q_only`` trains a plain multi-task soft Q-network instead: one output
    per action (d = 1, preference fixed at 1) and only the Bellman loss.
    """
    cfg.validate()
    if len(tasks) != cfg.K:
        raise ValueError(f"expected {cfg.K} tasks, got {len(tasks)}")
    spec = model_spec_for(env, cfg)
    if q_only:
        spec = M.ModelSpec.from_dict({**spec.to_dict(), "d": 1})
    if model is None:
        model = M.BasisModel.create(spec, stream(cfg.seed, "init"))
        if q_only:
            model.w[...] = 1.0
    env_rng = stream(cfg.seed, "env")
    task_rng = stream(cfg.seed, "task")
    buf_rng = stream(cfg.seed, "buffer")
    split_rng = stream(cfg.seed, "holdout")

    buffer = ReplayBuffer(cfg.buffer_capacity, spec.obs_dim)
    hold_cap = max(cfg.batch_size, int(cfg.buffer_capacity * cfg.holdout_fraction))
    holdout = ReplayBuffer(hold_cap, spec.obs_dim) if cfg.holdout_fraction > 0 else None

    groups = M.pretrain_groups(model)
    if q_only:
        groups.q = [sl for sl in groups.q if sl != model.block("w")]
    size = model.params.size
    opt_q = Adam(size, cfg.lr, groups.q)
    opt_r = Adam(size, cfg.lr, groups.reward)
    opt_itd = Adam(size, cfg.lr, groups.itd)

    rows = []
    steps = 0
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "task", "return", "loss_q", "loss_reward", "loss_itd"])
    try:
        for it in range(cfg.total_iterations):
            k = int(task_rng.integers(cfg.K))
            task = tasks[k]
            w_k = model.w[k].copy()

            def policy_fn(obs, w=w_k):
                return boltzmann(model.q_values(obs, w)[0], cfg.exploration_temperature)

            transitions, ret = collect_episode(env, task, policy_fn, cfg.episode_horizon, env_rng)
            for obs, a, r, nobs, na, done in transitions:
                target = buffer
                if holdout is not None and split_rng.random() < cfg.holdout_fraction:
                    target = holdout
                target.push(obs, a, r, nobs, na, k, done)

            lq = lr_ = li = float("nan")
            if len(buffer) >= cfg.batch_size:
                acc = np.zeros(3)
                for _ in range(cfg.gradient_steps_per_iteration):
                    loss, g = M.loss_q(model, buffer.sample(cfg.batch_size, buf_rng), cfg.gamma, cfg.soft_temperature)
                    opt_q.step(model.params.data, g.data)
                    acc[0] += loss
                    if not q_only:
                        loss, g = M.loss_reward(model, buffer.sample(cfg.batch_size, buf_rng))
                        opt_r.step(model.params.data, g.data)
                        acc[1] += loss
                        loss, g = M.loss_itd(model, buffer.sample(cfg.batch_size, buf_rng), cfg.gamma)
                        opt_itd.step(model.params.data, g.data)
                        acc[2] += loss
                    steps += 1
                    if steps % cfg.target_update_interval == 0:
                        model.sync_target()
                lq, lr_, li = acc / cfg.gradient_steps_per_iteration
                if q_only:
                    lr_ = li = float("nan")
            row = {"iteration": it, "task": k, "return": ret, "loss_q": lq, "loss_reward": lr_, "loss_itd": li}
            rows.append(row)
            if writer is not None:
                writer.writerow([it, k, f"{ret:.9g}", f"{lq:.9g}", f"{lr_:.9g}", f"{li:.9g}"])
            if progress is not None:
                progress(it, row, model)
    finally:
        if fh is not None:
            fh.close()
    return PretrainResult(model, rows, holdout, buffer)


def holdout_reward_loss(model: M.BasisModel, holdout: ReplayBuffer) -> float:
    """Reward loss over every record of a held-out buffer."""
    if holdout is None or len(holdout) == 0:
        raise ValueError("no held-out transitions")
    batch = holdout.gather(np.arange(len(holdout)))
    return M.loss_reward(model, batch)[0]
