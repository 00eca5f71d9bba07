"""Preference and reward inference from reward-free demonstrations.

The demonstrator model starts from a pre-trained basis: cumulants and
successor features are copied, the preference vector starts at the mean of
the pre-training preferences. Training alternates a behavioral-cloning step
(softmax over ``psi_e . w_e``) with a consistency step that keeps ``psi_e``
the successor features of the demonstrated behavior under the frozen
cumulants. Rewards are then read off as ``phi_e . w_e``.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from basis_irl import model as M
from basis_irl.mdp import FunctionPolicy, Trajectory
from basis_irl.nn import Adam
from basis_irl.seeding import stream

log = logging.getLogger(__name__)


@dataclass
class IRLConfig:
    demo_counts: tuple = (1, 10, 100, 1000)
    epochs: int = 20
    min_steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    gamma: float = 0.9
    temperature: float = 0.05
    bc_weight: float = 1.0
    itd_weight: float = 1.0
    freeze_phi: bool = True
    target_update_interval: int = 100
    val_fraction: float = 0.2
    eval_interval: int = 50
    patience: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.target_update_interval < 1:
            raise ValueError("epochs, batch_size and target_update_interval must be >= 1")
        if self.min_steps < 0 or self.eval_interval < 1 or self.patience < 1:
            raise ValueError("min_steps must be >= 0; eval_interval and patience >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.bc_weight < 0 or self.itd_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.lr <= 0 or self.temperature <= 0:
            raise ValueError("lr and temperature must be positive")
        if any(int(n) < 1 for n in self.demo_counts):
            raise ValueError("demo counts must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["demo_counts"] = list(self.demo_counts)
        return d


def init_from_checkpoint(basis: M.BasisModel) -> M.IRLModel:
    """Copy every block of ``basis``; ``w_e`` is the mean of its preference rows."""
    src = basis.spec
    spec = M.ModelSpec(**{**src.to_dict(), "num_prefs": 1})
    spec = M.ModelSpec.from_dict(spec.to_dict())
    irl = M.IRLModel(spec)
    for name in basis.params.names():
        if name == "w":
            continue
        if name not in irl.params or irl.params[name].shape != basis.params[name].shape:
            raise ValueError(f"layout mismatch at block {name}")
        irl.params[name][...] = basis.params[name]
    irl.params["w"][0] = basis.w.mean(axis=0)
    irl.sync_target()
    return irl


def random_irl_model(spec: M.ModelSpec, rng: np.random.Generator) -> M.IRLModel:
    """Fresh demonstrator model without pre-training (``w_e`` starts at zero)."""
    spec = M.ModelSpec.from_dict({**spec.to_dict(), "num_prefs": 1})
    return M.IRLModel.create(spec, rng)


@dataclass
class DemoArrays:
    """Flattened learner-facing demonstration steps with successor links."""

    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    next_actions: np.ndarray
    dones: np.ndarray
    itd_rows: np.ndarray  # rows usable for the consistency loss

    def __len__(self) -> int:
        return len(self.actions)


def demo_arrays(trajectories: list[Trajectory]) -> DemoArrays:
    """Stack trajectories; the last step of each is treated as terminal."""
    if not trajectories:
        raise ValueError("demonstration set is empty")
    obs, acts, nobs, nacts, dones, usable = [], [], [], [], [], []
    for i, tr in enumerate(trajectories):
        n = len(tr)
        if n == 0:
            continue
        o = tr.observations
        obs.append(o)
        acts.append(tr.actions)
        nobs.append(np.concatenate([o[1:], o[-1:]]))
        nacts.append(np.concatenate([tr.actions[1:], tr.actions[-1:]]))
        d = np.zeros(n)
        d[-1] = 1.0
        dones.append(d)
        if n < 2:
            warnings.warn(f"trajectory {i} has fewer than 2 steps; skipped by the consistency loss", stacklevel=2)
        usable.append(np.full(n, n >= 2))
    if not obs:
        raise ValueError("demonstration set has no steps")
    usable = np.concatenate(usable)
    return DemoArrays(
        np.concatenate(obs),
        np.concatenate(acts),
        np.concatenate(nobs),
        np.concatenate(nacts),
        np.concatenate(dones),
        np.flatnonzero(usable),
    )


def irl_groups(model: M.BasisModel, freeze_phi: bool, train_trunk: bool = False):
    """Parameter slices moved by the BC step and by the consistency step.

    The shared trunk feeds the cumulants too, so it stays fixed unless
    ``train_trunk`` is set (a model without pre-training has nothing in its
    trunk worth keeping). ``freeze_phi=False`` opens the cumulant head to the
    consistency loss.
    """
    psi, phi, w = model.block("psi/"), model.block("phi/"), model.block("w")
    trunk = [model.block("trunk/")] if model.spec.trunk is not None and train_trunk else []
    bc = trunk + [psi, w]
    itd = trunk + [psi] + ([] if freeze_phi else [phi])
    return bc, itd


@dataclass
class IRLResult:
    model: M.IRLModel
    log: list[dict] = field(default_factory=list)
    best_step: int | None = None

    def reward_fn(self):
        """r_hat(obs, actions) = phi_e(s, a) . w_e."""
        model = self.model
        return lambda obs, actions: model.predict_reward(obs, actions, model.w_e)


def _batch(data: DemoArrays, rows: np.ndarray) -> M.TransitionBatch:
    return M.TransitionBatch(
        data.obs[rows],
        data.actions[rows],
        np.zeros(len(rows)),
        data.next_obs[rows],
        data.next_actions[rows],
        np.zeros(len(rows), dtype=np.int64),
        data.dones[rows],
    )


def split_demos(trajectories: list[Trajectory], fraction: float, seed: int):
    """Hold out ``floor(fraction * N)`` whole trajectories for validation."""
    n_val = int(len(trajectories) * fraction)
    if n_val == 0 or n_val == len(trajectories):
        return trajectories, []
    perm = stream(seed, "irl-split").permutation(len(trajectories))
    val = set(perm[:n_val].tolist())
    train = [t for i, t in enumerate(trajectories) if i not in val]
    return train, [trajectories[i] for i in sorted(val)]


def run_irl(
    model: M.IRLModel,
    demos: list[Trajectory] | DemoArrays,
    cfg: IRLConfig,
    log_path: str | Path | None = None,
    bc_only: bool = False,
    train_w: bool = True,
    train_trunk: bool = False,
) -> IRLResult:
    """Alternate BC and consistency updates over shuffled demonstration batches.

    ``model`` is trained in place and returned inside the result. Training
    runs ``epochs`` passes over the training trajectories, extended until at
    least ``min_steps`` batches have been used. When ``val_fraction`` leaves
    at least one held-out trajectory, the BC loss on the held-out steps is
    measured every ``eval_interval`` batches; the parameters with the lowest
    held-out loss are kept, and training stops after ``patience``
    measurements without improvement. ``bc_only`` skips the consistency
    step and ``train_w=False`` keeps the preference row fixed (together they
    give plain behavioral cloning of a Q-function head). ``train_trunk``
    is passed on to ``irl_groups``.
    """
    cfg.validate()
    if model.spec.num_prefs != 1:
        raise ValueError("the demonstrator model has a single preference row")
    if isinstance(demos, DemoArrays):
        data, val = demos, None
    else:
        train, held = split_demos(list(demos), cfg.val_fraction, cfg.seed)
        data = demo_arrays(train)
        val = demo_arrays(held) if held else None
    rng = stream(cfg.seed, "irl")
    bc_slices, itd_slices = irl_groups(model, cfg.freeze_phi, train_trunk)
    if not train_w:
        bc_slices = [s for s in bc_slices if s != model.block("w")]
    # Adam is invariant to gradient scale, so the loss weights scale the step sizes
    opt_bc = Adam(model.params.size, cfg.lr * cfg.bc_weight, bc_slices)
    opt_itd = Adam(model.params.size, cfg.lr * cfg.itd_weight, itd_slices)
    n = len(data)
    per_epoch = -(-n // cfg.batch_size)
    total = max(cfg.epochs * per_epoch, cfg.min_steps)
    use_itd = not bc_only and cfg.itd_weight > 0 and len(data.itd_rows) > 0

    def val_loss():
        return M.loss_bc(model, val.obs, val.actions, cfg.temperature)[0]

    best = (val_loss(), 0, model.params.data.copy()) if val is not None else None
    stale = 0
    rows_log = []
    step = 0
    epoch = 0
    while step < total:
        order = rng.permutation(n)
        bc_acc = itd_acc = 0.0
        done_in_epoch = 0
        stop = False
        for b in range(per_epoch):
            rows = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            loss, g = M.loss_bc(model, data.obs[rows], data.actions[rows], cfg.temperature)
            if cfg.bc_weight > 0:
                opt_bc.step(model.params.data, g.data)
            bc_acc += loss
            if use_itd:
                # consistency batch: uniform over steps that have a recorded successor
                irows = data.itd_rows[rng.integers(len(data.itd_rows), size=len(rows))]
                loss, g = M.loss_itd_e(model, _batch(data, irows), cfg.gamma, freeze_phi=cfg.freeze_phi)
                opt_itd.step(model.params.data, g.data)
                itd_acc += loss
            step += 1
            done_in_epoch += 1
            if step % cfg.target_update_interval == 0:
                model.sync_target()
            if best is not None and step % cfg.eval_interval == 0:
                v = val_loss()
                if v < best[0]:
                    best, stale = (v, step, model.params.data.copy()), 0
                else:
                    stale += 1
                    stop = stale >= cfg.patience
            if step >= total or stop:
                break
        row = {"epoch": epoch, "bc_loss": bc_acc / done_in_epoch}
        row["itd_loss"] = itd_acc / done_in_epoch if use_itd else float("nan")
        row["val_bc_loss"] = val_loss() if val is not None else float("nan")
        rows_log.append(row)
        epoch += 1
        if stop:
            break
    if best is not None:
        model.params.data[...] = best[2]
        log.debug("kept parameters from step %d (held-out BC %.4f)", best[1], best[0])
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "bc_loss", "itd_loss", "val_bc_loss"])
            for r in rows_log:
                w.writerow([r["epoch"], f"{r['bc_loss']:.9g}", f"{r['itd_loss']:.9g}", f"{r['val_bc_loss']:.9g}"])
    return IRLResult(model, rows_log, best_step=None if best is None else best[1])


def extract_policy(model: M.BasisModel, mode: str = "greedy", temperature: float = 1.0, pref: int = 0):
    """Policy closure over observations from ``Q = psi . w``.

    Greedy ties go to the lowest action index.
    """
    if mode not in ("greedy", "softmax"):
        raise ValueError("mode must be 'greedy' or 'softmax'")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    w = model.w[pref].copy()

    def probs(obs):
        return q_policy(model.q_values(obs, w), mode, temperature)

    return FunctionPolicy(probs)


def q_policy(q: np.ndarray, mode: str, temperature: float = 1.0) -> np.ndarray:
    q = np.atleast_2d(q)
    if mode == "greedy":
        out = np.zeros_like(q)
        out[np.arange(len(q)), np.argmax(q, axis=1)] = 1.0
        return out
    z = (q - q.max(axis=1, keepdims=True)) / temperature
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _with_task_code(obs: np.ndarray, feature_dim: int, k: int) -> np.ndarray:
    out = obs.copy()
    out[:, feature_dim:] = 0.0
    out[:, feature_dim + k] = 1.0
    return out


def run_irl_pretraining(
    spec: M.ModelSpec, demos_per_task: list, cfg: IRLConfig, steps: int, seed: int = 0
) -> M.BasisModel:
    """Multi-task pre-training from demonstrations instead of rewards.

    For each of the K tasks, BC and consistency updates run on that task's
    demonstrations with its one-hot task code and its own preference row.
    With no reward signal the cumulants only receive consistency gradients.
    """
    if len(demos_per_task) != spec.num_tasks or spec.num_prefs != spec.num_tasks:
        raise ValueError("need one demonstration set and one preference row per task")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = stream(seed, "irl-pretrain")
    model = M.BasisModel.create(spec, stream(seed, "init"))
    data = []
    for k, demos in enumerate(demos_per_task):
        arr = demos if isinstance(demos, DemoArrays) else demo_arrays(demos)
        arr = DemoArrays(
            _with_task_code(arr.obs, spec.feature_dim, k),
            arr.actions,
            _with_task_code(arr.next_obs, spec.feature_dim, k),
            arr.next_actions,
            arr.dones,
            arr.itd_rows,
        )
        data.append(arr)
    trunk = [model.block("trunk/")] if spec.trunk is not None else []
    psi, phi, w = model.block("psi/"), model.block("phi/"), model.block("w")
    opt_bc = Adam(model.params.size, cfg.lr * cfg.bc_weight, trunk + [psi, w])
    opt_itd = Adam(model.params.size, cfg.lr * cfg.itd_weight, trunk + [psi, phi])
    for step in range(steps):
        k = step % spec.num_tasks
        arr = data[k]
        rows = rng.integers(len(arr), size=cfg.batch_size)
        _, g = M.loss_bc(model, arr.obs[rows], arr.actions[rows], cfg.temperature, pref=k)
        opt_bc.step(model.params.data, g.data)
        if len(arr.itd_rows):
            irows = arr.itd_rows[rng.integers(len(arr.itd_rows), size=cfg.batch_size)]
            _, g = M.loss_itd(model, _batch(arr, irows), cfg.gamma, phi_grad=True)
            opt_itd.step(model.params.data, g.data)
        if (step + 1) % cfg.target_update_interval == 0:
            model.sync_target()
    return model
