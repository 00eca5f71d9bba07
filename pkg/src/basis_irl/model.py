"""Cumulant / successor-feature / preference model and its training losses.

Layout of one model:

* an optional shared trunk over the observation features,
* a cumulant head ``phi`` reading the trunk output,
* a successor head ``psi`` reading the trunk output concatenated with the
  task one-hot (so successor features can differ per task policy),
* a lagged copy ``psi_target`` of the successor head,
* preference rows ``w`` of shape ``(P, d)``; P is the task count during
  pre-training and 1 for the demonstrator model.

Both heads emit ``d * num_actions`` values read as one d-vector per action.

Every loss returns ``(loss, grads)`` where ``grads`` is a full-size
``ParamVector``; blocks a loss must not train are left exactly zero.
Bootstrapped targets are stop-gradient quantities; passing them in ``fixed``
freezes them, which is what gradient checks need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from basis_irl import nn
from basis_irl.nn import DivergenceError, MLPSpec, ParamVector


@dataclass(frozen=True)
class ModelSpec:
    feature_dim: int
    num_tasks: int
    d: int
    num_actions: int
    num_prefs: int
    trunk_hidden: tuple[int, ...] = ()
    head_hidden: tuple[int, ...] = (64,)
    trunk_activation: str = "relu"
    head_activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "trunk_hidden", tuple(self.trunk_hidden))
        object.__setattr__(self, "head_hidden", tuple(self.head_hidden))
        if min(self.feature_dim, self.d, self.num_actions, self.num_prefs) < 1 or self.num_tasks < 0:
            raise ValueError("model dimensions must be positive")

    @property
    def trunk(self) -> MLPSpec | None:
        if not self.trunk_hidden:
            return None
        *hid, out = self.trunk_hidden
        return MLPSpec(self.feature_dim, tuple(hid), out, self.trunk_activation)

    @property
    def trunk_out(self) -> int:
        return self.trunk_hidden[-1] if self.trunk_hidden else self.feature_dim

    @property
    def phi(self) -> MLPSpec:
        return MLPSpec(self.trunk_out, self.head_hidden, self.d * self.num_actions, self.head_activation)

    @property
    def psi(self) -> MLPSpec:
        return MLPSpec(self.trunk_out + self.num_tasks, self.head_hidden, self.d * self.num_actions, self.head_activation)

    @property
    def obs_dim(self) -> int:
        return self.feature_dim + self.num_tasks

    def shapes(self):
        out = []
        if self.trunk is not None:
            out += nn.mlp_shapes(self.trunk, "trunk/")
        out += nn.mlp_shapes(self.phi, "phi/")
        out += nn.mlp_shapes(self.psi, "psi/")
        out.append(("w", (self.num_prefs, self.d)))
        out += nn.mlp_shapes(self.psi, "psi_target/")
        return out

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "num_tasks": self.num_tasks,
            "d": self.d,
            "num_actions": self.num_actions,
            "num_prefs": self.num_prefs,
            "trunk_hidden": list(self.trunk_hidden),
            "head_hidden": list(self.head_hidden),
            "trunk_activation": self.trunk_activation,
            "head_activation": self.head_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "trunk_hidden": tuple(d["trunk_hidden"]), "head_hidden": tuple(d["head_hidden"])})


class BasisModel:
    def __init__(self, spec: ModelSpec, params: ParamVector | None = None):
        self.spec = spec
        self.params = ParamVector(spec.shapes()) if params is None else params

    @classmethod
    def create(cls, spec: ModelSpec, rng: np.random.Generator) -> "BasisModel":
        model = cls(spec)
        if spec.trunk is not None:
            nn.init_mlp(spec.trunk, model.params, "trunk/", rng)
        nn.init_mlp(spec.phi, model.params, "phi/", rng)
        nn.init_mlp(spec.psi, model.params, "psi/", rng)
        model.sync_target()
        return model

    # -- parameter bookkeeping ----------------------------------------------

    def block(self, prefix: str) -> slice:
        return self.params.block(prefix)

    @property
    def w(self) -> np.ndarray:
        return self.params["w"]

    def sync_target(self) -> None:
        self.params.data[self.block("psi_target/")] = self.params.data[self.block("psi/")]

    def copy(self) -> "BasisModel":
        return type(self)(self.spec, self.params.copy())

    # -- evaluation ---------------------------------------------------------

    def _trunk(self, obs):
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if obs.shape[1] != self.spec.obs_dim:
            raise ValueError(f"observation length {obs.shape[1]} != {self.spec.obs_dim}")
        feats = obs[:, : self.spec.feature_dim]
        task = obs[:, self.spec.feature_dim :]
        if self.spec.trunk is None:
            return feats, None, task
        h, cache = nn.forward(self.spec.trunk, self.params, feats, "trunk/")
        return h, cache, task

    def _head(self, which: str, h, task):
        spec = self.spec.phi if which == "phi" else self.spec.psi
        x = h if which == "phi" or self.spec.num_tasks == 0 else np.concatenate([h, task], axis=1)
        out, cache = nn.forward(spec, self.params, x, f"{which}/")
        return out.reshape(len(h), self.spec.num_actions, self.spec.d), cache

    def cumulants(self, obs) -> np.ndarray:
        h, _, task = self._trunk(obs)
        return self._head("phi", h, task)[0]

    def successor(self, obs, use_target: bool = False) -> np.ndarray:
        h, _, task = self._trunk(obs)
        return self._head("psi_target" if use_target else "psi", h, task)[0]

    def q_values(self, obs, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.spec.d,):
            raise ValueError(f"preference vector must have length {self.spec.d}")
        return self.successor(obs) @ w

    def predict_reward(self, obs, actions, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.spec.d,):
            raise ValueError(f"preference vector must have length {self.spec.d}")
        phi = self.cumulants(obs)
        actions = np.asarray(actions)
        return phi[np.arange(len(phi)), actions] @ w

    # -- backprop helper ------------------------------------------------------

    def _backprop(self, grads, trunk_cache, which, head_cache, dout, dh_acc):
        """Push ``dout`` (B, A, d) through a head; accumulate trunk cotangent."""
        spec = self.spec.phi if which == "phi" else self.spec.psi
        B = dout.shape[0]
        has_trunk = self.spec.trunk is not None
        dx = nn.backward(spec, self.params, head_cache, dout.reshape(B, -1), grads, f"{which}/", input_grad=has_trunk)
        if not has_trunk:
            return None
        dh = dx[:, : self.spec.trunk_out]
        return dh if dh_acc is None else dh_acc + dh

    def _trunk_backward(self, grads, trunk_cache, dh):
        if self.spec.trunk is not None and dh is not None:
            nn.backward(self.spec.trunk, self.params, trunk_cache, dh, grads, "trunk/")


class IRLModel(BasisModel):
    """Demonstrator model: same layout with a single preference row ``w_e``."""

    @property
    def w_e(self) -> np.ndarray:
        return self.params["w"][0]


@dataclass
class TransitionBatch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    next_actions: np.ndarray
    task_ids: np.ndarray
    dones: np.ndarray

    def __post_init__(self):
        n = len(self.obs)
        for name in ("actions", "rewards", "next_obs", "next_actions", "task_ids", "dones"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"batch field {name} has length {len(getattr(self, name))}, expected {n}")
        if n == 0:
            raise ValueError("empty batch")

    def __len__(self) -> int:
        return len(self.obs)


def _finite(loss: float) -> float:
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    return float(loss)


def _soft_max(x: np.ndarray, temperature: float) -> np.ndarray:
    m = x.max(axis=1)
    return m + temperature * np.log(np.exp((x - m[:, None]) / temperature).sum(axis=1))


def q_target(model: BasisModel, batch: TransitionBatch, gamma: float, temperature: float = 1.0) -> np.ndarray:
    """r + gamma * (1 - done) * soft-max over next actions of target Q."""
    psi_next = model.successor(batch.next_obs, use_target=True)
    w = model.w[batch.task_ids]
    q_next = np.einsum("bad,bd->ba", psi_next, w)
    return batch.rewards + gamma * (1.0 - batch.dones) * _soft_max(q_next, temperature)


def loss_q(model: BasisModel, batch: TransitionBatch, gamma: float, temperature: float = 1.0, fixed=None):
    """Soft Bellman error of Q = psi . w_k; trains psi head, trunk and w."""
    target = q_target(model, batch, gamma, temperature) if fixed is None else fixed["target"]
    B = len(batch)
    h, tcache, task = model._trunk(batch.obs)
    psi, pcache = model._head("psi", h, task)
    rows = np.arange(B)
    w = model.w[batch.task_ids]
    psi_a = psi[rows, batch.actions]
    delta = np.einsum("bd,bd->b", psi_a, w) - target
    loss = _finite(np.mean(delta**2))
    dq = 2.0 * delta / B
    grads = model.params.zeros_like()
    dpsi = np.zeros_like(psi)
    dpsi[rows, batch.actions] = dq[:, None] * w
    np.add.at(grads["w"], batch.task_ids, dq[:, None] * psi_a)
    dh = model._backprop(grads, tcache, "psi", pcache, dpsi, None)
    model._trunk_backward(grads, tcache, dh)
    return loss, grads


def loss_reward(model: BasisModel, batch: TransitionBatch, fixed=None):
    """Squared error of phi(s,a) . w_k against the observed reward."""
    B = len(batch)
    h, tcache, task = model._trunk(batch.obs)
    phi, fcache = model._head("phi", h, task)
    rows = np.arange(B)
    w = model.w[batch.task_ids]
    phi_a = phi[rows, batch.actions]
    delta = np.einsum("bd,bd->b", phi_a, w) - batch.rewards
    loss = _finite(np.mean(delta**2))
    dr = 2.0 * delta / B
    grads = model.params.zeros_like()
    dphi = np.zeros_like(phi)
    dphi[rows, batch.actions] = dr[:, None] * w
    np.add.at(grads["w"], batch.task_ids, dr[:, None] * phi_a)
    dh = model._backprop(grads, tcache, "phi", fcache, dphi, None)
    model._trunk_backward(grads, tcache, dh)
    return loss, grads


def itd_target(model: BasisModel, batch: TransitionBatch, gamma: float) -> np.ndarray:
    """gamma * (1 - done) * psi_target(s', a')."""
    psi_next = model.successor(batch.next_obs, use_target=True)
    rows = np.arange(len(batch))
    return gamma * (1.0 - batch.dones)[:, None] * psi_next[rows, batch.next_actions]


def loss_itd(model: BasisModel, batch: TransitionBatch, gamma: float, phi_grad: bool = False, fixed=None):
    """Successor consistency ||psi(s,a) - phi(s,a) - gamma psi_target(s',a')||^2.

    phi is a stop-gradient input unless ``phi_grad`` is set (the unfrozen
    ablation during inference). The target head never receives gradient.
    ``fixed`` may carry ``target`` (the bootstrap term) and ``phi`` (the
    stop-gradient cumulants of the taken actions).
    """
    boot = itd_target(model, batch, gamma) if fixed is None else fixed["target"]
    B = len(batch)
    rows = np.arange(B)
    h, tcache, task = model._trunk(batch.obs)
    psi, pcache = model._head("psi", h, task)
    phi, fcache = model._head("phi", h, task)
    phi_a = phi[rows, batch.actions]
    if fixed is not None and not phi_grad and "phi" in fixed:
        phi_a = fixed["phi"]
    delta = psi[rows, batch.actions] - phi_a - boot
    loss = _finite(np.mean(np.sum(delta**2, axis=1)))
    grads = model.params.zeros_like()
    g = 2.0 * delta / B
    dpsi = np.zeros_like(psi)
    dpsi[rows, batch.actions] = g
    dh = model._backprop(grads, tcache, "psi", pcache, dpsi, None)
    if phi_grad:
        dphi = np.zeros_like(phi)
        dphi[rows, batch.actions] = -g
        dh = model._backprop(grads, tcache, "phi", fcache, dphi, dh)
    model._trunk_backward(grads, tcache, dh)
    return loss, grads


def loss_bc(model: BasisModel, obs: np.ndarray, actions: np.ndarray, temperature: float = 1.0, pref: int = 0):
    """Cross-entropy of softmax(psi(s,.) . w / temperature) against demo actions."""
    obs = np.atleast_2d(obs)
    actions = np.asarray(actions)
    B = len(obs)
    if B == 0:
        raise ValueError("empty batch")
    rows = np.arange(B)
    w = model.w[pref]
    h, tcache, task = model._trunk(obs)
    psi, pcache = model._head("psi", h, task)
    logits = psi @ w / temperature
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    logp = logits - m - np.log(z)
    loss = _finite(-np.mean(logp[rows, actions]))
    dlogits = e / z
    dlogits[rows, actions] -= 1.0
    dlogits /= B * temperature
    grads = model.params.zeros_like()
    grads["w"][pref] += np.einsum("ba,bad->d", dlogits, psi)
    dpsi = dlogits[:, :, None] * w[None, None, :]
    dh = model._backprop(grads, tcache, "psi", pcache, dpsi, None)
    model._trunk_backward(grads, tcache, dh)
    return loss, grads


def loss_itd_e(model: BasisModel, batch: TransitionBatch, gamma: float, freeze_phi: bool = True, fixed=None):
    """Consistency loss on demonstrations; phi trains only when unfrozen."""
    return loss_itd(model, batch, gamma, phi_grad=not freeze_phi, fixed=fixed)


def itd_fixed(model: BasisModel, batch: TransitionBatch, gamma: float) -> dict:
    """Every stop-gradient input of ``loss_itd``, for gradient checking."""
    phi = model.cumulants(batch.obs)[np.arange(len(batch)), batch.actions]
    return {"target": itd_target(model, batch, gamma), "phi": phi}


@dataclass
class ParamGroups:
    """Which parameter slices each loss is allowed to move."""

    q: list = field(default_factory=list)
    reward: list = field(default_factory=list)
    itd: list = field(default_factory=list)


def pretrain_groups(model: BasisModel) -> ParamGroups:
    trunk = [model.block("trunk/")] if model.spec.trunk is not None else []
    psi, phi, w = model.block("psi/"), model.block("phi/"), model.block("w")
    return ParamGroups(q=trunk + [psi, w], reward=trunk + [phi, w], itd=trunk + [psi])
