"""Evaluation battery: value difference, reward error, behavior distributions,
and the variant x demo-count x seed experiment grid.

Returns are undiscounted sums over the environment horizon. When the
environment has an enumerated tabular form they are computed exactly by
propagating the state distribution; otherwise by Monte Carlo.
"""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from basis_irl import irl as I
from basis_irl import mdp as X
from basis_irl import model as M
from basis_irl.demos import DemoSet, Expert, sample_demos
from basis_irl.envs import FruitGrid, behavior_tables
from basis_irl.mdp import Policy, TablePolicy, rollout
from basis_irl.seeding import child_seed

log = logging.getLogger(__name__)

VARIANTS = ("basis", "basis_unfrozen_phi", "no_pretraining", "no_sf_dqn", "irl_pretraining")


# -- policies over the enumerated state space ----------------------------------


def q_table(model: M.BasisModel, env, mdp: X.TabularMDP, w, task_id: int | None = None, chunk: int = 20_000):
    """``psi . w`` at every enumerated state, observed with the given task code."""
    S = mdp.num_states
    K = model.spec.num_tasks
    code = np.zeros(K)
    if task_id is not None and task_id < K:
        code[task_id] = 1.0
    out = np.empty((S, mdp.num_actions))
    for lo in range(0, S, chunk):
        ids = np.arange(lo, min(S, lo + chunk))
        obs = np.hstack([env.index.features(ids), np.broadcast_to(code, (len(ids), K))])
        out[ids] = model.q_values(obs, w)
    return out


def policy_table(model, env, mdp, mode="greedy", temperature=1.0, pref=0, task_id=None) -> np.ndarray:
    return I.q_policy(q_table(model, env, mdp, model.w[pref], task_id), mode, temperature)


def _as_table(policy, env, mdp) -> np.ndarray:
    if isinstance(policy, np.ndarray):
        return policy
    if isinstance(policy, Expert):
        return policy.table
    if isinstance(policy, TablePolicy):
        return policy.probs
    from basis_irl.demos import _model_table

    return _model_table(policy, env, mdp)


def policy_return(policy, env, task, task_index=None, mdp=None, episodes=200, seed=0) -> tuple[float, float]:
    """(mean, standard error) of the undiscounted return over ``env.horizon`` steps."""
    if mdp is not None:
        table = _as_table(policy, env, mdp)
        return X.finite_horizon_return(mdp, table, task_index, env.horizon), 0.0
    if isinstance(policy, Expert):
        policy = policy.policy
    return X.expected_return(policy, env, task, episodes=episodes, seed=seed, horizon=env.horizon)


def value_difference(inferred, expert, env, task, episodes=200, seed=0, mdp=None, task_index=None) -> float:
    """Expert return minus inferred-policy return under the true task reward.

    Monte Carlo estimates use independent seeds for the two policies.
    """
    e, _ = policy_return(expert, env, task, task_index, mdp, episodes, child_seed(seed, "expert"))
    i, _ = policy_return(inferred, env, task, task_index, mdp, episodes, child_seed(seed, "inferred"))
    return e - i


def reward_mse(model: M.BasisModel, demos: DemoSet, pref: int = 0) -> float:
    """Mean squared error of ``phi . w`` against the sealed demo rewards."""
    rewards = np.concatenate(demos.sealed_rewards())
    obs, acts = demos.steps()
    pred = model.predict_reward(obs, acts, model.w[pref])
    return float(np.mean((pred - rewards) ** 2))


def behavior_distribution(policy, env, task, episodes=200, seed=0, mdp=None) -> np.ndarray:
    """Fruit-collection proportions per color (FruitGrid) or step fractions per lane."""
    if mdp is not None:
        table = _as_table(policy, env, mdp)
        ind = behavior_tables(env, mdp)
        counts = np.array([X.finite_horizon_return(mdp, table, ind[c], env.horizon) for c in range(len(ind))])
    else:
        counts = _mc_counts(policy, env, task, episodes, seed)
    total = counts.sum()
    if total <= 0:
        warnings.warn("no collections or steps recorded; returning a uniform distribution", stacklevel=2)
        return np.full(len(counts), 1.0 / len(counts))
    return counts / total


def _mc_counts(policy, env, task, episodes, seed) -> np.ndarray:
    if isinstance(policy, Expert):
        policy = policy.policy
    fruit = isinstance(env, FruitGrid)
    counts = np.zeros(env.config.colors if fruit else env.config.lanes)
    for ss in np.random.SeedSequence(seed).spawn(episodes):
        tr = rollout(env, policy, env.horizon, np.random.default_rng(ss), task)
        for st, a in zip(tr.states, tr.actions):
            if fruit:
                c = env.collected_color(st, int(a))
                if c is not None:
                    counts[c] += 1
            elif not env.is_terminal(st):
                counts[st.lane] += 1
    return counts


# -- experiment grid -------------------------------------------------------------


@dataclass
class GridContext:
    """Everything the grid needs that does not vary across its cells."""

    env: object
    mdp: X.TabularMDP | None
    test_task: object
    test_index: int
    expert: Expert
    irl_cfg: I.IRLConfig
    basis: M.BasisModel | None = None
    dqn: M.BasisModel | None = None
    irl_pretrained: M.BasisModel | None = None
    episodes: int = 200
    env_name: str = "fruitgrid"


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def cell(self, variant: str, n: int) -> list[dict]:
        return [r for r in self.rows if r["variant"] == variant and r["N_demos"] == n]

    def mean(self, variant: str, n: int, key: str = "value_difference") -> float:
        return float(np.mean([r[key] for r in self.cell(variant, n)]))

    def std(self, variant: str, n: int, key: str = "value_difference") -> float:
        return float(np.std([r[key] for r in self.cell(variant, n)]))


def _fresh_model(ctx: GridContext, variant: str, seed: int) -> M.IRLModel:
    if variant in ("basis", "basis_unfrozen_phi"):
        if ctx.basis is None:
            raise ValueError(f"variant {variant} needs a pre-trained basis")
        return I.init_from_checkpoint(ctx.basis)
    if variant == "no_pretraining":
        ref = ctx.basis if ctx.basis is not None else ctx.irl_pretrained
        return I.random_irl_model(ref.spec, np.random.default_rng(child_seed(seed, "random-init")))
    if variant == "no_sf_dqn":
        if ctx.dqn is None:
            raise ValueError("variant no_sf_dqn needs a pre-trained Q-network")
        return I.init_from_checkpoint(ctx.dqn)
    if variant == "irl_pretraining":
        if ctx.irl_pretrained is None:
            raise ValueError("variant irl_pretraining needs a demonstration-pretrained basis")
        return I.init_from_checkpoint(ctx.irl_pretrained)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def run_cell(ctx: GridContext, variant: str, demos: DemoSet, seed: int) -> dict:
    """Train one demonstrator model and measure it."""
    model = _fresh_model(ctx, variant, seed)
    cfg = I.IRLConfig(**{**ctx.irl_cfg.to_dict(), "seed": seed})
    cfg.demo_counts = tuple(cfg.demo_counts)
    if variant == "basis_unfrozen_phi":
        cfg.freeze_phi = False
    dqn = variant == "no_sf_dqn"
    # only the from-scratch variant learns its trunk; pre-trained trunks stay fixed
    scratch = variant == "no_pretraining"
    I.run_irl(model, demos.trajectories, cfg, bc_only=dqn, train_w=not dqn, train_trunk=scratch)
    env, mdp = ctx.env, ctx.mdp
    if mdp is not None:
        inferred = policy_table(model, env, mdp, "greedy")
    else:
        inferred = I.extract_policy(model, "greedy")
    vd = value_difference(inferred, ctx.expert, env, ctx.test_task, ctx.episodes, seed, mdp, ctx.test_index)
    dist = behavior_distribution(inferred, env, ctx.test_task, ctx.episodes, child_seed(seed, "dist"), mdp)
    mse = float("nan") if dqn else reward_mse(model, demos)
    return {
        "variant": variant,
        "env": ctx.env_name,
        "N_demos": len(demos),
        "seed": seed,
        "value_difference": vd,
        "reward_mse": mse,
        "dist": dist,
    }


def run_experiment_grid(ctx: GridContext, variants, demo_counts, seeds, progress=None) -> MetricsReport:
    """Every (variant, N, seed) cell. Demo sets for one seed are nested prefixes
    of a single draw, so learning curves compare matched data."""
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    counts = sorted(int(n) for n in demo_counts)
    report = MetricsReport()
    t0 = time.time()
    for seed in seeds:
        pool = sample_demos(ctx.expert, ctx.env, counts[-1], seed=child_seed(seed, "demos"))
        for n in counts:
            demos = pool.subset(n)
            for v in variants:
                row = run_cell(ctx, v, demos, seed)
                report.rows.append(row)
                if progress is not None:
                    progress(row)
    report.rows.sort(key=lambda r: (VARIANTS.index(r["variant"]), r["N_demos"], r["seed"]))
    report.metadata = {
        "returns": "undiscounted, horizon %d" % ctx.env.horizon,
        "evaluation": "exact" if ctx.mdp is not None else f"monte carlo, {ctx.episodes} episodes",
        "expert_return": ctx.expert.reference_return,
        "seconds": round(time.time() - t0, 1),
    }
    return report


def report_columns(report: MetricsReport) -> list[str]:
    k = max((len(r["dist"]) for r in report.rows), default=0)
    return ["variant", "env", "N_demos", "seed", "value_difference", "reward_mse"] + [f"dist_{i}" for i in range(k)]


def write_report(report: MetricsReport, path: str | Path) -> None:
    """One row per grid cell; reals with 9 significant digits."""
    cols = report_columns(report)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in report.rows:
            w.writerow(
                [r["variant"], r["env"], r["N_demos"], r["seed"], f"{r['value_difference']:.9g}", f"{r['reward_mse']:.9g}"]
                + [f"{x:.9g}" for x in r["dist"]]
            )


def read_report(path: str | Path) -> MetricsReport:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            dist = np.array([float(v) for k, v in rec.items() if k.startswith("dist_")])
            rows.append(
                {
                    "variant": rec["variant"],
                    "env": rec["env"],
                    "N_demos": int(rec["N_demos"]),
                    "seed": int(rec["seed"]),
                    "value_difference": float(rec["value_difference"]),
                    "reward_mse": float(rec["reward_mse"]),
                    "dist": dist,
                }
            )
    return MetricsReport(rows)


def summarize(report: MetricsReport) -> list[dict]:
    """Mean and standard deviation over seeds per (variant, N)."""
    out = []
    keys = sorted({(r["variant"], r["N_demos"]) for r in report.rows}, key=lambda k: (VARIANTS.index(k[0]), k[1]))
    for v, n in keys:
        cell = report.cell(v, n)
        vd = np.array([r["value_difference"] for r in cell])
        mse = np.array([r["reward_mse"] for r in cell])
        dist = np.mean([r["dist"] for r in cell], axis=0)
        out.append(
            {
                "variant": v,
                "N_demos": n,
                "seeds": len(cell),
                "vd_mean": vd.mean(),
                "vd_std": vd.std(),
                "mse_mean": mse.mean(),
                "mse_std": mse.std(),
                "dist": dist,
            }
        )
    return out


def write_summary(report: MetricsReport, path: str | Path) -> None:
    rows = summarize(report)
    k = len(rows[0]["dist"]) if rows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "N_demos", "seeds", "vd_mean", "vd_std", "mse_mean", "mse_std"] + [f"dist_{i}" for i in range(k)])
        for r in rows:
            w.writerow(
                [r["variant"], r["N_demos"], r["seeds"]]
                + [f"{r[c]:.9g}" for c in ("vd_mean", "vd_std", "mse_mean", "mse_std")]
                + [f"{x:.9g}" for x in r["dist"]]
            )


def plot_report(report: MetricsReport, out_dir: str | Path) -> list[Path]:
    """Value-difference and reward-MSE curves plus distribution bars (PNG)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    rows = summarize(report)
    variants = [v for v in VARIANTS if any(r["variant"] == v for r in rows)]
    paths = []
    for key, label, fname in (("vd", "value difference", "value_difference.png"), ("mse", "reward MSE", "reward_mse.png")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for v in variants:
            rs = [r for r in rows if r["variant"] == v and np.isfinite(r[f"{key}_mean"])]
            if not rs:
                continue
            n = [r["N_demos"] for r in rs]
            m = np.array([r[f"{key}_mean"] for r in rs])
            s = np.array([r[f"{key}_std"] for r in rs])
            ax.plot(n, m, marker="o", label=v)
            ax.fill_between(n, m - s, m + s, alpha=0.2)
        ax.set_xscale("log")
        ax.set_xlabel("demonstrations")
        ax.set_ylabel(label)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out_dir / fname, dpi=100)
        plt.close(fig)
        paths.append(out_dir / fname)
    top = max((r["N_demos"] for r in rows), default=None)
    if top is not None:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        sel = [r for r in rows if r["N_demos"] == top]
        k = len(sel[0]["dist"])
        width = 0.8 / len(sel)
        for j, r in enumerate(sel):
            ax.bar(np.arange(k) + j * width, r["dist"], width, label=r["variant"])
        ax.set_xticks(np.arange(k) + 0.4 - width / 2)
        ax.set_xticklabels([f"dist_{i}" for i in range(k)])
        ax.set_ylabel(f"share at N={top}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out_dir / "distribution.png", dpi=100)
        plt.close(fig)
        paths.append(out_dir / "distribution.png")
    return paths
