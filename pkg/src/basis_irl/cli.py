"""Command-line driver.

    basis-irl pretrain      --config run.toml --out runs/a
    basis-irl expert        --config run.toml --out runs/a
    basis-irl gen-demos     --config run.toml --out runs/a --expert runs/a/expert.npz
    basis-irl irl           --config run.toml --out runs/a --checkpoint runs/a/basis.ckpt --demos runs/a/demos.txt
    basis-irl eval          --config run.toml --out runs/a --checkpoint runs/a/irl.ckpt --expert runs/a/expert.npz
    basis-irl eval --grid   --config run.toml --out runs/a --checkpoint runs/a/basis.ckpt --expert runs/a/expert.npz
    basis-irl report        --out runs/a --report runs/a/report.csv
    basis-irl oracle-check

Exit codes: 0 success, 2 configuration error, 3 missing or unreadable input,
4 training diverged, 5 oracle failure or corrupted checkpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from basis_irl import checkpoint as C
from basis_irl import config as CF
from basis_irl import demos as D
from basis_irl import evaluation as E
from basis_irl import irl as I
from basis_irl import oracle
from basis_irl import pretrain as P
from basis_irl.envs import enumerate_tabular, make_env, make_task_suite
from basis_irl.mdp import ConvergenceError, TablePolicy
from basis_irl.nn import DivergenceError
from basis_irl.seeding import child_seed

log = logging.getLogger("basis_irl")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_DIVERGED, EXIT_ORACLE = 0, 2, 3, 4, 5


class InputError(Exception):
    pass


class OracleFailure(Exception):
    pass


# -- shared setup -----------------------------------------------------------------


class Setup:
    """Environment, task suite and (when enabled) its exact tabular form."""

    def __init__(self, cfg: CF.RunConfig, exact: bool | None = None):
        self.cfg = cfg
        self.env = make_env(cfg.env.kind, cfg.pretrain.K, **cfg.env.params)
        self.tasks, self.test = make_task_suite(self.env, cfg.pretrain.K, cfg.env.task_seed)
        self.test_index = len(self.tasks)
        exact = cfg.eval.exact if exact is None else exact
        self.mdp = None
        if exact:
            self.mdp = enumerate_tabular(self.env, self.tasks + [self.test], cfg.pretrain.gamma, cfg.env.max_states)

    def env_factory(self, num_tasks: int):
        return make_env(self.cfg.env.kind, num_tasks, **self.cfg.env.params)


def _need(path: str | None, what: str) -> Path:
    if path is None:
        raise InputError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} file not found: {p}")
    return p


def _load_ckpt(path: str | None, what: str = "checkpoint"):
    return C.load_checkpoint(_need(path, what))


def save_expert(path: Path, expert: D.Expert, setup: Setup) -> None:
    np.savez_compressed(
        path,
        table=expert.table,
        reference_return=expert.reference_return,
        mode=expert.mode,
        task_id=expert.task.id,
        env_hash=D.env_hash(setup.env),
    )


def load_expert(path: str | None, setup: Setup) -> D.Expert:
    p = _need(path, "expert")
    try:
        with np.load(p) as z:
            table, ref, mode, h = z["table"], float(z["reference_return"]), str(z["mode"]), str(z["env_hash"])
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read expert file {p}: {exc}") from exc
    if h != D.env_hash(setup.env):
        raise InputError(f"expert {p} was built for a different environment")
    if setup.mdp is not None and table.shape != (setup.mdp.num_states, setup.mdp.num_actions):
        raise InputError(f"expert table shape {table.shape} does not match the environment")
    return D.Expert(TablePolicy(table), ref, mode, setup.test, table)


def _read_demos(path: str | None, with_rewards: bool = False) -> D.DemoSet:
    p = _need(path, "demos")
    try:
        return D.read_demos(p, with_rewards=with_rewards)
    except (D.DemoFormatError, OSError) as exc:
        raise InputError(str(exc)) from exc


def _progress(quiet: bool, every: int = 500):
    if quiet:
        return None

    def show(it, row, model):
        if (it + 1) % every == 0:
            log.info("iteration %d  return %.3f  loss_q %.4g", it + 1, row["return"], row["loss_q"])

    return show


# -- commands ------------------------------------------------------------------------


def cmd_pretrain(args, cfg: CF.RunConfig, out: Path) -> int:
    setup = Setup(cfg, exact=False)
    pcfg = cfg.pretrain
    name = "basis"
    if args.q_only:
        pcfg = P.PretrainConfig(**{**pcfg.to_dict(), "lr": cfg.eval.dqn_lr, "total_iterations": cfg.eval.dqn_iterations})
        name = "dqn"
    res = P.run_pretraining(
        pcfg, setup.env, setup.tasks, log_path=out / f"{name}_log.csv", progress=_progress(args.quiet), q_only=args.q_only
    )
    meta = {"kind": name, "seed": cfg.seed, "env_hash": D.env_hash(setup.env)}
    if not args.q_only and res.holdout is not None and len(res.holdout):
        meta["holdout_reward_loss"] = P.holdout_reward_loss(res.model, res.holdout)
        log.info("held-out reward loss %.3g", meta["holdout_reward_loss"])
    C.save_checkpoint(out / f"{name}.ckpt", res.model, meta)
    log.info("wrote %s", out / f"{name}.ckpt")
    return EXIT_OK


def build_expert(setup: Setup) -> D.Expert:
    ec = setup.cfg.expert
    learned = None
    if ec.mode == "learned":
        lcfg = P.PretrainConfig(
            **{**setup.cfg.pretrain.to_dict(), "total_iterations": ec.learned_iterations, "lr": setup.cfg.eval.dqn_lr}
        )
        learned = D.train_learned_expert(setup.env_factory, setup.test, lcfg, ec.greedy, ec.temperature)
    return D.make_expert(
        setup.env, setup.mdp, setup.test_index, setup.test, ec.mode, ec.temperature, ec.greedy, ec.tol, learned
    )


def cmd_expert(args, cfg: CF.RunConfig, out: Path) -> int:
    setup = Setup(cfg, exact=True)
    expert = build_expert(setup)
    save_expert(out / "expert.npz", expert, setup)
    log.info("expert (%s) reference return %.4f", expert.mode, expert.reference_return)
    return EXIT_OK


def cmd_gen_demos(args, cfg: CF.RunConfig, out: Path) -> int:
    setup = Setup(cfg, exact=True)
    expert = load_expert(args.expert, setup)
    n = args.n or cfg.expert.demos
    demos = D.sample_demos(expert, setup.env, n, seed=child_seed(cfg.seed, "demos"))
    D.write_demos(out / "demos.txt", demos)
    log.info("wrote %d trajectories to %s", n, out / "demos.txt")
    return EXIT_OK


def cmd_irl(args, cfg: CF.RunConfig, out: Path) -> int:
    basis, _ = _load_ckpt(args.checkpoint)
    demos = _read_demos(args.demos)
    setup = Setup(cfg, exact=False)
    if demos.env_hash != D.env_hash(setup.env):
        raise InputError("demonstrations were recorded in a different environment")
    if args.n:
        demos = demos.subset(args.n)
    model = I.init_from_checkpoint(basis)
    res = I.run_irl(model, demos.trajectories, cfg.irl, log_path=out / "irl_log.csv")
    meta = {"kind": "irl", "seed": cfg.seed, "N_demos": len(demos), "best_step": res.best_step}
    C.save_checkpoint(out / "irl.ckpt", res.model, meta)
    log.info("wrote %s (best step %s)", out / "irl.ckpt", res.best_step)
    return EXIT_OK


def _write_report(report: E.MetricsReport, out: Path, plots: bool = True) -> None:
    E.write_report(report, out / "report.csv")
    E.write_summary(report, out / "summary.csv")
    meta = {k: v for k, v in report.metadata.items() if k != "seconds"}
    (out / "report_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if plots:
        E.plot_report(report, out)


def cmd_eval(args, cfg: CF.RunConfig, out: Path) -> int:
    if args.grid:
        return _eval_grid(args, cfg, out)
    model, meta = _load_ckpt(args.checkpoint)
    setup = Setup(cfg)
    expert = load_expert(args.expert, setup)
    demos = _read_demos(args.demos, with_rewards=True) if args.demos else None
    if setup.mdp is not None:
        inferred = E.policy_table(model, setup.env, setup.mdp, "greedy")
    else:
        inferred = I.extract_policy(model, "greedy")
    ep = cfg.eval.episodes
    vd = E.value_difference(inferred, expert, setup.env, setup.test, ep, cfg.seed, setup.mdp, setup.test_index)
    dist = E.behavior_distribution(inferred, setup.env, setup.test, ep, child_seed(cfg.seed, "dist"), setup.mdp)
    mse = E.reward_mse(model, demos) if demos is not None and demos.has_rewards else float("nan")
    row = {
        "variant": "basis",
        "env": cfg.env.kind,
        "N_demos": int(meta.get("N_demos", 0)),
        "seed": cfg.seed,
        "value_difference": vd,
        "reward_mse": mse,
        "dist": dist,
    }
    report = E.MetricsReport([row], {"expert_return": expert.reference_return, "returns": f"undiscounted, horizon {setup.env.horizon}"})
    _write_report(report, out, plots=False)
    log.info("value difference %.4f  reward mse %.4g  distribution %s", vd, mse, np.round(dist, 3))
    return EXIT_OK


def _pretrain_demos(setup: Setup, per_task: int) -> list:
    """Soft-optimal demonstrations of each pre-training task."""
    cfg = setup.cfg
    out = []
    for k, task in enumerate(setup.tasks):
        ex = D.make_expert(setup.env, setup.mdp, k, task, "exact", cfg.expert.temperature, tol=cfg.expert.tol)
        out.append(D.sample_demos(ex, setup.env, per_task, seed=child_seed(cfg.seed, "pretrain-demos", k)).trajectories)
    return out


def _eval_grid(args, cfg: CF.RunConfig, out: Path) -> int:
    variants = cfg.eval.variants
    setup = Setup(cfg)
    expert = load_expert(args.expert, setup)
    basis = dqn = irl_pre = None
    if any(v in ("basis", "basis_unfrozen_phi", "no_pretraining") for v in variants):
        basis, _ = _load_ckpt(args.checkpoint)
    if "no_sf_dqn" in variants:
        if args.dqn:
            dqn, _ = _load_ckpt(args.dqn, "dqn")
        else:
            log.info("training the Q-network baseline")
            pcfg = P.PretrainConfig(
                **{**cfg.pretrain.to_dict(), "lr": cfg.eval.dqn_lr, "total_iterations": cfg.eval.dqn_iterations}
            )
            dqn = P.run_pretraining(pcfg, setup.env, setup.tasks, q_only=True).model
    if "irl_pretraining" in variants:
        if setup.mdp is None:
            raise CF.ConfigError("the irl_pretraining baseline needs eval.exact = true")
        log.info("pre-training from demonstrations of the training tasks")
        spec = P.model_spec_for(setup.env, cfg.pretrain)
        demos = _pretrain_demos(setup, cfg.eval.irl_pretrain_demos)
        irl_pre = I.run_irl_pretraining(spec, demos, cfg.irl, cfg.eval.irl_pretrain_steps, cfg.seed)
    ctx = E.GridContext(
        setup.env, setup.mdp, setup.test, setup.test_index, expert, cfg.irl,
        basis=basis, dqn=dqn, irl_pretrained=irl_pre, episodes=cfg.eval.episodes, env_name=cfg.env.kind,
    )  # fmt: skip

    def show(row):
        if not args.quiet:
            log.info(
                "%s N=%d seed=%d  vd %.3f  mse %.4f",
                row["variant"], row["N_demos"], row["seed"], row["value_difference"], row["reward_mse"],
            )  # fmt: skip

    seeds = [cfg.seed + s for s in cfg.eval.seeds]
    report = E.run_experiment_grid(ctx, variants, cfg.eval.demo_counts, seeds, show)
    _write_report(report, out)
    for s in E.summarize(report):
        log.info("%-20s N=%-5d vd %.3f +- %.3f", s["variant"], s["N_demos"], s["vd_mean"], s["vd_std"])
    return EXIT_OK


def cmd_report(args, cfg: CF.RunConfig, out: Path) -> int:
    p = _need(args.report, "report")
    try:
        report = E.read_report(p)
    except (KeyError, ValueError) as exc:
        raise InputError(f"cannot parse {p}: {exc}") from exc
    E.write_summary(report, out / "summary.csv")
    for path in E.plot_report(report, out):
        log.info("wrote %s", path)
    return EXIT_OK


def cmd_oracle_check(args, cfg: CF.RunConfig, out: Path) -> int:
    if args.checkpoint:
        _load_ckpt(args.checkpoint)
        log.info("checkpoint %s verified", args.checkpoint)
    results = oracle.run_suite(cfg.seed, cfg.expert.temperature)
    lines = [r.line() for r in results]
    (out / "oracle.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise OracleFailure(f"{len(failed)} oracle checks failed: {', '.join(failed)}")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "expert": cmd_expert,
    "gen-demos": cmd_gen_demos,
    "irl": cmd_irl,
    "eval": cmd_eval,
    "report": cmd_report,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="basis-irl", description="Successor-feature IRL with multi-task pre-training")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration (defaults are used when omitted)")
    common.add_argument("--out", default="out", help="output directory (created if missing)")
    common.add_argument("--seed", type=int, help="root seed; overrides the configuration")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="multi-task RL pre-training of the basis")
    p.add_argument("--q-only", action="store_true", help="train the plain Q-network baseline instead")
    sub.add_parser("expert", parents=[common], help="build the demonstrator for the held-out task")
    p = sub.add_parser("gen-demos", parents=[common], help="sample reward-free demonstrations")
    p.add_argument("--expert", help="expert.npz written by the expert command")
    p.add_argument("-n", type=int, help="number of trajectories (default: expert.demos)")
    p = sub.add_parser("irl", parents=[common], help="infer the demonstrator's preference and successor features")
    p.add_argument("--checkpoint", help="pre-trained basis checkpoint")
    p.add_argument("--demos", help="demonstration file")
    p.add_argument("-n", type=int, help="use only the first n trajectories")
    p = sub.add_parser("eval", parents=[common], help="evaluate an inferred model or run the experiment grid")
    p.add_argument("--checkpoint", help="IRL checkpoint, or the basis checkpoint with --grid")
    p.add_argument("--expert", help="expert.npz")
    p.add_argument("--demos", help="demonstration file with its sealed rewards (for reward MSE)")
    p.add_argument("--grid", action="store_true", help="run every variant x demo count x seed cell")
    p.add_argument("--dqn", help="pre-trained Q-network checkpoint for the no_sf_dqn variant")
    p = sub.add_parser("report", parents=[common], help="render a report.csv into a summary and plots")
    p.add_argument("--report", help="report.csv to render")
    p = sub.add_parser("oracle-check", parents=[common], help="run the exact-answer self-checks")
    p.add_argument("--checkpoint", help="also verify this checkpoint file")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s", force=True
    )
    try:
        cfg = CF.load_config(args.config) if args.config is None or Path(args.config).is_file() else None
        if cfg is None:
            raise InputError(f"config file not found: {args.config}")
        if args.seed is not None:
            cfg.with_seed(args.seed)
            cfg.validate()
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        CF.dump_config(cfg, out / "config.toml")
        return COMMANDS[args.command](args, cfg, out)
    except CF.ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except C.CheckpointError as exc:
        log.error("checkpoint rejected: %s", exc)
        return EXIT_ORACLE
    except InputError as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    except (DivergenceError, ConvergenceError) as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except OracleFailure as exc:
        log.error("%s", exc)
        return EXIT_ORACLE


if __name__ == "__main__":
    sys.exit(main())
