"""Run configuration: a TOML document with sections [env], [pretrain], [irl],
[expert] and [eval] plus a top-level root ``seed``.

Every section maps onto a dataclass; unknown keys are errors. ``load_config``
materialises every default, and ``dump_config`` writes the resolved document
so that a run can be repeated from its own output directory.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from basis_irl.envs import ENV_KINDS, FruitGridConfig, LaneWorldConfig
from basis_irl.evaluation import VARIANTS
from basis_irl.irl import IRLConfig
from basis_irl.pretrain import PretrainConfig


class ConfigError(ValueError):
    pass


# the small FruitGrid every default points at
DESK_FRUITGRID = {
    "grid_size": 5,
    "colors": 3,
    "fruits_per_color": 1,
    "horizon": 30,
    "respawn": True,
    "egocentric": True,
}
_ENV_CONFIGS = {"fruitgrid": FruitGridConfig, "laneworld": LaneWorldConfig}


@dataclass
class EnvSection:
    kind: str = "fruitgrid"
    max_states: int = 400_000
    task_seed: int = 0
    params: dict = field(default_factory=lambda: dict(DESK_FRUITGRID))

    def validate(self) -> None:
        if self.kind not in ENV_KINDS:
            raise ConfigError(f"env.kind must be one of {ENV_KINDS}, got {self.kind!r}")
        if self.max_states < 1:
            raise ConfigError("env.max_states must be >= 1")
        allowed = {f.name for f in fields(_ENV_CONFIGS[self.kind])}
        unknown = set(self.params) - allowed
        if unknown:
            raise ConfigError(f"unknown [env] keys for {self.kind}: {sorted(unknown)}")
        try:
            cfg = _ENV_CONFIGS[self.kind](**self.params)
            cfg.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[env]: {exc}") from exc


@dataclass
class ExpertSection:
    mode: str = "exact"
    temperature: float = 0.05
    greedy: bool = False
    demos: int = 1000
    tol: float = 1e-6
    learned_iterations: int = 3000

    def validate(self) -> None:
        if self.mode not in ("exact", "learned"):
            raise ConfigError("expert.mode must be 'exact' or 'learned'")
        if self.temperature <= 0 or self.tol <= 0:
            raise ConfigError("expert.temperature and expert.tol must be positive")
        if self.demos < 1 or self.learned_iterations < 1:
            raise ConfigError("expert.demos and expert.learned_iterations must be >= 1")


@dataclass
class EvalSection:
    variants: tuple = ("basis", "no_pretraining", "no_sf_dqn")
    demo_counts: tuple = (10, 30, 100, 300)
    seeds: tuple = (0, 1, 2, 3, 4)
    episodes: int = 200
    exact: bool = True
    dqn_lr: float = 1e-3
    dqn_iterations: int = 2500
    irl_pretrain_demos: int = 300
    irl_pretrain_steps: int = 20_000

    def validate(self) -> None:
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad or not self.variants:
            raise ConfigError(f"eval.variants must be a non-empty subset of {VARIANTS}; bad: {bad}")
        if not self.demo_counts or any(int(n) < 1 for n in self.demo_counts):
            raise ConfigError("eval.demo_counts must be positive integers")
        if not self.seeds:
            raise ConfigError("eval.seeds must not be empty")
        if self.episodes < 1 or self.dqn_iterations < 1 or self.irl_pretrain_demos < 1 or self.irl_pretrain_steps < 1:
            raise ConfigError("eval episode, iteration, demo and step counts must be >= 1")
        if self.dqn_lr <= 0:
            raise ConfigError("eval.dqn_lr must be positive")


def desk_pretrain() -> PretrainConfig:
    return PretrainConfig(lr=1e-4, total_iterations=4000, trunk_hidden=(64,))


def desk_irl() -> IRLConfig:
    return IRLConfig(lr=3e-5, epochs=50, min_steps=4000)


@dataclass
class RunConfig:
    seed: int = 0
    env: EnvSection = field(default_factory=EnvSection)
    pretrain: PretrainConfig = field(default_factory=desk_pretrain)
    irl: IRLConfig = field(default_factory=desk_irl)
    expert: ExpertSection = field(default_factory=ExpertSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.env.validate()
        self.expert.validate()
        self.eval.validate()
        for name in ("pretrain", "irl"):
            try:
                getattr(self, name).validate()
            except ValueError as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        if self.pretrain.env != self.env.kind:
            raise ConfigError(f"pretrain.env ({self.pretrain.env}) differs from env.kind ({self.env.kind})")

    def with_seed(self, seed: int) -> "RunConfig":
        """Root seed propagated into every section that draws randomness."""
        self.seed = int(seed)
        self.pretrain.seed = self.seed
        self.irl.seed = self.seed
        return self

    def to_dict(self) -> dict:
        env = {"kind": self.env.kind, "max_states": self.env.max_states, "task_seed": self.env.task_seed}
        env.update(self.env.params)
        pre = self.pretrain.to_dict()
        irl = self.irl.to_dict()
        del pre["seed"], irl["seed"]
        ev = asdict(self.eval)
        for k in ("variants", "demo_counts", "seeds"):
            ev[k] = list(ev[k])
        return {"seed": self.seed, "env": env, "pretrain": pre, "irl": irl, "expert": asdict(self.expert), "eval": ev}


_TUPLES = {
    "pretrain": ("trunk_hidden", "head_hidden"),
    "irl": ("demo_counts",),
    "eval": ("variants", "demo_counts", "seeds"),
}


def _section(cls, name: str, values: dict, base):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    if "seed" in values:
        raise ConfigError(f"[{name}] may not set a seed; use the top-level seed")
    known = {f.name for f in fields(cls)} - {"seed"}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown [{name}] keys: {sorted(unknown)}")
    merged = {**asdict(base), **values}
    for key in _TUPLES.get(name, ()):
        merged[key] = tuple(merged[key])
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    unknown = set(doc) - {"seed", "env", "pretrain", "irl", "expert", "eval"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = RunConfig()
    env = dict(doc.get("env", {}))
    kind = env.pop("kind", "fruitgrid")
    max_states = env.pop("max_states", cfg.env.max_states)
    task_seed = env.pop("task_seed", cfg.env.task_seed)
    params = {**(DESK_FRUITGRID if kind == "fruitgrid" else {}), **env}
    cfg.env = EnvSection(kind, max_states, task_seed, params)
    pre = dict(doc.get("pretrain", {}))
    pre.setdefault("env", kind)
    cfg.pretrain = _section(PretrainConfig, "pretrain", pre, cfg.pretrain)
    cfg.irl = _section(IRLConfig, "irl", doc.get("irl", {}), cfg.irl)
    cfg.expert = _section(ExpertSection, "expert", doc.get("expert", {}), cfg.expert)
    cfg.eval = _section(EvalSection, "eval", doc.get("eval", {}), cfg.eval)
    cfg.with_seed(doc.get("seed", 0))
    cfg.validate()
    return cfg


def load_config(path: str | Path | None = None) -> RunConfig:
    """Parse and validate ``path``; ``None`` gives the defaults."""
    if path is None:
        return from_dict({})
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(doc)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(tomli_w.dumps(cfg.to_dict()))
