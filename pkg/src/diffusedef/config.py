"""Experiment configuration: one INI file with typed sections.

Every key has a default, so an empty file is a valid config. Unknown
sections or keys are rejected to catch typos early.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TaskSection:
    seed: int = 42
    data_dir: str = ""  # external JSONL splits; empty means use the generator
    n_train: int = 2000
    n_valid: int = 250
    n_test: int = 250
    min_words: int = 6
    max_words: int = 16
    min_keywords: int = 1
    max_keywords: int = 1


@dataclass
class ModelSection:
    width: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int = 256
    max_len: int = 32
    dropout: float = 0.1
    epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 1


@dataclass
class AdvSection:
    enabled: bool = True
    inner_steps: int = 5
    step_size: float = 0.01
    norm_bound: float = 0.3


@dataclass
class DiffusionSection:
    T: int = 30
    beta1: float = 1e-4
    betaT: float = 0.02
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 3
    recalibrate_head: bool = False
    recalibrate_epochs: int = 3


@dataclass
class InferenceSection:
    t_prime: int = 5
    k: int = 10
    zero_final_z: bool = True
    noise_at_t_prime: bool = False
    resample: bool = False


@dataclass
class AttackSection:
    rho_max: float = 0.3
    eps_min: float = 0.84
    k_max: int = 50
    attacks: list = field(default_factory=lambda: ["word", "char"])
    n_examples: int = 200
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    neighbors: int = 0


@dataclass
class EvalSection:
    bins: int = 20
    tail_threshold: float = 0.5
    length_buckets: int = 4
    sweep_t_prime: list = field(default_factory=lambda: [1, 3, 5])
    sweep_k: list = field(default_factory=lambda: [1, 10])
    sweep_attack: str = "word"


@dataclass
class RunConfig:
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    adv: AdvSection = field(default_factory=AdvSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def set_seed(self, seed: int):
        """One ``--seed`` reseeds every stage deterministically."""
        self.task.seed = seed
        self.model.seed = seed + 1
        self.diffusion.seed = seed + 3


def _convert(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            v = raw.strip().lower()
            if v not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return v in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [x for x in raw.replace(",", " ").split() if x]
            kind = type(default[0]) if default else str
            return [kind(x) for x in items]
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep case: T and betaT are case-sensitive names
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    cfg = RunConfig()
    known = {f.name for f in fields(cfg)}
    for name in cp.sections():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]")
        section = getattr(cfg, name)
        keys = {f.name for f in fields(section)}
        for key, raw in cp.items(name):
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            setattr(section, key, _convert(raw, getattr(section, key), f"[{name}] {key}"))
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))


def validate(cfg: RunConfig):
    m, d, i, a = cfg.model, cfg.diffusion, cfg.inference, cfg.attack
    if m.width % m.heads:
        raise ConfigError(f"model.width {m.width} not divisible by model.heads {m.heads}")
    if not 0 < d.beta1 <= d.betaT < 1 or d.T < 1:
        raise ConfigError("diffusion schedule needs T >= 1 and 0 < beta1 <= betaT < 1")
    if not 1 <= i.t_prime <= d.T or i.k < 1:
        raise ConfigError(f"inference needs 1 <= t_prime <= {d.T} and k >= 1")
    if not 0 < a.rho_max <= 1 or not 0 <= a.eps_min <= 1 or a.k_max < 1:
        raise ConfigError("attack constraints out of range")
    unknown = set(a.attacks) - {"word", "char"}
    if unknown:
        raise ConfigError(f"unknown attacks {sorted(unknown)}")
    if not a.seeds:
        raise ConfigError("attack.seeds must list at least one seed")
    if cfg.adv.enabled and cfg.adv.inner_steps < 1:
        raise ConfigError("adv.inner_steps must be >= 1")
    bad = [t for t in cfg.eval.sweep_t_prime if not 1 <= t <= d.T]
    if bad:
        raise ConfigError(f"eval.sweep_t_prime values {bad} outside 1..{d.T}")


def dump_config(cfg: RunConfig) -> str:
    """Render back to INI; ``parse_config(dump_config(c)) == c``."""
    lines = []
    for sec, values in cfg.to_dict().items():
        lines.append(f"[{sec}]")
        for k, v in values.items():
            if isinstance(v, list):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
