"""Run configuration: one JSON document with sections env / agent /
probes / slicing / eval plus a top-level seed.

Unknown keys anywhere are rejected by name. Every command writes the
fully-resolved document next to its outputs so runs are replayable.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .agent import PPOConfig
from .env import EnvConfig
from .errors import ConfigError

SEED_ENV_VAR = "PLANPROBE_SEED"


@dataclass(frozen=True)
class ProbesConfig:
    gamma: float = 0.995
    hidden: int = 64
    learning_rate: float = 1e-3
    mode: str = "stored"  # stored | flow-through

    def validate(self) -> None:
        if not (0 < self.gamma <= 1):
            raise ConfigError("probes.gamma must be in (0, 1]")
        if self.mode not in ("stored", "flow-through"):
            raise ConfigError(f"probes.mode must be 'stored' or 'flow-through', "
                              f"got {self.mode!r}")
        if self.hidden < 1:
            raise ConfigError("probes.hidden must be >= 1")


@dataclass(frozen=True)
class SlicingConfig:
    slice_len: int = 64
    slices_per_batch: int = 8
    staleness_bound: int = 2
    workers: int = 1

    def validate(self) -> None:
        if self.slice_len < 1:
            raise ConfigError("slicing.slice_len must be >= 1")
        if self.slices_per_batch < 1:
            raise ConfigError("slicing.slices_per_batch must be >= 1")
        if self.workers < 1:
            raise ConfigError("slicing.workers must be >= 1")
        if self.staleness_bound < 0:
            raise ConfigError("slicing.staleness_bound must be >= 0")


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 200
    heldout_episodes: int = 200
    debounce: int = 3
    horizon_cap: int = 150
    annotation_horizon: int = 60
    threshold_quantiles: int = 64

    def validate(self) -> None:
        if self.episodes < 1 or self.heldout_episodes < 1:
            raise ConfigError("eval episode counts must be >= 1")
        if self.debounce < 1:
            raise ConfigError("eval.debounce must be >= 1")
        if self.horizon_cap < 1:
            raise ConfigError("eval.horizon_cap must be >= 1")
        if self.threshold_quantiles < 2:
            raise ConfigError("eval.threshold_quantiles must be >= 2")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: PPOConfig = field(default_factory=PPOConfig)
    probes: ProbesConfig = field(default_factory=ProbesConfig)
    slicing: SlicingConfig = field(default_factory=SlicingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.env.validate()
        self.agent.validate()
        self.probes.validate()
        self.slicing.validate()
        self.eval.validate()

    def resolved_dict(self) -> dict:
        return {
            "seed": self.seed,
            "env": self.env.to_dict(),
            "agent": asdict(self.agent),
            "probes": asdict(self.probes),
            "slicing": asdict(self.slicing),
            "eval": asdict(self.eval),
        }


def _section(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section "
                          f"{where!r}")
    return cls(**data)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    known = {"seed", "env", "agent", "probes", "slicing", "eval"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level config key {sorted(unknown)[0]!r}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    for name in ("env", "agent", "probes", "slicing", "eval"):
        if name in doc and not isinstance(doc[name], dict):
            raise ConfigError(f"section {name!r} must be an object")
    env_doc = dict(doc.get("env", {}))
    if "ability_set" in env_doc:
        # resolved configs echo the built-in roster; anything else is a
        # different game and rejected
        if env_doc["ability_set"] != EnvConfig().to_dict()["ability_set"]:
            raise ConfigError("env.ability_set is not configurable")
        env_doc.pop("ability_set")
    cfg = RunConfig(
        seed=seed,
        env=EnvConfig.from_dict(env_doc),
        agent=_section(PPOConfig, doc.get("agent", {}), "agent"),
        probes=_section(ProbesConfig, doc.get("probes", {}), "probes"),
        slicing=_section(SlicingConfig, doc.get("slicing", {}), "slicing"),
        eval=_section(EvalConfig, doc.get("eval", {}), "eval"),
    )
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    cfg = config_from_dict(doc)
    return apply_seed_override(cfg)


def apply_seed_override(cfg: RunConfig) -> RunConfig:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}")
    return RunConfig(seed=seed, env=cfg.env, agent=cfg.agent, probes=cfg.probes,
                     slicing=cfg.slicing, eval=cfg.eval)


def write_resolved_config(cfg: RunConfig, out_dir) -> Path:
    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = cfg.resolved_dict()
    doc["tool_version"] = __version__
    path = out_dir / "config.resolved.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def derive_seed(seed: int, domain: str, index: int = 0) -> int:
    """Stable stream-splitting: independent integer seeds per subsystem."""
    blob = f"{seed}:{domain}:{index}".encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")
