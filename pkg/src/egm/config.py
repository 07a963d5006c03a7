"""Run configuration: TOML sections mapped onto the library's config dataclasses.

Unknown keys are rejected with their dotted path; bound violations surface
as :class:`ConfigError` naming the section. Only ``EGM_OUT_DIR`` and
``EGM_WORKERS`` may override values from the environment.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .env import ChainModel, DrConfig, ObsConfig, RewardConfig
from .errors import ConfigError, EgmError
from .sampler import CompositeErrorWeights, CurriculumConfig
from .trainer import DistillConfig, EnvConfig, PolicyConfig, PpoConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int
    manifest: str
    out_dir: str = "runs/default"
    workers: int = 1
    sampler: str = "bccas"  # or "uniform"
    eval_manifest: str = ""
    eval_seeds: int = 3
    curriculum: CurriculumConfig = CurriculumConfig()
    weights: CompositeErrorWeights = CompositeErrorWeights()
    policy: PolicyConfig = PolicyConfig()
    env: EnvConfig = EnvConfig()
    ppo1: PpoConfig = PpoConfig()
    ppo2: PpoConfig = PpoConfig()
    distill: DistillConfig = DistillConfig()
    extra: dict = field(default_factory=dict, compare=False)


# TOML section -> RunConfig attribute
SECTIONS = {
    "curriculum": "curriculum",
    "weights": "weights",
    "policy": "policy",
    "ppo.stage1": "ppo1",
    "ppo.stage2": "ppo2",
    "distill": "distill",
}
TOP_KEYS = ("seed", "manifest", "out_dir", "workers", "sampler", "eval_manifest", "eval_seeds")


def _coerce(path, default, value):
    if isinstance(value, list):
        return tuple(_coerce(path, None, v) for v in value)
    if isinstance(default, bool) or isinstance(value, bool):
        if not isinstance(value, bool) or (default is not None and not isinstance(default, bool)):
            raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if isinstance(default, int) and isinstance(value, float):
        if value != int(value):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _build(cls, section, table, base=None):
    base = base if base is not None else cls()
    if not isinstance(table, dict):
        raise ConfigError(f"{section}: expected a table")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in names:
            raise ConfigError(f"unknown key '{section}.{key}'")
        kwargs[key] = _coerce(f"{section}.{key}", getattr(base, key), value)
    try:
        return dataclasses.replace(base, **kwargs)
    except (EgmError, TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


PER_JOINT = ("link_lengths", "inertias", "damping", "torque_limits", "kp", "kd")


def _chain_base(table):
    """Default chain; per-joint defaults collapse to scalars when the joint count changes."""
    base = EnvConfig().chain
    if isinstance(table, dict) and "n_joints" in table:
        scalars = {f: getattr(base, f)[0] for f in PER_JOINT}
        n = int(table["n_joints"])
        base = dataclasses.replace(base, n_joints=n, n_upper=min(base.n_upper, max(n - 1, 0)), **scalars)
    return base


def _split(doc):
    """Flatten nested tables into ``{"a.b": table}`` for the known section names."""
    out = {}
    for key, value in doc.items():
        if key in ("ppo", "env") and isinstance(value, dict):
            for sub, table in value.items():
                if isinstance(table, dict):
                    out[f"{key}.{sub}"] = table
                else:
                    out.setdefault(key, {})[sub] = table
        else:
            out[key] = value
    return out


def from_dict(doc, base_dir=Path("."), check_paths=True, environ=None):
    environ = os.environ if environ is None else environ
    flat = _split(doc)
    top = {}
    for key in list(flat):
        if key in TOP_KEYS:
            top[key] = flat.pop(key)
    for key in ("seed", "manifest"):
        if key not in top:
            raise ConfigError(f"missing required key '{key}'")
    defaults = RunConfig(seed=0, manifest="")
    kwargs = {k: _coerce(k, getattr(defaults, k), v) for k, v in top.items()}
    if "EGM_OUT_DIR" in environ:
        kwargs["out_dir"] = environ["EGM_OUT_DIR"]
    if "EGM_WORKERS" in environ:
        kwargs["workers"] = int(environ["EGM_WORKERS"])
    for key in ("manifest", "eval_manifest"):
        if kwargs.get(key):
            kwargs[key] = str((base_dir / kwargs[key]).resolve())
    if not isinstance(kwargs["seed"], int) or kwargs["seed"] < 0:
        raise ConfigError("seed: must be a non-negative integer")
    if kwargs.get("workers", 1) < 1:
        raise ConfigError("workers: must be >= 1")
    if kwargs.get("eval_seeds", 1) < 1:
        raise ConfigError("eval_seeds: must be >= 1")
    if kwargs.get("sampler", "bccas") not in ("bccas", "uniform"):
        raise ConfigError("sampler: must be 'bccas' or 'uniform'")
    for section, attr in SECTIONS.items():
        if section in flat:
            kwargs[attr] = _build(type(getattr(defaults, attr)), section, flat.pop(section))
    chain_table = flat.pop("env.chain", {})
    chain = _build(ChainModel, "env.chain", chain_table, _chain_base(chain_table))
    dr = _build(DrConfig, "env.dr", flat.pop("env.dr", {}), EnvConfig().dr)
    obs = _build(ObsConfig, "env.obs", flat.pop("env.obs", {}), EnvConfig().obs)
    rewards = [_build(RewardConfig, f"env.{name}", flat.pop(f"env.{name}", {}), getattr(EnvConfig(), name))
               for name in ("reward1", "reward2")]
    if "env" in flat:
        bad = next(iter(flat.pop("env")))
        raise ConfigError(f"unknown key 'env.{bad}'")
    kwargs["env"] = EnvConfig(chain, dr, obs, *rewards)
    if flat:
        raise ConfigError(f"unknown key '{next(iter(flat))}'")
    cfg = RunConfig(**kwargs)
    if check_paths:
        for key in ("manifest", "eval_manifest"):
            value = getattr(cfg, key)
            if value and not Path(value).is_file():
                raise ConfigError(f"{key}: file not found: {value}")
    return cfg


def parse_config(path, check_paths=True, environ=None):
    path = Path(path)
    try:
        doc = tomli.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(doc, path.parent, check_paths, environ)


def _plain(obj):
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def to_dict(cfg):
    doc = {k: getattr(cfg, k) for k in TOP_KEYS}
    for section, attr in SECTIONS.items():
        table = {f.name: _plain(getattr(getattr(cfg, attr), f.name))
                 for f in dataclasses.fields(getattr(cfg, attr))}
        head, _, sub = section.partition(".")
        if sub:
            doc.setdefault(head, {})[sub] = table
        else:
            doc[head] = table
    doc["env"] = {name: {f.name: _plain(getattr(part, f.name)) for f in dataclasses.fields(part)}
                  for name, part in (("chain", cfg.env.chain), ("dr", cfg.env.dr), ("obs", cfg.env.obs),
                                       ("reward1", cfg.env.reward1), ("reward2", cfg.env.reward2))}
    return doc


def dump_config(cfg):
    return tomli_w.dumps(to_dict(cfg))


def write_config(cfg, path):
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
    return Path(path)
