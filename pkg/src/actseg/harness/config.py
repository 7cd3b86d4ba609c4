"""Run configuration: YAML loading, dotted ``key=value`` overrides, validation."""

import copy
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from ..act import ActConfig
from ..datagen import DataConfig, data_config_from_dict

MODES = ("source_only", "target_only_ssl", "uda_branch", "act", "act_no_emd", "joint")


class ConfigError(ValueError):
    """Invalid configuration; raised before any training starts."""


@dataclass
class RunConfig:
    mode: str = "act"
    data: DataConfig = field(default_factory=DataConfig)
    act: ActConfig = field(default_factory=ActConfig)
    runs: int = 5
    master_seed: int = 0
    output_dir: str = "runs/default"
    # a manifest replaces the generated data when set
    manifest: str = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if not isinstance(self.runs, int) or self.runs < 1:
            raise ConfigError(f"runs must be an integer >= 1, got {self.runs!r}")
        if not isinstance(self.master_seed, int) or self.master_seed < 0:
            raise ConfigError(f"master_seed must be a non-negative integer, got {self.master_seed!r}")

    def to_dict(self):
        data = None if self.manifest else _plain(dataclasses.asdict(self.data))
        return {
            "mode": self.mode,
            "runs": self.runs,
            "master_seed": self.master_seed,
            "output_dir": str(self.output_dir),
            "data": {"manifest": str(self.manifest)} if self.manifest else data,
            "act": self.act.to_dict(),
        }

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def default_config_text():
    return resources.files(__package__).joinpath("default.yaml").read_text(encoding="utf-8")


def _set_dotted(tree, key, value):
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
        node = nxt
    node[parts[-1]] = value


def apply_overrides(tree, overrides):
    """Apply ``key=value`` strings; values are parsed as YAML scalars."""
    tree = copy.deepcopy(tree)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from None
        _set_dotted(tree, key.strip(), value)
    return tree


def config_from_dict(tree):
    if not isinstance(tree, dict):
        raise ConfigError("config must be a mapping")
    tree = dict(tree)
    known = {"mode", "runs", "master_seed", "output_dir", "data", "act"}
    unknown = set(tree) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data = dict(tree.pop("data", None) or {})
    act = dict(tree.pop("act", None) or {})
    manifest = data.pop("manifest", None)
    try:
        data_cfg = DataConfig() if manifest else data_config_from_dict(data)
        if manifest and data:
            raise ValueError(f"manifest given together with generator keys {sorted(data)}")
        act_cfg = ActConfig.from_dict(act)
        if act_cfg.total_iterations < 1:
            raise ValueError("act.total_iterations must be >= 1 for an experiment")
        return RunConfig(data=data_cfg, act=act_cfg, manifest=manifest, **tree)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides=None):
    """Read a YAML config (the packaged default when ``path`` is None)."""
    if path is None:
        text, where = default_config_text(), "<default>"
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text, where = p.read_text(encoding="utf-8"), str(p)
    try:
        tree = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return config_from_dict(apply_overrides(tree, overrides))
