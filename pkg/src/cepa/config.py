"""Versioned INI experiment configuration with a closed schema.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` and
``;`` start comments. Every section and key is optional (defaults apply) but
unknown ones are rejected. Lists are comma separated; ``layers = all`` scans
every tappable layer. A single ``[experiment] seed`` feeds dataset
generation, poisoning, initialization, batching and defense sampling.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from .attacks import KINDS, AttackSpec
from .core import CepaConfig
from .infer import DEFAULT_THRESHOLD
from .trainer import TrainConfig
from .verify import VerifyConfig

CONFIG_VERSION = 1

# attack settings that differ from the generic defaults at desk scale
DESK_ATTACK_DEFAULTS = {
    "chessboard": {"amplitude": 16.0 / 255.0},
    "warp": {"per_class_poison_count": 120},
}


class ConfigError(ValueError):
    pass


def _ints(text):
    text = text.strip()
    if text.lower() in ("", "none", "all"):
        return None
    return tuple(int(v) for v in text.split(","))


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    path: str = ""
    num_classes: int = 5
    per_class_train: int = 400
    per_class_test: int = 100
    size: int = 16
    jitter: float = 0.1
    noise: float = 0.05
    shift: int = 1
    contrast: float = 1.0
    background: float = 0.25


@dataclass(frozen=True)
class DefenseConfig:
    per_class: int = 10
    threshold: float = DEFAULT_THRESHOLD
    lambda_init: float = CepaConfig.lambda_init
    lambda_factor: float = CepaConfig.lambda_factor
    streak_len: int = CepaConfig.streak_len
    misclass_threshold: float = CepaConfig.misclass_threshold
    stall_window: int = CepaConfig.stall_window
    # desk-scale perturbation step; the library default is CepaConfig.step_size
    step_size: float = 0.1
    max_iterations: int = CepaConfig.max_iterations
    layers: tuple = None

    def cepa(self):
        names = {f.name for f in fields(CepaConfig)}
        return CepaConfig(**{k: getattr(self, k) for k in names})


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "patch"
    target_class: int = 4
    source_classes: tuple = None
    per_class_poison_count: int = None
    patch_size: int = 3
    patch_location: tuple = None
    amplitude: float = None
    alpha: float = 0.15
    warp_grid: int = 4
    warp_strength: float = 0.5

    def spec(self, seed):
        """The AttackSpec, or None for a clean experiment."""
        if self.kind == "none":
            return None
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for k, v in DESK_ATTACK_DEFAULTS.get(self.kind, {}).items():
            if kw[k] is None:
                kw[k] = v
        kw = {k: v for k, v in kw.items() if v is not None}
        return AttackSpec(seed=seed, **kw)


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    out: str = "runs/experiment"
    threads: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)

    @property
    def attack_spec(self):
        return self.attack.spec(self.seed)

    @property
    def train_config(self):
        return replace(self.training, seed=self.seed)

    def with_overrides(self, seed=None, out=None, threads=None):
        kw = {k: v for k, v in (("seed", seed), ("out", out), ("threads", threads)) if v is not None}
        return validate(replace(self, **kw))


_SECTIONS = {
    "dataset": DatasetConfig,
    "attack": AttackConfig,
    "training": TrainConfig,
    "defense": DefenseConfig,
    "verify": VerifyConfig,
}
_EXPERIMENT_KEYS = {"version": int, "seed": int, "out": str, "threads": int}
# the training seed is the global seed; it is not a separate key
_HIDDEN = {"training": {"seed"}}
_TUPLE_KEYS = {"layers", "source_classes", "patch_location"}


def _keys(section):
    hidden = _HIDDEN.get(section, set())
    return [f for f in fields(_SECTIONS[section]) if f.name not in hidden]


def _convert(section, f, text):
    if f.name in _TUPLE_KEYS:
        return _ints(text)
    default = f.default
    kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str, "bool": bool}.get(
        f.type, type(default) if default is not None else str)
    if isinstance(default, bool) or kind is bool:
        return _bool(text)
    if text.strip().lower() == "none" and default is None:
        return None
    if kind is int or isinstance(default, int):
        return int(text)
    if kind is float or isinstance(default, float):
        return float(text)
    return text.strip()


def validate(cfg):
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg.version}; expected {CONFIG_VERSION}")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.dataset.kind not in ("synthetic", "cifar10"):
        raise ConfigError(f"dataset kind must be 'synthetic' or 'cifar10', got {cfg.dataset.kind!r}")
    if cfg.dataset.kind == "cifar10" and not cfg.dataset.path:
        raise ConfigError("dataset kind cifar10 needs a path")
    if cfg.attack.kind not in KINDS:
        raise ConfigError(f"attack kind must be one of {KINDS}, got {cfg.attack.kind!r}")
    if cfg.defense.per_class < 1:
        raise ConfigError("defense per_class must be >= 1")
    if cfg.defense.threshold <= 0:
        raise ConfigError("detection threshold must be positive")
    try:
        cfg.defense.cepa()
        cfg.attack.spec(cfg.seed)
        replace(cfg.training)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def parse(text):
    """Parse INI text into an ExperimentConfig, rejecting unknown sections and keys."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = set(cp.sections()) - set(_SECTIONS) - {"experiment"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    top = {}
    if cp.has_section("experiment"):
        for key, raw in cp.items("experiment"):
            if key not in _EXPERIMENT_KEYS:
                raise ConfigError(f"unknown key [experiment] {key}")
            try:
                top[key] = _EXPERIMENT_KEYS[key](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"[experiment] {key}: {exc}") from exc
    if "version" not in top:
        raise ConfigError("[experiment] version is required")
    parts = {}
    for section, cls in _SECTIONS.items():
        kw = {}
        if cp.has_section(section):
            known = {f.name: f for f in _keys(section)}
            for key, raw in cp.items(section):
                if key not in known:
                    raise ConfigError(f"unknown key [{section}] {key}")
                try:
                    kw[key] = _convert(section, known[key], raw)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc
        try:
            parts[section] = cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
    return validate(ExperimentConfig(**top, **parts))


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text)


def dump(cfg):
    """INI text that parses back to ``cfg``."""
    buf = io.StringIO()
    buf.write("[experiment]\n")
    for key in _EXPERIMENT_KEYS:
        buf.write(f"{key} = {_fmt(getattr(cfg, key))}\n")
    for section in _SECTIONS:
        buf.write(f"\n[{section}]\n")
        obj = getattr(cfg, section)
        for f in _keys(section):
            buf.write(f"{f.name} = {_fmt(getattr(obj, f.name))}\n")
    return buf.getvalue()
