"""Run configuration: one YAML file with one section per component.

Precedence is command-line flags, then the file, then defaults.  The global
seed can additionally come from ``POPCORN_SEED`` (flag > env > file).
"""
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import ModelConfig
from .pairing import AugmentConfig, PairPolicy
from .synth import SynthConfig
from .trainer import OptimizerConfig, TrainerConfig

SEED_ENV = "POPCORN_SEED"

# patch size used for 3D models unless the file says otherwise
DEFAULT_3D_PATCH = (64, 64, 64)


@dataclass(frozen=True)
class EvaluationConfig:
    threshold: float = 0.5
    significance_level: float = 0.05

    def validate(self):
        if not 0 < self.threshold < 1 or not 0 < self.significance_level < 1:
            raise ConfigError("evaluation.threshold and evaluation.significance_level must lie in (0, 1)")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


_SECTIONS = {
    "synth": SynthConfig,
    "model": ModelConfig,
    "augment": AugmentConfig,
    "pairs": PairPolicy,
    "trainer": TrainerConfig,
    "optimizer": OptimizerConfig,
    "evaluation": EvaluationConfig,
}
_TUPLE_FIELDS = {
    "synth": ("image_size", "lesion_count", "lesion_radius"),
    "model": ("patch_size",),
    "augment": ("blur_sigma_range", "sharpen_strength_range", "intensity_scale_range", "noise_std_range", "enabled_ops"),
}


@dataclass
class RunConfig:
    seed: int
    output_dir: str = "runs"
    data_dir: str = "data"
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pairs: PairPolicy = field(default_factory=PairPolicy)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def validate(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        for name in _SECTIONS:
            getattr(self, name).validate()
        if self.trainer.seed != self.seed:
            raise ConfigError("trainer seed must equal the global seed")
        return self

    def to_dict(self):
        out = {"seed": self.seed, "output_dir": self.output_dir, "data_dir": self.data_dir}
        for name in _SECTIONS:
            d = getattr(self, name).to_dict()
            if name == "trainer":
                d.pop("seed", None)
            out[name] = d
        return out

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        known = {"seed", "output_dir", "data_dir", *_SECTIONS}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "seed" not in raw:
            raise ConfigError("config is missing the mandatory 'seed'")
        seed = raw["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        kwargs = {"seed": seed}
        for key in ("output_dir", "data_dir"):
            if key in raw:
                kwargs[key] = str(raw[key])
        for name, klass in _SECTIONS.items():
            section = raw.get(name) or {}
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            kwargs[name] = _build_section(name, klass, dict(section), seed)
        return cls(**kwargs).validate()


def _build_section(name, klass, section, seed):
    fields = {f.name for f in dataclasses.fields(klass)}
    if name == "trainer":
        fields.discard("seed")
        if "seed" in section:
            raise ConfigError("trainer.seed is not configurable; set the global 'seed'")
    unknown = sorted(set(section) - fields)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {', '.join(unknown)}")
    for key in _TUPLE_FIELDS.get(name, ()):
        if key in section:
            if not isinstance(section[key], (list, tuple)):
                raise ConfigError(f"{name}.{key} must be a list")
            section[key] = tuple(section[key])
    if name == "model" and section.get("dims") == 3 and "patch_size" not in section:
        section["patch_size"] = DEFAULT_3D_PATCH
    if name == "trainer":
        section["seed"] = seed
    try:
        obj = klass(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None
    for f in dataclasses.fields(klass):
        val = getattr(obj, f.name)
        if f.type in (int, "int") and (isinstance(val, bool) or not isinstance(val, int)):
            raise ConfigError(f"{name}.{f.name} must be an integer, got {val!r}")
        if f.type in (float, "float") and (isinstance(val, bool) or not isinstance(val, (int, float))):
            raise ConfigError(f"{name}.{f.name} must be a number, got {val!r}")
    return obj


def _parse_scalar(text):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(raw, assignments):
    """Apply ``section.key=value`` strings onto a raw config mapping."""
    raw = dict(raw)
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node[p] = dict(node.get(p) or {})
            node = node[p]
        node[parts[-1]] = _parse_scalar(value)
    return raw


def load_raw(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return raw


def load_config(path=None, overrides=(), seed=None, env=None):
    """Merged RunConfig from file, ``POPCORN_SEED`` and explicit overrides."""
    env = os.environ if env is None else env
    raw = load_raw(path) if path is not None else {}
    if env.get(SEED_ENV):
        try:
            raw["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = int(seed)
    return RunConfig.from_dict(raw)


def dump_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True, default_flow_style=None)


def config_from_yaml(text):
    return RunConfig.from_dict(yaml.safe_load(text) or {})
