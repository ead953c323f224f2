"""Run configuration: an INI file layered over defaults, then ``--set`` overrides.

Sections map onto the dataclasses of the other modules::

    [run]          seed, seeds, output_dir
    [plant]        PlantConfig
    [limits]       ActionLimits
    [gait]         GaitWaveSpec
    [dataset]      collection and split parameters
    [surrogate]    DNN training and validation
    [mbrl.sac] [mbrl.reward] [pt.sac] [pt.reward] [mfrl.sac] [mfrl.reward]
    [pipeline]     convergence rule and stage plumbing
    [eval]         evaluation rollout

``to_ini()`` writes every key, so a snapshot re-parses to the same config.
"""
from __future__ import annotations

import configparser
import io
import os
import typing
from dataclasses import dataclass, field, fields, replace

from .kinematics import ActionLimits, GaitWaveSpec
from .pipeline import ConvergenceRule, PipelineConfig, default_reward, default_sac
from .plant import PlantConfig
from .sac import RewardWeights, SACConfig

OUTPUT_ENV = "SOFTQ_LAB_OUTPUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    seeds: tuple = (0, 1, 2)
    output_dir: str = ""

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("seeds must list at least one seed")


@dataclass(frozen=True)
class DatasetSection:
    n_sequences: int = 250
    steps_per_sequence: int = 200
    expert_fraction: float = 0.02
    ou_tau: float = 0.2
    ou_std: float = 0.35
    ou_mean_spread: float = 0.0
    oscillation_fraction: float = 0.8
    hold_fraction: float = 0.5
    val_ratio: float = 0.2
    noise: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_sequences < 1 or self.steps_per_sequence < 1:
            raise ValueError("n_sequences and steps_per_sequence must be at least 1")
        for name in ("expert_fraction", "oscillation_fraction", "hold_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.val_ratio < 1.0:
            raise ValueError("val_ratio must lie in (0, 1)")


@dataclass(frozen=True)
class SurrogateSection:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 20
    input_noise: float = 0.03
    T_max: int = 200

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.T_max < 1:
            raise ValueError("epochs, batch_size and T_max must be at least 1")
        if not self.lr > 0 or self.input_noise < 0:
            raise ValueError("lr must be positive and input_noise non-negative")


@dataclass(frozen=True)
class PipelineSection:
    threshold: float | None = None          # plant stages (PT, MFRL)
    mbrl_threshold: float | None = None     # surrogate stage
    fraction: float = 0.9
    window: int = 50
    sustain: int = 20
    stop_on_convergence: bool = True
    expert_duration: float = 1.6
    noise: bool = True
    checkpoint_every: int = 0
    reset_buffer: bool = True

    def convergence(self, mode="PT"):
        threshold = self.mbrl_threshold if mode.upper() == "MBRL" else self.threshold
        return ConvergenceRule(threshold, self.fraction, self.window, self.sustain)


@dataclass(frozen=True)
class EvalSection:
    duration: float = 5.0
    expert_prefix: float = 1.6
    noise: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.duration > 0 or self.expert_prefix < 0:
            raise ValueError("duration must be positive and expert_prefix non-negative")


SECTIONS = {
    "run": RunSection,
    "plant": PlantConfig,
    "limits": ActionLimits,
    "gait": GaitWaveSpec,
    "dataset": DatasetSection,
    "surrogate": SurrogateSection,
    "mbrl.sac": SACConfig, "mbrl.reward": RewardWeights,
    "pt.sac": SACConfig, "pt.reward": RewardWeights,
    "mfrl.sac": SACConfig, "mfrl.reward": RewardWeights,
    "pipeline": PipelineSection,
    "eval": EvalSection,
}
_ATTR = {k: k.replace(".", "_") for k in SECTIONS}
_SKIP = {"plant": {"limits"}}        # nested dataclasses live in their own section


def _defaults():
    out = {}
    for name, cls in SECTIONS.items():
        if name.endswith(".sac"):
            out[name] = default_sac(name.split(".")[0].upper())
        elif name.endswith(".reward"):
            out[name] = default_reward(name.split(".")[0].upper())
        else:
            out[name] = cls()
    return out


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    plant: PlantConfig = field(default_factory=PlantConfig)
    limits: ActionLimits = field(default_factory=ActionLimits)
    gait: GaitWaveSpec = field(default_factory=GaitWaveSpec)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    surrogate: SurrogateSection = field(default_factory=SurrogateSection)
    mbrl_sac: SACConfig = field(default_factory=lambda: default_sac("MBRL"))
    mbrl_reward: RewardWeights = field(default_factory=lambda: default_reward("MBRL"))
    pt_sac: SACConfig = field(default_factory=lambda: default_sac("PT"))
    pt_reward: RewardWeights = field(default_factory=lambda: default_reward("PT"))
    mfrl_sac: SACConfig = field(default_factory=lambda: default_sac("MFRL"))
    mfrl_reward: RewardWeights = field(default_factory=lambda: default_reward("MFRL"))
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def seed(self):
        return self.run.seed

    @property
    def output_dir(self):
        return self.run.output_dir or os.environ.get(OUTPUT_ENV, "runs")

    def plant_config(self):
        return replace(self.plant, limits=self.limits)

    def pipeline_config(self, mode, seed=None):
        mode = mode.upper()
        p = self.pipeline
        return PipelineConfig(
            mode=mode,
            sac=getattr(self, f"{mode.lower()}_sac"),
            reward=getattr(self, f"{mode.lower()}_reward"),
            expert_duration=p.expert_duration if mode == "PT" else 0.0,
            convergence=p.convergence(mode),
            stop_on_convergence=p.stop_on_convergence,
            seed=self.seed if seed is None else seed,
            noise=p.noise,
            gait=self.gait,
            checkpoint_every=p.checkpoint_every,
            reset_buffer=p.reset_buffer,
        )

    def with_seed(self, seed):
        return replace(self, run=replace(self.run, seed=int(seed)))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in SECTIONS:
            obj = getattr(self, _ATTR[name])
            cp[name] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)
                        if f.name not in _SKIP.get(name, ())}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_ini())


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _field_kind(cls, name, default):
    hints = typing.get_type_hints(cls)
    hint = hints.get(name, type(default))
    text = str(hint)
    if isinstance(default, bool) or hint is bool:
        return bool
    if isinstance(default, tuple) or "tuple" in text:
        return tuple
    if hint is int or (isinstance(default, int) and "float" not in text):
        return int
    if hint is float or "float" in text:
        return float
    return str


def _parse_value(kind, raw, key, allow_none):
    text = raw.strip()
    if allow_none and text.lower() in ("none", ""):
        return None
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(float(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def _apply(pending: dict, defaults: dict, section, key, raw):
    if section not in SECTIONS:
        raise ConfigError(f"unknown section [{section}] (key {section}.{key})")
    cls = SECTIONS[section]
    known = {f.name for f in fields(cls) if f.name not in _SKIP.get(section, ())}
    if key not in known:
        raise ConfigError(f"unknown key {section}.{key}")
    current = getattr(defaults[section], key)
    kind = _field_kind(cls, key, current)
    allow_none = "None" in str(typing.get_type_hints(cls).get(key, ""))
    value = _parse_value(kind, raw, f"{section}.{key}", allow_none)
    if kind is tuple and section == "run":
        value = tuple(int(v) for v in value)
    pending.setdefault(section, {})[key] = value


def parse_overrides(pairs):
    """``["mbrl.sac.batch_size=64", ...]`` -> [(section, key, value)]."""
    out = []
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, raw = item.split("=", 1)
        if "." not in lhs:
            raise ConfigError(f"override {item!r} needs a section, e.g. run.seed=1")
        section, key = lhs.strip().rsplit(".", 1)
        out.append((section, key, raw))
    return out


def parse_config(path=None, overrides=None, text=None) -> RunConfig:
    """Defaults, then the file (or ``text``), then ``overrides`` ("section.key=value")."""
    defaults = _defaults()
    pending = {}
    if path is not None or text is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            if path is not None:
                if not os.path.exists(path):
                    raise ConfigError(f"config file {path} does not exist")
                with open(path) as fh:
                    cp.read_file(fh)
            else:
                cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        for section in cp.sections():
            for key, raw in cp[section].items():
                _apply(pending, defaults, section, key, raw)
    for section, key, raw in parse_overrides(overrides):
        _apply(pending, defaults, section, key, raw)
    values = dict(defaults)
    for section, changes in pending.items():
        try:
            values[section] = replace(defaults[section], **changes)
        except (ValueError, TypeError) as exc:
            keys = ", ".join(f"{section}.{k}" for k in changes)
            raise ConfigError(f"[{section}] {exc} (set: {keys})") from None
    return RunConfig(**{_ATTR[k]: v for k, v in values.items()})
