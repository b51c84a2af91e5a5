"""Declarative run configuration.

A run config is a YAML document with one mapping per section. Every key has
a default (the toy-experiment protocol), unknown keys are rejected, and the
fully resolved document is written next to every command's outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .predictor import TrainConfig
from .sampler import Attrition, SamplerConfig, parse_mechanism
from .schedule import DEFAULT_NUM_STEPS, DEFAULT_P_MIN, PSchedule, WeightKind, WeightSpec
from .synth import NegBinSpec

RESOLVED_NAME = "config.resolved.yaml"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    path: Optional[str] = None
    n: int = 4000
    dim: int = 10
    mu_range: list = field(default_factory=lambda: [0.05, 0.5])
    theta_range: list = field(default_factory=lambda: [0.2, 5.0])
    size_factor_lognormal: list = field(default_factory=lambda: [0.0, 0.6])


@dataclass
class ScheduleSection:
    kind: str = "blackout_cont"
    p_min: float = DEFAULT_P_MIN
    num_steps: int = DEFAULT_NUM_STEPS


@dataclass
class WeightSection:
    kind: str = "nll"


@dataclass
class TrainSection:
    batch_size: int = 256
    learning_rate: float = 2e-3
    adam_betas: list = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8
    max_steps: int = 4000
    p_uncond: float = 0.1
    hidden: list = field(default_factory=lambda: [48])
    class_dim: int = 8


@dataclass
class SampleSection:
    n: int = 4000
    num_steps: int = 200
    gamma: Optional[float] = None
    attrition: str = "none"
    class_id: Optional[int] = None


@dataclass
class ImputeSection:
    mechanism: str = "mcar:0.5"
    mask_path: Optional[str] = None
    n_imputations: int = 1
    resample: int = 1


@dataclass
class EvalSection:
    kernel_gamma: float = 1.0
    n_projections: int = 100
    figures: bool = True


_SECTIONS = {
    "data": DataSection, "schedule": ScheduleSection, "weight": WeightSection,
    "train": TrainSection, "sample": SampleSection, "impute": ImputeSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    weight: WeightSection = field(default_factory=WeightSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    impute: ImputeSection = field(default_factory=ImputeSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output_dir: str = "runs/default"
    seed: int = 0
    threads: Optional[int] = None

    # construction

    @classmethod
    def from_dict(cls, doc: Optional[dict]) -> "RunConfig":
        doc = dict(doc or {})
        cfg = cls()
        for key, value in doc.items():
            if key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be a mapping")
                setattr(cfg, key, _build_section(_SECTIONS[key], key, value))
            elif key in ("output_dir", "seed", "threads"):
                setattr(cfg, key, value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            doc = yaml.safe_load(p.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: invalid YAML: {exc}") from None
        if doc is not None and not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        return cls.from_dict(doc)

    def override(self, dotted: str, value: Any) -> None:
        """Set ``section.key`` (or a top-level key) and revalidate."""
        section, _, key = dotted.partition(".")
        if not key:
            if section not in ("output_dir", "seed", "threads"):
                raise ConfigError(f"unknown config key {dotted!r}")
            setattr(self, section, value)
        else:
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            sec = getattr(self, section)
            if key not in {f.name for f in dataclasses.fields(sec)}:
                raise ConfigError(f"unknown config key {dotted!r}")
            setattr(sec, key, value)
            _coerce(sec)
        self.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def write_resolved(self, out_dir) -> Path:
        path = Path(out_dir) / RESOLVED_NAME
        path.write_text(self.dump(), encoding="utf-8")
        return path

    # validation and conversion

    def validate(self) -> None:
        try:
            self.negbin_spec()
            self.p_schedule()
            self.weight_spec()
            self.train_config()
            self.sampler_config()
            parse_mechanism(self.impute.mechanism)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None
        if self.data.n < 1:
            raise ConfigError("data.n must be >= 1")
        if self.sample.n < 0:
            raise ConfigError("sample.n must be >= 0")
        if self.impute.n_imputations < 1:
            raise ConfigError("impute.n_imputations must be >= 1")
        if self.eval.n_projections < 1 or self.eval.kernel_gamma <= 0:
            raise ConfigError("eval.n_projections must be >= 1 and eval.kernel_gamma > 0")
        if self.threads is not None and int(self.threads) < 1:
            raise ConfigError("threads must be >= 1")

    def negbin_spec(self) -> NegBinSpec:
        d = self.data
        return NegBinSpec(dim=int(d.dim), mu_range=tuple(d.mu_range), theta_range=tuple(d.theta_range),
                          size_factor_lognormal=tuple(d.size_factor_lognormal), seed=int(self.seed))

    def p_schedule(self) -> PSchedule:
        s = self.schedule
        return PSchedule.from_name(s.kind, float(s.p_min), int(s.num_steps))

    def weight_spec(self) -> WeightSpec:
        return WeightSpec(WeightKind(self.weight.kind))

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(batch_size=int(t.batch_size), learning_rate=float(t.learning_rate),
                           adam_betas=tuple(float(b) for b in t.adam_betas), adam_eps=float(t.adam_eps),
                           max_steps=int(t.max_steps), p_uncond=float(t.p_uncond),
                           weight_spec=self.weight_spec(), schedule=self.p_schedule(),
                           hidden=tuple(int(h) for h in t.hidden), class_dim=int(t.class_dim),
                           seed=int(self.seed))

    def sampler_config(self) -> SamplerConfig:
        s = self.sample
        return SamplerConfig(num_steps=int(s.num_steps),
                             gamma=None if s.gamma is None else float(s.gamma),
                             attrition=Attrition.parse(s.attrition), seed=int(self.seed),
                             class_id=None if s.class_id is None else int(s.class_id),
                             resample=int(self.impute.resample))


_OPTIONAL_FLOATS = {"gamma"}


def _coerce(section) -> None:
    # YAML 1.1 reads "1e-3" as a string; normalise so the resolved echo is typed
    for f in dataclasses.fields(section):
        v = getattr(section, f.name)
        if isinstance(v, str) and (isinstance(f.default, float) or f.name in _OPTIONAL_FLOATS):
            try:
                setattr(section, f.name, float(v))
            except ValueError:
                raise ConfigError(f"{f.name}: expected a number, got {v!r}") from None


def _build_section(cls, name: str, values: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    sec = cls(**values)
    _coerce(sec)
    return sec


def parse_value(text: str) -> Any:
    """Interpret a ``--set`` value with YAML scalar rules (``null``, numbers, lists)."""
    return yaml.safe_load(text)
