"""Run configuration: a strict YAML schema mapped onto the harness dataclasses."""

from __future__ import annotations

from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .averaging import VARIANTS
from .bench import datasets
from .bench.harness import AnalysisConfig, MethodConfig, OptimizerConfig, TrainerConfig
from .flatness import DEFAULT_GAMMAS


class ConfigError(ValueError):
    """Malformed or invalid configuration; the message carries line/field diagnostics."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RotatedMoons(_Strict):
    generator: Literal["rotated_moons"] = "rotated_moons"
    n_per_domain: int = 626
    angles: list[float] = [0.0, 15.0, 30.0, 45.0]
    noise: float = 0.2
    label_noise: float = 0.0
    seed: int = 0

    def build(self) -> datasets.DomainDataset:
        return datasets.gen_rotated_moons(self.n_per_domain, self.angles, self.noise, self.seed,
                                          self.label_noise)


class SpuriousGaussians(_Strict):
    generator: Literal["spurious_gaussians"]
    n_per_domain: int = 626
    correlations: list[float] = [0.9, 0.8, 0.7, -0.9]
    signal_dim: int = 2
    signal_mean: float = 0.5
    seed: int = 0

    def build(self) -> datasets.DomainDataset:
        return datasets.gen_spurious_gaussians(self.n_per_domain, self.correlations, self.signal_dim,
                                               self.seed, self.signal_mean)


DatasetSection = Annotated[Union[RotatedMoons, SpuriousGaussians], Field(discriminator="generator")]


class SplitSection(_Strict):
    fractions: list[float] = [0.8, 0.2]
    seed: int = 0
    targets: Optional[list[int]] = None


class ModelSection(_Strict):
    hidden: list[int] = [32, 32]
    activation: Literal["relu", "tanh"] = "relu"


class TrainerSection(_Strict):
    iterations: int = Field(2000, ge=0)
    batch_size: int = Field(32, ge=1)
    eval_freq: int = Field(20, ge=1)


class OptimizerSection(_Strict):
    kind: Literal["adam", "sgd"] = "adam"
    lr: float = Field(1e-3, gt=0)
    schedule: Literal["constant", "cyclic"] = "constant"
    min_lr: float = Field(1e-5, gt=0)
    cycle_length: int = Field(100, ge=1)
    sam_rho: Optional[float] = Field(None, gt=0)
    weight_decay: float = Field(0.0, ge=0)


class MethodSection(_Strict):
    name: str
    variant: str
    optimizer: OptimizerSection = OptimizerSection()
    n_s: int = Field(3, ge=1)
    n_e: int = Field(6, ge=1)
    r: float = Field(1.3, gt=1.0)
    k: int = Field(5, ge=1)
    start_fraction: float = Field(0.5, ge=0.0, lt=1.0)
    decay: float = Field(0.99, gt=0.0, lt=1.0)
    max_span: int = Field(20, ge=0)

    @field_validator("variant")
    @classmethod
    def _known_variant(cls, v):
        if v not in VARIANTS:
            raise ValueError(f"unknown method kind {v!r}; expected one of {', '.join(VARIANTS)}")
        return v


class FlatnessSection(_Strict):
    methods: list[str] = []
    gammas: list[float] = list(DEFAULT_GAMMAS)
    n_samples: int = Field(100, ge=1)


class Theorem1Section(_Strict):
    methods: list[str] = []
    gamma: float = Field(0.5, ge=0.0)
    bins_per_dim: int = Field(20, ge=1)
    probes: int = Field(20, ge=0)
    ascent_steps: int = Field(10, ge=0)
    gap: Optional[list[str]] = None

    @field_validator("gap")
    @classmethod
    def _pair(cls, v):
        if v is not None and len(v) != 2:
            raise ValueError("gap must name exactly two methods: [theta_hat, theta_erm]")
        return v


class AnalysisSection(_Strict):
    flatness: FlatnessSection = FlatnessSection()
    theorem1: Theorem1Section = Theorem1Section()


class OutputSection(_Strict):
    dir: str = "runs/default"
    save_weights: bool = False
    snapshot_iterations: list[int] = []
    timing_in_csv: bool = False


class RunConfig(_Strict):
    dataset: DatasetSection = RotatedMoons()
    split: SplitSection = SplitSection()
    model: ModelSection = ModelSection()
    trainer: TrainerSection = TrainerSection()
    methods: list[MethodSection]
    seeds: list[int] = [0]
    analysis: AnalysisSection = AnalysisSection()
    output: OutputSection = OutputSection()

    @model_validator(mode="after")
    def _cross_checks(self):
        names = [m.name for m in self.methods]
        if not names:
            raise ValueError("at least one method is required")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate method names: {names}")
        referenced = list(self.analysis.flatness.methods) + list(self.analysis.theorem1.methods)
        referenced += list(self.analysis.theorem1.gap or [])
        missing = [n for n in referenced if n not in names]
        if missing:
            raise ValueError(f"analysis refers to undefined methods: {missing}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        return self

    # -- mapping onto the harness -----------------------------------------

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(self.trainer.iterations, self.trainer.batch_size, self.trainer.eval_freq,
                             tuple(self.model.hidden), self.model.activation)

    def method_configs(self) -> list[MethodConfig]:
        out = []
        for m in self.methods:
            opt = OptimizerConfig(**m.optimizer.model_dump())
            out.append(MethodConfig(m.name, m.variant, opt, m.n_s, m.n_e, m.r, m.k,
                                    m.start_fraction, m.decay, m.max_span))
        return out

    def analysis_config(self) -> AnalysisConfig:
        f, t = self.analysis.flatness, self.analysis.theorem1
        return AnalysisConfig(tuple(f.methods), tuple(f.gammas), f.n_samples, tuple(t.methods),
                              t.gamma, t.bins_per_dim, t.probes, t.ascent_steps,
                              tuple(t.gap) if t.gap else None)

    def split_plan(self, target: int) -> datasets.SplitPlan:
        return datasets.SplitPlan(target, tuple(self.split.fractions), self.split.seed)


def _line_of(root, loc) -> int | None:
    """1-based line of the YAML node at ``loc``, or of its deepest existing ancestor."""
    node = root
    line = None if node is None else node.start_mark.line + 1
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            match = [v for k, v in node.value if k.value == key]
            if not match:
                keys = [k for k, _ in node.value if k.value == key]
                return keys[0].start_mark.line + 1 if keys else line
            node = match[0]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            # discriminated-union tags and similar synthetic loc parts
            continue
        line = node.start_mark.line + 1
    return line


def _extra_key_line(root, loc) -> int | None:
    """Line of an unknown key: the key itself is the last loc element."""
    *parent, key = loc
    node = root
    for part in parent:
        if isinstance(node, yaml.MappingNode):
            match = [v for k, v in node.value if k.value == part]
            if match:
                node = match[0]
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
    if isinstance(node, yaml.MappingNode):
        for k, _ in node.value:
            if k.value == key:
                return k.start_mark.line + 1
    return _line_of(root, parent)


def _format_errors(exc: ValidationError, root, source: str) -> str:
    lines = []
    for err in exc.errors():
        loc = tuple(err["loc"])
        field = ".".join(str(p) for p in loc) or "<root>"
        line = _extra_key_line(root, loc) if err["type"] == "extra_forbidden" else _line_of(root, loc)
        where = f"{source}:{line}" if line else source
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        lines.append(f"{where}: {field}: {msg}")
    return "\n".join(lines)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: YAML syntax error: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, root, source)) from exc


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False, default_flow_style=None)
