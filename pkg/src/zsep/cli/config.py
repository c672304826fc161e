"""Strict JSON experiment configuration.

Every section rejects unknown keys. ``load_config`` reads a file,
``parse_config`` validates a mapping and ``dump_config`` writes the canonical
form (sorted keys), so ``parse(dump(parse(x))) == parse(x)``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from zsep.denoiser.conditions import Label, parse_condition
from zsep.scene import SourceLabel, default_labels
from zsep.separation import DEFAULT_STEPS
from zsep.schedule import NoiseSchedule, StepPlan, make_cosine_schedule, make_linear_schedule, make_plan


class ConfigError(ValueError):
    """Invalid or unreadable configuration (exit code 2)."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, strict=False)


class ScheduleSpec(_Strict):
    kind: Literal["linear", "cosine"] = "linear"
    T: int = Field(1000, ge=1)
    beta_start: float = Field(1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(0.02, gt=0.0, lt=1.0)
    offset: float = Field(0.008, ge=0.0)
    max_beta: float = Field(0.999, gt=0.0, lt=1.0)

    def build(self) -> NoiseSchedule:
        if self.kind == "linear":
            return make_linear_schedule(self.T, self.beta_start, self.beta_end)
        return make_cosine_schedule(self.T, self.offset, self.max_beta)


class LabelSpec(_Strict):
    id: int = Field(ge=0)
    name: str
    fundamental: int = Field(ge=0)
    harmonics: int = Field(3, ge=1)
    decay: float = Field(0.7, gt=0.0)
    period: float = Field(8.0, gt=0.0)
    amplitude: float = Field(1.0, gt=0.0)
    depth: float = Field(0.8, ge=0.0, le=1.0)
    jitter: float = Field(0.05, ge=0.0)

    def build(self) -> SourceLabel:
        return SourceLabel(**self.model_dump())


def _default_label_specs() -> list[LabelSpec]:
    return [LabelSpec(**lab.to_dict()) for lab in default_labels()]


class DatasetSpec(_Strict):
    n_per_label: int = Field(256, ge=1)
    dims: tuple[int, int, int] = (1, 16, 32)
    pairs: bool = True
    seed: int = Field(0, ge=0)

    @field_validator("dims")
    @classmethod
    def _positive_dims(cls, v):
        if min(v) < 1:
            raise ValueError("dims must be positive")
        return v


class TinySpec(_Strict):
    kind: Literal["tiny"] = "tiny"
    hidden: int = Field(256, ge=1)
    d_t: int = Field(16, ge=2)
    d_c: int = Field(16, ge=1)
    p_uncond: float = Field(0.1, ge=0.0, le=1.0)
    lr: float = Field(3e-3, gt=0.0)
    epochs: int = Field(150, ge=0)
    batch_size: int = Field(128, ge=1)
    lr_decay: Literal["none", "cosine"] = "cosine"
    dtype: Literal["float32", "float64"] = "float32"

    @field_validator("d_t")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("d_t must be even")
        return v


class AnalyticSpec(_Strict):
    kind: Literal["analytic"] = "analytic"
    min_std: float = Field(1e-3, gt=0.0)


class PlanSpec(_Strict):
    """``steps`` evenly spaced timesteps, or an explicit descending list (default 10 steps)."""

    steps: Optional[int] = Field(None, ge=1)
    timesteps: Optional[list[int]] = None

    @model_validator(mode="after")
    def _one_of(self):
        if self.timesteps is not None and self.steps is not None and len(self.timesteps) != self.steps:
            raise ValueError("give either steps or timesteps (or matching lengths)")
        return self

    def build(self, T: int) -> StepPlan:
        if self.timesteps is not None:
            return make_plan(T, timesteps=self.timesteps)
        return make_plan(T, steps=min(self.steps or DEFAULT_STEPS, T))


class GuidanceSpec(_Strict):
    omega: float = Field(1.0, ge=0.0, allow_inf_nan=False)
    c_inv: str = "null"

    @field_validator("c_inv")
    @classmethod
    def _policy(cls, v):
        if v in ("null", "other"):
            return v
        try:
            parse_condition(v)
        except ValueError as exc:
            raise ValueError(f"c_inv must be 'null', 'other' or a condition string: {exc}") from None
        return v


class SceneSpec(_Strict):
    count: int = Field(50, ge=0)
    seed: int = Field(100, ge=0)
    n_sources: int = Field(2, ge=1)


class CapacitySpec(_Strict):
    hidden: list[int] = [16, 64, 256]
    seeds: list[int] = [0, 1, 2, 3, 4]


class ExperimentConfig(_Strict):
    schedule: ScheduleSpec = ScheduleSpec()
    labels: list[LabelSpec] = Field(default_factory=_default_label_specs)
    dataset: DatasetSpec = DatasetSpec()
    denoiser: Union[TinySpec, AnalyticSpec] = Field(TinySpec(), discriminator="kind")
    sampler: Literal["ddim", "ddpm"] = "ddim"
    plan: PlanSpec = PlanSpec()
    guidance: GuidanceSpec = GuidanceSpec()
    scenes: SceneSpec = SceneSpec()
    seed: int = Field(0, ge=0)
    omegas: list[float] = [0.0, 0.5, 1.0, 1.5, 2.0]
    targets: Optional[list[int]] = None
    roundtrip_steps: list[int] = [10, 50, 200]
    table2_steps: int = Field(50, ge=1)
    capacity: CapacitySpec = CapacitySpec()
    output_dir: str = "zsep-out"

    @model_validator(mode="after")
    def _cross_checks(self):
        ids = [lab.id for lab in self.labels]
        if not ids:
            raise ValueError("at least one label is required")
        if len(set(ids)) != len(ids):
            raise ValueError("label ids must be unique")
        if self.targets is not None and set(self.targets) - set(ids):
            raise ValueError(f"targets reference unknown labels {sorted(set(self.targets) - set(ids))}")
        if any(o < 0 for o in self.omegas):
            raise ValueError("omegas must be >= 0")
        if self.scenes.n_sources > len(ids):
            raise ValueError("scenes need at least n_sources distinct labels")
        if min(self.roundtrip_steps, default=1) < 1:
            raise ValueError("roundtrip_steps must be positive")
        if self.guidance.c_inv not in ("null", "other"):
            c = parse_condition(self.guidance.c_inv)
            if isinstance(c, Label) and c.id not in ids:
                raise ValueError(f"c_inv references unknown label {c.id}")
        return self


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    """Apply CLI flag overrides (``None`` means keep) and re-validate."""
    data = config_to_dict(cfg)
    if kw.get("seed") is not None:
        data["seed"] = kw["seed"]
    if kw.get("steps") is not None:
        data["plan"] = {"steps": kw["steps"], "timesteps": None}
    if kw.get("sampler") is not None:
        data["sampler"] = kw["sampler"]
    if kw.get("omega") is not None:
        data["guidance"]["omega"] = kw["omega"]
    if kw.get("out") is not None:
        data["output_dir"] = str(kw["out"])
    return parse_config(data)
