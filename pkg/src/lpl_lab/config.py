"""Experiment configuration.

A run is fully described by one JSON document. Unknown keys are rejected at
every level so typos fail loudly instead of silently falling back to
defaults.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError, MissingInputError
from .toydata import DataSpec


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DataConfig(_Strict):
    count: int = Field(2048, ge=1)
    resolution: int = Field(64, ge=4)
    classes: int = Field(4, ge=1, le=4)
    texture_freq_range: tuple[float, float] = (6.0, 20.0)
    texture_amplitude: float = Field(0.25, ge=0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        try:
            self.to_spec().validate()
        except ConfigError as exc:
            raise ValueError(str(exc)) from None
        return self

    def to_spec(self) -> DataSpec:
        return DataSpec(self.count, self.resolution, self.classes,
                        tuple(self.texture_freq_range), self.texture_amplitude, self.seed)


class AEConfig(_Strict):
    steps: int = Field(10000, ge=0)
    batch: int = Field(32, ge=1)
    lr: float = Field(2e-3, gt=0)
    latent_reg: float = Field(1e-6, ge=0)
    holdout: float = Field(0.1, ge=0, lt=1)
    enc_widths: tuple[int, int] = (32, 64)
    dec_widths: tuple[int, int, int, int] = (64, 64, 32, 32)
    latent_channels: int = Field(4, ge=1)
    seed: int = Field(0, ge=0)


class ScheduleConfig(_Strict):
    T: int = Field(1000, ge=2)
    beta_start: float = 0.00085
    beta_end: float = 0.012
    zero_terminal: Optional[bool] = None


class LplConfig(_Strict):
    enabled: bool = True
    tau_sigma: float = Field(1.5, gt=0)
    base_resolution: int = Field(64, ge=1)
    w_lpl: float = Field(3.0, ge=0)
    weight_policy: Literal["prose_inverse_upscale", "uniform", "literal_exponent"] = \
        "prose_inverse_upscale"
    num_taps: int = Field(4, ge=1, le=4)
    use_mask: bool = True
    quant: float = Field(0.02, gt=0, lt=0.5)
    opening: int = Field(5, ge=1)
    closing: int = Field(3, ge=1)
    std_floor: float = Field(1e-6, gt=0)
    detach_stats: bool = True
    debug_masks: bool = False


class ModelConfig(_Strict):
    base_channels: int = Field(48, ge=8)
    channel_mult: tuple[int, ...] = (1, 2, 2)
    time_dim: int = Field(128, ge=2)
    emb_dim: int = Field(256, ge=8)
    groups: int = Field(8, ge=1)


class TrainerConfig(_Strict):
    pretrain_steps: int = Field(20000, ge=0)
    posttrain_steps: int = Field(10000, ge=0)
    batch: int = Field(64, ge=1)
    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    gamma_ema: Optional[float] = Field(None, ge=0, le=1)
    p_drop: float = Field(0.1, ge=0, lt=1)
    checkpoint_every: int = Field(1000, ge=0)
    time_sampling: Literal["uniform", "logit_normal"] = "uniform"
    reweight: bool = False
    reweight_ratio: float = Field(0.1, ge=0)


class SamplerConfig(_Strict):
    steps: int = Field(50, ge=1)
    guidance: float = Field(1.5, ge=0)
    count: int = Field(64, ge=1)
    batch: int = Field(64, ge=1)
    use_ema: bool = True
    seed: int = Field(0, ge=0)


class EvalConfig(_Strict):
    num_samples: int = Field(512, ge=2)
    k: int = Field(5, ge=1)
    nfe_sweep: tuple[int, ...] = ()


class RunConfig(_Strict):
    framework: Literal["eps", "v", "flow"] = "eps"
    seed: int = Field(0, ge=0)
    data: DataConfig = Field(default_factory=DataConfig)
    ae: AEConfig = Field(default_factory=AEConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    lpl: LplConfig = Field(default_factory=LplConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _check(self):
        if self.framework == "eps" and self.schedule.zero_terminal:
            raise ValueError("zero_terminal cannot be combined with eps prediction")
        if self.sampler.steps > self.schedule.T and self.framework != "flow":
            raise ValueError("sampler.steps exceeds schedule.T")
        return self

    @property
    def gamma_ema(self) -> float:
        if self.trainer.gamma_ema is not None:
            return self.trainer.gamma_ema
        return 0.99975 if self.lpl.enabled else 0.9999

    def tau_sigma(self) -> float:
        """Threshold rescaled from the base resolution to the data resolution."""
        from .diffusion import scale_threshold

        return scale_threshold(self.lpl.tau_sigma, self.lpl.base_resolution, self.data.resolution)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid config:\n{exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"config file {path} not found")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    return parse_config(data)


def with_override(cfg: RunConfig, dotted: str, value) -> RunConfig:
    """Copy of ``cfg`` with one nested field replaced, re-validated."""
    data = cfg.model_dump(mode="json")
    node = data
    *parents, leaf = dotted.split(".")
    for key in parents:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config path {dotted!r}")
        node = node[key]
    if leaf not in node:
        raise ConfigError(f"unknown config path {dotted!r}")
    node[leaf] = value
    return parse_config(data)
