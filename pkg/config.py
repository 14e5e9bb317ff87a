"""
igct-lab Configuration
======================

Centralized configuration for schedules, mixture worlds, networks, training
and evaluation. Single source of truth for defaults and constants so that
training, sampling and the CLI never disagree.

A run is described by one JSON file:

    {
      "schedule": {...},   ScheduleConfig
      "world":    {...},   WorldConfig
      "train":    {...},   TrainConfig
      "net":      {...},   NetConfig
      "eval":     {...},   EvalConfig
      "seed": 0, "output_dir": "runs/two_mode", "run_id": "two_mode"
    }

Author: igct-lab Team
Version: 1.0
"""

import json
import math
import os
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError

# =============================================================================
# CONSTANTS - Single Source of Truth
# =============================================================================

SCHEMA_VERSION = 1

# The ∅ token. Class tables store it in their last row.
NULL_CLASS = -1

OUTPUT_DIR_ENV = "IGCT_LAB_OUTPUT_DIR"
LOG_LEVEL_ENV = "IGCT_LAB_LOG_LEVEL"

# Error log limits
ERROR_MESSAGE_MAX_LENGTH = 1000
ERROR_CONTEXT_MAX_LENGTH = 2000

ALGORITHMS = ("igct", "cfg-edm", "guided-cd")

# Noise/guidance schedule used for the image-scale runs
DEFAULT_SCHEDULE = {
    'p_mean': -1.1,
    'p_std': 2.0,
    't_min': 0.002,
    't_max': 80.0,
    'd': 40000,
    't_low': 11.0,
    't_high': 14.3,
    'w_min': 1.0,
    'w_max': 15.0,
    'sigma_data': 0.5,
    'q_cap': 0.9,
}


# =============================================================================
# SCHEDULE
# =============================================================================

class ScheduleConfig(BaseModel):
    """All time/noise/guidance schedule constants."""
    model_config = ConfigDict(extra='forbid')

    p_mean: float
    p_std: float = Field(gt=0)
    t_min: float = Field(gt=0)
    t_max: float
    d: int = Field(ge=1)
    t_low: float = 11.0
    t_high: float = 14.3
    w_min: float = Field(ge=0)
    w_max: float
    sigma_data: Optional[float] = Field(default=None, gt=0)  # None: measured from the world
    q_cap: float = Field(default=0.9, ge=0, le=1)

    @model_validator(mode='after')
    def _check_ordering(self):
        if not (self.t_min < self.t_low < self.t_high < self.t_max):
            raise ValueError("need 0 < t_min < t_low < t_high < t_max")
        if self.w_max < self.w_min:
            raise ValueError("need w_max >= w_min")
        return self

    @property
    def sigma(self) -> float:
        """sigma_data, required once the schedule is bound to a world."""
        if self.sigma_data is None:
            raise ValueError("schedule.sigma_data is unset; bind the schedule to a world first")
        return self.sigma_data


def default_schedule(**overrides) -> ScheduleConfig:
    """Schedule with the published constants, optionally overridden."""
    values = dict(DEFAULT_SCHEDULE)
    values.update(overrides)
    return ScheduleConfig(**values)


# =============================================================================
# WORLD
# =============================================================================

class ComponentConfig(BaseModel):
    """One isotropic Gaussian component of the labeled mixture."""
    model_config = ConfigDict(extra='forbid')

    class_id: int = Field(ge=0)
    mean: List[float]
    std: float = Field(gt=0)
    weight: float = Field(gt=0)


class WorldConfig(BaseModel):
    """Labeled Gaussian-mixture world definition."""
    model_config = ConfigDict(extra='forbid')

    dims: int = Field(ge=1)
    components: List[ComponentConfig] = Field(min_length=1)

    @model_validator(mode='after')
    def _check_components(self):
        for i, comp in enumerate(self.components):
            if len(comp.mean) != self.dims:
                raise ValueError(f"components[{i}].mean has {len(comp.mean)} entries, dims is {self.dims}")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"component weights sum to {total}, expected 1")
        present = {c.class_id for c in self.components}
        missing = [k for k in range(max(present) + 1) if k not in present]
        if missing:
            raise ValueError(f"class ids {missing} have no component")
        return self

    @property
    def n_classes(self) -> int:
        return max(c.class_id for c in self.components) + 1


def two_mode_world(std: float = 0.2, separation: float = 2.0) -> WorldConfig:
    """The 1D two-mode toy: class 0 at -separation, class 1 at +separation."""
    return WorldConfig(dims=1, components=[
        ComponentConfig(class_id=0, mean=[-separation], std=std, weight=0.5),
        ComponentConfig(class_id=1, mean=[separation], std=std, weight=0.5),
    ])


# =============================================================================
# NETWORK / TRAINING / EVALUATION
# =============================================================================

class NetConfig(BaseModel):
    """Conditioned MLP architecture."""
    model_config = ConfigDict(extra='forbid')

    hidden_width: int = Field(default=128, ge=1)
    hidden_layers: int = Field(default=2, ge=1)
    time_features: int = Field(default=32, ge=2)
    class_features: int = Field(default=16, ge=1)
    guidance_features: int = Field(default=16, ge=2)
    time_scale: float = 10.0
    guidance_scale: float = 1.0
    max_period: float = Field(default=1000.0, gt=1)
    zero_init_output: bool = True

    @field_validator('time_features', 'guidance_features')
    @classmethod
    def _even(cls, v: int) -> int:
        if v % 2:
            raise ValueError("sinusoidal feature counts must be even")
        return v


class TrainConfig(BaseModel):
    """Training-loop settings shared by iGCT and both baselines."""
    model_config = ConfigDict(extra='forbid')

    batch_size: int = Field(default=256, ge=1)
    total_iterations: int = Field(default=20000, ge=1)
    i_skip: int = Field(default=10, ge=1)
    # (until_iteration, value); value holds while k <= until. None = open-ended.
    lambda_recon_schedule: List[Tuple[Optional[int], float]] = [(None, 2e-5)]
    huber_c: float = Field(default=0.03, gt=0)
    label_dropout: float = Field(default=0.1, ge=0, le=1)
    distill_n: int = Field(default=18, ge=1)
    rho: float = Field(default=7.0, gt=0)
    lr: float = Field(default=1e-4, gt=0)
    # cosine-anneal lr down to lr_final over the run; None keeps lr constant
    lr_final: Optional[float] = Field(default=None, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    max_halvings: Optional[int] = Field(default=9, ge=0)
    checkpoint_every: Optional[int] = Field(default=5000, ge=1)
    log_every: int = Field(default=1000, ge=1)
    eval_every: Optional[int] = Field(default=None, ge=1)
    eval_samples: int = Field(default=2000, ge=2)
    record_wall_time: bool = False

    @field_validator('lambda_recon_schedule')
    @classmethod
    def _check_recon_schedule(cls, stages):
        if not stages:
            raise ValueError("lambda_recon_schedule needs at least one stage")
        thresholds = [until for until, _ in stages]
        if any(u is None for u in thresholds[:-1]):
            raise ValueError("only the last lambda_recon stage may be open-ended")
        bounded = [u for u in thresholds if u is not None]
        if any(b <= a for a, b in zip(bounded, bounded[1:])):
            raise ValueError("lambda_recon thresholds must be strictly increasing")
        if any(value < 0 for _, value in stages):
            raise ValueError("lambda_recon values must be >= 0")
        return stages


class EvalConfig(BaseModel):
    """Metric and sampler settings."""
    model_config = ConfigDict(extra='forbid')

    knn_k: int = Field(default=5, ge=1)
    band_sigmas: float = Field(default=3.0, gt=0)
    n_samples: int = Field(default=10000, ge=2)
    w_values: List[float] = [1.0, 7.0, 13.0]
    sliced_projections: int = Field(default=128, ge=1)
    t_mid: float = Field(default=0.8, gt=0)
    heun_steps: int = Field(default=18, ge=1)
    ddim_steps: int = Field(default=18, ge=1)


class RunConfig(BaseModel):
    """Top-level run configuration."""
    model_config = ConfigDict(extra='forbid')

    schedule: ScheduleConfig
    world: WorldConfig
    train: TrainConfig = TrainConfig()
    net: NetConfig = NetConfig()
    eval: EvalConfig = EvalConfig()
    seed: int = 0
    output_dir: str = "runs/default"
    run_id: str = "run"

    @model_validator(mode='after')
    def _bind_schedule_to_world(self):
        if self.schedule.sigma_data is None:
            from oracle import MixtureWorld
            self.schedule.sigma_data = MixtureWorld.from_config(self.world).sigma_data
        if not (self.schedule.t_min <= self.eval.t_mid <= self.schedule.t_max):
            raise ValueError("eval.t_mid must lie in [schedule.t_min, schedule.t_max]")
        # k-NN radii need more than knn_k points in every evaluated set
        if self.train.eval_samples <= self.eval.knn_k:
            raise ValueError(f"train.eval_samples must exceed eval.knn_k={self.eval.knn_k}")
        if self.eval.n_samples <= self.eval.knn_k:
            raise ValueError(f"eval.n_samples must exceed eval.knn_k={self.eval.knn_k}")
        return self


# =============================================================================
# LOADING / SERIALIZATION
# =============================================================================

def _field_path(loc) -> str:
    """('schedule', 't_max') -> 'schedule.t_max'"""
    return ".".join(str(part) for part in loc) if loc else "<root>"


def parse_run_config(data: Dict) -> RunConfig:
    """
    Validate a config dict.

    Raises:
        ConfigError: message names the first offending field
    """
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = _field_path(first.get('loc'))
        raise ConfigError(
            f"{field}: {first.get('msg')}",
            details={"field": field, "errors": len(e.errors())},
        ) from e


def load_run_config(path) -> RunConfig:
    """Read and validate a JSON run config."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {path} ({e})") from e
    return parse_run_config(data)


def dump_run_config(cfg: RunConfig) -> Dict:
    """JSON-ready dict; parse(dump(cfg)) == cfg."""
    return cfg.model_dump(mode='json')


def resolve_output_dir(cfg: RunConfig) -> Path:
    """Output directory, with the IGCT_LAB_OUTPUT_DIR override applied."""
    override = os.getenv(OUTPUT_DIR_ENV, "").strip()
    return Path(override) if override else Path(cfg.output_dir)


def lambda_recon_at(k: int, stages: List[Tuple[Optional[int], float]]) -> float:
    """Active λ_recon at iteration k (step function; past the last bound the last value holds)."""
    for until, value in stages:
        if until is None or k <= until:
            return value
    return stages[-1][1]


def lr_at(k: int, train_cfg: TrainConfig, stop: int) -> float:
    """Learning rate for iteration k of a run ending at stop (cosine from lr to lr_final)."""
    if train_cfg.lr_final is None:
        return train_cfg.lr
    progress = min(k / stop, 1.0) if stop > 0 else 1.0
    return train_cfg.lr_final + 0.5 * (train_cfg.lr - train_cfg.lr_final) * (1.0 + math.cos(math.pi * progress))


# =============================================================================
# EXPORTS
# =============================================================================

__all__ = [
    # Constants
    'SCHEMA_VERSION',
    'NULL_CLASS',
    'OUTPUT_DIR_ENV',
    'LOG_LEVEL_ENV',
    'ERROR_MESSAGE_MAX_LENGTH',
    'ERROR_CONTEXT_MAX_LENGTH',
    'ALGORITHMS',
    'DEFAULT_SCHEDULE',

    # Schemas
    'ScheduleConfig',
    'ComponentConfig',
    'WorldConfig',
    'NetConfig',
    'TrainConfig',
    'EvalConfig',
    'RunConfig',

    # Helpers
    'default_schedule',
    'two_mode_world',
    'parse_run_config',
    'load_run_config',
    'dump_run_config',
    'resolve_output_dir',
    'lambda_recon_at',
    'lr_at',
]
