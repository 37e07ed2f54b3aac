"""Run configuration: pydantic documents plus .env-driven defaults."""

import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from behavior_data import SyntheticSpec
from errors import ConfigError

load_dotenv()

DEFAULT_LOG_LEVEL = os.getenv("BEHAVIOR_TUNE_LOG_LEVEL", "INFO")
DEFAULT_OUT_DIR = os.getenv("BEHAVIOR_TUNE_OUT_DIR", "runs")
DEFAULT_SEED = int(os.getenv("BEHAVIOR_TUNE_SEED", "0"))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Strict):
    """Shape of the surrogate sequence predictor."""

    embedding_dim: int = Field(32, ge=1)
    hidden_dim: int = Field(64, ge=1)
    location_buckets: int = Field(16, ge=1)
    history_length: int = Field(20, ge=1)


class OptimizerConfig(_Strict):
    """One training stage; ``parameters`` picks the arrays it updates."""

    kind: Literal["sgd", "adam"] = "sgd"
    learning_rate: float = Field(0.5, gt=0)
    epochs: int = Field(8, ge=0, le=100)
    batch_size: int = Field(8, ge=1)
    warmup_ratio: float = Field(0.1, ge=0, le=1)
    schedule: Literal["cosine", "constant"] = "cosine"
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    parameters: Literal["base", "adapter", "all"] = "base"


class PipelineConfig(_Strict):
    """Every hyperparameter of the two-stage schedule plus ablation switches."""

    seed: int = DEFAULT_SEED
    split_ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)

    anchor_threshold: float = 0.01
    head_threshold: float = 0.05
    medium_threshold: float = 0.01

    epsilon: float = Field(0.05, ge=0)
    aux_max_len: int = Field(512, ge=1)
    aux_corpus_size: int = Field(2000, ge=0)
    balance_lambda: float = Field(0.5, ge=0, le=1)
    samples_per_class: int = Field(20, ge=1)
    beta: float = Field(0.1, gt=0)
    head_tolerance: Optional[float] = Field(0.03, ge=0, le=1)
    balanced_per_class: int = Field(50, ge=1)
    precision_weighting: Literal["support", "predicted"] = "support"

    model: ModelConfig = Field(default_factory=ModelConfig)
    stage_a: OptimizerConfig = Field(default_factory=OptimizerConfig)
    stage_b: OptimizerConfig = Field(default_factory=lambda: OptimizerConfig(
        learning_rate=30.0, epochs=20, parameters="adapter"))
    synthetic: Optional[SyntheticSpec] = None

    # ablation switches
    selection: Literal["kmeans", "random", "topk"] = "kmeans"
    skip_stage_a: bool = False
    b_loss: Literal["dpo", "sft"] = "dpo"
    stage_a_source: Literal["anchor", "all", "tail"] = "anchor"
    on_correct: Literal["runner_up", "drop"] = "runner_up"
    invert_penalty: bool = False
    include_target_context: bool = True

    @model_validator(mode="after")
    def _check_consistency(self):
        if not (0 < self.medium_threshold < self.head_threshold < 1 and 0 < self.anchor_threshold < 1):
            raise ValueError("thresholds must satisfy 0 < medium < head < 1 and 0 < anchor < 1")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9 or min(self.split_ratios) < 0:
            raise ValueError("split_ratios must be non-negative and sum to 1")
        if self.synthetic is not None and self.synthetic.history_length != self.model.history_length:
            raise ValueError("synthetic.history_length must equal model.history_length")
        return self

    @property
    def history_length(self) -> int:
        return self.model.history_length


class PathsConfig(_Strict):
    events: Optional[str] = None
    label_map: Optional[str] = None
    aux_corpus: Optional[str] = None
    out_dir: str = DEFAULT_OUT_DIR


class RunConfig(_Strict):
    """The run configuration file: pipeline settings, I/O paths, log level."""

    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = DEFAULT_LOG_LEVEL.upper()

    @model_validator(mode="after")
    def _check_data_source(self):
        if self.paths.events is None and self.pipeline.synthetic is None:
            raise ValueError("either paths.events or pipeline.synthetic must be set")
        return self


def config_hash(config: BaseModel) -> str:
    """SHA-256 of the canonical JSON form of a config document."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_run_config(path) -> RunConfig:
    """Read and validate a run configuration JSON file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    try:
        return RunConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e
