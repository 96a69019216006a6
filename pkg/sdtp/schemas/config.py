"""Run configuration schemas."""

import logging
import typing as t
from enum import Enum
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, model_validator

from sdtp.core.kv_cache import KVCachePolicy
from sdtp.core.pruning import LOCAL_FRACTION, SINK_COUNT, build_schedule
from sdtp.schemas.model import ModelConfig
from sdtp.schemas.schedule import PruneSchedule, PruneStage

LOGGER: logging.Logger = logging.getLogger(__name__)


class SaliencyMode(str, Enum):
    """Reduction of gradient times input to one score per token."""

    ABS_DOT = "abs-dot"
    DOT = "dot"
    L1 = "l1"


class ReportFormat(str, Enum):
    """Output forms of a report."""

    TEXT = "text"
    JSON = "json"


class ModelBlock(ModelConfig):
    """Model shape, optionally backed by a saved checkpoint."""

    checkpoint: Path | None = None

    def to_model_config(self) -> ModelConfig:
        """Shape without the checkpoint reference."""
        return ModelConfig(**self.model_dump(exclude={"checkpoint"}))


class ScheduleConfig(BaseModel):
    """Geometric schedule parameters or an explicit stage list.

    An explicit `stages` list wins over the geometric fields.
    """

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    n_stages: int = Field(10, ge=0, alias="S")
    ratio: float = Field(0.9, gt=0.0, le=1.0, alias="r")
    start_layer: int = Field(4, ge=0)
    layer_step: int = Field(3, ge=1)
    sink_count: int = Field(SINK_COUNT, ge=0)
    local_fraction: float = Field(LOCAL_FRACTION, ge=0.0, le=1.0)
    stages: t.List[PruneStage] | None = None

    def resolve(self, n_layers: int) -> PruneSchedule:
        """Concrete schedule for a model of depth `n_layers`.

        Args:
            n_layers (int): Model depth.

        Returns:
            PruneSchedule: The schedule.
        """
        if self.stages is not None:
            return PruneSchedule(
                stages=tuple(self.stages),
                sink_count=self.sink_count,
                local_fraction=self.local_fraction,
            )
        return build_schedule(
            self.n_stages,
            self.ratio,
            self.start_layer,
            self.layer_step,
            n_layers,
            self.sink_count,
            self.local_fraction,
        )


class LossWeights(BaseModel):
    """Per-term weights of the total loss."""

    model_config = ConfigDict(extra="forbid")

    cls: float = Field(1.0, ge=0.0)
    mse: float = Field(1.0, ge=0.0)
    rank: float = Field(1.0, ge=0.0)
    ratio: float = Field(1.0, ge=0.0)


class TrainConfig(BaseModel):
    """Scorer training hyperparameters."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(2, ge=1)
    batch_size: int = Field(4, ge=1)
    learning_rate: float = Field(1e-3, ge=0.0)
    betas: t.Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0.0)
    gumbel_temperature: float = Field(1.0, gt=0.0)
    loss_weights: LossWeights = LossWeights()
    pair_budget: int = Field(4096, ge=1)
    seed: int = 0
    saliency_mode: SaliencyMode = SaliencyMode.ABS_DOT
    freeze: bool = True
    baseline: bool = False
    use_mse: bool = True
    use_rank: bool = True
    use_ratio: bool = False
    cache_targets: bool = False
    workers: int = Field(1, ge=1)
    window_length: int = Field(256, ge=2)
    holdout_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    eval_windows: int = Field(32, ge=1)
    max_steps: int | None = Field(None, ge=1)
    pretrain_epochs: int = Field(1, ge=0)
    pretrain_learning_rate: float = Field(3e-3, ge=0.0)

    @property
    def terms(self) -> t.Tuple[bool, bool, bool]:
        """Effective (mse, rank, ratio) switches; baseline is ratio only."""
        if self.baseline:
            return False, False, True
        return self.use_mse, self.use_rank, self.use_ratio


class IOConfig(BaseModel):
    """Inputs and outputs of a run."""

    model_config = ConfigDict(extra="forbid")

    corpus: Path | None = None
    output_dir: Path | None = None
    report_formats: t.List[ReportFormat] = [
        ReportFormat.TEXT,
        ReportFormat.JSON,
    ]


class RunConfig(BaseModel):
    """Everything a command needs; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")

    model: ModelBlock = ModelBlock()
    schedule: ScheduleConfig = ScheduleConfig()
    train: TrainConfig = TrainConfig()
    kv: KVCachePolicy = KVCachePolicy()
    io: IOConfig = IOConfig()
    seed: int = 0

    @model_validator(mode="after")
    def share_seed(self) -> "RunConfig":
        """The run seed drives training and evaluation draws.

        An explicit `train.seed` that disagrees is overridden with a
        warning.

        Returns:
            RunConfig: The validated config.
        """
        if self.train.seed != self.seed:
            if "seed" in self.train.model_fields_set:
                LOGGER.warning(
                    "train.seed %d is replaced by the run seed %d",
                    self.train.seed,
                    self.seed,
                )
            self.train = self.train.model_copy(update={"seed": self.seed})
        return self
