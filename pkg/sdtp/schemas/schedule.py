"""Pruning schedule schemas."""

import typing as t

from pydantic import BaseModel, ConfigDict, Field, model_validator


class PruneStage(BaseModel):
    """One pruning point: the layer it runs before and the surviving share."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    layer: int = Field(..., ge=0)
    keep_ratio: float = Field(..., gt=0.0, le=1.0)


class PruneSchedule(BaseModel):
    """Ordered pruning stages plus the token protection rule.

    `keep_ratio` is cumulative: the share of the ORIGINAL tokens alive at
    and after the stage.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    stages: t.Tuple[PruneStage, ...] = ()
    sink_count: int = Field(4, ge=0)
    local_fraction: float = Field(0.10, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def check_order(self) -> "PruneSchedule":
        """Layers strictly increase and ratios never increase.

        Returns:
            PruneSchedule: The validated schedule.
        """
        for prev, stage in zip(self.stages, self.stages[1:]):
            if stage.layer <= prev.layer:
                raise ValueError(
                    f"stage layers must increase, got {prev.layer} "
                    f"then {stage.layer}"
                )
            if stage.keep_ratio > prev.keep_ratio:
                raise ValueError(
                    f"keep ratios must not increase, got {prev.keep_ratio} "
                    f"then {stage.keep_ratio}"
                )
        return self

    @property
    def layers(self) -> t.Tuple[int, ...]:
        """Layer index of every stage."""
        return tuple(stage.layer for stage in self.stages)

    @property
    def ratios(self) -> t.Tuple[float, ...]:
        """Cumulative keep ratio of every stage."""
        return tuple(stage.keep_ratio for stage in self.stages)

    def stage_at(self, layer: int) -> int | None:
        """Index of the stage placed at `layer`, if any."""
        for index, stage in enumerate(self.stages):
            if stage.layer == layer:
                return index
        return None

    def ratio_at(self, layer: int) -> float:
        """Cumulative keep ratio in effect inside `layer`."""
        ratio: float = 1.0
        for stage in self.stages:
            if stage.layer <= layer:
                ratio = stage.keep_ratio
        return ratio
