"""Pruning placement and stage-count studies with oracle token selection.

Tokens are selected by their oracle saliency at the stage layer, so the
studies measure where and how often to prune independently of how well
a scorer has been trained.
"""

import logging
import math
import typing as t

import numpy as np
import numpy.typing as npt

from sdtp.core.models import ModelParams, forward, prefill_pruned
from sdtp.core.pruning import (
    LOCAL_FRACTION,
    SINK_COUNT,
    OracleScorer,
    build_schedule,
    keep_count,
)
from sdtp.schemas.config import SaliencyMode
from sdtp.schemas.reports import SweepReport, SweepRow
from sdtp.schemas.schedule import PruneSchedule, PruneStage
from sdtp.services.saliency_service import attribute
from sdtp.services.training_service import tail_nll

LOGGER: logging.Logger = logging.getLogger(__name__)

PLACEMENT_RATIOS: t.Tuple[float, ...] = (0.9, 0.8, 0.7)
STAGE_COUNT_RATIO: float = 0.9


class _OracleWindows:
    """Per-window saliency at every layer, plus the unpruned tail NLL."""

    def __init__(
        self,
        params: ModelParams,
        windows: npt.ArrayLike,
        mode: SaliencyMode,
        local_fraction: float,
    ) -> None:
        self.params = params
        self.windows = np.asarray(windows, dtype=np.int64)
        if self.windows.shape[0] == 0:
            raise ValueError("sweeps need at least one window")
        self.local_fraction = local_fraction
        n_layers: int = params.config.n_layers
        every_layer = PruneSchedule(
            stages=tuple(
                PruneStage(layer=layer, keep_ratio=1.0)
                for layer in range(n_layers)
            )
        )
        self.maps: t.List[t.List[np.ndarray]] = []
        self.tail_tokens: int = 0
        full_nll: float = 0.0
        for window in self.windows:
            inputs, labels = window[:-1], window[1:]
            self.maps.append(
                [
                    saliency.scores
                    for saliency in attribute(
                        params, inputs, labels, every_layer, mode
                    )
                ]
            )
            tail = self._tail(inputs.shape[0])
            logits = forward(params, inputs).logits.values
            full_nll += tail_nll(
                logits, np.arange(inputs.shape[0]), labels, tail
            )
            self.tail_tokens += int(tail.shape[0])
        self.baseline_perplexity: float = math.exp(
            full_nll / self.tail_tokens
        )

    def _tail(self, length: int) -> npt.NDArray[np.int64]:
        return np.arange(
            length - keep_count(self.local_fraction, length), length
        )

    def perplexity(self, schedule: PruneSchedule) -> float:
        """Held-out tail perplexity under oracle-selected pruning."""
        nll: float = 0.0
        for window, maps in zip(self.windows, self.maps):
            inputs, labels = window[:-1], window[1:]
            scorer = OracleScorer([maps[layer] for layer in schedule.layers])
            result = prefill_pruned(self.params, inputs, schedule, scorer)
            nll += tail_nll(
                result.logits,
                result.positions,
                labels,
                self._tail(inputs.shape[0]),
            )
        return math.exp(nll / self.tail_tokens)


def _row(
    oracle: _OracleWindows, study: str, schedule: PruneSchedule, step: int
) -> SweepRow:
    perplexity = oracle.perplexity(schedule)
    LOGGER.info(
        "%s: layers %s ratios %s -> perplexity %.4f",
        study,
        list(schedule.layers),
        list(schedule.ratios),
        perplexity,
    )
    return SweepRow(
        study=study,
        start_layer=schedule.layers[0],
        layer_step=step,
        stages=len(schedule.stages),
        keep_ratio=schedule.ratios[0],
        final_keep=schedule.ratios[-1],
        perplexity=perplexity,
    )


def placement_rows(
    oracle: _OracleWindows,
    ratios: t.Sequence[float],
    sink_count: int,
    local_fraction: float,
) -> t.List[SweepRow]:
    """Single-stage pruning at every layer for every ratio."""
    rows: t.List[SweepRow] = []
    for ratio in ratios:
        for layer in range(oracle.params.config.n_layers):
            schedule = PruneSchedule(
                stages=(PruneStage(layer=layer, keep_ratio=ratio),),
                sink_count=sink_count,
                local_fraction=local_fraction,
            )
            rows.append(_row(oracle, "placement", schedule, 0))
    return rows


def stage_count_rows(  # pylint: disable=too-many-arguments
    oracle: _OracleWindows,
    start_layer: int,
    layer_step: int,
    ratio: float,
    sink_count: int,
    local_fraction: float,
) -> t.List[SweepRow]:
    """Geometric schedules with one more stage each, while they fit."""
    n_layers: int = oracle.params.config.n_layers
    most: int = max(0, (n_layers - 1 - start_layer) // layer_step + 1)
    return [
        _row(
            oracle,
            "stages",
            build_schedule(
                stages,
                ratio,
                start_layer,
                layer_step,
                n_layers,
                sink_count,
                local_fraction,
            ),
            layer_step,
        )
        for stages in range(1, most + 1)
    ]


def run_sweeps(  # pylint: disable=too-many-arguments
    params: ModelParams,
    windows: npt.ArrayLike,
    start_layer: int = 1,
    layer_step: int = 1,
    placement_ratios: t.Sequence[float] = PLACEMENT_RATIOS,
    stage_ratio: float = STAGE_COUNT_RATIO,
    sink_count: int = SINK_COUNT,
    local_fraction: float = LOCAL_FRACTION,
    mode: SaliencyMode = SaliencyMode.ABS_DOT,
) -> SweepReport:
    """Placement study then stage-count study on held-out windows.

    Args:
        params (ModelParams): Base model.
        windows (ArrayLike): Held-out `L + 1` token windows.
        start_layer (int): First layer of the stage-count schedules.
        layer_step (int): Layer step of the stage-count schedules.
        placement_ratios (Sequence[float]): Keep ratios of the placement
            study.
        stage_ratio (float): Per-stage ratio of the stage-count study.
        sink_count (int): Protected leading tokens.
        local_fraction (float): Protected trailing share.
        mode (SaliencyMode): Oracle saliency reduction.

    Returns:
        SweepReport: One row per configuration.
    """
    oracle = _OracleWindows(params, windows, mode, local_fraction)
    rows = placement_rows(oracle, placement_ratios, sink_count, local_fraction)
    rows.extend(
        stage_count_rows(
            oracle,
            start_layer,
            layer_step,
            stage_ratio,
            sink_count,
            local_fraction,
        )
    )
    return SweepReport(
        windows=int(oracle.windows.shape[0]),
        baseline_perplexity=oracle.baseline_perplexity,
        rows=rows,
    )
