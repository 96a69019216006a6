import math

import pytest

from sdtp.services.sweep_service import run_sweeps


def test_sweeps_cover_every_layer_and_stage_count(tiny_params, windows):
    report = run_sweeps(tiny_params, windows[:2], sink_count=2)
    placement = [row for row in report.rows if row.study == "placement"]
    stages = [row for row in report.rows if row.study == "stages"]
    assert len(placement) == 3 * tiny_params.config.n_layers
    assert [row.stages for row in stages] == [1, 2, 3]
    assert stages[-1].final_keep == pytest.approx(0.9**3)
    assert report.windows == 2
    for row in report.rows:
        assert math.isfinite(row.perplexity) and row.perplexity > 1.0


def test_keeping_everything_matches_the_unpruned_baseline(
    tiny_params, windows
):
    report = run_sweeps(
        tiny_params, windows[:2], placement_ratios=(1.0,), stage_ratio=1.0
    )
    for row in report.rows:
        assert row.perplexity == pytest.approx(
            report.baseline_perplexity, rel=1e-9
        )


def test_sweeps_need_windows(tiny_params, windows):
    with pytest.raises(ValueError):
        run_sweeps(tiny_params, windows[:0])
