import math

import numpy as np
import pytest

from sdtp.core.kv_cache import (
    BudgetTooSmallError,
    KVCachePolicy,
    PolicyKind,
)
from sdtp.core.models import FrozenParameterError
from sdtp.core.pruning import build_schedule
from sdtp.schemas.schedule import PruneSchedule, PruneStage
from sdtp.services.training_service import (
    AdamOptimizer,
    CorpusTooSmallError,
    EmptyBatchError,
    EvalMode,
    TrainerService,
    evaluate,
    pretrain_base,
    tail_nll,
)


def _trainer(params, schedule, config, **updates):
    return TrainerService(params, schedule, config.model_copy(update=updates))


def test_adam_moves_against_the_gradient():
    optimizer = AdamOptimizer(0.1)
    arrays = {"w": np.array([1.0, -1.0])}
    updated = optimizer.step(arrays, {"w": np.array([2.0, -3.0])})
    assert np.allclose(updated["w"], [0.9, -0.9])
    assert np.array_equal(arrays["w"], [1.0, -1.0])


def test_marking_pass_is_deterministic_and_guarded(
    tiny_params, tiny_schedule, train_config, windows
):
    trainer = _trainer(tiny_params, tiny_schedule, train_config)
    first = trainer.marking_pass(windows[:2])
    again = trainer.marking_pass(windows[:2])
    assert len(first) == 2
    for left, right in zip(first[1], again[1]):
        assert np.array_equal(left.scores, right.scores)
    with pytest.raises(EmptyBatchError):
        trainer.marking_pass(windows[:0])


def test_cached_targets_match_fresh_ones(
    tiny_params, tiny_schedule, train_config, windows
):
    cached = _trainer(
        tiny_params, tiny_schedule, train_config, cache_targets=True
    )
    fresh = _trainer(tiny_params, tiny_schedule, train_config)
    cached.marking_pass(windows[:2])
    for left, right in zip(
        cached.marking_pass(windows[:2])[0], fresh.marking_pass(windows[:2])[0]
    ):
        assert np.array_equal(left.scores, right.scores)


def test_pruning_pass_reports_finite_components(
    tiny_params, tiny_schedule, train_config, windows
):
    trainer = _trainer(tiny_params, tiny_schedule, train_config)
    batch = windows[:2]
    report = trainer.pruning_pass(batch, trainer.marking_pass(batch))
    for value in (report.cls, report.mse, report.rank, report.total):
        assert math.isfinite(value)
    assert report.ratio is None
    assert len(report.mse_per_stage) == len(tiny_schedule.stages)
    assert trainer.step_count == 1


def test_freeze_keeps_the_base_model_intact(
    tiny_params, tiny_schedule, train_config, windows
):
    before = tiny_params.checksum()
    trainer = _trainer(tiny_params, tiny_schedule, train_config, max_steps=10)
    result = trainer.train(windows)
    assert len(result.metrics) == 10
    assert tiny_params.checksum() == before
    assert result.checkpoint.metadata.base_checksum == before


def test_zero_learning_rate_leaves_scorers_unchanged(
    tiny_params, tiny_schedule, train_config, windows
):
    trainer = _trainer(
        tiny_params, tiny_schedule, train_config, learning_rate=0.0
    )
    before = trainer.scorers.checksum()
    result = trainer.train(windows)
    assert trainer.scorers.checksum() == before
    assert result.metrics[-1].total > 0.0


def test_training_is_reproducible(
    tiny_params, tiny_schedule, train_config, windows
):
    first = _trainer(tiny_params, tiny_schedule, train_config).train(windows)
    again = _trainer(tiny_params, tiny_schedule, train_config).train(windows)
    assert (
        first.checkpoint.metadata.scorer_checksum
        == again.checkpoint.metadata.scorer_checksum
    )
    assert [m.total for m in first.metrics] == [
        m.total for m in again.metrics
    ]


def test_parallel_items_match_serial_items(
    tiny_params, tiny_schedule, train_config, windows
):
    serial = _trainer(tiny_params, tiny_schedule, train_config).train(windows)
    parallel = _trainer(
        tiny_params, tiny_schedule, train_config, workers=2
    ).train(windows)
    assert (
        serial.checkpoint.metadata.scorer_checksum
        == parallel.checkpoint.metadata.scorer_checksum
    )


def test_baseline_uses_only_the_ratio_term(
    tiny_params, tiny_schedule, train_config, windows
):
    result = _trainer(
        tiny_params, tiny_schedule, train_config, baseline=True
    ).train(windows)
    last = result.metrics[-1]
    assert last.mse == 0.0 and last.rank == 0.0
    assert last.ratio is not None and math.isfinite(last.ratio)


def test_training_needs_one_full_batch(
    tiny_params, tiny_schedule, train_config, windows
):
    trainer = _trainer(tiny_params, tiny_schedule, train_config)
    with pytest.raises(CorpusTooSmallError):
        trainer.train(windows[:1])


def test_unfrozen_training_updates_the_base_model(
    tiny_params, tiny_schedule, train_config, windows
):
    before = tiny_params.checksum()
    trainer = _trainer(
        tiny_params, tiny_schedule, train_config, freeze=False, max_steps=1
    )
    trainer.train(windows)
    assert tiny_params.checksum() != before
    tiny_params.frozen = True
    with pytest.raises(FrozenParameterError):
        tiny_params.assign("wte", tiny_params.arrays["wte"])


def test_pretraining_lowers_the_loss(tiny_params, train_config, windows):
    losses = []
    config = train_config.model_copy(
        update={"max_steps": None, "pretrain_epochs": 2}
    )
    trained = pretrain_base(
        tiny_params, windows[:16], config, lambda _, loss: losses.append(loss)
    )
    assert trained.frozen
    assert trained.checksum() != tiny_params.checksum()
    assert np.mean(losses[-3:]) < np.mean(losses[:3])


def test_tail_nll_of_uniform_logits():
    logits = np.zeros((4, 8))
    positions = np.array([0, 2, 4, 5])
    total = tail_nll(logits, positions, np.arange(6), np.array([4, 5]))
    assert total == pytest.approx(2 * math.log(8))


def test_full_equals_pruned_at_ratio_one(tiny_params, windows):
    schedule = PruneSchedule(
        stages=(PruneStage(layer=1, keep_ratio=1.0),),
        sink_count=2,
    )
    full = evaluate(tiny_params, None, schedule, windows[:3], EvalMode.FULL)
    pruned = evaluate(
        tiny_params, None, schedule, windows[:3], EvalMode.RANDOM
    )
    assert full.perplexity == pytest.approx(pruned.perplexity, rel=1e-9)


def test_random_evaluation_is_reproducible(tiny_params, windows):
    schedule = build_schedule(2, 0.7, 1, 2, 4, sink_count=2)
    first = evaluate(
        tiny_params, None, schedule, windows[:3], EvalMode.RANDOM, seed=5
    )
    again = evaluate(
        tiny_params, None, schedule, windows[:3], EvalMode.RANDOM, seed=5
    )
    assert first.model_dump() == again.model_dump()


def test_pruned_evaluation_reports_counts_and_correlation(
    tiny_params, tiny_schedule, tiny_scorers, windows
):
    report = evaluate(
        tiny_params, tiny_scorers, tiny_schedule, windows[:3]
    )
    assert report.mode == EvalMode.PRUNED.value
    assert len(report.kept_counts) == len(tiny_schedule.stages)
    assert report.kept_counts == sorted(report.kept_counts, reverse=True)
    assert report.spearman is not None
    assert len(report.spearman) == len(tiny_schedule.stages)
    assert report.perplexity > 1.0


def test_pretraining_stops_at_the_step_cap(tiny_params, train_config, windows):
    steps = []
    config = train_config.model_copy(
        update={"max_steps": 2, "pretrain_epochs": 3}
    )
    pretrain_base(
        tiny_params, windows[:8], config, lambda step, _: steps.append(step)
    )
    assert steps == [1, 2]


@pytest.fixture(name="heavy_hitters")
def fixture_heavy_hitters():
    return KVCachePolicy(
        kind=PolicyKind.HEAVY_HITTER, budget_fraction=0.4, sink_count=2
    )


def test_unbounded_cache_decoding_matches_one_prefill(
    tiny_params, tiny_schedule, long_windows
):
    held = long_windows[:2]
    plain = evaluate(tiny_params, None, tiny_schedule, held, EvalMode.FULL)
    decoded = evaluate(
        tiny_params,
        None,
        tiny_schedule,
        held,
        EvalMode.FULL,
        kv_policy=KVCachePolicy(),
    )
    assert decoded.tail_tokens == plain.tail_tokens
    assert decoded.perplexity == pytest.approx(plain.perplexity, rel=1e-6)
    assert decoded.kv_policy == "none"
    assert decoded.kv_budget is None and decoded.budget_respected is None
    assert decoded.max_cache_entries == 48


def test_heavy_hitter_perplexity_with_and_without_pruning(
    tiny_params, tiny_schedule, tiny_scorers, long_windows, heavy_hitters
):
    held = long_windows[:3]
    alone = evaluate(
        tiny_params,
        None,
        tiny_schedule,
        held,
        EvalMode.FULL,
        kv_policy=heavy_hitters,
    )
    composed = evaluate(
        tiny_params,
        tiny_scorers,
        tiny_schedule,
        held,
        EvalMode.PRUNED,
        kv_policy=heavy_hitters,
    )
    for report in (alone, composed):
        assert math.isfinite(report.perplexity) and report.perplexity > 1.0
        assert report.kv_policy == "heavy_hitter:0.4"
        assert report.budget_respected is True
        assert report.max_cache_entries <= report.kv_budget
        assert report.tail_tokens == 3 * 5
    # 43 prefix tokens, 23 of them left after the last stage
    assert alone.kv_budget == 18
    assert composed.kv_budget == 10
    assert composed.kept_counts == [35.0, 28.0, 23.0]
    assert composed.perplexity == pytest.approx(alone.perplexity, rel=0.1)


def test_budget_too_small_for_the_sinks_is_refused(
    tiny_params, tiny_schedule, windows
):
    with pytest.raises(BudgetTooSmallError):
        evaluate(
            tiny_params,
            None,
            tiny_schedule,
            windows[:1],
            EvalMode.FULL,
            kv_policy=KVCachePolicy(
                kind=PolicyKind.LOCAL, budget_fraction=0.1
            ),
        )


def test_short_training_lowers_rank_and_mse(
    tiny_params, tiny_schedule, train_config, windows
):
    trainer = _trainer(
        tiny_params,
        tiny_schedule,
        train_config,
        epochs=40,
        max_steps=None,
        learning_rate=1e-2,
        pair_budget=4096,
        cache_targets=True,
    )
    metrics = trainer.train(windows[:2]).metrics
    assert len(metrics) == 40
    rank = [m.rank for m in metrics]
    mse = [m.mse for m in metrics]
    assert np.mean(rank[-5:]) < np.mean(rank[:5])
    assert np.mean(mse[-5:]) < np.mean(mse[:5])
