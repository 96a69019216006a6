"""Two-pass scorer training, base-model pretraining and evaluation."""

import hashlib
import json
import logging
import math
import typing as t
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import numpy.typing as npt
from scipy.special import log_softmax
from scipy.stats import spearmanr

from sdtp.core import diffmath as dm
from sdtp.core.config import SETTINGS
from sdtp.core.diffmath import Array, DiffTensor, Tape
from sdtp.core.errors import SdtpError
from sdtp.core.kv_cache import KVCachePolicy
from sdtp.core.models import (
    FrozenParameterError,
    ModelParams,
    forward,
    prefill_pruned,
)
from sdtp.core.pruning import (
    RandomScorer,
    ScorerParams,
    StageScorer,
    check_schedule,
    force_protected,
    init_scorers,
    keep_count,
    keep_margin,
    keep_probability,
    protected_set,
    sample_mask,
    score_tokens,
)
from sdtp.schemas.config import TrainConfig
from sdtp.schemas.profile import ArchProfile
from sdtp.schemas.reports import (
    EvalReport,
    LossReport,
    StepMetrics,
    TrainingMetadata,
)
from sdtp.schemas.schedule import PruneSchedule
from sdtp.services.kv_cache_service import decode_tail_nll
from sdtp.services.objectives import (
    lm_cross_entropy,
    mse_loss,
    ranking_loss_stage,
    ratio_loss,
    total_loss,
)
from sdtp.services.saliency_service import (
    SaliencyMap,
    SaliencyService,
    attribute,
)
from sdtp.utils.checkpoints import Checkpoint

LOGGER: logging.Logger = logging.getLogger(__name__)

Windows = npt.NDArray[np.int64]
StepCallback = t.Callable[[StepMetrics], None]


class CorpusTooSmallError(SdtpError, ValueError):
    """Raised when there are fewer windows than one batch needs."""

    def __init__(self, windows: int, batch_size: int) -> None:
        """Initialize CorpusTooSmallError.

        Args:
            windows (int): Windows available.
            batch_size (int): Windows per batch.
        """
        self.windows = windows
        self.batch_size = batch_size
        super().__init__(
            f"corpus yields {windows} training windows, one batch needs "
            f"{batch_size}"
        )


class EmptyBatchError(SdtpError, ValueError):
    """Raised when a training pass receives no sequences."""

    def __init__(self) -> None:
        super().__init__("batch is empty")


class EvalMode(str, Enum):
    """Which prefill evaluation runs."""

    FULL = "full"
    PRUNED = "pruned"
    RANDOM = "random"


class AdamOptimizer:
    """Adaptive moment estimation over named arrays."""

    def __init__(
        self,
        learning_rate: float,
        betas: t.Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        """Initialize AdamOptimizer.

        Args:
            learning_rate (float): Step size.
            betas (Tuple[float, float]): Moment decay rates.
            eps (float): Denominator guard.
        """
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps: int = 0
        self.first: t.Dict[str, Array] = {}
        self.second: t.Dict[str, Array] = {}

    def step(
        self, arrays: t.Mapping[str, Array], grads: t.Mapping[str, Array]
    ) -> t.Dict[str, Array]:
        """Updated copies of the arrays that have a gradient.

        Args:
            arrays (Mapping[str, Array]): Current values.
            grads (Mapping[str, Array]): Gradients by name.

        Returns:
            Dict[str, Array]: New values, same dtypes as before.
        """
        self.steps += 1
        correction1: float = 1.0 - self.beta1**self.steps
        correction2: float = 1.0 - self.beta2**self.steps
        updated: t.Dict[str, Array] = {}
        for name in sorted(grads):
            grad = grads[name].astype(np.float64)
            first = self.first.get(name, np.zeros_like(grad))
            second = self.second.get(name, np.zeros_like(grad))
            first = self.beta1 * first + (1.0 - self.beta1) * grad
            second = self.beta2 * second + (1.0 - self.beta2) * grad**2
            self.first[name], self.second[name] = first, second
            step = (
                self.learning_rate
                * (first / correction1)
                / (np.sqrt(second / correction2) + self.eps)
            )
            current = arrays[name]
            updated[name] = (current.astype(np.float64) - step).astype(
                current.dtype
            )
        return updated


def config_hash(*blocks: t.Any) -> str:
    """SHA-256 of the JSON form of configuration blocks."""
    payload = json.dumps(
        [block.model_dump(mode="json") for block in blocks], sort_keys=True
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def _mean_grads(
    per_item: t.Sequence[t.Mapping[str, Array]]
) -> t.Dict[str, Array]:
    # Sum in item order so the result does not depend on worker count
    total: t.Dict[str, Array] = {}
    for grads in per_item:
        for name, grad in grads.items():
            total[name] = grad if name not in total else total[name] + grad
    return {name: grad / len(per_item) for name, grad in total.items()}


@dataclass
class ItemOutcome:
    """Gradients and loss values of one sequence."""

    scorer_grads: t.Dict[str, Array]
    base_grads: t.Dict[str, Array]
    report: LossReport


@dataclass
class _StageRecord:
    logits: DiffTensor
    keep_prob: DiffTensor
    include: npt.NDArray[np.bool_]


@dataclass
class _GateState:
    protected: npt.NDArray[np.int64]
    alive: npt.NDArray[np.bool_]
    gate: DiffTensor | None = None
    soft: DiffTensor | None = None
    records: t.List[_StageRecord] = field(default_factory=list)
    soft_history: t.List[DiffTensor] = field(default_factory=list)


@dataclass
class TrainingResult:
    """Trained checkpoint and the per-step metrics."""

    checkpoint: Checkpoint
    metrics: t.List[StepMetrics]


class TrainerService:
    """Token marking then token pruning, one optimizer step per batch."""

    def __init__(
        self,
        params: ModelParams,
        schedule: PruneSchedule,
        config: TrainConfig,
        scorers: ScorerParams | None = None,
    ) -> None:
        """Initialize TrainerService.

        Args:
            params (ModelParams): Base model; frozen unless
                `config.freeze` is off.
            schedule (PruneSchedule): Pruning stages.
            config (TrainConfig): Hyperparameters.
            scorers (ScorerParams | None): Scorers to continue training;
                freshly initialized when None.
        """
        check_schedule(schedule, params.config.n_layers)
        self.params = params
        self.params.frozen = config.freeze
        self.schedule = schedule
        self.config = config
        model_flops: int = ArchProfile.from_model_config(
            params.config
        ).flops_per_token
        self.scorers = scorers or init_scorers(
            len(schedule.stages),
            params.config.d_model,
            config.seed,
            model_flops=model_flops,
            dtype=params.dtype,
        )
        self.saliency = SaliencyService(
            params, schedule, config.saliency_mode, config.workers
        )
        self.optimizer = AdamOptimizer(
            config.learning_rate, config.betas, config.adam_eps
        )
        self.base_optimizer: AdamOptimizer | None = (
            None
            if config.freeze
            else AdamOptimizer(
                config.learning_rate, config.betas, config.adam_eps
            )
        )
        self.step_count: int = 0
        self._targets: t.Dict[bytes, t.List[SaliencyMap]] = {}

    def marking_pass(self, batch: Windows) -> t.List[t.List[SaliencyMap]]:
        """Normalized saliency targets from the base model only.

        Args:
            batch (Windows): `B x (L + 1)` token windows.

        Returns:
            List[List[SaliencyMap]]: Per window, one map per stage.
        """
        windows = np.asarray(batch, dtype=np.int64)
        if windows.shape[0] == 0:
            raise EmptyBatchError()
        if not self.config.cache_targets:
            return self.saliency.targets(windows)
        missing = [w for w in windows if w.tobytes() not in self._targets]
        if missing:
            for window, maps in zip(
                missing, self.saliency.targets(np.stack(missing))
            ):
                self._targets[window.tobytes()] = maps
        return [self._targets[w.tobytes()] for w in windows]

    def _stage_hook(
        self,
        tape_weights: t.Mapping[str, DiffTensor],
        state: _GateState,
        rng: np.random.Generator,
    ) -> t.Callable[..., DiffTensor | None]:
        protected_mask = np.zeros(state.alive.shape[0], dtype=bool)
        protected_mask[state.protected] = True

        def hook(
            layer: int, hidden: DiffTensor, _: npt.NDArray[np.int64]
        ) -> DiffTensor | None:
            stage = self.schedule.stage_at(layer)
            if stage is None:
                return None
            prefix = f"{stage}."
            weights = {
                name[len(prefix):]: tensor
                for name, tensor in tape_weights.items()
                if name.startswith(prefix)
            }
            logits = score_tokens(hidden, weights)
            keep = sample_mask(
                logits,
                self.config.gumbel_temperature,
                state.protected,
                rng,
            )
            keep_prob = keep_probability(logits)
            state.records.append(
                _StageRecord(logits, keep_prob, state.alive & ~protected_mask)
            )
            soft = force_protected(keep_prob, state.protected)
            if state.soft is not None:
                soft = dm.mul(state.soft, soft)
            state.soft = soft
            state.soft_history.append(state.soft)
            if state.gate is not None:
                keep = dm.mul(state.gate, keep)
            state.alive = state.alive & (keep.values > 0.5)
            state.gate = keep
            return keep

        return hook

    def item_outcome(  # pylint: disable=too-many-locals
        self, item: int, window: npt.ArrayLike, targets: t.List[SaliencyMap]
    ) -> ItemOutcome:
        """Loss and gradients of one sequence under sampled masks.

        Args:
            item (int): Position in the batch, seeds the mask noise.
            window (ArrayLike): `L + 1` token ids.
            targets (List[SaliencyMap]): Normalized targets per stage.

        Returns:
            ItemOutcome: Gradients of scorers (and base when unfrozen).
        """
        ids = np.asarray(window, dtype=np.int64)
        inputs, labels = ids[:-1], ids[1:]
        length: int = inputs.shape[0]
        rng = np.random.default_rng(
            [self.config.seed, self.step_count, item]
        )
        tape = Tape(dtype=self.params.dtype)
        scorer_weights = self.scorers.watch(tape, trainable=True)
        base_weights = self.params.watch(
            tape, trainable=not self.config.freeze
        )
        state = _GateState(
            protected=protected_set(
                length, self.schedule.sink_count, self.schedule.local_fraction
            ),
            alive=np.ones(length, dtype=bool),
        )
        result = forward(
            self.params,
            inputs,
            tap_layers=self.schedule.layers,
            gate_hook=self._stage_hook(scorer_weights, state, rng),
            tape=tape,
            weights=base_weights,
        )
        cls = lm_cross_entropy(result.logits, labels, state.alive)

        use_mse, use_rank, use_ratio = self.config.terms
        zero = tape.constant(0.0)
        mse_terms: t.List[DiffTensor] = []
        rank_terms: t.List[DiffTensor] = []
        pair_counts: t.List[int] = []
        for record, target in zip(state.records, targets):
            mse_terms.append(
                mse_loss(record.keep_prob, target.scores, record.include).loss
                if use_mse
                else zero
            )
            if use_rank and not target.degenerate:
                term = ranking_loss_stage(
                    keep_margin(record.logits),
                    target.scores,
                    record.include,
                    self.config.pair_budget,
                    rng,
                )
                rank_terms.append(term.loss)
                pair_counts.append(term.pairs)
            else:
                rank_terms.append(zero)
                pair_counts.append(0)
        mse = _sum_terms(mse_terms, zero)
        rank = _sum_terms(rank_terms, zero)
        ratio: DiffTensor | None = None
        if use_ratio and state.soft_history:
            ratio = ratio_loss(state.soft_history, self.schedule.ratios)
        total = total_loss(
            cls, mse, rank, ratio, self.config.loss_weights
        )
        tape.backward(total)

        return ItemOutcome(
            scorer_grads={
                name: tensor.grad for name, tensor in scorer_weights.items()
            },
            base_grads=(
                {}
                if self.config.freeze
                else {
                    name: tensor.grad
                    for name, tensor in base_weights.items()
                }
            ),
            report=LossReport(
                cls=float(cls.values),
                mse=float(mse.values),
                rank=float(rank.values),
                ratio=None if ratio is None else float(ratio.values),
                total=float(total.values),
                mse_per_stage=[float(term.values) for term in mse_terms],
                rank_per_stage=[float(term.values) for term in rank_terms],
                pair_counts=pair_counts,
            ),
        )

    def pruning_pass(
        self, batch: Windows, targets: t.List[t.List[SaliencyMap]]
    ) -> LossReport:
        """Sampled-mask forward, backward and one scorer update.

        Args:
            batch (Windows): Token windows, as given to `marking_pass`.
            targets (List[List[SaliencyMap]]): Its output.

        Returns:
            LossReport: Batch-mean loss components.
        """
        windows = np.asarray(batch, dtype=np.int64)
        if windows.shape[0] == 0:
            raise EmptyBatchError()
        jobs = list(range(windows.shape[0]))

        def run(item: int) -> ItemOutcome:
            return self.item_outcome(item, windows[item], targets[item])

        if self.config.workers == 1:
            outcomes = [run(item) for item in jobs]
        else:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                outcomes = list(pool.map(run, jobs))

        scorer_grads = _mean_grads([o.scorer_grads for o in outcomes])
        self.scorers.arrays.update(
            self.optimizer.step(self.scorers.arrays, scorer_grads)
        )
        if outcomes[0].base_grads:
            if self.base_optimizer is None:
                raise FrozenParameterError("base model")
            base_grads = _mean_grads([o.base_grads for o in outcomes])
            for name, values in self.base_optimizer.step(
                self.params.arrays, base_grads
            ).items():
                self.params.assign(name, values)
        self.step_count += 1
        return _mean_report([o.report for o in outcomes])

    def train(
        self,
        windows: Windows,
        on_step: StepCallback | None = None,
    ) -> TrainingResult:
        """Epochs of shuffled batches, marking then pruning each time.

        Args:
            windows (Windows): Training windows, `count x (L + 1)`.
            on_step (StepCallback | None): Receives every metrics record.

        Returns:
            TrainingResult: Checkpoint and metrics.
        """
        data = np.asarray(windows, dtype=np.int64)
        batch_size: int = self.config.batch_size
        if data.shape[0] < batch_size:
            raise CorpusTooSmallError(data.shape[0], batch_size)
        base_before: str = self.params.checksum()
        rng = np.random.default_rng([self.config.seed, 0xC0FFEE])
        metrics: t.List[StepMetrics] = []
        LOGGER.info(
            "Training %d stages on %d windows for %d epochs",
            len(self.schedule.stages),
            data.shape[0],
            self.config.epochs,
        )
        for epoch in range(self.config.epochs):
            order = rng.permutation(data.shape[0])
            for start in range(0, order.shape[0] - batch_size + 1, batch_size):
                batch = data[order[start:start + batch_size]]
                report = self.pruning_pass(batch, self.marking_pass(batch))
                record = StepMetrics(
                    step=self.step_count, epoch=epoch, **report.model_dump()
                )
                metrics.append(record)
                if on_step is not None:
                    on_step(record)
                if self.step_count % SETTINGS.log_every == 0:
                    LOGGER.info(
                        "step %d: total=%.4f cls=%.4f mse=%.4f rank=%.4f",
                        record.step,
                        record.total,
                        record.cls,
                        record.mse,
                        record.rank,
                    )
                if self._done():
                    break
            if self._done():
                break

        if self.config.freeze and self.params.checksum() != base_before:
            raise FrozenParameterError("base model")
        metadata = TrainingMetadata(
            config_hash=config_hash(self.config, self.schedule),
            steps=self.step_count,
            seed=self.config.seed,
            base_checksum=self.params.checksum(),
            scorer_checksum=self.scorers.checksum(),
            final_loss=metrics[-1] if metrics else None,
        )
        return TrainingResult(
            checkpoint=Checkpoint(
                params=self.params,
                scorers=self.scorers,
                schedule=self.schedule,
                metadata=metadata,
            ),
            metrics=metrics,
        )

    def _done(self) -> bool:
        return (
            self.config.max_steps is not None
            and self.step_count >= self.config.max_steps
        )


def _sum_terms(terms: t.Sequence[DiffTensor], zero: DiffTensor) -> DiffTensor:
    if not terms:
        return zero
    loss = terms[0]
    for term in terms[1:]:
        loss = dm.add(loss, term)
    return loss


def _mean_report(reports: t.Sequence[LossReport]) -> LossReport:
    count: int = len(reports)

    def mean(values: t.Iterable[float]) -> float:
        return float(sum(values) / count)

    ratios = [r.ratio for r in reports if r.ratio is not None]
    return LossReport(
        cls=mean(r.cls for r in reports),
        mse=mean(r.mse for r in reports),
        rank=mean(r.rank for r in reports),
        ratio=mean(ratios) if ratios else None,
        total=mean(r.total for r in reports),
        mse_per_stage=[
            mean(values)
            for values in zip(*(r.mse_per_stage for r in reports))
        ],
        rank_per_stage=[
            mean(values)
            for values in zip(*(r.rank_per_stage for r in reports))
        ],
        pair_counts=[
            int(sum(values))
            for values in zip(*(r.pair_counts for r in reports))
        ],
    )


def pretrain_base(
    params: ModelParams,
    windows: Windows,
    config: TrainConfig,
    on_step: t.Callable[[int, float], None] | None = None,
) -> ModelParams:
    """Plain next-token training of the base model.

    Args:
        params (ModelParams): Initial parameters (left untouched).
        windows (Windows): Training windows.
        config (TrainConfig): Batch size, seed, workers and the
            `pretrain_*` fields are used.
        on_step (Callable[[int, float], None] | None): Receives
            (step, batch-mean loss).

    Returns:
        ModelParams: Trained, frozen copy.
    """
    data = np.asarray(windows, dtype=np.int64)
    if data.shape[0] < config.batch_size:
        raise CorpusTooSmallError(data.shape[0], config.batch_size)
    trained = ModelParams(
        config=params.config,
        arrays={k: v.copy() for k, v in params.arrays.items()},
        frozen=False,
    )
    optimizer = AdamOptimizer(
        config.pretrain_learning_rate, config.betas, config.adam_eps
    )
    rng = np.random.default_rng([config.seed, 0xBA5E])

    def item_grads(window: Array) -> t.Tuple[t.Dict[str, Array], float]:
        tape = Tape(dtype=trained.dtype)
        weights = trained.watch(tape, trainable=True)
        result = forward(trained, window[:-1], tape=tape, weights=weights)
        loss = lm_cross_entropy(result.logits, window[1:])
        tape.backward(loss)
        return {k: v.grad for k, v in weights.items()}, float(loss.values)

    step: int = 0
    for _ in range(config.pretrain_epochs):
        order = rng.permutation(data.shape[0])
        for start in range(
            0, order.shape[0] - config.batch_size + 1, config.batch_size
        ):
            batch = list(data[order[start:start + config.batch_size]])
            if config.workers == 1:
                outcomes = [item_grads(window) for window in batch]
            else:
                with ThreadPoolExecutor(max_workers=config.workers) as pool:
                    outcomes = list(pool.map(item_grads, batch))
            grads = _mean_grads([grad for grad, _ in outcomes])
            for name, values in optimizer.step(trained.arrays, grads).items():
                trained.assign(name, values)
            step += 1
            loss = float(np.mean([value for _, value in outcomes]))
            if on_step is not None:
                on_step(step, loss)
            if step % SETTINGS.log_every == 0:
                LOGGER.info("pretrain step %d: loss=%.4f", step, loss)
            if config.max_steps is not None and step >= config.max_steps:
                break
        if config.max_steps is not None and step >= config.max_steps:
            break
    trained.frozen = True
    return trained


def tail_nll(
    logits: Array,
    positions: npt.NDArray[np.int64],
    labels: npt.NDArray[np.int64],
    tail: npt.NDArray[np.int64],
) -> float:
    """Summed next-token NLL at the original positions in `tail`.

    Args:
        logits (Array): Logits of the surviving rows.
        positions (NDArray[int64]): Original position of every row.
        labels (NDArray[int64]): Next-token id of every original position.
        tail (NDArray[int64]): Positions scored; all must have survived.

    Returns:
        float: Negative log-likelihood in nats.
    """
    rows = np.searchsorted(positions, tail)
    log_probs = log_softmax(logits[rows].astype(np.float64), axis=-1)
    return float(-log_probs[np.arange(tail.shape[0]), labels[tail]].sum())


def evaluate(  # pylint: disable=too-many-arguments,too-many-locals
    params: ModelParams,
    scorers: ScorerParams | None,
    schedule: PruneSchedule,
    windows: Windows,
    mode: EvalMode = EvalMode.PRUNED,
    seed: int = 0,
    kv_policy: KVCachePolicy | None = None,
) -> EvalReport:
    """Held-out perplexity under one prefill mode.

    Perplexity is taken over the protected local tail of every window,
    which survives in every mode, so the modes score the same
    predictions. In pruned mode the rank correlation between scorer
    margins and oracle saliency is reported per stage.

    With `kv_policy` the tail is instead decoded one token at a time
    after a prefill of the rest of the window, evicting cache entries
    per the policy, and the largest cache seen is reported against the
    budget.

    Args:
        params (ModelParams): Base model.
        scorers (ScorerParams | None): Trained scorers; unused in full
            and random modes.
        schedule (PruneSchedule): Pruning stages.
        windows (Windows): Held-out windows.
        mode (EvalMode): `full`, `pruned` or `random`.
        seed (int): Random-mode seed.
        kv_policy (KVCachePolicy | None): Decode-time eviction for the
            tail; the tail is scored in one prefill if None.

    Returns:
        EvalReport: Perplexity, kept counts and correlations.
    """
    data = np.asarray(windows, dtype=np.int64)
    if data.shape[0] == 0:
        raise ValueError("evaluate needs at least one window")
    mode = EvalMode(mode)
    if mode == EvalMode.PRUNED and scorers is None and schedule.stages:
        raise ValueError("pruned evaluation needs trained scorers")
    stage_count: int = len(schedule.stages)
    nll: float = 0.0
    tail_tokens: int = 0
    kept = np.zeros(stage_count)
    correlations: t.List[t.List[float]] = [[] for _ in range(stage_count)]
    largest: int = 0
    budget: int | None = None
    respected: bool = True

    for index, window in enumerate(data):
        inputs, labels = window[:-1], window[1:]
        length: int = inputs.shape[0]
        tail = np.arange(
            length - keep_count(schedule.local_fraction, length), length
        )
        scorer: StageScorer | None = (
            RandomScorer(seed, index) if mode == EvalMode.RANDOM else scorers
        )
        if kv_policy is not None:
            scored = decode_tail_nll(
                params,
                inputs,
                labels,
                max(int(tail[0]), 1),
                None if mode == EvalMode.FULL else schedule,
                None if mode == EvalMode.FULL else scorer,
                kv_policy,
            )
            nll += scored.nll
            tail_tokens += scored.tokens
            kept += (
                length
                if mode == EvalMode.FULL
                else np.asarray(scored.stage_counts, dtype=np.float64)
            )
            largest = max(largest, scored.max_cache_entries)
            if scored.budget is not None:
                budget = max(budget or 0, scored.budget)
                respected &= scored.max_cache_entries <= scored.budget
        elif mode == EvalMode.FULL:
            logits = forward(params, inputs).logits.values
            nll += tail_nll(logits, np.arange(length), labels, tail)
            tail_tokens += int(tail.shape[0])
            kept += length
        else:
            result = prefill_pruned(params, inputs, schedule, scorer)
            nll += tail_nll(result.logits, result.positions, labels, tail)
            tail_tokens += int(tail.shape[0])
            kept += np.asarray(result.stage_counts, dtype=np.float64)

        if mode == EvalMode.PRUNED and scorers is not None and stage_count:
            for stage, rho in enumerate(
                _stage_correlations(params, scorers, schedule, inputs, labels)
            ):
                if rho is not None:
                    correlations[stage].append(rho)

    spearman: t.List[float | None] | None = None
    mean_spearman: float | None = None
    if mode == EvalMode.PRUNED and scorers is not None and stage_count:
        spearman = [
            float(np.mean(values)) if values else None
            for values in correlations
        ]
        present = [value for value in spearman if value is not None]
        mean_spearman = float(np.mean(present)) if present else None

    mean_nll: float = nll / tail_tokens
    return EvalReport(
        mode=mode.value,
        seed=seed,
        windows=int(data.shape[0]),
        tail_tokens=tail_tokens,
        nll=mean_nll,
        perplexity=math.exp(mean_nll),
        stage_layers=list(schedule.layers),
        stage_ratios=list(schedule.ratios),
        kept_counts=[float(v) for v in kept / data.shape[0]],
        spearman=spearman,
        mean_spearman=mean_spearman,
        kv_policy=kv_policy.describe() if kv_policy is not None else None,
        kv_budget=budget,
        max_cache_entries=largest if kv_policy is not None else None,
        budget_respected=respected if budget is not None else None,
    )


def _stage_correlations(
    params: ModelParams,
    scorers: ScorerParams,
    schedule: PruneSchedule,
    inputs: npt.NDArray[np.int64],
    labels: npt.NDArray[np.int64],
) -> t.List[float | None]:
    length: int = inputs.shape[0]
    protected = protected_set(
        length, schedule.sink_count, schedule.local_fraction
    )
    free = np.ones(length, dtype=bool)
    free[protected] = False
    positions = np.arange(length, dtype=np.int64)
    taps = forward(params, inputs, tap_layers=schedule.layers).taps
    oracle = attribute(params, inputs, labels, schedule)
    values: t.List[float | None] = []
    for stage, layer in enumerate(schedule.layers):
        margins = scorers.stage_scores(stage, taps[layer].values, positions)
        if free.sum() < 2:
            values.append(None)
            continue
        rho = spearmanr(margins[free], oracle[stage].scores[free]).statistic
        values.append(None if np.isnan(rho) else float(rho))
    return values
