"""Training loop with checkpoint/failure hooks, and the failure experiments built on it."""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..checkpoint import (
    CheckpointPolicy,
    SaveAction,
    SaveKind,
    SnapshotStore,
    Strategy,
    TrainerState,
    action_cost,
    plan_schedule,
    restore,
    save_full,
    save_partial,
)
from ..cost_model import CostParameters
from ..embedding_store import TableSpec, prioritized_tables
from ..failure_model import FailureTrace
from ..overhead import OverheadLedger
from ..pls import PlsLedger
from .data import DatasetConfig, SyntheticDataset, generate_dataset
from .model import ModelConfig, ToyModel, bce_with_logits, roc_auc


@dataclass(frozen=True)
class ToyConfig:
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    batch_size: int = 64
    lr: float = 0.1
    lr_emb: float = 1.0
    n_shards: int = 8
    steps: int | None = None  # None: one pass over the training split
    data_seed: int | None = None  # None: derived from the run seed
    model_seed: int | None = None
    prioritized_coverage: float = 0.99

    def __post_init__(self):
        if self.batch_size < 1 or self.n_shards < 1:
            raise ValueError("batch_size and n_shards must be >= 1")
        if self.lr < 0 or self.lr_emb < 0:
            raise ValueError("learning rates must be >= 0")
        if self.n_steps < 1:
            raise ValueError("training split is smaller than one batch")

    @property
    def n_steps(self) -> int:
        epoch = self.dataset.n_train // self.batch_size
        if self.steps is None:
            return epoch
        if self.steps > epoch:
            raise ValueError(f"{self.steps} steps would revisit data (one epoch is {epoch} steps)")
        return self.steps

    @property
    def table_specs(self) -> list[TableSpec]:
        return [TableSpec(v, self.model.dim) for v in self.dataset.vocab_sizes]

    @property
    def prioritized(self) -> tuple[int, ...]:
        return prioritized_tables(self.table_specs, self.prioritized_coverage)

    @property
    def table_mass(self) -> tuple[float, ...]:
        return tuple(float(s.rows * s.dim) for s in self.table_specs)


# Early-training regime used for the frequency/update-size measurement: small
# learning rates and a low click rate keep every row drifting in the same
# direction, as in the first percent of a real epoch.
EARLY_PHASE = ToyConfig(
    dataset=DatasetConfig(n_train=4096 * 128, n_test=1000, bias=-2.5, weight_scale=0.5),
    batch_size=128,
    lr=1e-4,
    lr_emb=1e-3,
)


@dataclass(frozen=True)
class TrainMetrics:
    logloss: float
    auc: float
    samples_seen: int


@functools.lru_cache(maxsize=8)
def cached_dataset(config: DatasetConfig, seed: int) -> SyntheticDataset:
    return generate_dataset(config, seed)


def build_model(config: ToyConfig, seed: int, track_deltas=(), ssu_tables=()) -> ToyModel:
    return ToyModel(
        config.model,
        config.dataset.vocab_sizes,
        config.dataset.n_dense,
        n_shards=config.n_shards,
        seed=seed,
        track_deltas=track_deltas,
        ssu_tables=ssu_tables,
    )


def evaluate(model: ToyModel, dataset: SyntheticDataset, samples_seen: int) -> TrainMetrics:
    dense, ids, labels = dataset.test
    logits = model.predict_logits(dense, ids)
    return TrainMetrics(bce_with_logits(logits, labels), roc_auc(labels, logits), samples_seen)


def train(model: ToyModel, dataset: SyntheticDataset, config: ToyConfig, steps: int | None = None, hooks=()) -> TrainMetrics:
    """Single-epoch mini-batch SGD.

    Before each step, and once more at the end, every hook is called as
    ``hook(step, model)``. A hook returning an int moves training back to that
    step (a rollback); batches are a pure function of the step index, so the
    replayed stretch sees exactly the same data.
    """
    steps = config.n_steps if steps is None else steps
    step = 0
    while True:
        jumped = False
        for hook in hooks:
            target = hook(step, model)
            if target is not None:
                if not 0 <= target <= step:
                    raise ValueError(f"hook moved training from step {step} to {target}")
                step = int(target)
                jumped = True
                break
        if jumped:
            continue
        if step >= steps:
            break
        dense, ids, labels = dataset.train_batch(step, config.batch_size)
        model.sgd_step(dense, ids, labels, config.lr, config.lr_emb)
        step += 1
    return evaluate(model, dataset, steps * config.batch_size)


def run_seeds(config: ToyConfig, seed: int, root_seed: int = 0) -> tuple[int, int]:
    from ..simulator import STREAM_DATA, STREAM_MODEL, stream_seed

    data = config.data_seed if config.data_seed is not None else stream_seed(root_seed, seed, STREAM_DATA)
    model = config.model_seed if config.model_seed is not None else stream_seed(root_seed, seed, STREAM_MODEL)
    return data, model


@functools.lru_cache(maxsize=32)
def baseline_metrics(config: ToyConfig, data_seed: int, model_seed: int) -> TrainMetrics:
    """Failure-free training for the given seeds."""
    ds = cached_dataset(config.dataset, data_seed)
    return train(build_model(config, model_seed), ds, config)


@dataclass
class ExperimentResult:
    metrics: TrainMetrics
    baseline: TrainMetrics
    final_pls: float
    ledger: OverheadLedger
    events: list = field(default_factory=list)

    @property
    def auc_degradation(self) -> float:
        return self.baseline.auc - self.metrics.auc


class CheckpointHook:
    """Applies a save schedule and a failure trace to a running model.

    Scheduled hours map to steps at a constant rate. Saves at a step run
    before failures at the same step, and every event fires once: saves that
    fall inside a replayed stretch are not repeated.
    """

    def __init__(
        self,
        policy: CheckpointPolicy,
        trace: FailureTrace,
        config: ToyConfig,
        failed_shards: Sequence[Sequence[int]],
        cost: CostParameters,
        store: SnapshotStore | None = None,
    ):
        if len(failed_shards) != len(trace):
            raise ValueError("need one failed-shard set per failure")
        self.policy = policy
        self.config = config
        self.cost = cost
        self.steps = config.n_steps
        self.hours_per_step = cost.t_total / self.steps
        self.store = store if store is not None else SnapshotStore()
        n_tables = len(config.dataset.vocab_sizes)
        self.prio = config.prioritized if policy.strategy.prioritized else ()
        if policy.strategy.prioritized:
            policy = replace(policy, prioritized_tables=self.prio)
            self.policy = policy
        actions = plan_schedule(policy, cost.t_total, n_tables if policy.strategy.prioritized else None)
        events = [(self._to_step(a.time), 0, i, a) for i, a in enumerate(actions)]
        events += [(self._to_step(t), 1, i, tuple(failed_shards[i])) for i, (t, _) in enumerate(trace.events)]
        events.sort(key=lambda e: e[:3])
        self.events = events
        self.pos = 0
        self.ledger = OverheadLedger()
        self.pls = PlsLedger(self.steps * config.batch_size, config.n_shards)
        self.log: list[tuple] = []
        self._started = False

    def _to_step(self, hours: float) -> int:
        return int(np.clip(round(hours / self.hours_per_step), 0, self.steps))

    def _samples(self, step: int) -> int:
        return step * self.config.batch_size

    def _save_everything(self, model: ToyModel, step: int):
        for table in model.emb:
            for s in range(model.emb.n_shards):
                save_full(self.store, table, s, step * self.hours_per_step, self._samples(step), self.policy.include_optimizer)
        self.store.add_trainer_state(TrainerState(step * self.hours_per_step, self._samples(step), step, model.mlp_state()))

    def _apply_save(self, action: SaveAction, model: ToyModel, step: int):
        t, n = step * self.hours_per_step, self._samples(step)
        emb = model.emb
        if action.kind is SaveKind.FULL:
            tables = range(len(emb)) if action.tables == () else action.tables
            for ti in tables:
                for s in range(emb.n_shards):
                    save_full(self.store, emb[ti], s, t, n, self.policy.include_optimizer)
            if action.tables == ():
                self.store.add_trainer_state(TrainerState(t, n, step, model.mlp_state()))
            self.pls.record_checkpoint(range(emb.n_shards), n)
            cost = action_cost(action, self.cost.o_save, self.config.table_mass, self.prio)
        else:
            written = 0
            for ti in action.tables:
                table = emb[ti]
                for s in range(emb.n_shards):
                    rows = self._select(table, s)
                    if save_partial(self.store, table, s, rows, t, n, self.policy.include_optimizer) is not None:
                        written += len(rows) * table.dim
            # charged by the rows actually written, not the nominal r share
            cost = self.cost.o_save * written / sum(self.config.table_mass)
        self.ledger.save_hours += cost
        self.log.append(("save", t, action.kind.value, cost))

    def _select(self, table, shard: int) -> np.ndarray:
        rn = max(1, int(round(self.policy.r * table.shard_size(shard))))
        strategy = self.policy.strategy
        if strategy is Strategy.CPR_SCAR:
            return table.top_rn_by_delta(rn, shard)
        if strategy is Strategy.CPR_MFU:
            return table.top_rn_by_counter(rn, shard)
        return table.ssu_rows(shard)

    def _apply_failure(self, shards, model: ToyModel, step: int):
        self.ledger.reschedule_hours += self.cost.o_res
        result = restore(self.store, model.emb, shards, self.policy.strategy, self.cost.o_load)
        self.ledger.load_hours += result.cost_hours
        t = step * self.hours_per_step
        if result.rolled_back_to is None:
            self.pls.record_failure(self._samples(step), shards)
            self.log.append(("failure", t, list(shards), 0.0))
            return None
        back = result.rolled_back_to.step
        model.load_mlp_state(result.rolled_back_to.mlp)
        lost = (step - back) * self.hours_per_step
        self.ledger.lost_hours += lost
        self.log.append(("failure", t, list(shards), lost))
        return back

    def __call__(self, step: int, model: ToyModel):
        if not self._started:
            # the initial model is the first checkpoint and costs nothing
            self._save_everything(model, 0)
            self._started = True
        while self.pos < len(self.events) and self.events[self.pos][0] <= step:
            _, kind, _, payload = self.events[self.pos]
            self.pos += 1
            if kind == 0:
                self._apply_save(payload, model, step)
            else:
                back = self._apply_failure(payload, model, step)
                if back is not None:
                    return back
        return None


def run_failure_experiment(
    policy: CheckpointPolicy,
    trace: FailureTrace,
    config: ToyConfig,
    seed: int = 0,
    failed_shards: Sequence[Sequence[int]] | None = None,
    cost: CostParameters | None = None,
    root_seed: int = 0,
    store: SnapshotStore | None = None,
) -> ExperimentResult:
    """Train once under ``policy`` with failures from ``trace``; compare with failure-free training."""
    if cost is None:
        cost = CostParameters(0.0, 0.0, 0.0, max(trace.horizon_hours, 1e-9), trace.horizon_hours, config.n_shards)
    if abs(cost.t_total - trace.horizon_hours) > 1e-9 * max(1.0, cost.t_total):
        raise ValueError("trace horizon and t_total disagree")
    if failed_shards is None:
        from ..simulator import failed_shards as pick

        failed_shards = pick(trace, config.n_shards, seed, root_seed)
    data_seed, model_seed = run_seeds(config, seed, root_seed)
    ds = cached_dataset(config.dataset, data_seed)
    strategy = policy.strategy
    prio = config.prioritized
    model = build_model(
        config,
        model_seed,
        track_deltas=prio if strategy is Strategy.CPR_SCAR else (),
        ssu_tables=prio if strategy is Strategy.CPR_SSU else (),
    )
    hook = CheckpointHook(policy, trace, config, failed_shards, cost, store)
    metrics = train(model, ds, config, hooks=(hook,))
    return ExperimentResult(metrics, baseline_metrics(config, data_seed, model_seed), hook.pls.pls, hook.ledger, hook.log)


def frequency_delta_correlation(config: ToyConfig = EARLY_PHASE, seed: int = 0, steps: int = 4096, table: int = 0) -> float:
    """Pearson r between per-row access counts and update norms after ``steps`` steps from initialisation."""
    ds = cached_dataset(config.dataset, seed)
    model = build_model(config, seed, track_deltas=(table,))
    train(model, ds, config, steps=steps)
    return model.emb.frequency_delta_correlation(table)
