"""Discrete-event runs tying failure schedules, checkpoint policies and overhead accounting together.

Time is measured on the training-progress axis: a failure at hour ``t`` strikes
when training has made ``t`` hours of forward progress. Save, load,
rescheduling and re-executed work stretch the wall clock but not that axis,
so every save point is passed once and each sampled failure fires once.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import (
    ALL_STRATEGIES,
    CheckpointPolicy,
    SaveKind,
    Strategy,
    action_cost,
    plan_schedule,
)
from .cost_model import (
    CostParameters,
    Recovery,
    StrategyDecision,
    choose_strategy,
    optimal_full_interval,
    partial_interval_for_pls,
)
from .failure_model import FailureProcess, FailureTrace, inject_uniform_failures, sample_failure_schedule
from .overhead import OverheadLedger
from .pls import PlsLedger, effective_n_emb, failed_shard_count


class Mode(str, enum.Enum):
    ANALYTIC = "analytic"
    COUPLED = "coupled"


STREAM_FAILURES = 0
STREAM_SHARDS = 1
STREAM_DATA = 2
STREAM_MODEL = 3


def stream_seed(root: int, run: int, stream: int) -> int:
    """Seed of one random stream of one run, split deterministically from the root seed."""
    return int(np.random.SeedSequence([int(root), int(run), int(stream)]).generate_state(1, np.uint32)[0])


@dataclass(frozen=True)
class SimConfig:
    cost: CostParameters
    process: FailureProcess
    policy: CheckpointPolicy
    mode: Mode = Mode.ANALYTIC
    fraction_set: tuple[float, ...] = (0.5, 0.25, 0.125)
    n_shards: int = 8
    target_pls: float = 0.1
    fixed_failures: int | None = None
    table_mass: tuple[float, ...] = (1.0,)
    per_shard_load: bool = False
    root_seed: int = 0
    toy: object | None = None  # toy.experiment.ToyConfig in coupled mode

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "fraction_set", tuple(float(f) for f in self.fraction_set))
        if not self.fraction_set or any(not 0 < f <= 1 for f in self.fraction_set):
            raise ValueError("fraction_set must be a non-empty subset of (0, 1]")
        if self.n_shards < 1:
            raise ValueError("n_shards must be >= 1")
        if self.mode is Mode.COUPLED and self.toy is None:
            raise ValueError("coupled mode needs a toy trainer config")
        if self.policy.strategy.prioritized and self.policy.prioritized_tables is None:
            raise ValueError("prioritised strategies need prioritized_tables")

    def with_strategy(self, strategy: Strategy | str) -> "SimConfig":
        """Copy running ``strategy`` at the interval the planner assigns to it."""
        strategy = Strategy(strategy)
        return replace(self, policy=replace(self.policy, strategy=strategy, t_save=strategy_interval(self, strategy)))


def strategy_interval(config: SimConfig, strategy: Strategy) -> float:
    """Optimal full-recovery interval for Full/PartialNaive, PLS-derived interval for the CPR variants."""
    if Strategy(strategy).uses_pls_interval:
        return partial_interval_for_pls(config.target_pls, config.cost.n_emb, config.cost.t_fail)
    return optimal_full_interval(config.cost)


@dataclass
class SimulationReport:
    seed: int
    strategy: Strategy
    interval: float
    ledger: OverheadLedger
    final_pls: float
    t_total: float
    n_failures: int
    events: list = field(default_factory=list)
    auc: float | None = None
    auc_degradation: float | None = None

    @property
    def overhead_fraction(self) -> float:
        return self.ledger.total / self.t_total

    def row(self) -> dict:
        return {
            "seed": self.seed,
            "strategy": self.strategy.value,
            "interval": self.interval,
            "save_hours": self.ledger.save_hours,
            "load_hours": self.ledger.load_hours,
            "lost_hours": self.ledger.lost_hours,
            "reschedule_hours": self.ledger.reschedule_hours,
            "overhead_fraction": self.overhead_fraction,
            "final_pls": self.final_pls,
            "n_failures": self.n_failures,
            "auc": "" if self.auc is None else self.auc,
            "auc_degradation": "" if self.auc_degradation is None else self.auc_degradation,
        }

    def serialize(self) -> bytes:
        body = dict(self.row(), events=[list(e) for e in self.events])
        return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


REPORT_COLUMNS = list(
    SimulationReport(0, Strategy.FULL, 1.0, OverheadLedger(), 0.0, 1.0, 0).row().keys()
)


def failure_trace(config: SimConfig, seed: int) -> FailureTrace:
    s = stream_seed(config.root_seed, seed, STREAM_FAILURES)
    if config.fixed_failures is not None:
        return inject_uniform_failures(config.fixed_failures, config.cost.t_total, config.fraction_set, s)
    return sample_failure_schedule(config.process, config.cost.t_total, config.fraction_set, s)


def failed_shards(trace: FailureTrace, n_shards: int, seed: int, root_seed: int = 0) -> list[tuple[int, ...]]:
    """Which shards each failure takes down; depends only on the seed, never on the strategy."""
    rng = np.random.default_rng(stream_seed(root_seed, seed, STREAM_SHARDS))
    out = []
    for _, frac in trace.events:
        k = failed_shard_count(frac, n_shards)
        out.append(tuple(sorted(rng.choice(n_shards, size=k, replace=False).tolist())))
    return out


def _analytic(config: SimConfig, seed: int, trace: FailureTrace, picks) -> SimulationReport:
    cost, policy = config.cost, config.policy
    strategy = policy.strategy
    n_tables = len(config.table_mass)
    s_total = 10**9
    samples = lambda t: int(round(t / cost.t_total * s_total))  # noqa: E731

    actions = plan_schedule(policy, cost.t_total, n_tables) if strategy.prioritized else plan_schedule(
        policy, cost.t_total
    )
    events = [(a.time, 0, i) for i, a in enumerate(actions)]
    events += [(t, 1, i) for i, (t, _) in enumerate(trace.events)]
    events.sort()

    ledger = OverheadLedger()
    pls = PlsLedger(s_total, config.n_shards)
    all_shards = range(config.n_shards)
    last_consistent = 0.0
    log = []
    for t, kind, i in events:
        if kind == 0:
            action = actions[i]
            c = action_cost(action, cost.o_save, config.table_mass, policy.prioritized_tables or ())
            ledger.save_hours += c
            if action.kind is SaveKind.FULL:
                pls.record_checkpoint(all_shards, samples(t))
                last_consistent = t
            log.append(("save", t, t + ledger.total, action.kind.value, c))
        else:
            shards = picks[i]
            ledger.load_hours += cost.o_load * (len(shards) if config.per_shard_load else 1)
            ledger.reschedule_hours += cost.o_res
            if strategy is Strategy.FULL:
                lost = t - last_consistent
                ledger.lost_hours += lost
            else:
                lost = 0.0
                pls.record_failure(samples(t), shards)
            log.append(("failure", t, t + ledger.total, list(shards), lost))
    return SimulationReport(
        seed, strategy, policy.t_save, ledger, pls.pls, cost.t_total, len(trace), log
    )


def run(config: SimConfig, seed: int) -> SimulationReport:
    """One seeded run. Analytic mode books time only; coupled mode also trains the toy model."""
    trace = failure_trace(config, seed)
    picks = failed_shards(trace, config.n_shards, seed, config.root_seed)
    report = _analytic(config, seed, trace, picks)
    if config.mode is Mode.COUPLED:
        from .toy.experiment import run_failure_experiment

        result = run_failure_experiment(
            config.policy,
            trace,
            config.toy,
            seed=seed,
            failed_shards=picks,
            cost=config.cost,
            root_seed=config.root_seed,
        )
        report.final_pls = result.final_pls
        report.ledger = result.ledger
        report.auc = result.metrics.auc
        report.auc_degradation = result.auc_degradation
        report.events = result.events
    return report


@dataclass(frozen=True)
class Summary:
    n: int
    mean_overhead_fraction: float
    stderr_overhead_fraction: float
    p50_overhead_fraction: float
    p75_overhead_fraction: float
    p95_overhead_fraction: float
    mean_final_pls: float
    stderr_final_pls: float
    p50_final_pls: float
    p95_final_pls: float
    mean_save_hours: float
    mean_load_hours: float
    mean_lost_hours: float
    mean_reschedule_hours: float
    mean_auc: float | None = None
    mean_auc_degradation: float | None = None


def _stderr(x: np.ndarray) -> float:
    return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def summarize(reports: Sequence[SimulationReport]) -> Summary:
    """Order-insensitive aggregate of independent runs."""
    if not reports:
        raise ValueError("nothing to summarize")
    reports = sorted(reports, key=lambda r: (r.strategy.value, r.seed))
    of = np.array([r.overhead_fraction for r in reports])
    pl = np.array([r.final_pls for r in reports])
    aucs = [r.auc for r in reports if r.auc is not None]
    degs = [r.auc_degradation for r in reports if r.auc_degradation is not None]
    return Summary(
        n=len(reports),
        mean_overhead_fraction=float(of.mean()),
        stderr_overhead_fraction=_stderr(of),
        p50_overhead_fraction=float(np.percentile(of, 50)),
        p75_overhead_fraction=float(np.percentile(of, 75)),
        p95_overhead_fraction=float(np.percentile(of, 95)),
        mean_final_pls=float(pl.mean()),
        stderr_final_pls=_stderr(pl),
        p50_final_pls=float(np.percentile(pl, 50)),
        p95_final_pls=float(np.percentile(pl, 95)),
        mean_save_hours=float(np.mean([r.ledger.save_hours for r in reports])),
        mean_load_hours=float(np.mean([r.ledger.load_hours for r in reports])),
        mean_lost_hours=float(np.mean([r.ledger.lost_hours for r in reports])),
        mean_reschedule_hours=float(np.mean([r.ledger.reschedule_hours for r in reports])),
        mean_auc=float(np.mean(aucs)) if aucs else None,
        mean_auc_degradation=float(np.mean(degs)) if degs else None,
    )


def monte_carlo(config: SimConfig, n_seeds: int, seeds: Iterable[int] | None = None):
    """Run ``n_seeds`` independent seeds; returns (reports, summary)."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    seeds = list(range(n_seeds)) if seeds is None else list(seeds)[:n_seeds]
    reports = [run(config, s) for s in seeds]
    return reports, summarize(reports)


def compare_strategies(
    config: SimConfig, strategies: Sequence[Strategy | str] = ALL_STRATEGIES, n_seeds: int = 100
) -> dict[Strategy, tuple[list[SimulationReport], Summary]]:
    """Every strategy over the same seeds, hence the same failure traces and failed shards."""
    out = {}
    for s in strategies:
        cfg = config.with_strategy(s)
        out[Strategy(s)] = monte_carlo(cfg, n_seeds)
    return out


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(json.dumps(resolved, sort_keys=True, default=str).encode()).hexdigest()[:16]


def calibrate_overheads(
    target_full_fraction: float,
    t_total: float,
    t_fail: float,
    n_failures: int | None,
    load_to_save: float = 1.0,
    o_res: float = 0.0,
    n_emb: int = 8,
    n_seeds: int = 2000,
    fraction_set: Sequence[float] = (0.5, 0.25, 0.125),
    tol: float = 1e-4,
    root_seed: int = 0,
) -> CostParameters:
    """Find ``o_save`` (with ``o_load = load_to_save * o_save``) so simulated full recovery costs the target.

    One scalar is fitted by bisection against the simulator's mean overhead
    fraction at the optimal full-recovery interval; nothing else is tuned.
    The search starts from the closed-form solution.
    """
    if not 0 < target_full_fraction < 1:
        raise ValueError("target overhead fraction must lie in (0, 1)")
    process = FailureProcess.with_mtbf("uniform_hazard", t_fail)
    base = SimConfig(
        CostParameters(1.0, load_to_save, o_res, t_fail, t_total, n_emb),
        process,
        CheckpointPolicy(Strategy.FULL, 1.0),
        fraction_set=tuple(fraction_set),
        n_shards=n_emb,
        fixed_failures=n_failures,
        root_seed=root_seed,
    )
    # failure draws do not depend on the overheads, so sample them once
    draws = []
    for seed in range(n_seeds):
        trace = failure_trace(base, seed)
        draws.append((seed, trace, failed_shards(trace, n_emb, seed, root_seed)))

    def mean_full(o_save: float) -> float:
        cost = CostParameters(o_save, load_to_save * o_save, o_res, t_fail, t_total, n_emb)
        cfg = replace(base, cost=cost, policy=CheckpointPolicy(Strategy.FULL, optimal_full_interval(cost)))
        return float(np.mean([_analytic(cfg, s, tr, pk).overhead_fraction for s, tr, pk in draws]))

    # closed form at the optimum: 2x + 2 * load_to_save * x^2 + o_res / t_fail = target, x = sqrt(o / 2 t_fail)
    a, b, c = 2.0 * load_to_save, 2.0, o_res / t_fail - target_full_fraction
    x = (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a) if a > 0 else -c / b
    guess = max(2.0 * t_fail * x * x, 1e-9)
    lo, hi = 0.7 * guess, 1.4 * guess
    while mean_full(lo) > target_full_fraction:
        lo *= 0.5
    while mean_full(hi) < target_full_fraction:
        hi *= 2.0
        if hi > t_total:
            raise ValueError("target overhead unreachable")
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if mean_full(mid) < target_full_fraction:
            lo = mid
        else:
            hi = mid
    o_save = 0.5 * (lo + hi)
    return CostParameters(o_save, load_to_save * o_save, o_res, t_fail, t_total, n_emb)


@dataclass(frozen=True)
class FallbackPoint:
    n_failures: int
    fraction: float
    target_pls: float
    decision: StrategyDecision
    simulated_full: float
    simulated_partial: float

    @property
    def false_partial(self) -> bool:
        return self.decision.chosen is Recovery.PARTIAL and self.simulated_partial > self.simulated_full

    def row(self) -> dict:
        return {
            "n_failures": self.n_failures,
            "fraction": self.fraction,
            "target_pls": self.target_pls,
            "chosen": self.decision.chosen.value,
            "predicted_full": self.decision.predicted_overhead_full,
            "predicted_partial": self.decision.predicted_overhead_partial,
            "simulated_full": self.simulated_full,
            "simulated_partial": self.simulated_partial,
            "false_partial": self.false_partial,
        }


def fallback_grid(
    base: CostParameters,
    n_shards: int = 8,
    failure_counts: Sequence[int] = (2, 20, 40),
    fractions: Sequence[float] = (0.125, 0.25, 0.5),
    target_pls_values: Sequence[float] = (0.02, 0.1, 0.2),
    n_seeds: int = 200,
    root_seed: int = 0,
) -> list[FallbackPoint]:
    """Planner decision against simulated overheads over a grid of failure counts and sizes.

    A failure of fraction ``f`` takes down ``ceil(f * n_shards)`` shards, so the
    planner sees ``n_shards / ceil(f * n_shards)`` as its shard count. Overheads
    are hours.
    """
    out = []
    process_cache = {}
    for count in failure_counts:
        t_fail = base.t_total / count
        process = process_cache.setdefault(count, FailureProcess.with_mtbf("uniform_hazard", t_fail))
        for f in fractions:
            cost = replace(base, t_fail=t_fail, n_emb=effective_n_emb(f, n_shards))
            for pls in target_pls_values:
                decision = choose_strategy(cost, pls)
                cfg = SimConfig(
                    cost,
                    process,
                    CheckpointPolicy(Strategy.FULL, decision.full_interval_hours),
                    fraction_set=(f,),
                    n_shards=n_shards,
                    target_pls=pls,
                    fixed_failures=count,
                    root_seed=root_seed,
                )
                res = compare_strategies(cfg, (Strategy.FULL, Strategy.CPR_VANILLA), n_seeds)
                sim_full = res[Strategy.FULL][1].mean_overhead_fraction * cost.t_total
                sim_part = res[Strategy.CPR_VANILLA][1].mean_overhead_fraction * cost.t_total
                out.append(FallbackPoint(count, f, pls, decision, sim_full, sim_part))
    return out
