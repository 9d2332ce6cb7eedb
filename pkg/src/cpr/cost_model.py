"""Closed-form checkpoint overhead accounting and the full-vs-partial recovery decision."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable

from .failure_model import FailureProcess, mtbf_for_nodes


class DomainError(ValueError):
    pass


class Recovery(str, enum.Enum):
    FULL = "full_recovery"
    PARTIAL = "partial_recovery"


@dataclass(frozen=True)
class CostParameters:
    """Overhead constants in hours plus the job horizon and shard count."""

    o_save: float
    o_load: float
    o_res: float
    t_fail: float
    t_total: float
    n_emb: float = 1

    def __post_init__(self):
        for name in ("o_save", "o_load", "o_res"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise DomainError(f"{name} must be a finite value >= 0, got {v}")
        if not self.t_fail > 0:
            raise DomainError(f"t_fail must be > 0, got {self.t_fail}")
        if not self.t_total > 0:
            raise DomainError(f"t_total must be > 0, got {self.t_total}")
        if not self.n_emb >= 1:
            raise DomainError(f"n_emb must be >= 1, got {self.n_emb}")

    @property
    def expected_failures(self) -> float:
        return self.t_total / self.t_fail


@dataclass(frozen=True)
class StrategyDecision:
    chosen: Recovery
    interval_hours: float
    predicted_overhead_full: float
    predicted_overhead_partial: float
    target_pls: float
    full_interval_hours: float = math.nan
    partial_interval_hours: float = math.nan
    margin: float = 0.0

    def as_row(self) -> dict:
        return {
            "chosen": self.chosen.value,
            "interval_hours": self.interval_hours,
            "predicted_overhead_full": self.predicted_overhead_full,
            "predicted_overhead_partial": self.predicted_overhead_partial,
            "target_pls": self.target_pls,
            "full_interval_hours": self.full_interval_hours,
            "partial_interval_hours": self.partial_interval_hours,
            "margin": self.margin,
        }


def _check_interval(t_save: float):
    if not t_save > 0:
        raise DomainError(f"checkpoint interval must be > 0, got {t_save}")


def _self_consistent(per_hour: float, t_total: float, max_iter: int = 200) -> float:
    # O = per_hour * (T + O) iterated from O = per_hour * T
    if per_hour >= 1.0:
        raise DomainError("overhead rate >= 1: training never completes")
    o = per_hour * t_total
    for _ in range(max_iter):
        nxt = per_hour * (t_total + o)
        if abs(nxt - o) <= 1e-12 * max(1.0, o):
            return nxt
        o = nxt
    return o


def full_overhead(p: CostParameters, t_save: float, self_consistent: bool = False) -> float:
    """Save + load + lost computation + rescheduling hours under full recovery.

    Lost computation per failure is half an interval (uniformly placed failures).
    With ``self_consistent`` the event counts are taken over T_total + O_total.
    """
    _check_interval(t_save)
    per_hour = p.o_save / t_save + (p.o_load + t_save / 2.0 + p.o_res) / p.t_fail
    if self_consistent:
        return _self_consistent(per_hour, p.t_total)
    return p.o_save * (p.t_total / t_save) + (p.o_load + t_save / 2.0 + p.o_res) * (p.t_total / p.t_fail)


def partial_overhead(
    p: CostParameters, t_save: float, self_consistent: bool = False, load_share: float = 1.0
) -> float:
    """Full-recovery overhead minus the lost-computation term.

    ``load_share`` scales the per-failure load cost; 1.0 charges a whole
    ``o_load`` per failure event.
    """
    _check_interval(t_save)
    load = p.o_load * load_share
    per_hour = p.o_save / t_save + (load + p.o_res) / p.t_fail
    if self_consistent:
        return _self_consistent(per_hour, p.t_total)
    return p.o_save * (p.t_total / t_save) + (load + p.o_res) * (p.t_total / p.t_fail)


def optimal_full_interval(p: CostParameters) -> float:
    if p.o_save <= 0:
        raise DomainError("o_save = 0 leaves the optimal interval unbounded below")
    return math.sqrt(2.0 * p.o_save * p.t_fail)


def expected_pls(t_save: float, t_fail: float, n_emb: float) -> float:
    """Expected final portion of lost samples for a given save interval."""
    return 0.5 * t_save / (t_fail * n_emb)


def partial_interval_for_pls(target_pls: float, n_emb: float, t_fail: float) -> float:
    """Save interval whose expected PLS equals ``target_pls``."""
    if not 0 < target_pls <= 1:
        raise DomainError(f"target PLS must lie in (0, 1], got {target_pls}")
    if not n_emb >= 1 or not t_fail > 0:
        raise DomainError("n_emb must be >= 1 and t_fail > 0")
    return 2.0 * target_pls * n_emb * t_fail


def default_margin(p: CostParameters) -> float:
    return 0.01 * p.t_total


def choose_strategy(p: CostParameters, target_pls: float, margin: float | None = None) -> StrategyDecision:
    """Partial recovery only if it beats full recovery by more than ``margin`` hours (default 1% of T_total)."""
    if margin is None:
        margin = default_margin(p)
    if margin < 0:
        raise DomainError("margin must be >= 0")
    t_full = optimal_full_interval(p)
    t_part = partial_interval_for_pls(target_pls, p.n_emb, p.t_fail)
    o_full = full_overhead(p, t_full)
    o_part = partial_overhead(p, t_part)
    partial = o_part + margin < o_full
    return StrategyDecision(
        chosen=Recovery.PARTIAL if partial else Recovery.FULL,
        interval_hours=t_part if partial else t_full,
        predicted_overhead_full=o_full,
        predicted_overhead_partial=o_part,
        target_pls=target_pls,
        full_interval_hours=t_full,
        partial_interval_hours=t_part,
        margin=margin,
    )


@dataclass(frozen=True)
class SweepPoint:
    nodes: int
    t_fail: float
    n_emb: float
    overhead_full: float
    overhead_partial: float


def scalability_sweep(
    base: CostParameters, process: FailureProcess, node_range: Iterable[int], target_pls: float
) -> list[SweepPoint]:
    """Both recovery schemes' overheads as the job grows.

    Per node count: MTBF from the process's scaling rule, shard count
    proportional to nodes, ``o_save`` held fixed. Full recovery reloads the whole
    model per failure; partial recovery reloads only the failed shard, so its
    load cost shrinks with the shard's share of the model (equal to ``o_load``
    at ``process.base_nodes``).
    """
    nodes = list(node_range)
    if not nodes:
        raise ValueError("node_range must be non-empty")
    out = []
    for n in nodes:
        t_fail = mtbf_for_nodes(process, n)
        n_emb = base.n_emb * n / process.base_nodes
        p = CostParameters(base.o_save, base.o_load, base.o_res, t_fail, base.t_total, max(1.0, n_emb))
        o_full = full_overhead(p, optimal_full_interval(p))
        o_part = partial_overhead(
            p, partial_interval_for_pls(target_pls, p.n_emb, t_fail), load_share=base.n_emb / p.n_emb
        )
        out.append(SweepPoint(n, t_fail, p.n_emb, o_full, o_part))
    return out
