"""Portion-of-lost-samples bookkeeping for one training run."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .cost_model import expected_pls  # noqa: F401  (re-exported: the closed form lives with the interval formulas)


class UnknownShardError(KeyError):
    pass


@dataclass
class PlsLedger:
    """Running PLS over a run, plus per-shard sample counts of the last row-complete save.

    A failed shard loses the samples since ``max(last checkpoint, last loss)``:
    a window that was already lost is not charged twice when the same shard
    fails again before its next checkpoint.
    """

    s_total: int
    n_emb: int
    pls: float = 0.0
    current_sample_count: int = 0
    samples_at_last_checkpoint: dict[int, int] = field(default_factory=dict)
    samples_at_last_loss: dict[int, int] = field(default_factory=dict)
    log: list[tuple] = field(default_factory=list)

    def __post_init__(self):
        if self.s_total <= 0 or self.n_emb <= 0:
            raise ValueError("s_total and n_emb must be positive")
        for s in range(self.n_emb):
            self.samples_at_last_checkpoint.setdefault(s, 0)
            self.samples_at_last_loss.setdefault(s, 0)

    def _check(self, shards: Iterable[int]) -> list[int]:
        shards = list(shards)
        for s in shards:
            if s not in self.samples_at_last_checkpoint:
                raise UnknownShardError(s)
        return shards

    def advance(self, sample_count: int):
        if sample_count < self.current_sample_count:
            raise ValueError("sample count cannot go backwards")
        self.current_sample_count = int(sample_count)

    def record_checkpoint(self, shard_ids: Iterable[int], sample_count: int) -> "PlsLedger":
        shards = self._check(shard_ids)
        for s in shards:
            if sample_count < self.samples_at_last_checkpoint[s]:
                raise ValueError(f"shard {s}: checkpoint at {sample_count} precedes an earlier one")
        self.advance(max(sample_count, self.current_sample_count))
        for s in shards:
            self.samples_at_last_checkpoint[s] = int(sample_count)
        self.log.append(("checkpoint", tuple(shards), int(sample_count)))
        return self

    def baseline(self, shard: int) -> int:
        return max(self.samples_at_last_checkpoint[shard], self.samples_at_last_loss[shard])

    def record_failure(self, sample_count: int, failed_shards: Iterable[int]) -> "PlsLedger":
        shards = self._check(failed_shards)
        self.advance(max(sample_count, self.current_sample_count))
        delta = 0.0
        for s in shards:
            lost = sample_count - self.baseline(s)
            if lost < 0:
                raise ValueError(f"shard {s}: failure at {sample_count} precedes its checkpoint")
            delta += lost / (self.s_total * self.n_emb)
            self.samples_at_last_loss[s] = int(sample_count)
        self.pls += delta
        self.log.append(("failure", tuple(shards), int(sample_count)))
        return self

    def snapshot(self) -> dict:
        return {
            "pls": self.pls,
            "current_sample_count": self.current_sample_count,
            "samples_at_last_checkpoint": dict(self.samples_at_last_checkpoint),
        }


def replay_pls(log: Sequence[tuple], s_total: int, n_emb: int) -> float:
    """From-scratch PLS over an event log of ``(kind, shards, sample_count)``."""
    last = [0] * n_emb
    pls_terms = []
    for kind, shards, count in log:
        if kind == "checkpoint":
            for s in shards:
                last[s] = count
        elif kind == "failure":
            for s in shards:
                pls_terms.append((count - last[s]) / (s_total * n_emb))
                last[s] = count
        else:
            raise ValueError(f"unknown event kind {kind!r}")
    return float(sum(pls_terms))


def failed_shard_count(lost_fraction: float, n_emb: int) -> int:
    """Whole shards lost for a failure clearing ``lost_fraction`` of the tables."""
    # guard against 0.125 * 8 = 1.0000000000000002 style rounding
    return max(1, min(n_emb, math.ceil(round(lost_fraction * n_emb, 9))))


def effective_n_emb(lost_fraction: float, n_emb: int) -> float:
    """Shard count that makes single-shard PLS formulas match a fractional failure."""
    return n_emb / failed_shard_count(lost_fraction, n_emb)
