"""Sharded embedding tables with the access and update instrumentation used to prioritise saves.

Each table is split into ``n_shards`` contiguous row ranges; shard ``k`` of every
table lives on the same emulated embedding parameter server.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class IndexRangeError(IndexError):
    pass


class UndefinedCorrelationError(ValueError):
    pass


COUNTER_DTYPE = np.uint32
ID_BYTES = 4


class SsuList:
    """Bounded, duplicate-free list of sub-sampled row ids with random eviction on overflow."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.entries: list[int] = []
        self._members: set[int] = set()
        self._rng = random.Random(seed)

    def offer(self, row: int):
        if row in self._members:
            return
        if len(self.entries) < self.capacity:
            self.entries.append(row)
            self._members.add(row)
            return
        # uniform over the current entries plus the incoming id
        j = self._rng.randrange(self.capacity + 1)
        if j == self.capacity:
            return
        self._members.discard(self.entries[j])
        self.entries[j] = row
        self._members.add(row)

    def remove(self, rows):
        drop = self._members.intersection(int(r) for r in rows)
        if drop:
            self.entries = [e for e in self.entries if e not in drop]
            self._members -= drop

    def clear(self):
        self.entries.clear()
        self._members.clear()

    def __contains__(self, row):
        return row in self._members

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class TableSpec:
    rows: int
    dim: int


class EmbeddingTable:
    def __init__(
        self,
        table_id: int,
        rows: int,
        dim: int,
        n_shards: int,
        values: np.ndarray | None = None,
        n_opt: int = 0,
        track_deltas: bool = False,
        ssu_ratio: float | None = None,
        ssu_period: int = 2,
        seed: int = 0,
    ):
        if rows < 1 or dim < 1 or n_shards < 1:
            raise ValueError("rows, dim and n_shards must be >= 1")
        self.table_id = table_id
        self.rows = rows
        self.dim = dim
        self.n_shards = n_shards
        self.bounds = np.linspace(0, rows, n_shards + 1).round().astype(np.int64)
        self.values = np.zeros((rows, dim), np.float32) if values is None else np.ascontiguousarray(values, np.float32)
        if self.values.shape != (rows, dim):
            raise ValueError("values shape does not match (rows, dim)")
        self.opt_state = np.zeros((rows, n_opt), np.float32)
        self.counters = np.zeros(rows, COUNTER_DTYPE)
        self.shadow = self.values.copy() if track_deltas else None
        self.ssu_period = int(ssu_period)
        self.ssu_lists: list[SsuList] | None = None
        self._access_seq = 0
        if ssu_ratio is not None:
            if self.ssu_period < 1:
                raise ValueError("sampling period must be >= 1")
            self.ssu_lists = [
                SsuList(max(1, round(ssu_ratio * self.shard_size(s))), seed=seed * 1009 + table_id * 31 + s)
                for s in range(n_shards)
            ]

    @property
    def n_opt(self) -> int:
        return self.opt_state.shape[1]

    def shard_range(self, shard: int) -> range:
        return range(int(self.bounds[shard]), int(self.bounds[shard + 1]))

    def shard_size(self, shard: int) -> int:
        return int(self.bounds[shard + 1] - self.bounds[shard])

    def shard_of(self, rows) -> np.ndarray:
        return np.searchsorted(self.bounds, rows, side="right") - 1

    def _check(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= self.rows):
            raise IndexRangeError(f"table {self.table_id}: index out of range [0, {self.rows})")
        return idx

    # -- read path ---------------------------------------------------------

    def lookup_and_count(self, indices) -> np.ndarray:
        idx = self._check(indices)
        np.add.at(self.counters, idx, COUNTER_DTYPE(1))
        if self.ssu_lists is not None and idx.size:
            seq = self._access_seq + np.arange(1, idx.size + 1)
            offered = idx[seq % self.ssu_period == 0]
            self._access_seq += idx.size
            shards = self.shard_of(offered)
            lists = self.ssu_lists
            for row, s in zip(offered.tolist(), shards.tolist()):
                lists[s].offer(row)
        return self.values[idx]

    def lookup(self, indices) -> np.ndarray:
        """Uninstrumented read (evaluation)."""
        return self.values[self._check(indices)]

    # -- write path --------------------------------------------------------

    def apply_updates(self, indices, updates):
        idx = self._check(indices)
        upd = np.asarray(updates, dtype=np.float32).reshape(idx.size, self.dim)
        if not np.isfinite(upd).all():
            raise FloatingPointError(f"table {self.table_id}: non-finite update")
        np.add.at(self.values, idx, upd)

    # -- selection ---------------------------------------------------------

    def _candidates(self, shard: int | None) -> np.ndarray:
        if shard is None:
            return np.arange(self.rows)
        return np.arange(self.bounds[shard], self.bounds[shard + 1])

    def deltas(self, rows=None) -> np.ndarray:
        if self.shadow is None:
            raise RuntimeError(f"table {self.table_id}: delta tracking is disabled")
        rows = slice(None) if rows is None else np.asarray(rows)
        diff = self.values[rows] - self.shadow[rows]
        return np.sqrt(np.einsum("ij,ij->i", diff, diff, dtype=np.float64))

    @staticmethod
    def _top(ids: np.ndarray, keys: np.ndarray, rn: int) -> np.ndarray:
        if not 0 < rn <= ids.size:
            raise ValueError(f"rn must lie in (0, {ids.size}], got {rn}")
        # highest key first, lower row id on ties
        order = np.lexsort((ids, -keys.astype(np.float64)))
        return np.sort(ids[order[:rn]])

    def top_rn_by_counter(self, rn: int, shard: int | None = None) -> np.ndarray:
        ids = self._candidates(shard)
        return self._top(ids, self.counters[ids], rn)

    def top_rn_by_delta(self, rn: int, shard: int | None = None) -> np.ndarray:
        ids = self._candidates(shard)
        return self._top(ids, self.deltas(ids), rn)

    def ssu_rows(self, shard: int) -> np.ndarray:
        if self.ssu_lists is None:
            raise RuntimeError(f"table {self.table_id}: SSU sampling is disabled")
        return np.sort(np.asarray(self.ssu_lists[shard].entries, dtype=np.int64))

    # -- bookkeeping after saves and restores -------------------------------

    def mark_saved(self, rows):
        rows = self._check(rows)
        self.counters[rows] = 0
        if self.shadow is not None:
            self.shadow[rows] = self.values[rows]
        if self.ssu_lists is not None and rows.size:
            for s in np.unique(self.shard_of(rows)).tolist():
                self.ssu_lists[s].remove(rows.tolist())

    def reset_shard(self, shard: int):
        """Instrumentation of a shard that lost its memory; values are restored separately."""
        r = slice(self.bounds[shard], self.bounds[shard + 1])
        self.counters[r] = 0
        if self.shadow is not None:
            self.shadow[r] = self.values[r]
        if self.ssu_lists is not None:
            self.ssu_lists[shard].clear()

    def frequency_delta_correlation(self) -> float:
        """Pearson r between access counts and L2 change since the last save."""
        return pearson(self.counters.astype(np.float64), self.deltas())

    def auxiliary_bytes(self, strategy: str) -> int:
        """Instrumentation memory a priority-save strategy needs for this table."""
        if strategy == "scar":
            return int(self.values.nbytes)
        if strategy == "mfu":
            return int(self.rows * np.dtype(COUNTER_DTYPE).itemsize)
        if strategy == "ssu":
            if self.ssu_lists is None:
                raise RuntimeError("SSU sampling is disabled")
            return int(sum(lst.capacity for lst in self.ssu_lists) * ID_BYTES)
        return 0


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.size < 2 or x.std() == 0 or y.std() == 0:
        raise UndefinedCorrelationError("correlation undefined: fewer than 2 points or zero variance")
    xc, yc = x - x.mean(), y - y.mean()
    return float(xc @ yc / np.sqrt((xc @ xc) * (yc @ yc)))


class EmbeddingShardSet:
    """All embedding tables of a model, sharded the same way."""

    def __init__(self, tables: Sequence[EmbeddingTable]):
        if not tables:
            raise ValueError("need at least one table")
        n = {t.n_shards for t in tables}
        if len(n) != 1:
            raise ValueError("all tables must use the same shard count")
        self.tables = list(tables)
        self.n_shards = n.pop()

    @classmethod
    def create(
        cls,
        specs: Sequence[TableSpec],
        n_shards: int,
        init_scale: float = 0.01,
        seed: int = 0,
        n_opt: int = 0,
        track_deltas: Sequence[int] = (),
        ssu_tables: Sequence[int] = (),
        ssu_ratio: float = 0.125,
        ssu_period: int = 2,
    ) -> "EmbeddingShardSet":
        rng = np.random.default_rng(seed)
        tables = []
        for i, spec in enumerate(specs):
            vals = (rng.standard_normal((spec.rows, spec.dim)) * init_scale).astype(np.float32)
            tables.append(
                EmbeddingTable(
                    i,
                    spec.rows,
                    spec.dim,
                    n_shards,
                    vals,
                    n_opt=n_opt,
                    track_deltas=i in track_deltas,
                    ssu_ratio=ssu_ratio if i in ssu_tables else None,
                    ssu_period=ssu_period,
                    seed=seed,
                )
            )
        return cls(tables)

    def __getitem__(self, i) -> EmbeddingTable:
        return self.tables[i]

    def __len__(self):
        return len(self.tables)

    def __iter__(self):
        return iter(self.tables)

    @property
    def total_params(self) -> int:
        return sum(t.rows * t.dim for t in self.tables)

    def lookup_and_count(self, table: int, indices) -> np.ndarray:
        return self.tables[table].lookup_and_count(indices)

    def apply_updates(self, table: int, indices, updates):
        self.tables[table].apply_updates(indices, updates)

    def top_rn_by_counter(self, table: int, rn: int, shard: int | None = None) -> np.ndarray:
        return self.tables[table].top_rn_by_counter(rn, shard)

    def top_rn_by_delta(self, table: int, rn: int, shard: int | None = None) -> np.ndarray:
        return self.tables[table].top_rn_by_delta(rn, shard)

    def frequency_delta_correlation(self, table: int) -> float:
        return self.tables[table].frequency_delta_correlation()

    def dump_instrumentation(self, table: int) -> np.ndarray:
        """(row, count, delta) records for plotting the frequency/change relationship."""
        t = self.tables[table]
        out = np.zeros(t.rows, dtype=[("row", "<i8"), ("count", "<u4"), ("delta", "<f8")])
        out["row"] = np.arange(t.rows)
        out["count"] = t.counters
        out["delta"] = t.deltas()
        return out


def prioritized_tables(specs: Sequence[TableSpec], coverage: float = 0.99) -> tuple[int, ...]:
    """Smallest largest-first set of tables holding at least ``coverage`` of all parameters."""
    sizes = np.array([s.rows * s.dim for s in specs], dtype=np.float64)
    order = sorted(range(len(specs)), key=lambda i: (-sizes[i], i))
    total = sizes.sum()
    chosen, acc = [], 0.0
    for i in order:
        chosen.append(i)
        acc += sizes[i]
        if acc >= coverage * total - 1e-9:
            break
    return tuple(sorted(chosen))
