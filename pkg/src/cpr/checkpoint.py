"""Checkpoint policies, save schedules, the snapshot store and its on-disk format."""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np


class Strategy(str, enum.Enum):
    FULL = "full"
    PARTIAL_NAIVE = "partial_naive"
    CPR_VANILLA = "cpr_vanilla"
    CPR_SCAR = "cpr_scar"
    CPR_MFU = "cpr_mfu"
    CPR_SSU = "cpr_ssu"

    @property
    def is_partial(self) -> bool:
        return self is not Strategy.FULL

    @property
    def prioritized(self) -> bool:
        return self in (Strategy.CPR_SCAR, Strategy.CPR_MFU, Strategy.CPR_SSU)

    @property
    def uses_pls_interval(self) -> bool:
        return self not in (Strategy.FULL, Strategy.PARTIAL_NAIVE)


ALL_STRATEGIES = tuple(Strategy)


@dataclass(frozen=True)
class CheckpointPolicy:
    strategy: Strategy
    t_save: float
    r: float = 0.125
    prioritized_tables: tuple[int, ...] | None = None
    include_optimizer: bool = True

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not self.t_save > 0:
            raise ValueError(f"t_save must be > 0, got {self.t_save}")
        if not 0 < self.r <= 1:
            raise ValueError(f"r must lie in (0, 1], got {self.r}")
        if self.strategy.prioritized and self.r >= 1:
            raise ValueError(f"{self.strategy.value} needs r < 1")
        if self.prioritized_tables is not None:
            object.__setattr__(self, "prioritized_tables", tuple(sorted(int(t) for t in self.prioritized_tables)))


class SaveKind(str, enum.Enum):
    FULL = "full"
    PARTIAL = "partial"


@dataclass(frozen=True)
class SaveAction:
    time: float
    kind: SaveKind
    tables: tuple[int, ...]  # () means every table
    fraction: float = 1.0  # share of each listed table's rows written


def _ticks(step: float, horizon: float) -> list[tuple[int, float]]:
    n = int(np.floor(horizon / step + 1e-9))
    return [(k, k * step) for k in range(1, n + 1)]


def plan_schedule(policy: CheckpointPolicy, horizon: float, n_tables: int | None = None) -> list[SaveAction]:
    """Ordered save actions over ``(0, horizon]``.

    Without prioritisation every table is fully saved each ``t_save``. With
    SCAR/MFU/SSU, prioritised tables instead get a partial save (at most
    ``r`` of their rows) each ``r * t_save``, and the rest are saved fully each
    ``t_save``.
    """
    if not horizon > 0:
        raise ValueError("horizon must be > 0")
    if not policy.strategy.prioritized:
        return [SaveAction(t, SaveKind.FULL, ()) for _, t in _ticks(policy.t_save, horizon)]
    if policy.prioritized_tables is None:
        raise ValueError("prioritised strategies need prioritized_tables")
    prio = policy.prioritized_tables
    rest = tuple(t for t in range(n_tables) if t not in prio) if n_tables is not None else None
    actions = []
    for _, t in _ticks(policy.r * policy.t_save, horizon):
        actions.append(SaveAction(t, SaveKind.PARTIAL, prio, policy.r))
    for _, t in _ticks(policy.t_save, horizon):
        if rest is None or rest:
            actions.append(SaveAction(t, SaveKind.FULL, rest if rest is not None else ("rest",)))
    # partials first at coincident times; order is otherwise by time
    actions.sort(key=lambda a: (a.time, a.kind is SaveKind.FULL))
    return actions


def action_cost(action: SaveAction, o_save: float, table_mass: Sequence[float], prioritized=()) -> float:
    """Volume-proportional save hours: ``o_save`` buys one write of every parameter."""
    total = float(sum(table_mass))
    if action.tables == ():
        mass = total
    elif action.tables == ("rest",):
        mass = total - sum(table_mass[t] for t in prioritized)
    else:
        mass = sum(table_mass[t] for t in action.tables)
    return o_save * action.fraction * mass / total


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------


MAGIC = b"CPRS"
FORMAT_VERSION = 1
# magic, version, shard, table, row count, dim, optimizer scalars per row, kind, pad, logical time, samples
HEADER = struct.Struct("<4sHIIQIHBxdQ")
_KIND_CODE = {SaveKind.FULL: 0, SaveKind.PARTIAL: 1}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


class SnapshotFormatError(ValueError):
    pass


@dataclass
class Snapshot:
    shard: int
    table: int
    kind: SaveKind
    logical_time: float
    sample_count: int
    row_ids: np.ndarray  # (n,) uint64, ascending
    values: np.ndarray  # (n, dim) float32
    opt: np.ndarray  # (n, n_opt) float32

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def nbytes(self) -> int:
        return HEADER.size + len(self.row_ids) * record_dtype(self.dim, self.opt.shape[1]).itemsize

    def __eq__(self, other):
        if not isinstance(other, Snapshot):
            return NotImplemented
        return (
            (self.shard, self.table, self.kind, self.logical_time, self.sample_count)
            == (other.shard, other.table, other.kind, other.logical_time, other.sample_count)
            and np.array_equal(self.row_ids, other.row_ids)
            and self.values.tobytes() == other.values.tobytes()
            and self.opt.tobytes() == other.opt.tobytes()
        )


def record_dtype(dim: int, n_opt: int) -> np.dtype:
    fields = [("row", "<u8"), ("values", "<f4", (dim,))]
    if n_opt:
        fields.append(("opt", "<f4", (n_opt,)))
    return np.dtype(fields)


def write_snapshot(snap: Snapshot, fh: BinaryIO):
    n_opt = snap.opt.shape[1]
    fh.write(
        HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            snap.shard,
            snap.table,
            len(snap.row_ids),
            snap.dim,
            n_opt,
            _KIND_CODE[snap.kind],
            float(snap.logical_time),
            int(snap.sample_count),
        )
    )
    rec = np.empty(len(snap.row_ids), record_dtype(snap.dim, n_opt))
    rec["row"] = snap.row_ids
    rec["values"] = snap.values
    if n_opt:
        rec["opt"] = snap.opt
    fh.write(rec.tobytes())


def read_snapshot(fh: BinaryIO) -> Snapshot:
    head = fh.read(HEADER.size)
    if len(head) != HEADER.size:
        raise SnapshotFormatError("truncated header")
    magic, version, shard, table, n, dim, n_opt, kind, t, samples = HEADER.unpack(head)
    if magic != MAGIC:
        raise SnapshotFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise SnapshotFormatError(f"unsupported version {version}")
    if kind not in _CODE_KIND:
        raise SnapshotFormatError(f"unknown snapshot kind {kind}")
    dt = record_dtype(dim, n_opt)
    body = fh.read(n * dt.itemsize)
    if len(body) != n * dt.itemsize:
        raise SnapshotFormatError("truncated records")
    rec = np.frombuffer(body, dt)
    opt = rec["opt"].copy() if n_opt else np.zeros((n, 0), np.float32)
    return Snapshot(shard, table, _CODE_KIND[kind], t, samples, rec["row"].copy(), rec["values"].copy(), opt)


def snapshot_bytes(snap: Snapshot) -> bytes:
    buf = io.BytesIO()
    write_snapshot(snap, buf)
    return buf.getvalue()


def snapshot_from_bytes(data: bytes) -> Snapshot:
    return read_snapshot(io.BytesIO(data))


class NoSnapshotError(LookupError):
    pass


@dataclass
class TrainerState:
    logical_time: float
    sample_count: int
    step: int
    mlp: dict


@dataclass
class SnapshotStore:
    """Per-(shard, table) snapshot chains: the latest full snapshot plus later partial ones.

    With ``directory`` set every snapshot is also written to disk in the
    binary format and reads go through the file.
    """

    directory: Path | None = None
    chains: dict = field(default_factory=dict)
    trainer_states: list = field(default_factory=list)
    _seq: int = 0

    def __post_init__(self):
        if self.directory is not None:
            self.directory = Path(self.directory)
            self.directory.mkdir(parents=True, exist_ok=True)

    def _persist(self, snap: Snapshot):
        if self.directory is None:
            return snap
        self._seq += 1
        path = self.directory / f"s{snap.shard:03d}_t{snap.table:03d}_{self._seq:08d}.snap"
        with open(path, "wb") as fh:
            write_snapshot(snap, fh)
        return path

    def _load(self, item) -> Snapshot:
        if isinstance(item, Snapshot):
            return item
        with open(item, "rb") as fh:
            return read_snapshot(fh)

    def add(self, snap: Snapshot):
        key = (snap.shard, snap.table)
        chain = self.chains.setdefault(key, [])
        if chain and snap.logical_time < self._load(chain[-1]).logical_time:
            raise ValueError("snapshots must be added in time order")
        item = self._persist(snap)
        if snap.kind is SaveKind.FULL:
            for old in chain:
                if isinstance(old, Path):
                    old.unlink(missing_ok=True)
            chain.clear()
        chain.append(item)

    def chain(self, shard: int, table: int) -> list[Snapshot]:
        return [self._load(x) for x in self.chains.get((shard, table), [])]

    def has(self, shard: int, table: int) -> bool:
        return bool(self.chains.get((shard, table)))

    def add_trainer_state(self, state: TrainerState):
        self.trainer_states = [state]

    def latest_trainer_state(self) -> TrainerState:
        if not self.trainer_states:
            raise NoSnapshotError("no trainer state saved")
        return self.trainer_states[-1]


def save_full(store: SnapshotStore, table, shard: int, logical_time: float, sample_count: int, include_optimizer=True):
    """Snapshot every row of ``shard`` in ``table`` (an EmbeddingTable)."""
    rows = np.arange(table.bounds[shard], table.bounds[shard + 1], dtype=np.uint64)
    snap = _make(table, shard, rows, SaveKind.FULL, logical_time, sample_count, include_optimizer)
    store.add(snap)
    table.mark_saved(rows.astype(np.int64))
    return snap


def save_partial(
    store: SnapshotStore, table, shard: int, row_ids, logical_time: float, sample_count: int, include_optimizer=True
):
    rows = np.unique(np.asarray(row_ids, dtype=np.int64))
    lo, hi = table.bounds[shard], table.bounds[shard + 1]
    if rows.size and (rows[0] < lo or rows[-1] >= hi):
        raise ValueError(f"rows outside shard {shard} of table {table.table_id}")
    if rows.size == 0:
        return None
    snap = _make(table, shard, rows.astype(np.uint64), SaveKind.PARTIAL, logical_time, sample_count, include_optimizer)
    store.add(snap)
    table.mark_saved(rows)
    return snap


def _make(table, shard, rows, kind, logical_time, sample_count, include_optimizer) -> Snapshot:
    idx = rows.astype(np.int64)
    opt = table.opt_state[idx].copy() if include_optimizer else np.zeros((len(idx), 0), np.float32)
    return Snapshot(shard, table.table_id, kind, float(logical_time), int(sample_count), rows, table.values[idx].copy(), opt)


def overlay(chain: Sequence[Snapshot], rows: range, dim: int, n_opt: int):
    """Latest-wins reconstruction of a shard's rows from a full snapshot and later partials."""
    if not chain or chain[0].kind is not SaveKind.FULL:
        raise NoSnapshotError("chain does not start with a full snapshot")
    lo = rows.start
    values = np.empty((len(rows), dim), np.float32)
    opt = np.zeros((len(rows), n_opt), np.float32)
    for snap in chain:
        idx = snap.row_ids.astype(np.int64) - lo
        values[idx] = snap.values
        if snap.opt.shape[1] == n_opt and n_opt:
            opt[idx] = snap.opt
    return values, opt


def restore_shard(store: SnapshotStore, table, shard: int):
    """Rebuild one shard of one table in place; returns the reconstructed row count."""
    chain = store.chain(shard, table.table_id)
    if not chain:
        raise NoSnapshotError(f"no snapshot for shard {shard} of table {table.table_id}")
    rows = table.shard_range(shard)
    values, opt = overlay(chain, rows, table.dim, table.n_opt)
    table.values[rows.start : rows.stop] = values
    if chain[0].opt.shape[1] == table.n_opt:
        table.opt_state[rows.start : rows.stop] = opt
    table.reset_shard(shard)
    return len(rows)


@dataclass(frozen=True)
class RestoreResult:
    shards: tuple[int, ...]
    cost_hours: float
    rolled_back_to: TrainerState | None = None


def restore(store: SnapshotStore, emb, failed_shards: Iterable[int], strategy: Strategy, o_load: float = 0.0,
            per_shard_load: bool = False) -> RestoreResult:
    """Recover from a failure of ``failed_shards``.

    Full recovery reloads every shard and returns the trainer state to roll back
    to; partial strategies rebuild only the failed shards and leave everything
    else untouched. ``o_load`` is charged once per event unless ``per_shard_load``.
    """
    failed = tuple(sorted(set(int(s) for s in failed_shards)))
    strategy = Strategy(strategy)
    if strategy is Strategy.FULL:
        state = store.latest_trainer_state()
        shards = tuple(range(emb.n_shards))
    else:
        state = None
        shards = failed
    for s in shards:
        for table in emb:
            restore_shard(store, table, s)
    cost = o_load * (len(failed) if per_shard_load else 1)
    return RestoreResult(shards, cost, state)


def restore_log_replay(snapshots: Sequence[Snapshot], rows: range, dim: int) -> np.ndarray:
    """Brute-force row-by-row replay in time order (test oracle for ``overlay``)."""
    out = {}
    for snap in sorted(snapshots, key=lambda s: s.logical_time):
        if snap.kind is SaveKind.FULL:
            out = {}
        for r, v in zip(snap.row_ids.tolist(), snap.values):
            out[r] = v
    return np.stack([out[r] for r in rows]).astype(np.float32)
