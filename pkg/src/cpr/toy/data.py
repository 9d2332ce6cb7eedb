"""Synthetic click-through data with Zipf-distributed categorical ids and a planted logistic model."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = 131072
    n_test: int = 32768
    vocab_sizes: tuple[int, ...] = (20000, 10000, 5000, 2000, 1000, 200, 50, 10)
    n_dense: int = 4
    zipf_s: float = 1.05
    weight_scale: float = 0.7
    dense_scale: float = 0.5
    bias: float = -0.5

    def __post_init__(self):
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")
        if any(v < 2 for v in self.vocab_sizes):
            raise ValueError("vocabulary sizes must be >= 2")
        if not (self.zipf_s >= 0 and np.isfinite(self.zipf_s)):
            raise ValueError(f"invalid Zipf exponent {self.zipf_s}")


@dataclass
class SyntheticDataset:
    config: DatasetConfig
    dense: np.ndarray  # (n, n_dense) float32
    ids: np.ndarray  # (n, n_sparse) int64
    labels: np.ndarray  # (n,) float32
    true_prob: np.ndarray  # (n,) float64, planted click probability
    split: int  # rows [0, split) train, [split, n) test
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_sparse(self) -> int:
        return self.ids.shape[1]

    def train_batch(self, step: int, batch_size: int):
        lo = step * batch_size
        hi = lo + batch_size
        if hi > self.split:
            raise IndexError("single-epoch stream exhausted")
        return self.dense[lo:hi], self.ids[lo:hi], self.labels[lo:hi]

    @property
    def test(self):
        s = self.split
        return self.dense[s:], self.ids[s:], self.labels[s:]

    def to_bytes(self) -> bytes:
        return _HEADER.pack(
            _MAGIC, _VERSION, len(self.labels), self.split, self.dense.shape[1], self.n_sparse
        ) + struct.pack(f"<{self.n_sparse}Q", *self.config.vocab_sizes) + self._records().tobytes()

    def _records(self) -> np.ndarray:
        rec = np.zeros(len(self.labels), dtype=_record_dtype(self.dense.shape[1], self.n_sparse))
        rec["label"] = self.labels
        rec["prob"] = self.true_prob
        rec["dense"] = self.dense
        rec["ids"] = self.ids
        return rec


_MAGIC = b"CPRD"
_VERSION = 1
_HEADER = struct.Struct("<4sHQQII")


def _record_dtype(n_dense: int, n_sparse: int) -> np.dtype:
    return np.dtype([("label", "<f4"), ("prob", "<f8"), ("dense", "<f4", (n_dense,)), ("ids", "<i8", (n_sparse,))])


def zipf_probabilities(vocab: int, s: float) -> np.ndarray:
    ranks = np.arange(1, vocab + 1, dtype=np.float64)
    w = ranks ** (-s)
    return w / w.sum()


def generate_dataset(config: DatasetConfig = DatasetConfig(), seed: int = 0) -> SyntheticDataset:
    rng = np.random.default_rng(seed)
    n = config.n_train + config.n_test
    ids = np.empty((n, len(config.vocab_sizes)), np.int64)
    logit = np.full(n, config.bias)
    for f, vocab in enumerate(config.vocab_sizes):
        p = zipf_probabilities(vocab, config.zipf_s)
        ranks = np.minimum(np.searchsorted(np.cumsum(p), rng.random(n), side="right"), vocab - 1)
        # hashed ids: popularity rank is unrelated to row position
        perm = rng.permutation(vocab)
        ids[:, f] = perm[ranks]
        weights = rng.normal(0.0, config.weight_scale, vocab)
        logit += weights[ids[:, f]]
    dense = rng.standard_normal((n, config.n_dense))
    beta = rng.normal(0.0, config.dense_scale, config.n_dense)
    logit += dense @ beta
    prob = 1.0 / (1.0 + np.exp(-logit))
    labels = (rng.random(n) < prob).astype(np.float32)
    return SyntheticDataset(config, dense.astype(np.float32), ids, labels, prob, config.n_train, seed)


def load_dataset_bytes(data: bytes, config: DatasetConfig | None = None) -> SyntheticDataset:
    magic, version, n, split, n_dense, n_sparse = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError("not a dataset file of a supported version")
    off = _HEADER.size
    vocab = struct.unpack_from(f"<{n_sparse}Q", data, off)
    off += 8 * n_sparse
    rec = np.frombuffer(data, dtype=_record_dtype(n_dense, n_sparse), count=n, offset=off)
    if config is None:
        config = DatasetConfig(n_train=split, n_test=n - split, vocab_sizes=vocab, n_dense=n_dense)
    return SyntheticDataset(
        config,
        rec["dense"].copy(),
        rec["ids"].copy(),
        rec["label"].copy(),
        rec["prob"].copy(),
        int(split),
    )


def save_dataset(ds: SyntheticDataset, path: str | Path):
    Path(path).write_bytes(ds.to_bytes())


def load_dataset(path: str | Path) -> SyntheticDataset:
    return load_dataset_bytes(Path(path).read_bytes())


def config_dict(cfg: DatasetConfig) -> dict:
    d = asdict(cfg)
    d["vocab_sizes"] = list(cfg.vocab_sizes)
    return d
