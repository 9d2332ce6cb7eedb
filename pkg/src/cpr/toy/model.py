"""Small DLRM-style model: bottom MLP, sharded embeddings, pairwise dot interactions, top MLP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ..embedding_store import EmbeddingShardSet, TableSpec


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 16
    bottom_hidden: int = 32
    top_hidden: int = 32
    init_scale: float = 0.05


class DivergenceError(FloatingPointError):
    pass


def _linear_init(rng, fan_in, fan_out):
    return (rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class ToyModel:
    def __init__(
        self,
        config: ModelConfig,
        vocab_sizes,
        n_dense: int,
        n_shards: int = 8,
        seed: int = 0,
        track_deltas=(),
        ssu_tables=(),
        ssu_ratio: float = 0.125,
        ssu_period: int = 2,
    ):
        self.config = config
        rng = np.random.default_rng([seed, 17])
        d = config.dim
        self.n_features = len(vocab_sizes) + 1
        self._iu = np.triu_indices(self.n_features, 1)
        n_inter = d + len(self._iu[0])
        self.params = {
            "bw1": _linear_init(rng, n_dense, config.bottom_hidden),
            "bb1": np.zeros(config.bottom_hidden, np.float32),
            "bw2": _linear_init(rng, config.bottom_hidden, d),
            "bb2": np.zeros(d, np.float32),
            "tw1": _linear_init(rng, n_inter, config.top_hidden),
            "tb1": np.zeros(config.top_hidden, np.float32),
            "tw2": _linear_init(rng, config.top_hidden, 1),
            "tb2": np.zeros(1, np.float32),
        }
        self.emb = EmbeddingShardSet.create(
            [TableSpec(v, d) for v in vocab_sizes],
            n_shards,
            init_scale=config.init_scale,
            seed=int(rng.integers(2**31)),
            track_deltas=track_deltas,
            ssu_tables=ssu_tables,
            ssu_ratio=ssu_ratio,
            ssu_period=ssu_period,
        )

    # -- state --------------------------------------------------------------

    def mlp_state(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def load_mlp_state(self, state: dict):
        for k, v in state.items():
            self.params[k][...] = v

    # -- forward / backward -------------------------------------------------

    def forward(self, dense, ids, count: bool = False):
        p = self.params
        x1 = dense @ p["bw1"] + p["bb1"]
        a1 = np.maximum(x1, 0)
        z0 = a1 @ p["bw2"] + p["bb2"]
        get = (lambda f, col: self.emb[f].lookup_and_count(col)) if count else (lambda f, col: self.emb[f].lookup(col))
        embs = [get(f, ids[:, f]) for f in range(ids.shape[1])]
        Z = np.stack([z0] + embs, axis=1)
        G = np.einsum("bfd,bgd->bfg", Z, Z)
        h = np.concatenate([z0, G[:, self._iu[0], self._iu[1]]], axis=1)
        y1 = h @ p["tw1"] + p["tb1"]
        a2 = np.maximum(y1, 0)
        logit = (a2 @ p["tw2"] + p["tb2"])[:, 0]
        cache = (dense, ids, x1, a1, Z, h, y1, a2)
        return logit, cache

    def backward(self, cache, dlogit):
        """Gradients w.r.t. MLP parameters and per-feature embedding rows, given dL/dlogit."""
        p = self.params
        dense, ids, x1, a1, Z, h, y1, a2 = cache
        d = self.config.dim
        g = {}
        dl = dlogit[:, None].astype(np.float32)
        g["tw2"] = a2.T @ dl
        g["tb2"] = dl.sum(0)
        dy1 = (dl @ p["tw2"].T) * (y1 > 0)
        g["tw1"] = h.T @ dy1
        g["tb1"] = dy1.sum(0)
        dh = dy1 @ p["tw1"].T
        dG = np.zeros((Z.shape[0], self.n_features, self.n_features), np.float32)
        dG[:, self._iu[0], self._iu[1]] = dh[:, d:]
        dZ = np.einsum("bfg,bgd->bfd", dG + dG.transpose(0, 2, 1), Z)
        dz0 = dh[:, :d] + dZ[:, 0]
        g["bw2"] = a1.T @ dz0
        g["bb2"] = dz0.sum(0)
        dx1 = (dz0 @ p["bw2"].T) * (x1 > 0)
        g["bw1"] = dense.T @ dx1
        g["bb1"] = dx1.sum(0)
        return g, dZ[:, 1:]

    def loss_and_grads(self, dense, ids, labels, count: bool = False):
        logit, cache = self.forward(dense, ids, count=count)
        loss = bce_with_logits(logit, labels)
        dlogit = (_sigmoid(logit) - labels) / len(labels)
        g, demb = self.backward(cache, dlogit)
        return loss, g, demb

    def sgd_step(self, dense, ids, labels, lr: float, lr_emb: float) -> float:
        loss, g, demb = self.loss_and_grads(dense, ids, labels, count=True)
        if not np.isfinite(loss):
            raise DivergenceError("non-finite training loss")
        if lr:
            for k, v in g.items():
                self.params[k] -= np.float32(lr) * v
        if lr_emb:
            for f in range(ids.shape[1]):
                self.emb.apply_updates(f, ids[:, f], np.float32(-lr_emb) * demb[:, f])
        return loss

    def predict_logits(self, dense, ids, chunk: int = 8192) -> np.ndarray:
        out = [self.forward(dense[i : i + chunk], ids[i : i + chunk])[0] for i in range(0, len(dense), chunk)]
        return np.concatenate(out)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def bce_with_logits(logit, labels) -> float:
    logit = logit.astype(np.float64)
    return float(np.mean(np.maximum(logit, 0) - logit * labels + np.log1p(np.exp(-np.abs(logit)))))


def roc_auc(labels, scores) -> float:
    """Rank-based (Mann-Whitney) AUC with average ranks for ties."""
    labels = np.asarray(labels) > 0.5
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
