import itertools
from dataclasses import replace

import numpy as np
import pytest

from cpr.checkpoint import CheckpointPolicy, SnapshotStore, Strategy
from cpr.cost_model import CostParameters
from cpr.failure_model import FailureTrace
from cpr.toy.data import DatasetConfig, generate_dataset, load_dataset, load_dataset_bytes, save_dataset
from cpr.toy.experiment import (
    ToyConfig,
    baseline_metrics,
    build_model,
    cached_dataset,
    evaluate,
    run_failure_experiment,
    train,
)
from cpr.toy.model import ModelConfig, ToyModel, bce_with_logits, roc_auc

SMALL = ToyConfig(
    dataset=DatasetConfig(n_train=64 * 200, n_test=4000, vocab_sizes=(600, 300, 100, 20)),
    model=ModelConfig(dim=4, bottom_hidden=8, top_hidden=8),
    n_shards=4,
    data_seed=0,
    model_seed=0,
)
COST = CostParameters(0.1, 0.1, 0.0, 10.0, 20.0, 4)


def float64_model(seed=0):
    m = ToyModel(ModelConfig(dim=3, bottom_hidden=5, top_hidden=4), (7, 5, 3), n_dense=2, n_shards=1, seed=seed)
    m.params = {k: v.astype(np.float64) for k, v in m.params.items()}
    for t in m.emb:
        t.values = t.values.astype(np.float64)
    return m


def batch(seed=1, n=6):
    rng = np.random.default_rng(seed)
    dense = rng.standard_normal((n, 2))
    ids = np.stack([rng.integers(0, v, n) for v in (7, 5, 3)], axis=1)
    return dense, ids, rng.integers(0, 2, n).astype(np.float64)


def test_gradients_match_finite_differences():
    m = float64_model()
    dense, ids, labels = batch()
    _, g, demb = m.loss_and_grads(dense, ids, labels)
    eps = 1e-6

    def loss():
        return bce_with_logits(m.forward(dense, ids)[0], labels)

    for name, p in m.params.items():
        for idx in list(np.ndindex(p.shape))[:6]:
            old = p[idx]
            p[idx] = old + eps
            up = loss()
            p[idx] = old - eps
            down = loss()
            p[idx] = old
            assert g[name][idx] == pytest.approx((up - down) / (2 * eps), abs=1e-4)
    # embedding rows: sum the per-occurrence gradients of each row
    for f, t in enumerate(m.emb):
        row = int(ids[0, f])
        grad = demb[ids[:, f] == row, f].sum(0)
        for k in range(t.dim):
            old = t.values[row, k]
            t.values[row, k] = old + eps
            up = loss()
            t.values[row, k] = old - eps
            down = loss()
            t.values[row, k] = old
            assert grad[k] == pytest.approx((up - down) / (2 * eps), abs=1e-4)


def test_bce_oracle():
    logit = np.array([0.0, 2.0, -3.0])
    y = np.array([1.0, 0.0, 0.0])
    p = 1 / (1 + np.exp(-logit))
    expected = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert bce_with_logits(logit, y) == pytest.approx(expected)
    assert np.isfinite(bce_with_logits(np.array([1e4, -1e4]), np.array([0.0, 1.0])))


def test_auc_matches_pair_counting():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 60)
    s = rng.integers(0, 8, 60).astype(float)  # with ties
    pairs = [(a, b) for a, b in itertools.product(range(60), repeat=2) if y[a] == 1 and y[b] == 0]
    oracle = np.mean([1.0 if s[a] > s[b] else 0.5 if s[a] == s[b] else 0.0 for a, b in pairs])
    assert roc_auc(y, s) == pytest.approx(oracle)
    with pytest.raises(ValueError):
        roc_auc(np.ones(3), np.arange(3))


def test_dataset_is_deterministic_and_round_trips(tmp_path):
    cfg = SMALL.dataset
    a, b = generate_dataset(cfg, 3), generate_dataset(cfg, 3)
    assert a.to_bytes() == b.to_bytes()
    assert a.to_bytes() != generate_dataset(cfg, 4).to_bytes()
    back = load_dataset_bytes(a.to_bytes())
    assert back.to_bytes() == a.to_bytes()
    save_dataset(a, tmp_path / "d.bin")
    assert load_dataset(tmp_path / "d.bin").to_bytes() == a.to_bytes()
    with pytest.raises(ValueError):
        load_dataset_bytes(b"NOPE" + a.to_bytes()[4:])


def test_dataset_ids_in_range_and_stream_ends():
    ds = generate_dataset(SMALL.dataset, 0)
    assert (ds.ids >= 0).all() and (ds.ids < np.array(SMALL.dataset.vocab_sizes)).all()
    with pytest.raises(IndexError):
        ds.train_batch(200, 64)


def test_dataset_config_validation():
    with pytest.raises(ValueError):
        DatasetConfig(n_train=0)
    with pytest.raises(ValueError):
        DatasetConfig(vocab_sizes=(1,))
    with pytest.raises(ValueError):
        ToyConfig(dataset=DatasetConfig(n_train=10), batch_size=64)
    with pytest.raises(ValueError):
        replace(SMALL, steps=10_000).n_steps


def test_zero_learning_rate_keeps_initial_auc():
    cfg = replace(SMALL, lr=0.0, lr_emb=0.0)
    ds = cached_dataset(cfg.dataset, 0)
    fresh = evaluate(build_model(cfg, 0), ds, 0)
    trained = train(build_model(cfg, 0), ds, cfg, steps=50)
    assert trained.auc == fresh.auc


def test_training_is_deterministic_and_learns():
    ds = cached_dataset(SMALL.dataset, 0)
    a = train(build_model(SMALL, 0), ds, SMALL)
    b = train(build_model(SMALL, 0), ds, SMALL)
    assert a == b
    assert a.auc > evaluate(build_model(SMALL, 0), ds, 0).auc + 0.1


def test_default_configuration_beats_chance():
    cfg = ToyConfig(dataset=DatasetConfig(n_train=2048 * 64, n_test=16384), data_seed=0, model_seed=0)
    assert baseline_metrics(cfg, 0, 0).auc >= 0.65


def trace(*events, horizon=20.0):
    return FailureTrace(tuple(events), horizon)


def test_no_failures_matches_baseline():
    res = run_failure_experiment(CheckpointPolicy("cpr_vanilla", 5.0), trace(), SMALL, cost=COST)
    assert res.metrics.auc == res.baseline.auc
    assert res.final_pls == 0
    assert res.ledger.save_hours == pytest.approx(4 * 0.1)


def test_full_recovery_reproduces_failure_free_run():
    res = run_failure_experiment(
        CheckpointPolicy("full", 4.0), trace((6.0, 0.5), (13.0, 0.25)), SMALL, failed_shards=[[0, 1], [3]], cost=COST
    )
    assert res.metrics.auc == res.baseline.auc
    assert res.auc_degradation == 0
    # rolled back 2 h and 1 h of progress
    assert res.ledger.lost_hours == pytest.approx(3.0)
    assert res.ledger.load_hours == pytest.approx(0.2)
    assert res.final_pls == 0


def test_partial_recovery_loses_progress_and_accounts_pls():
    res = run_failure_experiment(
        CheckpointPolicy("partial_naive", 8.0), trace((6.0, 0.5)), SMALL, failed_shards=[[0, 1]], cost=COST
    )
    assert res.ledger.lost_hours == 0
    # 6 of 20 hours lost on 2 of 4 shards
    assert res.final_pls == pytest.approx(6 / 20 * 2 / 4)
    assert res.metrics.auc != res.baseline.auc


def test_naive_and_vanilla_coincide_at_the_same_interval():
    args = dict(trace=trace((3.0, 0.25), (11.0, 0.5)), config=SMALL, failed_shards=[[2], [0, 3]], cost=COST)
    a = run_failure_experiment(CheckpointPolicy("partial_naive", 5.0), **args)
    b = run_failure_experiment(CheckpointPolicy("cpr_vanilla", 5.0), **args)
    assert a.metrics == b.metrics
    assert a.final_pls == b.final_pls


@pytest.mark.parametrize("strategy", ["cpr_scar", "cpr_mfu", "cpr_ssu"])
def test_prioritized_strategies_run_and_charge_written_rows(strategy):
    store = SnapshotStore()
    res = run_failure_experiment(
        CheckpointPolicy(strategy, 8.0), trace((6.0, 0.5)), SMALL, failed_shards=[[0, 1]], cost=COST, store=store
    )
    saves = [e for e in res.events if e[0] == "save"]
    assert res.ledger.save_hours == pytest.approx(sum(e[3] for e in saves))
    partial_cost = sum(e[3] for e in saves if e[2] == "partial")
    mass = sum(SMALL.table_mass)
    prio_mass = sum(SMALL.table_mass[t] for t in SMALL.prioritized)
    # never more than r of the prioritised rows per partial save
    n_partial = sum(1 for e in saves if e[2] == "partial")
    assert partial_cost <= n_partial * COST.o_save * 0.125 * prio_mass / mass * 1.05
    if strategy != "cpr_ssu":
        assert partial_cost == pytest.approx(n_partial * COST.o_save * 0.125 * prio_mass / mass, rel=0.05)
    assert 0 <= res.final_pls <= 1


def test_hook_may_not_jump_forward():
    ds = cached_dataset(SMALL.dataset, 0)
    with pytest.raises(ValueError):
        train(build_model(SMALL, 0), ds, SMALL, steps=10, hooks=(lambda step, model: step + 1 if step == 3 else None,))
