import numpy as np
import pytest

from cpr.checkpoint import CheckpointPolicy, Strategy
from cpr.cost_model import CostParameters, expected_pls, full_overhead, partial_overhead
from cpr.failure_model import FailureProcess
from cpr.simulator import (
    REPORT_COLUMNS,
    Mode,
    SimConfig,
    calibrate_overheads,
    compare_strategies,
    config_hash,
    failed_shards,
    failure_trace,
    monte_carlo,
    run,
    stream_seed,
    summarize,
)

# t_save = 7 divides the 56 h horizon and is the optimum for o_save = 0.875, t_fail = 28
COST = CostParameters(0.875, 0.3, 0.2, 28.0, 56.0, 8)
POISSON = FailureProcess.with_mtbf("exponential", 28.0)


def config(strategy="full", t_save=7.0, **kw):
    kw.setdefault("fraction_set", (0.125,))
    return SimConfig(COST, POISSON, CheckpointPolicy(strategy, t_save), **kw)


def test_stream_seeds_are_distinct():
    seeds = {stream_seed(0, run, stream) for run in range(50) for stream in range(4)}
    assert len(seeds) == 200
    assert stream_seed(1, 0, 0) != stream_seed(0, 0, 0)


def test_full_recovery_matches_closed_form():
    _, s = monte_carlo(config(), 10_000)
    assert s.mean_overhead_fraction * 56 == pytest.approx(full_overhead(COST, 7.0), rel=0.03)
    # two expected failures, each losing half an interval on average
    assert s.mean_lost_hours == pytest.approx(3.5 * 2, rel=0.03)
    assert s.mean_save_hours == pytest.approx(0.875 * 8)


def test_partial_recovery_matches_closed_form():
    _, s = monte_carlo(config("partial_naive"), 10_000)
    assert s.mean_lost_hours == 0
    assert s.mean_overhead_fraction * 56 == pytest.approx(partial_overhead(COST, 7.0), rel=0.03)


def test_mean_pls_matches_closed_form():
    # one failure of one shard out of eight over the whole run
    cost = CostParameters(0.875, 0.3, 0.2, 56.0, 56.0, 8)
    cfg = SimConfig(cost, POISSON, CheckpointPolicy("cpr_vanilla", 28.0), fraction_set=(0.125,), fixed_failures=1)
    _, s = monte_carlo(cfg, 10_000)
    assert s.mean_final_pls == pytest.approx(expected_pls(28.0, 56.0, 8), rel=0.03)
    assert expected_pls(28.0, 56.0, 8) == pytest.approx(0.03125)


def test_runs_are_reproducible():
    a, b = run(config(), 11), run(config(), 11)
    assert a.serialize() == b.serialize()
    assert run(config(), 12).serialize() != a.serialize()


def test_common_random_numbers_across_strategies():
    cfg = config(fraction_set=(0.5, 0.25, 0.125))
    res = compare_strategies(cfg, ["full", "partial_naive", "cpr_vanilla"], 20)
    for seed in range(20):
        fails = [
            [(e[1], tuple(e[3])) for e in reps[seed].events if e[0] == "failure"] for reps, _ in res.values()
        ]
        assert fails[0] == fails[1] == fails[2]


def test_failed_shards_do_not_depend_on_strategy_or_cost():
    a = failure_trace(config(), 4)
    b = failure_trace(config("cpr_vanilla", 3.0), 4)
    assert a.to_bytes() == b.to_bytes()
    picks = failed_shards(a, 8, 4)
    assert all(len(p) == 1 for p in picks)


def test_partial_strategies_never_lose_computation():
    for strategy in ("partial_naive", "cpr_vanilla"):
        reports, _ = monte_carlo(config(strategy), 200)
        assert all(r.ledger.lost_hours == 0 for r in reports)


def test_full_recovery_has_no_pls():
    reports, _ = monte_carlo(config(), 100)
    assert all(r.final_pls == 0 for r in reports)


def test_single_seed_summary_equals_run():
    reports, s = monte_carlo(config(), 1)
    r = run(config(), 0)
    assert reports[0].serialize() == r.serialize()
    assert s.mean_overhead_fraction == r.overhead_fraction
    assert s.stderr_overhead_fraction == 0


def test_stderr_shrinks_with_more_seeds():
    _, small = monte_carlo(config(), 100)
    _, large = monte_carlo(config(), 2500)
    assert large.stderr_overhead_fraction < small.stderr_overhead_fraction / 3


def test_percentiles_are_ordered():
    _, s = monte_carlo(config("cpr_vanilla", 20.0), 500)
    assert s.p50_overhead_fraction <= s.p75_overhead_fraction <= s.p95_overhead_fraction
    assert s.p50_final_pls <= s.p95_final_pls


def test_summary_is_order_insensitive():
    reports, s = monte_carlo(config(), 50)
    assert summarize(reports[::-1]) == s
    with pytest.raises(ValueError):
        summarize([])
    with pytest.raises(ValueError):
        monte_carlo(config(), 0)


def test_zero_failures():
    r = run(config(fixed_failures=0), 0)
    assert r.n_failures == 0
    assert r.ledger.total == pytest.approx(0.875 * 8)
    assert r.final_pls == 0


def test_with_strategy_assigns_planner_intervals():
    cfg = config()
    assert cfg.with_strategy("full").policy.t_save == pytest.approx(7.0)
    assert cfg.with_strategy("partial_naive").policy.t_save == pytest.approx(7.0)
    # 2 * 0.1 * 8 * 28
    assert cfg.with_strategy("cpr_vanilla").policy.t_save == pytest.approx(44.8)


def test_report_rows_and_serialization():
    r = run(config(), 3)
    assert list(r.row()) == REPORT_COLUMNS
    assert r.row()["auc"] == ""
    assert b'"events"' in r.serialize()


def test_config_validation():
    with pytest.raises(ValueError):
        config(fraction_set=())
    with pytest.raises(ValueError):
        config(n_shards=0)
    with pytest.raises(ValueError):
        config(mode=Mode.COUPLED)
    with pytest.raises(ValueError):
        config("cpr_mfu")


def test_config_hash_is_stable():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert len(config_hash({})) == 16


def test_calibration_hits_target():
    cost = calibrate_overheads(0.085, 56.0, 28.0, 2, n_seeds=300)
    assert cost.o_load == cost.o_save
    base = SimConfig(cost, FailureProcess.with_mtbf("uniform_hazard", 28.0), CheckpointPolicy("full", 1.0),
                     fixed_failures=2)
    _, s = monte_carlo(base.with_strategy("full"), 300)
    assert s.mean_overhead_fraction == pytest.approx(0.085, rel=1e-3)
    with pytest.raises(ValueError):
        calibrate_overheads(1.5, 56.0, 28.0, 2)
