import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpr.cost_model import (
    CostParameters,
    DomainError,
    Recovery,
    choose_strategy,
    expected_pls,
    full_overhead,
    optimal_full_interval,
    partial_interval_for_pls,
    partial_overhead,
    scalability_sweep,
)
from cpr.failure_model import FailureProcess, Scaling

P = CostParameters(o_save=0.5, o_load=0.3, o_res=0.2, t_fail=28.0, t_total=56.0)


def hand_full(o_save, o_load, o_res, t_fail, t_total, t_save):
    # exact rational evaluation, one term at a time
    f = [Fraction(str(v)) for v in (o_save, o_load, o_res, t_fail, t_total, t_save)]
    o_save, o_load, o_res, t_fail, t_total, t_save = f
    saving = o_save * t_total / t_save
    failures = t_total / t_fail
    return saving, o_load * failures, t_save / 2 * failures, o_res * failures


def test_full_overhead_term_by_term():
    saving, load, lost, res = hand_full(0.5, 0.3, 0.2, 28, 56, 4.95)
    expected = float(saving + load + lost + res)
    assert expected == pytest.approx(11.6066, abs=1e-4)
    assert full_overhead(P, 4.95) == pytest.approx(expected, rel=1e-12)


def test_partial_overhead_drops_only_lost_computation():
    saving, load, lost, res = hand_full(0.5, 0.3, 0.2, 28, 56, 4.95)
    assert partial_overhead(P, 4.95) == pytest.approx(float(saving + load + res), rel=1e-12)
    assert partial_overhead(P, 4.95) == pytest.approx(6.6566, abs=1e-4)
    assert full_overhead(P, 4.95) - partial_overhead(P, 4.95) == pytest.approx(4.95)


def test_zero_overheads_leave_lost_computation():
    p = CostParameters(0, 0, 0, 28.0, 56.0)
    assert full_overhead(p, 3.0) == pytest.approx(1.5 * 2)


def test_rare_failures_leave_saving_cost():
    p = CostParameters(0.5, 0.3, 0.2, 1e12, 56.0)
    assert full_overhead(p, 4.0) == pytest.approx(0.5 * 56 / 4, rel=1e-9)


def test_partial_limits():
    assert partial_overhead(P, 1e15) == pytest.approx((0.3 + 0.2) * 2, rel=1e-9)
    p = CostParameters(0.5, 0.0, 0.0, 28.0, 56.0)
    assert partial_overhead(p, 7.0) == pytest.approx(4.0)


def test_load_share_scales_only_load():
    assert partial_overhead(P, 4.0, load_share=0.5) == pytest.approx(partial_overhead(P, 4.0) - 0.15 * 2)


def test_nonpositive_interval_rejected():
    for bad in (0.0, -1.0):
        with pytest.raises(DomainError):
            full_overhead(P, bad)
        with pytest.raises(DomainError):
            partial_overhead(P, bad)


def test_self_consistent_counts_stretched_timeline():
    plain = full_overhead(P, 4.95)
    sc = full_overhead(P, 4.95, self_consistent=True)
    per_hour = plain / P.t_total
    assert sc == pytest.approx(per_hour * P.t_total / (1 - per_hour), rel=1e-9)
    with pytest.raises(DomainError):
        full_overhead(CostParameters(5, 0, 0, 1, 10), 1.0, self_consistent=True)


def grid_argmin(p, hi, step):
    grid = np.arange(step, hi + step / 2, step)
    return grid[int(np.argmin([full_overhead(p, t) for t in grid]))]


@pytest.mark.parametrize("o_save, t_fail, quoted", [(0.5, 24.5, 4.95), (2.0, 2.0, 2.828)])
def test_optimal_interval_matches_grid_search(o_save, t_fail, quoted):
    p = CostParameters(o_save, 0.1, 0.1, t_fail, 100.0)
    t = optimal_full_interval(p)
    assert t == pytest.approx(quoted, abs=1e-3)
    # the optimum may exceed t_fail (second case), so search well past it
    assert abs(grid_argmin(p, 4 * max(t_fail, t), 0.001) - t) <= 0.001


def test_saving_equals_lost_term_at_optimum():
    t = optimal_full_interval(P)
    saving = P.o_save * P.t_total / t
    lost = t / 2 * P.t_total / P.t_fail
    assert saving == pytest.approx(lost, rel=1e-9)


def test_zero_save_cost_has_no_optimum():
    with pytest.raises(DomainError):
        optimal_full_interval(CostParameters(0, 1, 1, 10, 10))


@pytest.mark.parametrize("pls, n_emb, t_fail, expected", [(0.1, 18, 14, 50.4), (0.05, 4, 28, 11.2)])
def test_partial_interval_values(pls, n_emb, t_fail, expected):
    assert partial_interval_for_pls(pls, n_emb, t_fail) == pytest.approx(expected)
    assert expected_pls(expected, t_fail, n_emb) == pytest.approx(pls)


def test_expected_pls_value_and_limit():
    assert expected_pls(4, 20, 10) == pytest.approx(0.01)
    assert expected_pls(1e-12, 20, 10) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
def test_target_pls_domain(bad):
    with pytest.raises(DomainError):
        partial_interval_for_pls(bad, 8, 28)


@settings(max_examples=100, deadline=None)
@given(pls=st.floats(1e-4, 1.0), n=st.floats(1.0, 1e3), tf=st.floats(1e-2, 1e4))
def test_pls_interval_round_trip(pls, n, tf):
    assert expected_pls(partial_interval_for_pls(pls, n, tf), tf, n) == pytest.approx(pls, rel=1e-12)


def test_invalid_cost_parameters():
    with pytest.raises(DomainError):
        CostParameters(-1, 0, 0, 1, 1)
    with pytest.raises(DomainError):
        CostParameters(1, 0, 0, 0, 1)
    with pytest.raises(DomainError):
        CostParameters(1, 0, 0, 1, 1, n_emb=0.5)


EMULATION = CostParameters(0.0952, 0.0952, 0.0, 28.0, 56.0, 8)


def test_planner_prefers_partial_on_emulation_setup():
    d = choose_strategy(EMULATION, 0.1)
    assert d.chosen is Recovery.PARTIAL
    assert d.interval_hours == pytest.approx(44.8)
    # closed forms evaluated by hand
    assert d.predicted_overhead_partial == pytest.approx(0.0952 * 56 / 44.8 + 0.0952 * 2)
    assert d.predicted_overhead_full == pytest.approx(2 * math.sqrt(2 * 0.0952 * 28) + 0.0952 * 2)


def test_planner_falls_back_when_failures_are_frequent():
    # twenty times the failures, half the job failing each time
    p = CostParameters(0.0952, 0.0952, 0.0, 56.0 / 40, 56.0, 2)
    d = choose_strategy(p, 0.02)
    assert partial_interval_for_pls(0.02, 2, 1.4) < optimal_full_interval(p)
    assert d.predicted_overhead_partial > d.predicted_overhead_full
    assert d.chosen is Recovery.FULL
    assert d.interval_hours == pytest.approx(optimal_full_interval(p))


def test_infinite_margin_always_full():
    assert choose_strategy(EMULATION, 0.1, margin=math.inf).chosen is Recovery.FULL


def test_decision_row_has_both_overheads():
    row = choose_strategy(EMULATION, 0.1).as_row()
    assert {"predicted_overhead_full", "predicted_overhead_partial", "chosen", "interval_hours"} <= set(row)


def sweep(scaling, node_p=0.0):
    base = CostParameters(0.0952, 0.0952, 0.0, 28.0, 56.0, 8)
    proc = FailureProcess.with_mtbf("uniform_hazard", 28.0, base_nodes=8, scaling=scaling, node_p=node_p)
    return base, scalability_sweep(base, proc, [8 * 2**k for k in range(8)], 0.1)


def test_sweep_at_base_matches_point_evaluation():
    base, pts = sweep(Scaling.LINEAR_MTBF)
    assert pts[0].overhead_full == pytest.approx(full_overhead(base, optimal_full_interval(base)))
    assert pts[0].overhead_partial == pytest.approx(partial_overhead(base, partial_interval_for_pls(0.1, 8, 28.0)))


@pytest.mark.parametrize("scaling, p", [(Scaling.LINEAR_MTBF, 0.0), (Scaling.INDEPENDENT_NODES, 0.002)])
def test_sweep_shapes(scaling, p):
    _, pts = sweep(scaling, p)
    part = [x.overhead_partial for x in pts]
    full = [x.overhead_full for x in pts]
    assert all(b <= a + 1e-12 for a, b in zip(part, part[1:]))
    assert all(b > a for a, b in zip(full, full[1:]))


def test_empty_sweep_rejected():
    with pytest.raises(ValueError):
        scalability_sweep(EMULATION, FailureProcess.with_mtbf("exponential", 28.0), [], 0.1)
