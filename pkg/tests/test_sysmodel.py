import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedtune.engine import Architecture, architecture_for
from fedtune.space import FidelityVector
from fedtune.sysmodel import (BAD_NETWORK, BudgetExhausted, BudgetLedger, SystemModelParams, course_time,
                              expected_straggler_time, payload_size, round_costs, round_time)


def test_straggler_closed_forms():
    assert expected_straggler_time(1, 2.0) == 2.0
    assert math.isclose(expected_straggler_time(4, 1.0), 25 / 12)
    assert math.isclose(expected_straggler_time(2, 3.0), 4.5)
    with pytest.raises(ValueError):
        expected_straggler_time(0, 1.0)


@pytest.mark.parametrize("n,c", [(4, 1.0), (2, 3.0)])
def test_straggler_monte_carlo(n, c):
    rng = np.random.default_rng(11)
    mc = rng.exponential(c, size=(200_000, n)).max(axis=1).mean()
    assert abs(mc - expected_straggler_time(n, c)) < 1e-2 * max(1.0, c)


def test_memoryless_order_statistics():
    # max of n exponentials = sum of independent Exp(k/c) gaps, k = n..1
    rng = np.random.default_rng(5)
    n, c = 6, 2.0
    gaps = sum(rng.exponential(c / k, size=200_000) for k in range(1, n + 1))
    direct = rng.exponential(c, size=(200_000, n)).max(axis=1)
    assert abs(gaps.mean() - direct.mean()) < 0.03
    assert abs(gaps.var() - direct.var()) < 0.1


def test_round_time_hand_example():
    p = SystemModelParams(0.25, 0.75, 0.25, s_down_mb=1.0, s_up_mb=1.0, c_seconds=0.0, t_server_seconds=0.0)
    assert round_time(p, 10) == 44.0


def test_infinite_bandwidth_limit():
    p = SystemModelParams(1e9, 1e9, 1e9, 1.0, 1.0, c_seconds=1.5, t_server_seconds=0.2)
    assert math.isclose(round_time(p, 1), 1.7, rel_tol=1e-8)


def test_course_time_linear():
    p = BAD_NETWORK.with_payload(0.5)
    assert course_time(p, 5, FidelityVector(0, 1.0)) == 0.0
    tau = round_time(p, 5)
    assert math.isclose(course_time(p, 5, FidelityVector(10, 1.0)), 10 * tau)
    assert math.isclose(course_time(p, 5, FidelityVector(10, 0.2)), 10 * round_time(p, 1))


def test_payload_sizes():
    assert payload_size(Architecture(10, 2)) == 22 * 4 / 2 ** 20
    assert architecture_for("mlp", {"depth": 1, "width": 16}, 10, 2).n_params == 210


def test_params_from_dict_rejects_unknown():
    assert SystemModelParams.from_dict(BAD_NETWORK.to_dict()) == BAD_NETWORK
    with pytest.raises(ValueError):
        SystemModelParams.from_dict({"bandwidth": 1})


def test_sampled_stragglers_average_out():
    p = SystemModelParams(s_down_mb=0.0, s_up_mb=0.0, c_seconds=1.0, t_server_seconds=0.0,
                          sampled_stragglers=True)
    costs = round_costs(p, 8, FidelityVector(20000, 1.0), seed=0)
    assert abs(costs.mean() - expected_straggler_time(8, 1.0)) < 0.05


pos = st.floats(0.01, 100.0)


@settings(max_examples=1000, deadline=None)
@given(bu=pos, bd=pos, bc=pos, sd=pos, su=pos, c=st.floats(0, 10), ts=st.floats(0, 10),
       n=st.integers(1, 50), which=st.sampled_from(["bu", "bd", "bc", "sd", "su", "c", "ts", "n"]),
       factor=st.floats(1.01, 10.0))
def test_round_time_monotone(bu, bd, bc, sd, su, c, ts, n, which, factor):
    base = dict(bu=bu, bd=bd, bc=bc, sd=sd, su=su, c=c, ts=ts, n=n)

    def t(d):
        p = SystemModelParams(d["bu"], d["bd"], d["bc"], d["sd"], d["su"], d["c"], d["ts"])
        return round_time(p, d["n"])

    bigger = dict(base)
    bigger[which] = base[which] + 1 if which == "n" else base[which] * factor
    if which in ("bu", "bd", "bc"):
        assert t(bigger) <= t(base)  # more bandwidth never slows a round
    else:
        assert t(bigger) >= t(base)


def test_ledger():
    led = BudgetLedger(10.0)
    assert led.affordable_rounds(np.full(5, 3.0)) == 3
    led.charge(9.0)
    assert led.affordable_rounds(np.full(5, 3.0)) == 0
    led.charge(3.0)
    with pytest.raises(BudgetExhausted):
        led.charge(1.0)
    with pytest.raises(ValueError):
        BudgetLedger(0.0)
