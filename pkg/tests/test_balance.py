import math

import pytest
from hypothesis import given, settings, strategies as st

from ndpmoe.balance import (BalanceError, BalanceInputs, e_g_prime, lhs, solve,
                            solve_decode, solve_e_max, solve_prefill)
from ndpmoe.cost import Stage
import oracles as o


def mixtral_inputs(**kw):
    base = dict(t_w=o.MIXTRAL_T_W, t_g=o.MIXTRAL_T_G, t_n=o.MIXTRAL_T_N6, t_a=o.MIXTRAL_T_A,
                n_ndp=6, topk_effective=2)
    base.update(kw)
    return BalanceInputs(**base)


def test_mixtral_decode_point():
    sol = solve_decode(mixtral_inputs())
    assert sol.e_g == pytest.approx(o.MIXTRAL_E_G, abs=1e-12)
    assert sol.residual <= 1e-9
    assert not sol.clamped
    assert sol.e_n == pytest.approx(2 - sol.e_g)
    assert sol.lhs_time == pytest.approx(sol.rhs_time, abs=1e-15)


def test_mixtral_decode_matches_grid():
    grid = o.grid_balance(o.MIXTRAL_T_W, o.MIXTRAL_T_G, o.MIXTRAL_T_N6, o.MIXTRAL_T_A, 6, 2)
    assert solve_decode(mixtral_inputs()).e_g == pytest.approx(grid, abs=2e-5)


@pytest.mark.parametrize("e,n,expected", [
    (0.0, 3, 1 / 3), (3.0, 3, 1 / 3), (6.0, 3, 1 / 3),
    (1.0, 3, 0.0), (3.0, 2, 0.0),
    (0.5, 2, 0.25), (2.25, 4, 0.0625),
])
def test_unhidden_factor(e, n, expected):
    assert e_g_prime(e, n) == pytest.approx(expected, abs=1e-15)


def test_zero_activation_cost_no_gpu_help():
    # a GPU that cannot help at all: weights cost more than the whole NDP side
    inp = mixtral_inputs(t_w=1.0, t_g=1.0)
    sol = solve(inp)
    assert sol.e_g < 1e-3


def test_fast_pcie_clamps_to_topk():
    # NDPs so slow that even all experts on GPU leave the NDP side longer
    inp = mixtral_inputs(t_w=1e-9, t_g=1e-9, t_n=1.0)
    sol = solve(inp)
    assert sol.clamped and sol.e_g == 2.0


def test_exact_zero_balance():
    inp = BalanceInputs(t_w=1.0, t_g=0.0, t_n=1.0, t_a=0.0, n_ndp=2, topk_effective=1)
    # lhs(0) = 0 = rhs(0) only when t_n*K == 0; here the root is at 0.5
    assert solve(inp).e_g == pytest.approx(0.5)


def test_stage_guards():
    with pytest.raises(BalanceError):
        solve_prefill(mixtral_inputs())
    with pytest.raises(BalanceError):
        solve_decode(mixtral_inputs(stage=Stage.PREFILL, seq_len=4))


@pytest.mark.parametrize("kw", [dict(t_w=-1.0), dict(t_a=math.nan), dict(n_ndp=0),
                                dict(topk_effective=0), dict(seq_len=0)])
def test_input_validation(kw):
    with pytest.raises(BalanceError):
        solve(mixtral_inputs(**kw))


def test_prefill_streaming_term_raises_gpu_side():
    dec = solve(mixtral_inputs())
    pre = solve(mixtral_inputs(stage=Stage.PREFILL, seq_len=8))
    assert pre.e_g < dec.e_g
    assert lhs(mixtral_inputs(stage=Stage.PREFILL, seq_len=8), 0.5) == pytest.approx(
        lhs(mixtral_inputs(), 0.5) + 7 * o.MIXTRAL_T_A * 6)


def test_e_max_mixtral():
    e = solve_e_max(o.MIXTRAL_T_G, o.MIXTRAL_T_N6, o.MIXTRAL_T_A, 2, 6)
    assert e == pytest.approx(o.MIXTRAL_E_MAX, rel=1e-12)
    assert e == pytest.approx(1.235, abs=1e-3)


def test_e_max_clamps_and_guards():
    assert solve_e_max(1e-9, 1.0, 1.0, 4, 2) == 4.0
    assert solve_e_max(1.0, 0.0, 0.0, 4, 2) == 0.0
    with pytest.raises(BalanceError):
        solve_e_max(0.0, 0.0, 1.0, 2, 2)


_t = st.floats(min_value=1e-7, max_value=1e-2)


@settings(max_examples=200, deadline=None)
@given(t_w=_t, t_g=_t, t_n=_t, t_a=st.floats(1e-8, 1e-4), n=st.integers(1, 8),
       k=st.integers(1, 8), prefill=st.booleans(), s=st.integers(1, 64))
def test_solution_is_first_root_or_clamp(t_w, t_g, t_n, t_a, n, k, prefill, s):
    stage = Stage.PREFILL if prefill else Stage.DECODE
    inp = BalanceInputs(t_w, t_g, t_n, t_a, n, k, stage, s if prefill else 1)
    sol = solve(inp)
    assert 0.0 <= sol.e_g <= k
    if not sol.clamped:
        scale = max(sol.lhs_time, sol.rhs_time)
        assert sol.residual <= 1e-12 * scale + 1e-18
    grid = o.grid_balance(t_w, t_g, t_n, t_a, n, k, s, prefill)
    assert sol.e_g == pytest.approx(grid, abs=2e-5)
