
import pytest
from hypothesis import assume, given, settings, strategies as st

from ndpmoe import cost
from ndpmoe.config import ConfigError, HardwareConfig, model_profile, BUNDLED_MODELS
from ndpmoe.cost import Stage
from ndpmoe.engine import simulate_plan
from ndpmoe.prefetch import GpuResidency, PrefetchPlan
from ndpmoe.schedulers import (GPU, SHARD_STEPS, ExpertPlacement, PolicyId, Scheduler,
                               SystemState, TransferKind, plan_cpu, plan_expert_parallel,
                               plan_on_demand, plan_tensor_parallel, plan_tp_lb_prefetch,
                               plan_tp_load_balance, quantize_share, split_gpu_share)
import oracles as o


@pytest.fixture
def mix6(hw, mixtral):
    return SystemState(hw, mixtral, 6, 512)


def span(plan):
    return simulate_plan(plan).makespan


def ndp_full(hw, model):
    return cost.ndp_expert_time(hw, model, 1)


def test_policy_cli_names():
    assert [p.value for p in PolicyId] == ["ondemand", "cpu", "ep", "tp", "tp-lb", "tp-lb-pre"]
    with pytest.raises(ValueError, match="ondemand"):
        PolicyId.parse("bogus")


# on-demand / cpu


def test_on_demand_two_pipelined(mix6):
    assert span(plan_on_demand([0, 1], mix6)) == pytest.approx(
        o.on_demand_two(o.MIXTRAL_T_W, o.MIXTRAL_T_G), rel=1e-12)


def test_on_demand_one_and_none(mix6):
    assert span(plan_on_demand([3], mix6)) == pytest.approx(o.MIXTRAL_T_W + o.MIXTRAL_T_G)
    assert span(plan_on_demand([], mix6)) == 0.0


def test_cpu_two(mix6):
    plan = plan_cpu([0, 1], mix6)
    assert span(plan) == pytest.approx(2 * o.MIXTRAL_T_CPU + 2 * o.MIXTRAL_T_A, rel=1e-12)
    assert not any(t.kind is TransferKind.WEIGHTS for t in plan.transfers)
    assert span(plan_cpu([], mix6)) == 0.0


# expert parallel


def test_ep_worst_case_skew(hw, mixtral):
    st_ = SystemState(hw, mixtral, 2, 1)
    placement = ExpertPlacement(2)
    plan = plan_expert_parallel([0, 2, 4, 6], placement, st_, offload=False)
    assert {w.device for w in plan.shards} == {"ndp0"}
    t_a = cost.pcie_time(hw, 8192)
    assert span(plan) == pytest.approx(4 * ndp_full(hw, mixtral) + 2 * t_a, rel=1e-12)


def test_ep_even_spread(hw, mixtral):
    st_ = SystemState(hw, mixtral, 2, 1)
    plan = plan_expert_parallel([0, 1], ExpertPlacement(2), st_, offload=False)
    tl = simulate_plan(plan)
    t_a = cost.pcie_time(hw, 8192)
    # each DIMM's own in-compute-out chain is t_full + 2 t_a; the two
    # activation streams share PCIe, which adds one more t_a at the end
    assert tl.makespan == pytest.approx(ndp_full(hw, mixtral) + 3 * t_a, rel=1e-12)
    for dimm in ("ndp0", "ndp1"):
        work = [e for e in tl.events if e.resource == dimm]
        assert work[0].end - work[0].start == pytest.approx(ndp_full(hw, mixtral))


def test_ep_offload_helps_when_pcie_fast(mixtral):
    hw = HardwareConfig(pcie_bw_Bps=64e12, ndp_count=2)
    st_ = SystemState(hw, mixtral, 2, 1)
    experts = [0, 2, 4, 6]
    off = plan_expert_parallel(experts, ExpertPlacement(2), st_, offload=True)
    no = plan_expert_parallel(experts, ExpertPlacement(2), st_, offload=False)
    assert [w.expert_id for w in off.shards if w.device == GPU] == [6]
    assert span(off) < span(no)


def test_ep_no_offload_when_pcie_slow(mix6):
    # one expert per DIMM: t_w + t_g beats no queue
    plan = plan_expert_parallel([0, 1], ExpertPlacement(6), mix6, offload=True)
    assert all(w.device != GPU for w in plan.shards)
    # experts 0 and 6 share DIMM 0, and two of them outlast t_w + t_g
    plan = plan_expert_parallel([0, 6], ExpertPlacement(6), mix6, offload=True)
    assert [w.expert_id for w in plan.shards if w.device == GPU] == [6]


def test_placement_capacity(mixtral):
    small = HardwareConfig(ndp_capacity_bytes=1 << 30)
    with pytest.raises(ConfigError, match="placement"):
        ExpertPlacement(6).check(small, mixtral)
    ExpertPlacement(3).check(HardwareConfig(), mixtral)


# tensor parallel


def test_tp_mixtral_layer(mix6):
    plan = plan_tensor_parallel([0, 1], mix6)
    assert span(plan) == pytest.approx(o.MIXTRAL_TP_LAYER, abs=1e-9)
    assert abs(span(plan) - 1.16e-3) < 2e-6
    kinds = [t.kind for t in plan.transfers]
    assert kinds.count(TransferKind.ACTIVATION_IN) == 1
    assert kinds.count(TransferKind.ACTIVATION_OUT) == 6
    assert TransferKind.WEIGHTS not in kinds


def test_tp_single_dimm(hw, mixtral):
    st_ = SystemState(hw, mixtral, 1, 1)
    t_a = cost.pcie_time(hw, 8192)
    assert span(plan_tensor_parallel([5], st_)) == pytest.approx(ndp_full(hw, mixtral) + 2 * t_a)


def test_tp_ignores_which_experts(hw, qwen):
    st_ = SystemState(hw, qwen, 4, 1)
    a = span(plan_tensor_parallel(range(8), st_))
    b = span(plan_tensor_parallel([3, 17, 40, 41, 90, 100, 120, 127], st_))
    assert a == b


# load balancing


def test_lb_mixtral_split(mix6):
    plan = plan_tp_load_balance([0, 1], mix6)
    sol = plan.balance
    assert sol.e_g == pytest.approx(o.MIXTRAL_E_G, abs=1e-12)
    on_gpu = sum(w.fraction for w in plan.shards if w.device == GPU)
    assert on_gpu == pytest.approx(quantize_share(sol.e_g, 6), abs=1e-12)
    assert abs(on_gpu - sol.e_g) <= 0.5 / (SHARD_STEPS * 6) + 1e-12
    # expert 0 is split, expert 1 stays whole on the DIMMs
    assert plan.fractions() == pytest.approx({0: 1.0, 1: 1.0})
    weights = sum(t.seconds for t in plan.transfers if t.kind is TransferKind.WEIGHTS)
    assert weights == pytest.approx(on_gpu * o.MIXTRAL_T_W)


def test_lb_sides_meet(mix6):
    plan = plan_tp_load_balance([0, 1], mix6)
    tl = simulate_plan(plan)
    gpu_end = max(e.end for e in tl.events if e.resource == GPU)
    ndp_end = max(e.end for e in tl.events if e.label.startswith("activation_out"))
    grain = max(o.MIXTRAL_T_W, o.MIXTRAL_T_N6 * 6) / (SHARD_STEPS * 6)
    assert abs(gpu_end - ndp_end) <= plan.balance.residual + grain
    assert tl.makespan < span(plan_tensor_parallel([0, 1], mix6))


def test_lb_zero_share_is_tp(mixtral):
    # a crawling PCIe leaves less than half a shard for the GPU
    hw = HardwareConfig(pcie_bw_Bps=1e8)
    st_ = SystemState(hw, mixtral, 6, 1)
    lb = plan_tp_load_balance([0, 1], st_)
    tp = plan_tensor_parallel([0, 1], st_)
    assert lb == tp


def test_lb_full_share_idles_dimms(mixtral):
    # DIMMs so slow the balance point sits within half a shard of topk
    hw = HardwareConfig(ndp_internal_bw_Bps=1e6, ndp_flops=1e6)
    st_ = SystemState(hw, mixtral, 6, 1)
    plan = plan_tp_load_balance([0, 1], st_)
    assert quantize_share(plan.balance.e_g, 6) == 2.0
    assert {w.device for w in plan.shards} == {GPU}
    assert all(t.kind is TransferKind.WEIGHTS for t in plan.transfers)


def test_split_gpu_share_orders():
    # decode: ascending ids; prefill: busiest first
    assert split_gpu_share({4: 1, 2: 1, 9: 1}, 1.5, 3, 2) == [(2, 1.0), (4, 0.5)]
    # a third of 41 tokens is less than expert 9's 30, so part of it goes
    assert split_gpu_share({4: 10, 2: 1, 9: 30}, 1.0, 3, 2) == [(9, 0.453125)]
    assert split_gpu_share({4: 10, 2: 1, 9: 30}, 2.5, 3, 2)[0] == (9, 1.0)
    assert split_gpu_share({1: 1}, 0.0, 1, 2) == []


# prefetch


def _prefetch_state(mix6, resident, freq=None):
    plan = PrefetchPlan(len(resident), {0: frozenset(resident)}, 0, 1 << 40,
                        {0: freq or {e: 1 for e in resident}})
    res = GpuResidency(1 << 40, mix6.model.expert_bytes, {(0, e) for e in resident})
    return plan, res


def test_prefetch_no_hits_is_lb(mix6):
    plan, res = _prefetch_state(mix6, [5])
    pre = plan_tp_lb_prefetch([0, 1], res, plan, mix6)
    assert pre == plan_tp_load_balance([0, 1], mix6)


def test_prefetch_two_hits_one_kept(mix6):
    plan, res = _prefetch_state(mix6, [0, 1], {0: 3, 1: 7})
    pre = plan_tp_lb_prefetch([0, 1], res, plan, mix6)
    assert [w.expert_id for w in pre.shards if w.device == GPU] == [1]
    assert not any(t.kind is TransferKind.WEIGHTS for t in pre.transfers)
    expected = max(o.MIXTRAL_T_G, o.MIXTRAL_T_N6 + 7 * o.MIXTRAL_T_A)
    assert span(pre) == pytest.approx(expected, rel=1e-12)


def test_prefetch_all_on_gpu(mixtral):
    # a fast enough GPU lifts E_max to topk
    hw = HardwareConfig(gpu_mem_bw_Bps=1e15)
    st_ = SystemState(hw, mixtral, 6, 1)
    plan, res = _prefetch_state(st_, [0, 1])
    pre = plan_tp_lb_prefetch([0, 1], res, plan, st_)
    assert span(pre) == pytest.approx(2 * st_.prims[Stage.DECODE].t_g, rel=1e-12)
    assert pre.transfers == ()


# properties over every policy


def _scheduler(policy, model, n, stage):
    st_ = SystemState(HardwareConfig(), model, n, 16)
    plan = res = None
    if policy.uses_prefetch:
        resident = frozenset(range(0, model.num_experts_per_layer, 2))
        plan = PrefetchPlan(len(resident), {0: resident}, 0, 1 << 50, {0: {}})
        res = GpuResidency(1 << 50, model.expert_bytes, {(0, e) for e in resident})
    return Scheduler(policy, st_, prefetch=plan, residency=res)


@settings(max_examples=150, deadline=None)
@given(data=st.data(), name=st.sampled_from(BUNDLED_MODELS), policy=st.sampled_from(PolicyId),
       n=st.integers(1, 6), prefill=st.booleans())
def test_work_conservation_and_timeline(data, name, policy, n, prefill):
    model = model_profile(name)
    E = model.num_experts_per_layer
    stage = Stage.PREFILL if prefill else Stage.DECODE
    if prefill:
        ids = data.draw(st.sets(st.integers(0, E - 1), min_size=1, max_size=E))
        activated = {e: data.draw(st.integers(1, 16)) for e in ids}
    else:
        activated = data.draw(st.sets(st.integers(0, E - 1), min_size=model.topk,
                                      max_size=model.topk))
    try:
        sched = _scheduler(policy, model, n, stage)
    except ConfigError:
        assume(False)
    plan = sched.plan(stage, 0, activated)

    fr = plan.fractions()
    assert set(fr) == set(activated)
    for e, f in fr.items():
        assert f == pytest.approx(1.0, abs=1e-12), e
    assert sum(1 for w in plan.shards if w.shared) == model.shared_experts

    # GPU shards of routed experts have their weights shipped first, unless prefetched
    weights = {t.uid for t in plan.transfers if t.kind is TransferKind.WEIGHTS}
    for w in plan.shards:
        if w.device == GPU and not w.shared and not policy.uses_prefetch:
            assert set(w.deps) & weights

    tl = simulate_plan(plan)
    by_res = {}
    for ev in tl.events:
        by_res.setdefault(ev.resource, []).append(ev)
    for evs in by_res.values():
        evs.sort(key=lambda e: e.start)
        for a, b in zip(evs, evs[1:]):
            assert b.start >= a.end
    for r, b in tl.busy().items():
        assert tl.makespan >= b * (1 - 1e-12)


def test_shared_experts_on_gpu(hw, deepseek):
    st_ = SystemState(hw, deepseek, 4, 1)
    plan = plan_tensor_parallel([1, 2, 3, 4, 5, 6], st_)
    shared = [w for w in plan.shards if w.shared]
    assert len(shared) == 2 and all(w.device == GPU for w in shared)
    tl = simulate_plan(plan)
    p = cost.primitives(hw, deepseek, cost.StageContext.decode(4))
    assert tl.makespan == pytest.approx(6 * p.t_n + 5 * p.t_a, abs=1e-9)


def test_scheduler_needs_prefetch_inputs(mix6):
    with pytest.raises(ValueError):
        Scheduler(PolicyId.TP_LOAD_BALANCE_PREFETCH, mix6)


def test_decode_keys_group_equal_plans(hw, qwen):
    sched = Scheduler(PolicyId.EXPERT_PARALLEL_NDP, SystemState(hw, qwen, 4, 1))
    a = [0, 1, 2, 3, 4, 5, 6, 7]
    b = [8, 9, 10, 11, 12, 13, 14, 15]
    assert sched.decode_key(0, a) == sched.decode_key(0, b)
    assert span(sched.plan(Stage.DECODE, 0, a)) == span(sched.plan(Stage.DECODE, 0, b))
    c = [0, 4, 8, 12, 16, 20, 24, 28]
    assert sched.decode_key(0, a) != sched.decode_key(0, c)
