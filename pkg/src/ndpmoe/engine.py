"""Discrete-event execution of per-layer plans and whole-request runs.

Each resource is a serial FIFO server.  A task becomes ready once all its
dependencies finish; an idle resource picks its ready task with the earliest
(ready time, submission index).  Completions at the same instant are all
processed before anything new is dispatched, so results do not depend on
heap tie-breaking.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .config import (HardwareConfig, MoEModelConfig, SyntheticTraceParams, TraceFile,
                     WorkloadConfig, check_capacity)
from .cost import Stage
from .prefetch import GpuResidency, build_plan, decode_lookup, prefetch_budget
from .routing import RoutingTrace, generate, load_trace, prefill_histogram
from .schedulers import CPU, GPU, PCIE, ExecutionPlan, PolicyId, Scheduler, SystemState, ndp


class EngineError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimelineEvent:
    resource: str
    start: float
    end: float
    label: str


@dataclass
class Timeline:
    events: list[TimelineEvent] = field(default_factory=list)

    @property
    def makespan(self) -> float:
        return max((e.end for e in self.events), default=0.0)

    def busy(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.events:
            out[e.resource] = out.get(e.resource, 0.0) + (e.end - e.start)
        return out

    def shifted(self, offset: float) -> list[TimelineEvent]:
        return [TimelineEvent(e.resource, e.start + offset, e.end + offset, e.label)
                for e in self.events]


def simulate_plan(plan: ExecutionPlan) -> Timeline:
    items = plan.items
    if not items:
        return Timeline()
    by_uid = {it.uid: it for it in items}
    waiting = {it.uid: len(it.deps) for it in items}
    children: dict[int, list[int]] = {}
    for it in items:
        for d in it.deps:
            if d not in by_uid:
                raise EngineError(f"task {it.uid} depends on unknown task {d}")
            children.setdefault(d, []).append(it.uid)

    queues: dict[str, list[tuple[float, int]]] = {}
    busy_until: dict[str, float] = {}
    running: list[tuple[float, int]] = []
    events: list[TimelineEvent] = []

    for it in items:
        if not it.deps:
            heapq.heappush(queues.setdefault(it.resource, []), (0.0, it.uid))

    def dispatch(now: float) -> None:
        for res in sorted(queues):
            q = queues[res]
            if q and res not in busy_until:
                ready, uid = heapq.heappop(q)
                it = by_uid[uid]
                start = max(now, ready)
                end = start + it.seconds
                busy_until[res] = end
                heapq.heappush(running, (end, uid))
                events.append(TimelineEvent(res, start, end, it.label))

    dispatch(0.0)
    done = 0
    while running:
        now = running[0][0]
        while running and running[0][0] == now:
            _, uid = heapq.heappop(running)
            done += 1
            del busy_until[by_uid[uid].resource]
            for c in children.get(uid, ()):
                waiting[c] -= 1
                if waiting[c] == 0:
                    heapq.heappush(queues.setdefault(by_uid[c].resource, []), (now, c))
        dispatch(now)
    if done != len(items):
        raise EngineError(f"plan has a dependency cycle ({len(items) - done} tasks never ran)")
    return Timeline(events)


# --------------------------------------------------------------------------
# whole-request runs


@dataclass
class RunReport:
    model: str
    policy: str
    n_ndp: int
    supported: bool
    prefill_moe_s: float = math.nan
    prefill_total_s: float = math.nan
    decode_moe_s: float = math.nan
    decode_total_s: float = math.nan
    prefetch_s: float = 0.0
    end_to_end_s: float = math.nan
    utilization: dict[str, float] = field(default_factory=dict)
    prefetch_hit_rate: float | None = None
    prefetch_x: int | None = None
    # mean |simulated - predicted| layer time over balanced decode layers
    balance_gap_s: float | None = None
    deficit_bytes: int = 0

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return None
            return v
        return {k: (dict(sorted(v.items())) if isinstance(v, dict) else clean(v))
                for k, v in self.__dict__.items()}


def resolve_trace(model: MoEModelConfig, wl: WorkloadConfig) -> RoutingTrace:
    if isinstance(wl.trace, TraceFile):
        trace = load_trace(wl.trace.path, model)
        if trace.prefill_len < wl.prompt_len or trace.decode_len < wl.output_len:
            raise EngineError(
                f"trace {wl.trace.path} covers {trace.prefill_len}+{trace.decode_len} tokens, "
                f"workload needs {wl.prompt_len}+{wl.output_len}")
        return trace
    return generate(model, wl, wl.trace if isinstance(wl.trace, SyntheticTraceParams) else None)


def _moe_layer(model: MoEModelConfig, j: int) -> int | None:
    # dense layers come first
    first = model.num_layers - model.num_moe_layers
    return j - first if j >= first else None


def make_scheduler(hw: HardwareConfig, model: MoEModelConfig, policy: PolicyId, n_ndp: int,
                   trace: RoutingTrace, seq_len: int, offload: bool = True) -> Scheduler:
    state = SystemState(hw.with_ndp(n_ndp), model, n_ndp, seq_len)
    prefetch = residency = None
    if policy.uses_prefetch:
        prefetch = build_plan(trace, model, prefetch_budget(hw, model))
        residency = GpuResidency.from_plan(prefetch, model)
    return Scheduler(policy, state, offload=offload, prefetch=prefetch, residency=residency)


def decode_moe_latency(hw: HardwareConfig, model: MoEModelConfig, trace: RoutingTrace,
                       policy: PolicyId, n_ndp: int, *, offload: bool = True) -> float:
    """Sum of decode MoE layer makespans, without the rest of a run's bookkeeping."""
    sched = make_scheduler(hw, model, policy, n_ndp, trace, max(trace.prefill_len, 1), offload)
    memo: dict[tuple, float] = {}
    total = 0.0
    for layer in range(model.num_moe_layers):
        for experts in trace.layer_tokens(Stage.DECODE, layer):
            key = sched.decode_key(layer, experts)
            span = memo.get(key)
            if span is None:
                span = memo[key] = simulate_plan(sched.plan(Stage.DECODE, layer, experts)).makespan
            total += span
    return total


def run(hw: HardwareConfig, model: MoEModelConfig, wl: WorkloadConfig, policy: PolicyId,
        n_ndp: int | None = None, *, trace: RoutingTrace | None = None, offload: bool = True,
        record: bool = False) -> tuple[RunReport, Timeline | None]:
    """Simulate one request: prefill over the prompt, then token-by-token decode."""
    n = hw.ndp_count if n_ndp is None else n_ndp
    hw = hw.with_ndp(n)
    verdict = check_capacity(hw, model)
    report = RunReport(model.name, policy.value, n, verdict.supported,
                       deficit_bytes=verdict.deficit_bytes)
    if not verdict.supported:
        return report, None
    if trace is None:
        trace = resolve_trace(model, wl)

    sched = make_scheduler(hw, model, policy, n, trace, wl.prompt_len, offload)
    state, prefetch, residency = sched.state, sched.prefetch, sched.residency
    if prefetch is not None:
        report.prefetch_x = prefetch.x

    busy: dict[str, float] = {r: 0.0 for r in (GPU, CPU, PCIE, *(ndp(i) for i in range(n)))}
    timeline = Timeline() if record else None
    clock = 0.0

    def add_busy(b: dict[str, float], times: int = 1) -> None:
        for r, s in b.items():
            busy[r] = busy.get(r, 0.0) + s * times

    def nonmoe(stage: Stage) -> float:
        nonlocal clock
        t = state.prims[stage].t_nonmoe
        busy[GPU] += t
        if timeline is not None:
            timeline.events.append(TimelineEvent(GPU, clock, clock + t, "nonmoe"))
        clock += t
        return t

    def moe(tl: Timeline) -> float:
        nonlocal clock
        span = tl.makespan
        if timeline is not None:
            timeline.events.extend(tl.shifted(clock))
        clock += span
        return span

    # prefill: every layer sees the whole prompt at once
    pre_moe = 0.0
    for j in range(model.num_layers):
        nonmoe(Stage.PREFILL)
        layer = _moe_layer(model, j)
        if layer is None:
            continue
        hist = prefill_histogram(trace, layer)
        tl = simulate_plan(sched.plan(Stage.PREFILL, layer, hist))
        add_busy(tl.busy())
        pre_moe += moe(tl)
    report.prefill_moe_s = pre_moe
    report.prefill_total_s = clock

    if prefetch is not None:
        # the chosen experts cross PCIe once, between prefill and decode
        t = prefetch.x * model.num_moe_layers * state.prims[Stage.DECODE].t_w
        report.prefetch_s = t
        busy[PCIE] += t
        if timeline is not None and t > 0:
            timeline.events.append(TimelineEvent(PCIE, clock, clock + t, "prefetch"))
        clock += t

    decode_start = clock
    memo: dict[tuple, tuple[float, dict[str, float], float | None]] = {}
    dec_moe = 0.0
    hits = lookups = 0
    gaps: list[float] = []
    for tok in range(wl.output_len):
        for j in range(model.num_layers):
            nonmoe(Stage.DECODE)
            layer = _moe_layer(model, j)
            if layer is None:
                continue
            experts = trace.experts(Stage.DECODE, tok, layer)
            if residency is not None:
                h, _ = decode_lookup(residency, layer, experts)
                hits += len(h)
                lookups += len(experts)
            key = sched.decode_key(layer, experts)
            entry = memo.get(key) if timeline is None else None
            if entry is None:
                plan = sched.plan(Stage.DECODE, layer, experts)
                tl = simulate_plan(plan)
                gap = None
                if plan.balance is not None and not plan.balance.clamped:
                    gap = abs(tl.makespan - plan.balance.predicted_makespan)
                entry = (tl.makespan, tl.busy(), gap)
                memo[key] = entry
                if timeline is not None:
                    moe(tl)
                    add_busy(entry[1])
                    dec_moe += entry[0]
                    if gap is not None:
                        gaps.append(gap)
                    continue
            span, b, gap = entry
            add_busy(b)
            clock += span
            dec_moe += span
            if gap is not None:
                gaps.append(gap)

    report.decode_moe_s = dec_moe
    report.decode_total_s = clock - decode_start + report.prefetch_s
    report.end_to_end_s = clock
    if residency is not None:
        report.prefetch_hit_rate = hits / lookups if lookups else 0.0
    if gaps:
        report.balance_gap_s = sum(gaps) / len(gaps)
    report.utilization = {r: (b / clock if clock > 0 else 0.0) for r, b in sorted(busy.items())}
    return report, timeline


def sweep(hw: HardwareConfig, models: Sequence[MoEModelConfig], wl: WorkloadConfig,
          policies: Iterable[PolicyId], ndp_counts: Iterable[int], *,
          offload: bool = True) -> list[RunReport]:
    """Every (model, policy, N) combination; one trace per model, shared by all."""
    policies = list(policies)
    ndp_counts = sorted(set(ndp_counts))
    out = []
    for model in models:
        trace = None
        for pol in policies:
            for n in ndp_counts:
                if not check_capacity(hw.with_ndp(n), model).supported:
                    out.append(run(hw, model, wl, pol, n)[0])
                    continue
                if trace is None:
                    trace = resolve_trace(model, wl)
                out.append(run(hw, model, wl, pol, n, trace=trace, offload=offload)[0])
    out.sort(key=lambda r: (r.model, r.policy, r.n_ndp))
    return out
