"""Per-layer execution plans for the six scheduling policies.

A plan is a small task graph.  Every task runs on one serial resource
(``gpu``, ``cpu``, ``pcie`` or ``ndp<i>``) for a fixed number of seconds and
may depend on earlier tasks.  Tasks are numbered in submission order, which
is also the FIFO tie-break the engine uses on a busy resource.

Work is described per routed expert as a fraction of that expert; fractions
of one expert always sum to 1 across the plan.  Shared experts (always
active) are pinned to the GPU and flagged separately.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

from . import cost
from .balance import BalanceInputs, BalanceSolution, solve, solve_e_max
from .config import ConfigError, HardwareConfig, MoEModelConfig
from .cost import Stage, StageContext
from .prefetch import GpuResidency, PrefetchPlan, cap_gpu_hits, decode_lookup

GPU, CPU, PCIE, HOST = "gpu", "cpu", "pcie", "host"

# GPU shard granularity is 1/(SHARD_STEPS * N) of an expert.
SHARD_STEPS = 64


def ndp(i: int) -> str:
    return f"ndp{i}"


class PolicyId(str, enum.Enum):
    ON_DEMAND_GPU = "ondemand"
    CPU_COMPUTE = "cpu"
    EXPERT_PARALLEL_NDP = "ep"
    TENSOR_PARALLEL = "tp"
    TP_LOAD_BALANCE = "tp-lb"
    TP_LOAD_BALANCE_PREFETCH = "tp-lb-pre"

    @classmethod
    def parse(cls, text: str) -> "PolicyId":
        try:
            return cls(text)
        except ValueError:
            choices = "|".join(p.value for p in cls)
            raise ValueError(f"unknown policy '{text}' (expected {choices})") from None

    @property
    def uses_prefetch(self) -> bool:
        return self is PolicyId.TP_LOAD_BALANCE_PREFETCH


class TransferKind(str, enum.Enum):
    WEIGHTS = "weights"
    ACTIVATION_IN = "activation_in"
    ACTIVATION_OUT = "activation_out"


@dataclass(frozen=True)
class WorkItem:
    uid: int
    device: str
    expert_id: int
    fraction: float
    flops: float
    bytes_read: float
    seconds: float
    deps: tuple[int, ...] = ()
    shared: bool = False

    @property
    def resource(self) -> str:
        return self.device

    @property
    def label(self) -> str:
        kind = "shared" if self.shared else "expert"
        return f"{kind}{self.expert_id}x{self.fraction:.4g}"


@dataclass(frozen=True)
class TransferItem:
    uid: int
    kind: TransferKind
    src: str
    dst: str
    nbytes: float
    seconds: float
    deps: tuple[int, ...] = ()
    # >1 for a block of back-to-back transfers charged as one task
    count: int = 1

    def __post_init__(self) -> None:
        if not self.nbytes > 0:
            raise ValueError(f"transfer of {self.nbytes} bytes")

    @property
    def resource(self) -> str:
        return PCIE

    @property
    def label(self) -> str:
        return f"{self.kind.value}:{self.src}->{self.dst}"


@dataclass(frozen=True)
class ExecutionPlan:
    layer_idx: int
    stage: Stage
    shards: tuple[WorkItem, ...]
    transfers: tuple[TransferItem, ...]
    policy: PolicyId | None = field(default=None, compare=False)
    balance: BalanceSolution | None = field(default=None, compare=False)

    @cached_property
    def items(self) -> list[WorkItem | TransferItem]:
        return sorted((*self.shards, *self.transfers), key=lambda it: it.uid)

    def fractions(self) -> dict[int, float]:
        """Routed expert id -> total fraction covered by the plan."""
        out: dict[int, float] = {}
        for w in self.shards:
            if not w.shared:
                out[w.expert_id] = out.get(w.expert_id, 0.0) + w.fraction
        return out


class _Builder:
    def __init__(self) -> None:
        self.shards: list[WorkItem] = []
        self.transfers: list[TransferItem] = []
        self._uid = 0

    def _next(self) -> int:
        self._uid += 1
        return self._uid - 1

    def work(self, device, expert, fraction, flops, nbytes, seconds, deps=(), shared=False) -> int:
        uid = self._next()
        self.shards.append(WorkItem(uid, device, expert, fraction, flops, nbytes, seconds,
                                    tuple(deps), shared))
        return uid

    def transfer(self, kind, src, dst, nbytes, seconds, deps=(), count=1) -> int:
        uid = self._next()
        self.transfers.append(TransferItem(uid, kind, src, dst, nbytes, seconds, tuple(deps), count))
        return uid

    def build(self, layer, stage, policy, balance=None) -> ExecutionPlan:
        return ExecutionPlan(layer, stage, tuple(self.shards), tuple(self.transfers), policy, balance)


@dataclass(frozen=True)
class ExpertPlacement:
    """Whole experts on DIMMs, round-robin by expert id (same for every layer)."""

    n_ndp: int

    def home(self, layer: int, expert: int) -> int:
        return expert % self.n_ndp

    def check(self, hw: HardwareConfig, model: MoEModelConfig) -> None:
        per_dimm = math.ceil(model.num_experts_per_layer / self.n_ndp)
        need = per_dimm * model.num_moe_layers * model.expert_bytes
        if need > hw.ndp_capacity_bytes:
            raise ConfigError(
                f"expert placement needs {need} bytes on one DIMM, "
                f"capacity is {hw.ndp_capacity_bytes}")


class SystemState:
    """Everything a planner needs that is fixed for one run."""

    def __init__(self, hw: HardwareConfig, model: MoEModelConfig, n_ndp: int | None = None,
                 seq_len: int = 1) -> None:
        self.hw = hw
        self.model = model
        self.n_ndp = hw.ndp_count if n_ndp is None else n_ndp
        self.seq_len = seq_len
        self.prims = {
            Stage.PREFILL: cost.primitives(hw, model, StageContext.prefill(seq_len, self.n_ndp)),
            Stage.DECODE: cost.primitives(hw, model, StageContext.decode(self.n_ndp)),
        }
        self.act_token_bytes = cost.activation_bytes(model, 1)
        self.t_a_token = self.prims[Stage.DECODE].t_a

    def tokens(self, stage: Stage) -> int:
        return self.seq_len if stage is Stage.PREFILL else 1

    def balance_inputs(self, stage: Stage, topk_effective: int) -> BalanceInputs:
        # Both activation terms of the prefill condition count per-token
        # transfers; the batch-sized t_a would make the streaming term O(S^2).
        p = self.prims[stage]
        return BalanceInputs.from_primitives(p, self.n_ndp, topk_effective, stage,
                                             self.tokens(stage), t_a=self.t_a_token)


def _token_counts(activated) -> dict[int, int]:
    if isinstance(activated, Mapping):
        return {int(e): int(n) for e, n in sorted(activated.items()) if n > 0}
    return {int(e): 1 for e in sorted(set(activated))}


def _add_shared(b: _Builder, st: SystemState, stage: Stage) -> None:
    tokens = st.tokens(stage)
    for k in range(st.model.shared_experts):
        b.work(GPU, k, 1.0, cost.expert_flops(st.model, tokens), st.model.expert_bytes,
               cost.gpu_expert_time(st.hw, st.model, tokens), shared=True)


def _gpu_piece(b: _Builder, st: SystemState, expert: int, tokens: int, fraction: float,
               chunks: int) -> None:
    """Weights for ``fraction`` of an expert cross PCIe in ``chunks`` pieces,
    each computed on the GPU as soon as it lands."""
    t_w = st.prims[Stage.DECODE].t_w
    part = fraction / chunks
    for _ in range(chunks):
        xfer = b.transfer(TransferKind.WEIGHTS, HOST, GPU, st.model.expert_bytes * part, t_w * part)
        b.work(GPU, expert, part, cost.expert_flops(st.model, tokens) * part,
               st.model.expert_bytes * part,
               cost.gpu_expert_time(st.hw, st.model, tokens, part), deps=(xfer,))


def _tensor_split_ndp(b: _Builder, st: SystemState, stage: Stage,
                      work: list[tuple[int, int, float]], before_returns=None) -> None:
    """Split each (expert, tokens, fraction) evenly over all DIMMs.

    PCIe carries one activation broadcast, then (prefill only) the other
    S-1 tokens streamed to each DIMM, then whatever ``before_returns`` adds
    (the GPU-bound weights under load balancing), then one partial-sum
    return per DIMM.
    """
    n = st.n_ndp
    act = st.act_token_bytes
    t_a = st.t_a_token if stage is Stage.PREFILL else st.prims[Stage.DECODE].t_a
    bcast = b.transfer(TransferKind.ACTIVATION_IN, GPU, "ndp*", act, t_a)
    if stage is Stage.PREFILL and st.seq_len > 1:
        count = (st.seq_len - 1) * n
        b.transfer(TransferKind.ACTIVATION_IN, GPU, "ndp*", act * count, t_a * count,
                   deps=(bcast,), count=count)
    if before_returns is not None:
        before_returns()
    share = 1.0 / n
    for i in range(n):
        done = []
        for expert, tokens, fraction in work:
            f = fraction * share
            done.append(b.work(
                ndp(i), expert, f, cost.expert_flops(st.model, tokens) * f,
                st.model.expert_bytes * f,
                cost.ndp_expert_time(st.hw, st.model, tokens, f), deps=(bcast,)))
        b.transfer(TransferKind.ACTIVATION_OUT, ndp(i), GPU, act, t_a, deps=tuple(done))


# --------------------------------------------------------------------------
# baselines


def plan_on_demand(activated, state: SystemState, stage: Stage = Stage.DECODE,
                   layer: int = 0) -> ExecutionPlan:
    st = state
    b = _Builder()
    _add_shared(b, st, stage)
    t_w = st.prims[Stage.DECODE].t_w
    for expert, tokens in _token_counts(activated).items():
        xfer = b.transfer(TransferKind.WEIGHTS, HOST, GPU, st.model.expert_bytes, t_w)
        b.work(GPU, expert, 1.0, cost.expert_flops(st.model, tokens), st.model.expert_bytes,
               cost.gpu_expert_time(st.hw, st.model, tokens), deps=(xfer,))
    return b.build(layer, stage, PolicyId.ON_DEMAND_GPU)


def plan_cpu(activated, state: SystemState, stage: Stage = Stage.DECODE,
             layer: int = 0) -> ExecutionPlan:
    st = state
    b = _Builder()
    _add_shared(b, st, stage)
    counts = _token_counts(activated)
    if not counts:
        return b.build(layer, stage, PolicyId.CPU_COMPUTE)
    act = cost.activation_bytes(st.model, st.tokens(stage))
    t_a = st.prims[stage].t_a
    a_in = b.transfer(TransferKind.ACTIVATION_IN, GPU, CPU, act, t_a)
    done = [
        b.work(CPU, expert, 1.0, cost.expert_flops(st.model, tokens), st.model.expert_bytes,
               cost.cpu_expert_time(st.hw, st.model, tokens), deps=(a_in,))
        for expert, tokens in counts.items()
    ]
    b.transfer(TransferKind.ACTIVATION_OUT, CPU, GPU, act, t_a, deps=tuple(done))
    return b.build(layer, stage, PolicyId.CPU_COMPUTE)


def plan_expert_parallel(activated, placement: ExpertPlacement, state: SystemState,
                         stage: Stage = Stage.DECODE, layer: int = 0,
                         offload: bool = True) -> ExecutionPlan:
    """Whole experts on their home DIMM, plus one greedy tail offload to the GPU."""
    st = state
    b = _Builder()
    _add_shared(b, st, stage)
    counts = _token_counts(activated)
    queues: dict[int, list[int]] = {}
    for expert in counts:
        queues.setdefault(placement.home(layer, expert), []).append(expert)

    def t_ndp(e: int) -> float:
        return cost.ndp_expert_time(st.hw, st.model, counts[e])

    gpu_expert = None
    if offload and queues:
        loads = {i: sum(t_ndp(e) for e in q) for i, q in queues.items()}
        worst = min(loads, key=lambda i: (-loads[i], i))
        tail = queues[worst][-1]
        t_w = st.prims[Stage.DECODE].t_w
        if t_w + cost.gpu_expert_time(st.hw, st.model, counts[tail]) < loads[worst]:
            gpu_expert = tail
            queues[worst].pop()
            if not queues[worst]:
                del queues[worst]

    act_in = {}
    for i in sorted(queues):
        tokens = min(st.tokens(stage), sum(counts[e] for e in queues[i]))
        nbytes = cost.activation_bytes(st.model, tokens)
        act_in[i] = (b.transfer(TransferKind.ACTIVATION_IN, GPU, ndp(i), nbytes,
                                cost.pcie_time(st.hw, nbytes)), nbytes)
    if gpu_expert is not None:
        xfer = b.transfer(TransferKind.WEIGHTS, HOST, GPU, st.model.expert_bytes,
                          st.prims[Stage.DECODE].t_w)
        tokens = counts[gpu_expert]
        b.work(GPU, gpu_expert, 1.0, cost.expert_flops(st.model, tokens), st.model.expert_bytes,
               cost.gpu_expert_time(st.hw, st.model, tokens), deps=(xfer,))
    for i in sorted(queues):
        a_in, nbytes = act_in[i]
        done = [
            b.work(ndp(i), e, 1.0, cost.expert_flops(st.model, counts[e]), st.model.expert_bytes,
                   t_ndp(e), deps=(a_in,))
            for e in queues[i]
        ]
        b.transfer(TransferKind.ACTIVATION_OUT, ndp(i), GPU, nbytes,
                   cost.pcie_time(st.hw, nbytes), deps=tuple(done))
    return b.build(layer, stage, PolicyId.EXPERT_PARALLEL_NDP)


# --------------------------------------------------------------------------
# proposed policies


def plan_tensor_parallel(activated, state: SystemState, stage: Stage = Stage.DECODE,
                         layer: int = 0) -> ExecutionPlan:
    b = _Builder()
    _add_shared(b, state, stage)
    work = [(e, n, 1.0) for e, n in _token_counts(activated).items()]
    if work:
        _tensor_split_ndp(b, state, stage, work)
    return b.build(layer, stage, PolicyId.TENSOR_PARALLEL)


def quantize_share(e_g: float, n_ndp: int) -> float:
    step = 1.0 / (SHARD_STEPS * n_ndp)
    return round(e_g / step) * step


def split_gpu_share(counts: Mapping[int, int], e_g: float, topk: int,
                    n_ndp: int) -> list[tuple[int, float]]:
    """Pick whole experts, then one partial expert, worth ``e_g`` of ``topk``.

    Experts are taken busiest first (ties by ascending id); in decode every
    expert carries one token so this is plain ascending-id order.  The
    partial fraction is snapped to the shard grid.
    """
    total = sum(counts.values())
    if total == 0 or e_g <= 0:
        return []
    target = total * min(e_g / topk, 1.0)
    step = 1.0 / (SHARD_STEPS * n_ndp)
    out = []
    for expert in sorted(counts, key=lambda e: (-counts[e], e)):
        if target <= 0:
            break
        n = counts[expert]
        if n <= target + 1e-12 * total:
            out.append((expert, 1.0))
            target -= n
            continue
        frac = round(target / n / step) * step
        if frac > 0:
            out.append((expert, min(frac, 1.0)))
        break
    return out


def plan_tp_load_balance(activated, state: SystemState, stage: Stage = Stage.DECODE,
                         layer: int = 0) -> ExecutionPlan:
    st = state
    counts = _token_counts(activated)
    if not counts:
        return plan_tensor_parallel(activated, st, stage, layer)
    sol = solve(st.balance_inputs(stage, len(counts)))
    if stage is Stage.DECODE:
        e_g = quantize_share(sol.e_g, st.n_ndp)
    else:
        e_g = sol.e_g
    gpu_share = split_gpu_share(counts, e_g, len(counts), st.n_ndp)

    b = _Builder()
    _add_shared(b, st, stage)
    taken = dict(gpu_share)
    ndp_work = [(e, n, 1.0 - taken.get(e, 0.0)) for e, n in counts.items()
                if taken.get(e, 0.0) < 1.0]

    def gpu_side() -> None:
        for expert, frac in gpu_share:
            _gpu_piece(b, st, expert, counts[expert], frac, st.n_ndp)

    if ndp_work:
        _tensor_split_ndp(b, st, stage, ndp_work, before_returns=gpu_side)
    else:
        gpu_side()
    return b.build(layer, stage, PolicyId.TP_LOAD_BALANCE, balance=sol)


def plan_tp_lb_prefetch(activated, residency: GpuResidency, plan: PrefetchPlan,
                        state: SystemState, layer: int = 0) -> ExecutionPlan:
    """Decode only: resident hits run on the GPU up to E_max, the rest on the DIMMs."""
    st = state
    counts = _token_counts(activated)
    hits, misses = decode_lookup(residency, layer, counts)
    if not hits:
        lb = plan_tp_load_balance(activated, st, Stage.DECODE, layer)
        return ExecutionPlan(lb.layer_idx, lb.stage, lb.shards, lb.transfers,
                             PolicyId.TP_LOAD_BALANCE_PREFETCH, lb.balance)
    p = st.prims[Stage.DECODE]
    e_max = solve_e_max(p.t_g, p.t_n, p.t_a, len(counts), st.n_ndp)
    on_gpu, overflow = cap_gpu_hits(hits, e_max, plan.frequencies.get(layer))

    b = _Builder()
    _add_shared(b, st, Stage.DECODE)
    for e in sorted(on_gpu):
        b.work(GPU, e, 1.0, cost.expert_flops(st.model, counts[e]), st.model.expert_bytes,
               cost.gpu_expert_time(st.hw, st.model, counts[e]))
    rest = sorted(misses | overflow)
    if rest:
        _tensor_split_ndp(b, st, Stage.DECODE, [(e, counts[e], 1.0) for e in rest])
    return b.build(layer, Stage.DECODE, PolicyId.TP_LOAD_BALANCE_PREFETCH)


# --------------------------------------------------------------------------
# policy dispatch used by the engine


class Scheduler:
    """Binds a policy to one system so the engine can ask for per-layer plans."""

    def __init__(self, policy: PolicyId, state: SystemState, *, offload: bool = True,
                 prefetch: PrefetchPlan | None = None,
                 residency: GpuResidency | None = None) -> None:
        if policy.uses_prefetch and (prefetch is None or residency is None):
            raise ValueError("tp-lb-pre needs a prefetch plan and a GPU residency")
        self.policy = policy
        self.state = state
        self.offload = offload
        self.prefetch = prefetch
        self.residency = residency
        self.placement = ExpertPlacement(state.n_ndp)
        if policy is PolicyId.EXPERT_PARALLEL_NDP:
            self.placement.check(state.hw, state.model)

    def plan(self, stage: Stage, layer: int, activated) -> ExecutionPlan:
        st, pol = self.state, self.policy
        if pol is PolicyId.ON_DEMAND_GPU:
            return plan_on_demand(activated, st, stage, layer)
        if pol is PolicyId.CPU_COMPUTE:
            return plan_cpu(activated, st, stage, layer)
        if pol is PolicyId.EXPERT_PARALLEL_NDP:
            return plan_expert_parallel(activated, self.placement, st, stage, layer, self.offload)
        if pol is PolicyId.TENSOR_PARALLEL:
            return plan_tensor_parallel(activated, st, stage, layer)
        if pol is PolicyId.TP_LOAD_BALANCE or stage is Stage.PREFILL:
            return plan_tp_load_balance(activated, st, stage, layer)
        return plan_tp_lb_prefetch(activated, self.residency, self.prefetch, st, layer)

    def decode_key(self, layer: int, activated: Iterable[int]) -> tuple:
        """Key under which decode plans share a makespan.

        Decode experts all carry one token, so only counts matter: per-DIMM
        counts for expert parallelism, GPU/NDP split sizes for prefetching.
        """
        pol = self.policy
        if pol is PolicyId.EXPERT_PARALLEL_NDP:
            per = [0] * self.state.n_ndp
            for e in activated:
                per[self.placement.home(layer, e)] += 1
            return ("ep", *per)
        if pol is PolicyId.TP_LOAD_BALANCE_PREFETCH:
            hits, misses = decode_lookup(self.residency, layer, activated)
            if not hits:
                return ("lb", len(misses))
            p = self.state.prims[Stage.DECODE]
            n = len(hits) + len(misses)
            keep = min(len(hits), int(solve_e_max(p.t_g, p.t_n, p.t_a, n, self.state.n_ndp)))
            return ("pre", keep, n - keep)
        return (pol.value, len(tuple(activated)))
