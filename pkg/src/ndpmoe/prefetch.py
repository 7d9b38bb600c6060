"""Prefill-driven expert prefetching.

After prefill, the per-layer activation counts gathered during prefill pick
the ``x`` hottest experts of every MoE layer; ``x`` grows from 1 for as long
as another expert per layer still fits in the GPU budget.  During decode an
activated expert that is resident runs on the GPU, the rest go to the DIMMs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .config import HardwareConfig, MoEModelConfig
from .routing import RoutingTrace, prefill_histogram


@dataclass(frozen=True)
class PrefetchPlan:
    x: int
    per_layer_sets: dict[int, frozenset[int]]
    bytes_used: int
    budget_bytes: int
    # prefill counts, kept for ranking hits in cap_gpu_hits
    frequencies: dict[int, dict[int, int]] = field(default_factory=dict, repr=False)

    def dumps(self) -> str:
        lines = [f"#prefetch v1 x={self.x}"]
        for layer in sorted(self.per_layer_sets):
            ids = ";".join(str(i) for i in sorted(self.per_layer_sets[layer]))
            lines.append(f"{layer},{ids}")
        return "\n".join(lines) + "\n"

    def dump(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


@dataclass
class GpuResidency:
    capacity_bytes: int
    expert_bytes: int
    resident: set[tuple[int, int]] = field(default_factory=set)

    @property
    def used_bytes(self) -> int:
        return len(self.resident) * self.expert_bytes

    def add(self, layer: int, expert: int) -> None:
        if (layer, expert) in self.resident:
            return
        if self.used_bytes + self.expert_bytes > self.capacity_bytes:
            raise MemoryError(
                f"GPU residency full: {self.used_bytes} + {self.expert_bytes} "
                f"> {self.capacity_bytes} bytes")
        self.resident.add((layer, expert))

    @classmethod
    def from_plan(cls, plan: PrefetchPlan, model: MoEModelConfig) -> "GpuResidency":
        res = cls(plan.budget_bytes, model.expert_bytes)
        for layer, ids in sorted(plan.per_layer_sets.items()):
            for e in sorted(ids):
                res.add(layer, e)
        return res


def prefetch_budget(hw: HardwareConfig, model: MoEModelConfig) -> int:
    """GPU bytes left for prefetched experts after the permanent tenants."""
    used = model.nonexpert_bytes + model.shared_expert_bytes + hw.gpu_workspace_bytes
    return max(hw.gpu_mem_capacity_bytes - used, 0)


def _ranked(hist: Mapping[int, int]) -> list[int]:
    return sorted(hist, key=lambda e: (-hist[e], e))


def build_plan(trace: RoutingTrace, model: MoEModelConfig, budget_bytes: int) -> PrefetchPlan:
    layers = model.num_moe_layers
    per_x = layers * model.expert_bytes
    if trace.prefill_len < 1:
        raise ValueError("prefetch planning needs the prefill stage of the trace")
    if per_x == 0 or budget_bytes < per_x:
        return PrefetchPlan(0, {l: frozenset() for l in range(layers)}, 0, budget_bytes)
    x = 1
    while (x + 1) * per_x <= budget_bytes and x < model.num_experts_per_layer:
        x += 1

    sets, freqs = {}, {}
    for layer in range(layers):
        hist = prefill_histogram(trace, layer)
        freqs[layer] = hist
        sets[layer] = frozenset(_ranked(hist)[:x])
    used = sum(len(s) for s in sets.values()) * model.expert_bytes
    return PrefetchPlan(x, sets, used, budget_bytes, freqs)


def decode_lookup(res: GpuResidency, layer: int,
                  activated: Iterable[int]) -> tuple[frozenset[int], frozenset[int]]:
    activated = frozenset(activated)
    hits = frozenset(e for e in activated if (layer, e) in res.resident)
    return hits, activated - hits


def cap_gpu_hits(hits: Iterable[int], e_max: float,
                 frequency: Mapping[int, int] | None = None) -> tuple[frozenset[int], frozenset[int]]:
    """Keep the ``floor(e_max)`` most prefill-frequent hits on the GPU."""
    if e_max < 0:
        raise ValueError(f"e_max must be >= 0, got {e_max}")
    frequency = frequency or {}
    ranked = sorted(hits, key=lambda e: (-frequency.get(e, 0), e))
    keep = int(e_max)
    return frozenset(ranked[:keep]), frozenset(ranked[keep:])
