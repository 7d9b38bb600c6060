"""Routing traces: which routed experts fire for every (token, MoE layer).

Traces are exogenous to the schedulers.  They are either generated
synthetically (Zipf-skewed per-layer popularity plus a knob ``rho`` that
makes decode tokens re-use the layer's prefill distribution) or replayed
from a text file::

    #moe-trace v1 model=<name> layers=<L> topk=<K> prefill=<S_in> decode=<S_out>
    P,0,0,1;5
    ...

Ids on a line are ascending; shared experts are never listed.
"""

from __future__ import annotations

import bisect
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from itertools import accumulate
from pathlib import Path

import numpy as np

from .config import MoEModelConfig, SyntheticTraceParams, WorkloadConfig
from .cost import Stage

__all__ = [
    "RoutingTrace",
    "SyntheticTraceParams",
    "TraceEntry",
    "TraceError",
    "dumps_trace",
    "generate",
    "load_trace",
    "loads_trace",
    "prefill_histogram",
    "save_trace",
]

_STAGE_CODE = {Stage.PREFILL: "P", Stage.DECODE: "D"}
_CODE_STAGE = {v: k for k, v in _STAGE_CODE.items()}
_STAGE_ORDER = {Stage.PREFILL: 0, Stage.DECODE: 1}
_HEADER = re.compile(
    r"^#moe-trace v1 model=(\S+) layers=(\d+) topk=(\d+) prefill=(\d+) decode=(\d+)$"
)


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceEntry:
    stage: Stage
    token_idx: int
    layer_idx: int
    expert_ids: tuple[int, ...]


@dataclass(frozen=True)
class RoutingTrace:
    model_name: str
    num_layers: int
    topk: int
    prefill_len: int
    decode_len: int
    entries: tuple[TraceEntry, ...] = field(repr=False)

    @cached_property
    def _by_stage(self) -> dict[Stage, list[list[tuple[int, ...]]]]:
        # [stage][layer][token] -> expert ids
        out = {
            Stage.PREFILL: [[()] * self.prefill_len for _ in range(self.num_layers)],
            Stage.DECODE: [[()] * self.decode_len for _ in range(self.num_layers)],
        }
        for e in self.entries:
            out[e.stage][e.layer_idx][e.token_idx] = e.expert_ids
        return out

    def experts(self, stage: Stage, token: int, layer: int) -> tuple[int, ...]:
        return self._by_stage[stage][layer][token]

    def layer_tokens(self, stage: Stage, layer: int) -> list[tuple[int, ...]]:
        return self._by_stage[stage][layer]


def prefill_histogram(trace: RoutingTrace, layer: int) -> dict[int, int]:
    """Expert id -> number of prefill tokens routed to it in ``layer``."""
    if not 0 <= layer < trace.num_layers:
        raise IndexError(f"layer {layer} out of range [0, {trace.num_layers})")
    counts: Counter[int] = Counter()
    for ids in trace.layer_tokens(Stage.PREFILL, layer):
        counts.update(ids)
    return dict(sorted(counts.items()))


# --------------------------------------------------------------------------
# synthetic generation


def _substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


class _Uniforms:
    """Buffered U[0,1) draws from one substream."""

    def __init__(self, rng: np.random.Generator, chunk: int = 4096):
        self._rng = rng
        self._chunk = chunk
        self._buf: list[float] = []
        self._i = 0

    def __call__(self) -> float:
        if self._i == len(self._buf):
            self._buf = self._rng.random(self._chunk).tolist()
            self._i = 0
        u = self._buf[self._i]
        self._i += 1
        return u


class _Sampler:
    """Weighted draws over expert ids with the cumulative laid out by ascending id."""

    def __init__(self, weights):
        self.cum = list(accumulate(float(w) for w in weights))
        self.total = self.cum[-1] if self.cum else 0.0
        self._last = max((i for i, w in enumerate(weights) if w > 0), default=0)

    def draw(self, u: float) -> int:
        return min(bisect.bisect_right(self.cum, u * self.total), self._last)

    def draw_new(self, uniforms: _Uniforms, taken: set[int]) -> int:
        # Rejection against already-taken ids samples exactly from the
        # distribution renormalized over the remaining ids.
        while True:
            i = self.draw(uniforms())
            if i not in taken:
                return i


def zipf_weights(num_experts: int, skew: float, order: np.ndarray) -> list[float]:
    """``order[r]`` is the expert holding popularity rank ``r``."""
    w = [0.0] * num_experts
    for rank, expert in enumerate(order.tolist()):
        w[expert] = (rank + 1.0) ** -skew
    return w


def generate(model: MoEModelConfig, wl: WorkloadConfig,
             p: SyntheticTraceParams | None = None) -> RoutingTrace:
    if p is None:
        if not isinstance(wl.trace, SyntheticTraceParams):
            raise TraceError("workload does not carry synthetic trace parameters")
        p = wl.trace
    E, K = model.num_experts_per_layer, model.topk
    if K > E:
        raise TraceError(f"topk ({K}) exceeds experts per layer ({E})")

    prefill_sets: list[list[tuple[int, ...]]] = []
    decode_sets: list[list[tuple[int, ...]]] = []
    for layer in range(model.num_moe_layers):
        order = _substream(p.seed, 0, layer).permutation(E)
        zipf = _Sampler(zipf_weights(E, p.zipf_skew, order))

        uni = _Uniforms(_substream(p.seed, 1, layer))
        pre = []
        hist = [0] * E
        for _ in range(wl.prompt_len):
            taken: set[int] = set()
            for _ in range(K):
                taken.add(zipf.draw_new(uni, taken))
            for i in taken:
                hist[i] += 1
            pre.append(tuple(sorted(taken)))
        prefill_sets.append(pre)

        empirical = _Sampler(hist)
        support = sum(1 for c in hist if c)
        uni = _Uniforms(_substream(p.seed, 2, layer))
        dec = []
        for _ in range(wl.output_len):
            taken = set()
            emp_taken = 0
            for _ in range(K):
                from_prefill = uni() < p.rho and emp_taken < support
                if from_prefill:
                    i = empirical.draw_new(uni, taken)
                else:
                    i = zipf.draw_new(uni, taken)
                if hist[i]:
                    emp_taken += 1
                taken.add(i)
            dec.append(tuple(sorted(taken)))
        decode_sets.append(dec)

    return _assemble(model.name, model.num_moe_layers, K, wl.prompt_len, wl.output_len,
                     prefill_sets, decode_sets)


def _assemble(name, layers, topk, s_in, s_out, prefill_sets, decode_sets) -> RoutingTrace:
    entries = []
    for stage, sets, n_tok in ((Stage.PREFILL, prefill_sets, s_in),
                               (Stage.DECODE, decode_sets, s_out)):
        for t in range(n_tok):
            for layer in range(layers):
                entries.append(TraceEntry(stage, t, layer, sets[layer][t]))
    return RoutingTrace(name, layers, topk, s_in, s_out, tuple(entries))


# --------------------------------------------------------------------------
# file format


def dumps_trace(trace: RoutingTrace) -> str:
    lines = [
        f"#moe-trace v1 model={trace.model_name} layers={trace.num_layers} "
        f"topk={trace.topk} prefill={trace.prefill_len} decode={trace.decode_len}"
    ]
    for e in trace.entries:
        ids = ";".join(str(i) for i in e.expert_ids)
        lines.append(f"{_STAGE_CODE[e.stage]},{e.token_idx},{e.layer_idx},{ids}")
    return "\n".join(lines) + "\n"


def save_trace(trace: RoutingTrace, path) -> None:
    Path(path).write_text(dumps_trace(trace), encoding="utf-8")


def loads_trace(text: str, model: MoEModelConfig, origin: str = "<trace>") -> RoutingTrace:
    lines = text.splitlines()
    if not lines:
        raise TraceError(f"{origin}:1: empty trace file")
    m = _HEADER.match(lines[0].strip())
    if not m:
        raise TraceError(f"{origin}:1: malformed header")
    name = m.group(1)
    layers, topk, s_in, s_out = (int(g) for g in m.groups()[1:])
    if name != model.name:
        raise TraceError(f"{origin}:1: trace is for model '{name}', not '{model.name}'")
    if layers != model.num_moe_layers:
        raise TraceError(
            f"{origin}:1: layers={layers} but model has {model.num_moe_layers} MoE layers")
    if topk != model.topk:
        raise TraceError(f"{origin}:1: topk={topk} but model routes {model.topk}")
    E = model.num_experts_per_layer

    seen: set[tuple[Stage, int, int]] = set()
    entries = []
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4 or parts[0] not in _CODE_STAGE:
            raise TraceError(f"{origin}:{lineno}: malformed line {line!r}")
        stage = _CODE_STAGE[parts[0]]
        try:
            tok, layer = int(parts[1]), int(parts[2])
            ids = tuple(int(x) for x in parts[3].split(";"))
        except ValueError:
            raise TraceError(f"{origin}:{lineno}: malformed line {line!r}") from None
        limit = s_in if stage is Stage.PREFILL else s_out
        if not 0 <= tok < limit:
            raise TraceError(f"{origin}:{lineno}: token index {tok} out of range [0, {limit})")
        if not 0 <= layer < layers:
            raise TraceError(f"{origin}:{lineno}: layer index {layer} out of range [0, {layers})")
        for i in ids:
            if not 0 <= i < E:
                raise TraceError(f"{origin}:{lineno}: expert id {i} out of range [0, {E})")
        if len(set(ids)) != len(ids) or len(ids) != topk:
            raise TraceError(f"{origin}:{lineno}: expected {topk} distinct expert ids")
        if list(ids) != sorted(ids):
            raise TraceError(f"{origin}:{lineno}: expert ids must be ascending")
        key = (stage, tok, layer)
        if key in seen:
            raise TraceError(f"{origin}:{lineno}: duplicate entry for {parts[0]},{tok},{layer}")
        seen.add(key)
        entries.append(TraceEntry(stage, tok, layer, ids))

    expected = (s_in + s_out) * layers
    if len(entries) != expected:
        missing = []
        for stage, n in ((Stage.PREFILL, s_in), (Stage.DECODE, s_out)):
            for t in range(n):
                for layer in range(layers):
                    if (stage, t, layer) not in seen:
                        missing.append(f"{_STAGE_CODE[stage]},{t},{layer}")
                        if len(missing) >= 3:
                            break
        raise TraceError(f"{origin}: missing (token, layer) coverage, e.g. {', '.join(missing)}")
    entries.sort(key=lambda e: (_STAGE_ORDER[e.stage], e.token_idx, e.layer_idx))
    return RoutingTrace(name, layers, topk, s_in, s_out, tuple(entries))


def load_trace(path, model: MoEModelConfig) -> RoutingTrace:
    p = Path(path)
    return loads_trace(p.read_text(encoding="utf-8"), model, str(p))
