"""Roofline latency primitives.

Every device is a two-term roofline: an op takes ``max(bytes / bw, flops / rate)``.
An expert is three equal-shaped GEMMs (gate, up, down), so one token through
one expert costs ``2 * 3 * hidden * interm`` FLOPs and reads ``expert_bytes``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .config import HardwareConfig, MoEModelConfig


class Stage(str, enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass(frozen=True)
class StageContext:
    stage: Stage
    tokens: int
    n_ndp: int

    def __post_init__(self) -> None:
        if self.tokens < 1:
            raise ValueError(f"tokens must be >= 1, got {self.tokens}")
        if self.n_ndp < 1:
            raise ValueError(f"n_ndp must be >= 1, got {self.n_ndp}")

    @classmethod
    def prefill(cls, prompt_len: int, n_ndp: int) -> "StageContext":
        return cls(Stage.PREFILL, prompt_len, n_ndp)

    @classmethod
    def decode(cls, n_ndp: int) -> "StageContext":
        return cls(Stage.DECODE, 1, n_ndp)


@dataclass(frozen=True)
class LatencyPrimitives:
    """Seconds.  ``t_n`` is one expert's time on one DIMM after an N-way split."""

    t_w: float
    t_a: float
    t_g: float
    t_n: float
    t_cpu: float
    t_nonmoe: float

    def labeled(self) -> list[tuple[str, float]]:
        return [
            ("t_w", self.t_w),
            ("t_a", self.t_a),
            ("t_g", self.t_g),
            ("t_n", self.t_n),
            ("t_cpu", self.t_cpu),
            ("t_nonmoe", self.t_nonmoe),
        ]


def expert_weight_bytes(model: MoEModelConfig) -> int:
    return model.expert_bytes


def activation_bytes(model: MoEModelConfig, tokens: int) -> int:
    if tokens < 1:
        raise ValueError(f"tokens must be >= 1, got {tokens}")
    return model.hidden_dim * model.dtype_bytes * tokens


def expert_flops(model: MoEModelConfig, tokens: float) -> float:
    return 2.0 * 3.0 * model.hidden_dim * model.interm_dim * tokens


def roofline(nbytes: float, flops: float, bw: float, rate: float) -> float:
    return max(nbytes / bw, flops / rate)


def pcie_time(hw: HardwareConfig, nbytes: float) -> float:
    """One PCIe transfer: fixed setup latency plus streaming time."""
    return hw.pcie_latency_s + nbytes / hw.pcie_bw_Bps


# Per-device expert times for an arbitrary fraction of an expert and token
# count.  Schedulers use these so plan items and primitives stay consistent.

def gpu_expert_time(hw: HardwareConfig, model: MoEModelConfig, tokens: float,
                    fraction: float = 1.0) -> float:
    return roofline(model.expert_bytes * fraction, expert_flops(model, tokens) * fraction,
                    hw.gpu_mem_bw_Bps, hw.gpu_flops)


def ndp_expert_time(hw: HardwareConfig, model: MoEModelConfig, tokens: float,
                    fraction: float = 1.0) -> float:
    return roofline(model.expert_bytes * fraction, expert_flops(model, tokens) * fraction,
                    hw.ndp_internal_bw_Bps, hw.ndp_flops)


def cpu_expert_time(hw: HardwareConfig, model: MoEModelConfig, tokens: float) -> float:
    return roofline(model.expert_bytes, expert_flops(model, tokens),
                    hw.cpu_mem_bw_Bps, hw.cpu_flops)


def nonmoe_time(hw: HardwareConfig, model: MoEModelConfig, tokens: int) -> float:
    """Attention and other non-expert work of one layer, on the GPU."""
    if model.num_layers == 0:
        return 0.0
    params = model.nonexpert_params / model.num_layers
    return roofline(params * model.dtype_bytes, 2.0 * params * tokens,
                    hw.gpu_mem_bw_Bps, hw.gpu_flops)


def primitives(hw: HardwareConfig, model: MoEModelConfig, ctx: StageContext) -> LatencyPrimitives:
    n = ctx.n_ndp
    return LatencyPrimitives(
        t_w=pcie_time(hw, model.expert_bytes),
        t_a=pcie_time(hw, activation_bytes(model, ctx.tokens)),
        t_g=gpu_expert_time(hw, model, ctx.tokens),
        t_n=ndp_expert_time(hw, model, ctx.tokens, 1.0 / n),
        t_cpu=cpu_expert_time(hw, model, ctx.tokens),
        t_nonmoe=nonmoe_time(hw, model, ctx.tokens),
    )
