"""System, model and workload descriptors.

Configs are plain frozen dataclasses.  They can be built directly, taken
from the bundled named profiles, or loaded from a YAML file with three
sections::

    hardware:
      profile: rtx5080-ndp       # optional base profile
      ndp_count: 4               # any field may be overridden
    model: qwen3-30b-a3b         # a bare string selects a profile
    workload:
      prompt_len: 512
      output_len: 512
      trace: {kind: synthetic, seed: 1, skew: 1.2, rho: 0.8}

Extra profiles can be dropped as ``<name>.yaml`` files into the directory
named by ``MOE_NDP_PROFILE_DIR``; each holds a ``hardware:`` or ``model:``
mapping.
"""

from __future__ import annotations

import dataclasses
import os
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Union

import yaml

GiB = 1 << 30

PROFILE_DIR_ENV = "MOE_NDP_PROFILE_DIR"


class ConfigError(ValueError):
    """Raised for unparsable configs and invariant violations."""


@dataclass(frozen=True)
class HardwareConfig:
    """One consumer GPU, a host CPU and ``ndp_count`` NDP-DIMMs."""

    name: str = "rtx5080-ndp"
    gpu_freq_ghz: float = 2.30
    gpu_mem_capacity_bytes: int = 16 * GiB
    gpu_mem_bw_Bps: float = 960e9
    gpu_flops: float = 100e12
    pcie_bw_Bps: float = 64e9
    pcie_latency_s: float = 2e-6
    ndp_count: int = 6
    ndp_capacity_bytes: int = 32 * GiB
    ndp_internal_bw_Bps: float = 102.4e9
    # 64 multipliers x 2 FLOP x 1.6 GHz (DDR4-3200 command clock)
    ndp_flops: float = 204.8e9
    cpu_mem_bw_Bps: float = 89.6e9
    cpu_flops: float = 2e12
    cpu_mem_capacity_bytes: int = 192 * GiB
    # activation workspace kept free on the GPU; never used for prefetch
    gpu_workspace_bytes: int = 1 * GiB

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name == "name":
                continue
            value = getattr(self, f.name)
            if not value > 0:
                raise ConfigError(f"hardware.{f.name} must be > 0, got {value}")
        if not 1 <= self.ndp_count <= 16:
            raise ConfigError(
                f"hardware.ndp_count must be in [1, 16], got {self.ndp_count}"
            )

    def with_ndp(self, n: int) -> "HardwareConfig":
        return dataclasses.replace(self, ndp_count=n)


@dataclass(frozen=True)
class MoEModelConfig:
    name: str
    expert_params_total: int
    num_experts_per_layer: int
    topk: int
    hidden_dim: int
    interm_dim: int
    num_layers: int
    num_moe_layers: int
    shared_experts: int = 0
    dtype_bytes: int = 2
    total_params: int | None = None
    nonexpert_params: int | None = None

    def __post_init__(self) -> None:
        for name in ("hidden_dim", "interm_dim", "dtype_bytes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.num_layers < 0:
            raise ConfigError(f"model.num_layers must be >= 0, got {self.num_layers}")
        if self.num_experts_per_layer < 0 or self.num_moe_layers < 0:
            raise ConfigError("model.num_experts_per_layer and num_moe_layers must be >= 0")
        if self.shared_experts < 0:
            raise ConfigError(f"model.shared_experts must be >= 0, got {self.shared_experts}")
        if self.topk < 1:
            raise ConfigError(f"model.topk must be >= 1, got {self.topk}")
        if self.num_experts_per_layer and self.topk > self.num_experts_per_layer:
            raise ConfigError(
                f"model.topk must be <= num_experts_per_layer "
                f"({self.num_experts_per_layer}), got {self.topk}"
            )
        if self.num_moe_layers > self.num_layers:
            raise ConfigError(
                f"model.num_moe_layers must be <= num_layers ({self.num_layers}), "
                f"got {self.num_moe_layers}"
            )
        if self.nonexpert_params is None:
            derived = 0
            if self.total_params is not None:
                derived = max(self.total_params - self.expert_params_total, 0)
            object.__setattr__(self, "nonexpert_params", derived)
        if self.nonexpert_params < 0:
            raise ConfigError(f"model.nonexpert_params must be >= 0, got {self.nonexpert_params}")

    @property
    def expert_bytes(self) -> int:
        """Bytes of one expert FFN: gate, up and down projections."""
        return 3 * self.hidden_dim * self.interm_dim * self.dtype_bytes

    @property
    def routed_expert_bytes(self) -> int:
        """All routed experts of all MoE layers (what lives on the DIMMs)."""
        return self.expert_bytes * self.num_experts_per_layer * self.num_moe_layers

    @property
    def shared_expert_bytes(self) -> int:
        return self.expert_bytes * self.shared_experts * self.num_moe_layers

    @property
    def nonexpert_bytes(self) -> int:
        return self.nonexpert_params * self.dtype_bytes


@dataclass(frozen=True)
class SyntheticTraceParams:
    seed: int = 0
    zipf_skew: float = 1.2
    rho: float = 0.8

    def __post_init__(self) -> None:
        if self.zipf_skew < 0:
            raise ConfigError(f"trace.skew must be >= 0, got {self.zipf_skew}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"trace.rho must be in [0, 1], got {self.rho}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"trace.seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass(frozen=True)
class TraceFile:
    path: str


TraceSource = Union[SyntheticTraceParams, TraceFile]


@dataclass(frozen=True)
class WorkloadConfig:
    prompt_len: int = 512
    output_len: int = 512
    batch_size: int = 1
    trace: TraceSource = field(default_factory=SyntheticTraceParams)

    def __post_init__(self) -> None:
        if self.batch_size != 1:
            raise ConfigError(f"batch_size must be 1, got {self.batch_size}")
        if self.prompt_len < 1:
            raise ConfigError(f"workload.prompt_len must be >= 1, got {self.prompt_len}")
        if self.output_len < 1:
            raise ConfigError(f"workload.output_len must be >= 1, got {self.output_len}")


@dataclass(frozen=True)
class SchedulabilityVerdict:
    supported: bool
    deficit_bytes: int = 0

    def __str__(self) -> str:
        if self.supported:
            return "Supported"
        return f"NotSupported(deficit_bytes={self.deficit_bytes})"


def check_capacity(hw: HardwareConfig, model: MoEModelConfig) -> SchedulabilityVerdict:
    """Can the enabled DIMMs hold every routed expert of the model?"""
    need = model.routed_expert_bytes
    have = hw.ndp_count * hw.ndp_capacity_bytes
    if need <= have:
        return SchedulabilityVerdict(True)
    return SchedulabilityVerdict(False, need - have)


# --------------------------------------------------------------------------
# bundled profiles

HARDWARE_PROFILES: dict[str, HardwareConfig] = {
    "rtx5080-ndp": HardwareConfig(),
}

MODEL_PROFILES: dict[str, MoEModelConfig] = {
    "deepseek-moe": MoEModelConfig(
        name="deepseek-moe",
        expert_params_total=15_400_000_000,
        num_experts_per_layer=64,
        topk=6,
        shared_experts=2,
        hidden_dim=2048,
        interm_dim=1408,
        num_layers=28,
        num_moe_layers=27,
        total_params=16_400_000_000,
    ),
    "qwen3-30b-a3b": MoEModelConfig(
        name="qwen3-30b-a3b",
        expert_params_total=29_000_000_000,
        num_experts_per_layer=128,
        topk=8,
        hidden_dim=2048,
        interm_dim=768,
        num_layers=48,
        num_moe_layers=48,
        total_params=30_500_000_000,
    ),
    "phi-3.5-moe": MoEModelConfig(
        name="phi-3.5-moe",
        expert_params_total=40_300_000_000,
        num_experts_per_layer=16,
        topk=2,
        hidden_dim=6400,
        interm_dim=4096,
        num_layers=32,
        num_moe_layers=32,
        total_params=41_900_000_000,
    ),
    # The headline 42.0B expert count does not match the dims (45.1B), so the
    # non-expert share is pinned to 46.7B - 45.1B rather than derived.
    "mixtral-8x7b": MoEModelConfig(
        name="mixtral-8x7b",
        expert_params_total=42_000_000_000,
        num_experts_per_layer=8,
        topk=2,
        hidden_dim=4096,
        interm_dim=14336,
        num_layers=32,
        num_moe_layers=32,
        total_params=46_700_000_000,
        nonexpert_params=1_600_000_000,
    ),
}

BUNDLED_MODELS = tuple(MODEL_PROFILES)


def _profile_dir() -> Path | None:
    d = os.environ.get(PROFILE_DIR_ENV)
    return Path(d) if d else None


def _extra_profile(name: str, section: str) -> dict[str, Any] | None:
    d = _profile_dir()
    if d is None:
        return None
    path = d / f"{name}.yaml"
    if not path.is_file():
        return None
    data = _parse_yaml(path.read_text(encoding="utf-8"), str(path))
    if not isinstance(data, dict) or section not in data:
        return None
    body = data[section]
    if not isinstance(body, dict):
        raise ConfigError(f"{path}: section '{section}' must be a mapping")
    return body


def model_profile(name: str) -> MoEModelConfig:
    if name in MODEL_PROFILES:
        return MODEL_PROFILES[name]
    extra = _extra_profile(name, "model")
    if extra is not None:
        return _build(MoEModelConfig, {"name": name, **extra}, "model")
    known = ", ".join(sorted(MODEL_PROFILES))
    raise ConfigError(f"unknown model profile '{name}' (known: {known})")


def hardware_profile(name: str) -> HardwareConfig:
    if name in HARDWARE_PROFILES:
        return HARDWARE_PROFILES[name]
    extra = _extra_profile(name, "hardware")
    if extra is not None:
        return _build(HardwareConfig, {"name": name, **extra}, "hardware")
    known = ", ".join(sorted(HARDWARE_PROFILES))
    raise ConfigError(f"unknown hardware profile '{name}' (known: {known})")


def check_offload_premise(hw: HardwareConfig) -> None:
    """Warn when every bundled model would fit in GPU memory anyway."""
    if all(hw.gpu_mem_capacity_bytes >= m.routed_expert_bytes for m in MODEL_PROFILES.values()):
        warnings.warn(
            f"GPU memory ({hw.gpu_mem_capacity_bytes} B) holds every bundled model; "
            "expert offloading is moot",
            stacklevel=2,
        )


# --------------------------------------------------------------------------
# YAML loading


def _parse_yaml(text: str, origin: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        where = f"{origin}:{mark.line + 1}:{mark.column + 1}" if mark else origin
        raise ConfigError(f"{where}: {exc.problem or exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{origin}: {exc}") from None


def _coerce(value: Any, typ: Any, where: str) -> Any:
    # YAML 1.1 reads "1e9" as a string; accept it for numeric fields.
    typ = str(typ)
    if value is None and "None" in typ:
        return None
    if "int" in typ and "float" not in typ:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        if isinstance(value, int):
            return value
        try:
            as_float = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected an integer, got {value!r}") from None
        if value is None or as_float != int(as_float):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(as_float)
    if "float" in typ:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if typ == "str":
        return str(value)
    return value


def _build(cls: type, raw: dict[str, Any], section: str) -> Any:
    names = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in names:
            raise ConfigError(f"{section}.{key}: unknown field")
        kwargs[key] = _coerce(value, names[key].type, f"{section}.{key}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _section(raw: Any, section: str, base_lookup, default: str | None):
    if raw is None:
        if default is None:
            raise ConfigError(f"missing required section '{section}'")
        return base_lookup(default)
    if isinstance(raw, str):
        return base_lookup(raw)
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{section}' must be a profile name or a mapping")
    raw = dict(raw)
    profile = raw.pop("profile", None)
    if profile is None:
        return _build(_CLASSES[section], raw, section)
    base = base_lookup(str(profile))
    merged = {**dataclasses.asdict(base), **raw}
    return _build(_CLASSES[section], merged, section)


_CLASSES = {"hardware": HardwareConfig, "model": MoEModelConfig}


def _trace_source(raw: Any) -> TraceSource:
    if raw is None:
        return SyntheticTraceParams()
    if not isinstance(raw, dict):
        raise ConfigError("workload.trace must be a mapping")
    raw = dict(raw)
    kind = raw.pop("kind", "synthetic")
    if kind == "file":
        if set(raw) != {"path"}:
            raise ConfigError("workload.trace: file source takes exactly one key, 'path'")
        return TraceFile(str(raw["path"]))
    if kind != "synthetic":
        raise ConfigError(f"workload.trace.kind: expected 'synthetic' or 'file', got {kind!r}")
    rename = {"seed": "seed", "skew": "zipf_skew", "zipf_skew": "zipf_skew", "rho": "rho"}
    kwargs = {}
    for key, value in raw.items():
        if key not in rename:
            raise ConfigError(f"workload.trace.{key}: unknown field")
        kwargs[rename[key]] = value
    return _build(SyntheticTraceParams, kwargs, "workload.trace")


def _workload(raw: Any) -> WorkloadConfig:
    if raw is None:
        return WorkloadConfig()
    if not isinstance(raw, dict):
        raise ConfigError("section 'workload' must be a mapping")
    raw = dict(raw)
    trace = _trace_source(raw.pop("trace", None))
    wl = _build(WorkloadConfig, raw, "workload")
    return dataclasses.replace(wl, trace=trace)


def loads_config(text: str, origin: str = "<string>"):
    """Parse config text into ``(HardwareConfig, MoEModelConfig, WorkloadConfig)``."""
    data = _parse_yaml(text, origin)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{origin}: top level must be a mapping")
    unknown = set(data) - {"hardware", "model", "workload"}
    if unknown:
        raise ConfigError(f"{origin}: unknown section(s) {sorted(unknown)}")
    hw = _section(data.get("hardware"), "hardware", hardware_profile, "rtx5080-ndp")
    model = _section(data.get("model"), "model", model_profile, None)
    wl = _workload(data.get("workload"))
    return hw, model, wl


def load_config(path: str | os.PathLike):
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{p}: {exc.strerror or exc}") from None
    return loads_config(text, str(p))


def dump_config(hw: HardwareConfig, model: MoEModelConfig, wl: WorkloadConfig) -> str:
    """Serialize fully (no profile references) so the text re-parses identically."""
    if isinstance(wl.trace, TraceFile):
        trace = {"kind": "file", "path": wl.trace.path}
    else:
        trace = {
            "kind": "synthetic",
            "seed": wl.trace.seed,
            "skew": wl.trace.zipf_skew,
            "rho": wl.trace.rho,
        }
    doc = {
        "hardware": dataclasses.asdict(hw),
        "model": dataclasses.asdict(model),
        "workload": {
            "prompt_len": wl.prompt_len,
            "output_len": wl.output_len,
            "batch_size": wl.batch_size,
            "trace": trace,
        },
    }
    return yaml.safe_dump(doc, sort_keys=False)
