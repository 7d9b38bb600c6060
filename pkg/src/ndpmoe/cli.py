"""Command-line entry point.

Exit codes: 0 ok, 2 bad flags or config, 3 configuration not supported
(the DIMMs cannot hold the model's experts).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import cost
from .balance import BalanceInputs, BalanceError, solve, solve_e_max
from .config import (BUNDLED_MODELS, ConfigError, SyntheticTraceParams, TraceFile,
                     WorkloadConfig, check_capacity, hardware_profile, load_config,
                     model_profile)
from .cost import Stage, StageContext
from .engine import EngineError, resolve_trace, run, sweep
from .prefetch import build_plan, prefetch_budget
from .report import ReportError, build_table, emit, mean_speedup
from .routing import TraceError, save_trace
from .schedulers import PolicyId

EXIT_CONFIG = 2
EXIT_NOT_SUPPORTED = 3

POLICY_NAMES = [p.value for p in PolicyId]
DECODE_ABLATION = ("ep", "tp", "tp-lb", "tp-lb-pre")
PREFILL_ABLATION = ("ep", "tp", "tp-lb")


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _common(p: argparse.ArgumentParser, *, model_list: bool = False) -> None:
    p.add_argument("--config", help="YAML file with hardware/model/workload sections")
    p.add_argument("--hw", help="hardware profile name")
    if model_list:
        p.add_argument("--models", type=_str_list, help="comma-separated model profiles")
    else:
        p.add_argument("--model", help="model profile name")
    p.add_argument("--prompt-len", type=int)
    p.add_argument("--output-len", type=int)


def _trace_flags(p: argparse.ArgumentParser, *, allow_file: bool = True) -> None:
    if allow_file:
        p.add_argument("--trace", help="routing trace file (instead of synthetic params)")
    p.add_argument("--seed", type=int)
    p.add_argument("--skew", type=float, help="Zipf exponent of expert popularity")
    p.add_argument("--rho", type=float, help="decode reuse of the prefill distribution")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ndpmoe",
                                 description="MoE expert scheduling on GPU + NDP-DIMM systems")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one request under one policy")
    _common(p)
    _trace_flags(p)
    p.add_argument("--policy", choices=POLICY_NAMES, default="tp-lb-pre")
    p.add_argument("--ndp", type=int, help="number of NDP-DIMMs")
    p.add_argument("--no-offload", action="store_true",
                   help="disable the GPU tail offload of the ep baseline")
    p.add_argument("--out", help="write the json report here instead of stdout")
    p.add_argument("--dump-prefetch", metavar="PATH", help="write the prefetch plan (tp-lb-pre)")

    p = sub.add_parser("sweep", help="every model x policy x DIMM count")
    _common(p, model_list=True)
    _trace_flags(p, allow_file=False)
    p.add_argument("--policies", type=_str_list, default=POLICY_NAMES)
    p.add_argument("--ndp-list", type=_int_list, default=[1, 2, 3, 4, 5, 6])
    p.add_argument("--baseline", choices=POLICY_NAMES, default="ondemand")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("ablate", help="ep / tp / tp-lb / tp-lb-pre per stage")
    _common(p, model_list=True)
    _trace_flags(p, allow_file=False)
    p.add_argument("--ndp-list", type=_int_list, default=[2, 4, 6])
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("trace-gen", help="write a synthetic routing trace")
    _common(p)
    _trace_flags(p, allow_file=False)
    p.add_argument("-o", "--out", required=True)

    p = sub.add_parser("solve-balance", help="solve the GPU/NDP balance for one layer")
    p.add_argument("--config")
    p.add_argument("--hw")
    p.add_argument("--model")
    p.add_argument("--stage", choices=[s.value for s in Stage], default="decode")
    p.add_argument("--ndp", type=int)
    p.add_argument("--seq", type=int, default=512, help="prompt length (prefill)")
    p.add_argument("--print-primitives", action="store_true")
    return ap


# --------------------------------------------------------------------------
# flag resolution


def _base(args):
    hw, model, wl = None, None, WorkloadConfig()
    if args.config:
        hw, model, wl = load_config(args.config)
    if args.hw:
        hw = hardware_profile(args.hw)
    if hw is None:
        hw = hardware_profile("rtx5080-ndp")
    return hw, model, wl


def _workload(args, wl: WorkloadConfig) -> WorkloadConfig:
    changes = {}
    if getattr(args, "prompt_len", None) is not None:
        changes["prompt_len"] = args.prompt_len
    if getattr(args, "output_len", None) is not None:
        changes["output_len"] = args.output_len
    trace_file = getattr(args, "trace", None)
    synth = {k: v for k, v in (("seed", args.seed), ("zipf_skew", args.skew), ("rho", args.rho))
             if v is not None}
    if trace_file and synth:
        raise UsageError("--trace cannot be combined with --seed/--skew/--rho")
    if trace_file:
        changes["trace"] = TraceFile(trace_file)
    elif synth:
        base = wl.trace if isinstance(wl.trace, SyntheticTraceParams) else SyntheticTraceParams()
        changes["trace"] = dataclasses.replace(base, **synth)
    try:
        return dataclasses.replace(wl, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _single_model(args, model):
    if args.model:
        return model_profile(args.model)
    if model is None:
        raise UsageError("--model is required (or a config file with a model section)")
    return model


def _models(args, model):
    if args.models:
        return [model_profile(m) for m in args.models]
    if model is not None:
        return [model]
    return [model_profile(m) for m in BUNDLED_MODELS]


def _write(path: str, text: str) -> None:
    p = Path(path)
    try:
        p.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot write {p}: {exc.strerror or exc}") from exc


def _out_dir(path: str) -> Path:
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create {d}: {exc.strerror or exc}") from exc
    return d


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    hw, model, wl = _base(args)
    model = _single_model(args, model)
    wl = _workload(args, wl)
    n = args.ndp if args.ndp is not None else hw.ndp_count
    hw = hw.with_ndp(n)
    policy = PolicyId(args.policy)
    report, _ = run(hw, model, wl, policy, n, offload=not args.no_offload)
    if args.dump_prefetch:
        if not policy.uses_prefetch:
            raise UsageError("--dump-prefetch needs --policy tp-lb-pre")
        if report.supported:
            plan = build_plan(resolve_trace(model, wl), model, prefetch_budget(hw, model))
            _write(args.dump_prefetch, plan.dumps())
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    if not report.supported:
        print(f"not supported: {model.name} with {n} DIMMs lacks "
              f"{report.deficit_bytes} bytes", file=sys.stderr)
        return EXIT_NOT_SUPPORTED
    return 0


def _policies(names) -> list[PolicyId]:
    return [PolicyId.parse(n) for n in names]


def cmd_sweep(args) -> int:
    hw, model, wl = _base(args)
    models = _models(args, model)
    wl = _workload(args, wl)
    policies = _policies(args.policies)
    if PolicyId(args.baseline) not in policies:
        raise UsageError(f"baseline '{args.baseline}' is not among --policies")
    reports = sweep(hw, models, wl, policies, args.ndp_list)
    table = build_table(reports, args.baseline)
    summary = [mean_speedup(table, p.value, over, "end_to_end")
               for over in (args.baseline, "ep") if PolicyId(over) in policies
               for p in policies if p.value != over]
    out = _out_dir(args.out_dir)
    emit(table, "csv", out / "sweep.csv")
    emit(table, "json", out / "sweep.json", summary=summary)
    for stage in ("prefill", "decode", "end_to_end"):
        emit(table, "svg", out / f"sweep_{stage}.svg", stage=stage, title=f"all models, {stage}")
    for s in summary:
        print(f"{s['policy']} over {s['over']}: geomean {s['geometric_mean']:.3f}x "
              f"(arith {s['arithmetic_mean']:.3f}x, max {s['max']:.3f}x, {s['groups']} groups)")
    return 0


def cmd_ablate(args) -> int:
    hw, model, wl = _base(args)
    models = _models(args, model)
    wl = _workload(args, wl)
    out = _out_dir(args.out_dir)
    for m in models:
        reports = sweep(hw, [m], wl, _policies(DECODE_ABLATION), args.ndp_list)
        for stage, names in (("decode", DECODE_ABLATION), ("prefill", PREFILL_ABLATION)):
            subset = [r for r in reports if r.policy in names]
            table = build_table(subset, "ep", stages=[stage])
            emit(table, "csv", out / f"{m.name}_{stage}.csv")
            emit(table, "svg", out / f"{m.name}_{stage}.svg", stage=stage,
                 title=f"{m.name} {stage} MoE")
        print(f"{m.name}: wrote decode and prefill tables to {out}")
    return 0


def cmd_trace_gen(args) -> int:
    hw, model, wl = _base(args)
    model = _single_model(args, model)
    wl = _workload(args, wl)
    if not isinstance(wl.trace, SyntheticTraceParams):
        raise UsageError("trace-gen needs synthetic parameters")
    save_trace(resolve_trace(model, wl), args.out)
    return 0


def cmd_solve_balance(args) -> int:
    hw, model, _ = _base(args)
    model = _single_model(args, model)
    n = args.ndp if args.ndp is not None else hw.ndp_count
    hw = hw.with_ndp(n)
    stage = Stage(args.stage)
    seq = args.seq if stage is Stage.PREFILL else 1
    if seq < 1:
        raise UsageError("--seq must be >= 1")
    ctx = StageContext(stage, seq, n)
    prims = cost.primitives(hw, model, ctx)
    t_a_token = cost.primitives(hw, model, StageContext.decode(n)).t_a
    inp = BalanceInputs.from_primitives(prims, n, model.topk, stage, seq, t_a=t_a_token)
    sol = solve(inp)
    lines = []
    if args.print_primitives:
        lines += [f"{k}={v!r}" for k, v in prims.labeled()]
    lines += [
        f"e_g={sol.e_g!r}",
        f"e_n={sol.e_n!r}",
        f"e_g_prime={sol.e_g_prime!r}",
        f"lhs_s={sol.lhs_time!r}",
        f"rhs_s={sol.rhs_time!r}",
        f"residual_s={sol.residual!r}",
        f"clamped={str(sol.clamped).lower()}",
    ]
    if stage is Stage.DECODE:
        lines.append(f"e_max={solve_e_max(prims.t_g, prims.t_n, prims.t_a, model.topk, n)!r}")
    verdict = check_capacity(hw, model)
    lines.append(f"capacity={verdict}")
    print("\n".join(lines))
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "trace-gen": cmd_trace_gen,
    "solve-balance": cmd_solve_balance,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, TraceError, UsageError, BalanceError, ReportError, EngineError,
            ValueError) as exc:
        print(f"ndpmoe: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
