"""Comparison tables, speedup summaries and their csv/json/svg renderings."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .engine import RunReport

NOT_SUPPORTED = "N.S."
CSV_COLUMNS = ("model", "policy", "ndp", "stage", "latency_s", "speedup")
STAGES = ("prefill", "decode", "end_to_end")


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class Row:
    model: str
    policy: str
    ndp: int
    stage: str
    latency_s: float | None    # None when not supported
    speedup: float | None

    @property
    def supported(self) -> bool:
        return self.latency_s is not None


@dataclass
class ComparisonTable:
    baseline: str
    rows: list[Row] = field(default_factory=list)

    def get(self, model: str, policy: str, ndp: int, stage: str) -> Row:
        for r in self.rows:
            if (r.model, r.policy, r.ndp, r.stage) == (model, policy, ndp, stage):
                return r
        raise KeyError((model, policy, ndp, stage))

    def policies(self) -> list[str]:
        return list(dict.fromkeys(r.policy for r in self.rows))


def stage_latency(rep: RunReport, stage: str) -> float:
    if stage == "prefill":
        return rep.prefill_moe_s
    if stage == "decode":
        return rep.decode_moe_s
    if stage == "end_to_end":
        return rep.end_to_end_s
    raise ReportError(f"unknown stage '{stage}'")


def build_table(reports: Sequence[RunReport], baseline: str,
                stages: Iterable[str] = STAGES) -> ComparisonTable:
    """Speedup of every report over ``baseline`` within its (model, N, stage) group."""
    baseline = getattr(baseline, "value", baseline)
    stages = list(stages)
    base = {(r.model, r.n_ndp): r for r in reports if r.policy == baseline and r.supported}
    rows = []
    for rep in sorted(reports, key=lambda r: (r.model, r.n_ndp, r.policy)):
        for stage in stages:
            if not rep.supported:
                rows.append(Row(rep.model, rep.policy, rep.n_ndp, stage, None, None))
                continue
            ref = base.get((rep.model, rep.n_ndp))
            if ref is None:
                raise ReportError(
                    f"no '{baseline}' baseline for model={rep.model} ndp={rep.n_ndp}")
            lat = stage_latency(rep, stage)
            ref_lat = stage_latency(ref, stage)
            if rep is ref:
                speedup = 1.0
            elif lat > 0:
                speedup = ref_lat / lat
            else:
                speedup = math.inf
            rows.append(Row(rep.model, rep.policy, rep.n_ndp, stage, lat, speedup))
    return ComparisonTable(baseline, rows)


def geometric_mean(values: Sequence[float]) -> float:
    if not values:
        return math.nan
    return math.exp(sum(math.log(v) for v in values) / len(values))


def arithmetic_mean(values: Sequence[float]) -> float:
    return sum(values) / len(values) if values else math.nan


def mean_speedup(table: ComparisonTable, policy: str, over: str,
                 stage: str = "end_to_end") -> dict[str, float]:
    """``over``-relative speedup of ``policy``, averaged across (model, N) groups."""
    ratios, best = [], 0.0
    for r in table.rows:
        if r.policy != policy or r.stage != stage or not r.supported:
            continue
        other = table.get(r.model, over, r.ndp, stage)
        if not other.supported:
            continue
        ratio = other.latency_s / r.latency_s
        ratios.append(ratio)
        best = max(best, ratio)
    return {
        "policy": policy,
        "over": over,
        "stage": stage,
        "groups": len(ratios),
        "geometric_mean": geometric_mean(ratios),
        "arithmetic_mean": arithmetic_mean(ratios),
        "max": best if ratios else math.nan,
    }


# --------------------------------------------------------------------------
# emitters


def _num(x: float | None) -> str:
    if x is None:
        return NOT_SUPPORTED
    return repr(float(x))


def dumps_csv(table: ComparisonTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in table.rows:
        w.writerow([r.model, r.policy, r.ndp, r.stage, _num(r.latency_s), _num(r.speedup)])
    return buf.getvalue()


def loads_csv(text: str, baseline: str) -> ComparisonTable:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != CSV_COLUMNS:
        raise ReportError(f"expected csv header {','.join(CSV_COLUMNS)}")

    def val(s: str) -> float | None:
        return None if s == NOT_SUPPORTED else float(s)

    rows = [Row(m, p, int(n), s, val(lat), val(sp)) for m, p, n, s, lat, sp in reader]
    return ComparisonTable(baseline, rows)


def dumps_json(table: ComparisonTable, summary: Sequence[dict] = ()) -> str:
    doc = {
        "baseline": table.baseline,
        "averaging": "geometric (headline), arithmetic also given",
        "rows": [
            {"model": r.model, "policy": r.policy, "ndp": r.ndp, "stage": r.stage,
             "latency_s": r.latency_s, "speedup": r.speedup,
             "supported": r.supported}
            for r in table.rows
        ],
        "summary": [{k: (None if isinstance(v, float) and math.isnan(v) else v)
                     for k, v in s.items()} for s in summary],
    }
    return json.dumps(doc, indent=2) + "\n"


_PALETTE = ("#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948")


def dumps_svg(table: ComparisonTable, stage: str, title: str = "") -> str:
    """Grouped bars: one group per DIMM count, one bar per policy (speedup)."""
    rows = [r for r in table.rows if r.stage == stage]
    ndps = sorted({r.ndp for r in rows})
    policies = list(dict.fromkeys(r.policy for r in rows))
    top = max((r.speedup for r in rows if r.supported and math.isfinite(r.speedup)), default=1.0)
    top = max(top, 1.0)

    bar_w, gap, plot_h, left, base_y = 18, 24, 200, 50, 240
    group_w = bar_w * max(len(policies), 1) + gap
    width = left + group_w * max(len(ndps), 1) + 160
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="300" '
        f'font-family="sans-serif" font-size="11">',
        f'<text x="{left}" y="20" font-size="13">{_esc(title or stage)} '
        f'(speedup over {_esc(table.baseline)})</text>',
        f'<line x1="{left}" y1="{base_y}" x2="{left + group_w * len(ndps)}" y2="{base_y}" '
        f'stroke="black"/>',
    ]
    for gi, n in enumerate(ndps):
        gx = left + gi * group_w
        out.append(f'<text x="{gx + group_w // 2 - gap // 2}" y="{base_y + 16}" '
                   f'text-anchor="middle">N={n}</text>')
        for pi, pol in enumerate(policies):
            x = gx + pi * bar_w
            match = [r for r in rows if r.ndp == n and r.policy == pol]
            if not match:
                continue
            r = match[0]
            if not r.supported:
                out.append(f'<text x="{x + bar_w // 2}" y="{base_y - 4}" text-anchor="middle" '
                           f'font-size="8">{NOT_SUPPORTED}</text>')
                continue
            h = plot_h * min(r.speedup, top) / top
            out.append(f'<rect x="{x}" y="{base_y - h:.2f}" width="{bar_w - 2}" height="{h:.2f}" '
                       f'fill="{_PALETTE[pi % len(_PALETTE)]}">'
                       f'<title>{_esc(pol)} {r.speedup:.4g}x</title></rect>')
    lx = left + group_w * len(ndps) + 20
    for pi, pol in enumerate(policies):
        y = 40 + pi * 16
        out.append(f'<rect x="{lx}" y="{y - 9}" width="10" height="10" '
                   f'fill="{_PALETTE[pi % len(_PALETTE)]}"/>')
        out.append(f'<text x="{lx + 14}" y="{y}">{_esc(pol)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit(table: ComparisonTable, fmt: str, path, *, stage: str = "end_to_end",
         summary: Sequence[dict] = (), title: str = "") -> None:
    if fmt == "csv":
        text = dumps_csv(table)
    elif fmt == "json":
        text = dumps_json(table, summary)
    elif fmt == "svg":
        text = dumps_svg(table, stage, title)
    else:
        raise ReportError(f"unknown format '{fmt}'")
    p = Path(path)
    try:
        p.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot write {p}: {exc.strerror or exc}") from exc
