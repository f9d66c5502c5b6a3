"""Parameter and FLOP accounting.

Parameters are every weight, bias and batch-norm scale/offset of the base
network (running statistics are not parameters). FLOPs cover convolution and
fully connected layers only; without FMA a multiply-accumulate counts as two
operations, with FMA as one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .errors import InvalidInputError
from .netgraph import NetworkGraph


@dataclass
class CostRow:
    layer_id: str
    kind: str
    params: int
    flops: int


@dataclass
class CostReport:
    total_params: int
    total_flops: int
    rows: list[CostRow] = field(default_factory=list)
    fma_mode: bool = False
    resolution: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = None if self.resolution is None else list(self.resolution)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class Reduction:
    params_pct: float
    flops_pct: float
    params_removed: int
    flops_removed: int


def layer_params(layer) -> int:
    kh, kw = layer.kernel
    if layer.kind == "conv":
        return layer.out_channels * layer.in_channels * kh * kw + (layer.out_channels if layer.bias else 0)
    if layer.kind == "depthwise_conv":
        return layer.out_channels * kh * kw
    if layer.kind == "fc":
        return layer.out_channels * layer.in_channels + (layer.out_channels if layer.bias else 0)
    if layer.kind == "batchnorm":
        return 2 * layer.in_channels
    return 0


def layer_macs(layer, out_shape) -> int:
    kh, kw = layer.kernel
    if layer.kind == "conv":
        return layer.out_channels * layer.in_channels * kh * kw * out_shape[1] * out_shape[2]
    if layer.kind == "depthwise_conv":
        return layer.out_channels * kh * kw * out_shape[1] * out_shape[2]
    if layer.kind == "fc":
        return layer.out_channels * layer.in_channels
    return 0


def cost_report(graph: NetworkGraph, input_resolution=None, fma_mode=False) -> CostReport:
    res = tuple(input_resolution) if input_resolution is not None else graph.input_resolution
    shapes = graph.infer_shapes(res)
    per_mac = 1 if fma_mode else 2
    rows = []
    for layer in graph.layers:
        p = layer_params(layer)
        f = per_mac * layer_macs(layer, shapes[layer.id])
        if p or f:
            rows.append(CostRow(layer.id, layer.kind, p, f))
    return CostReport(
        total_params=sum(r.params for r in rows),
        total_flops=sum(r.flops for r in rows),
        rows=rows,
        fma_mode=fma_mode,
        resolution=res,
    )


def count_params(graph: NetworkGraph) -> int:
    return sum(layer_params(l) for l in graph.layers)


def count_flops(graph: NetworkGraph, input_resolution=None, fma_mode=False) -> int:
    return cost_report(graph, input_resolution, fma_mode).total_flops


def compare(before: CostReport, after: CostReport) -> Reduction:
    """Reductions as percentages, ``100 * (1 - after / before)``."""
    if before.fma_mode != after.fma_mode:
        raise InvalidInputError("cannot compare reports counted with different FMA modes")

    def pct(b, a):
        return 0.0 if b == 0 else 100.0 * (1.0 - a / b)

    return Reduction(
        params_pct=pct(before.total_params, after.total_params),
        flops_pct=pct(before.total_flops, after.total_flops),
        params_removed=before.total_params - after.total_params,
        flops_removed=before.total_flops - after.total_flops,
    )


def format_params(n: int) -> str:
    return f"{n / 1e6:.2f}M"


def format_flops(n: int) -> str:
    if n >= 1e9:
        return f"{n / 1e9:.2f}B"
    if n >= 1e6:
        return f"{n / 1e6:.0f}M"
    return str(n)


def summary_line(report: CostReport) -> str:
    return f"{format_params(report.total_params)} params, {format_flops(report.total_flops)} FLOPs"


def format_table(report: CostReport) -> str:
    """Aligned plain-text table of per-layer costs."""
    head = ("layer", "kind", "params", "flops")
    body = [(r.layer_id, r.kind, str(r.params), str(r.flops)) for r in report.rows]
    body.append(("total", "", str(report.total_params), str(report.total_flops)))
    widths = [max(len(row[i]) for row in [head] + body) for i in range(4)]
    lines = []
    for row in [head] + body:
        cells = [row[0].ljust(widths[0]), row[1].ljust(widths[1]), row[2].rjust(widths[2]), row[3].rjust(widths[3])]
        lines.append("  ".join(cells).rstrip())
    lines.insert(1, "-" * len(lines[0]))
    mode = "FMA" if report.fma_mode else "no FMA"
    lines.append(f"{summary_line(report)} ({mode})")
    return "\n".join(lines)
