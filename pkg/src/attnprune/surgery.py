"""Structural channel removal.

A keep-vector for target layer l lives in the index space of l's original
input channels. Removing channel c deletes the input slice of l's kernel,
the matching output of the producing conv/FC layer, and the entries of any
batch-norm or depthwise layer in between. Channels tied to a residual
addition are never removed from the trunk; the branch entry selects the kept
ones instead.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import costmodel
from .autodiff import Tensor
from .errors import DimensionError, InvalidInputError
from .netgraph import NetworkGraph, ResidualSampler


@dataclass
class SurgeryReport:
    channels: dict[str, tuple[int, int]] = field(default_factory=dict)
    params_before: int = 0
    params_after: int = 0
    flops_before: int = 0
    flops_after: int = 0
    touched: list[str] = field(default_factory=list)
    samplers: list[str] = field(default_factory=list)

    @property
    def params_removed(self) -> int:
        return self.params_before - self.params_after

    @property
    def flops_removed(self) -> int:
        return self.flops_before - self.flops_after

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = {k: {"before": b, "after": a} for k, (b, a) in self.channels.items()}
        d["params_removed"] = self.params_removed
        d["flops_removed"] = self.flops_removed
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def detach_attention(graph: NetworkGraph) -> None:
    """Drop every attention module; forward goes straight through afterwards."""
    graph.attachments.clear()


def _slice(t: Tensor, idx, axis) -> Tensor:
    return Tensor(np.take(t.data, idx, axis=axis).copy(), requires_grad=t.requires_grad)


def _effective_masks(masks) -> dict[str, np.ndarray]:
    out = {lid: np.asarray(s.keep_mask, dtype=bool) for lid, s in masks.samplers.items()}
    for lid, keep in masks.layers.items():
        keep = np.asarray(keep, dtype=bool)
        if lid in out and not np.array_equal(out[lid], keep):
            raise InvalidInputError(f"{lid}: sampler and layer masks disagree")
        out[lid] = keep
    return out


def apply_masks(graph: NetworkGraph, masks) -> tuple[NetworkGraph, SurgeryReport]:
    """Return a pruned copy of ``graph`` and the accounting of what changed.

    The input graph is left untouched. Applying the same masks to the result
    again changes nothing.
    """
    if graph.shape_only:
        raise InvalidInputError("shape-only graphs carry no weights to slice")
    keeps = _effective_masks(masks)
    g = graph.copy()
    detach_attention(g)
    before = costmodel.cost_report(g)
    report = SurgeryReport(params_before=before.total_params, flops_before=before.total_flops)

    plans = []
    for lid, keep in keeps.items():
        layer = g.layer(lid)
        src = g.trace_source(lid)
        if keep.ndim != 1 or keep.size != layer.orig_in_channels // src.expand:
            raise DimensionError(f"mask[{lid}]", layer.orig_in_channels // src.expand, keep.shape)
        if not keep.any():
            raise InvalidInputError(f"{lid}: mask prunes every channel")
        # original ids of the channels still present (columns come in runs of `expand`)
        cur = np.asarray(layer.input_ids())[:: src.expand] // src.expand
        local = keep[cur]
        if not local.any():
            raise InvalidInputError(f"{lid}: mask prunes every remaining channel")
        plans.append((lid, src, cur, local))

    for lid, src, cur, local in plans:
        layer = g.layer(lid)
        n_before = int(cur.size)
        idx = np.flatnonzero(local)
        report.channels[lid] = (n_before, int(idx.size))
        if src.coupled:
            trunk = src.channels
            sel = np.zeros(trunk, dtype=bool)
            sel[cur[idx]] = True
            if not sel.all() or lid in g.samplers:
                g.samplers[lid] = ResidualSampler(lid, sel)
                report.samplers.append(lid)
        elif idx.size < n_before:
            _shrink_chain(g, src, idx)
            report.touched.extend([src.producer] + src.chain)
        if idx.size < n_before:
            cols = idx if src.expand == 1 else (idx[:, None] * src.expand + np.arange(src.expand)).ravel()
            orig = np.asarray(layer.input_ids())
            layer.params["weight"] = _slice(layer.params["weight"], cols, 1)
            layer.in_channels = int(cols.size)
            layer.in_index = [int(v) for v in orig[cols]]
            report.touched.append(lid)

    g.validate()
    after = costmodel.cost_report(g)
    report.params_after = after.total_params
    report.flops_after = after.total_flops
    report.touched = list(dict.fromkeys(report.touched))
    return g, report


def _shrink_chain(g: NetworkGraph, src, idx) -> None:
    prod = g.layer(src.producer)
    prod.params["weight"] = _slice(prod.params["weight"], idx, 0)
    if "bias" in prod.params:
        prod.params["bias"] = _slice(prod.params["bias"], idx, 0)
    prod.out_channels = int(idx.size)
    for node_id in reversed(src.chain):
        node = g.layer(node_id)
        for name in list(node.params):
            node.params[name] = _slice(node.params[name], idx, 0)
        for name in list(node.buffers):
            node.buffers[name] = _slice(node.buffers[name], idx, 0)
        if node.kind == "flatten":
            node.in_channels = int(idx.size)
            node.out_channels = int(idx.size) * node.spatial[0] * node.spatial[1]
        else:
            node.in_channels = node.out_channels = int(idx.size)
