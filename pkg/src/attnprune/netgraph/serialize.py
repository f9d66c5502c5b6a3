"""Model container: versioned header, JSON topology, raw tensor blob, checksum.

Layout (all integers little-endian)::

    b"APRN" | u16 version | u64 header length | header JSON | tensor blob | sha256

The digest covers every byte before it. Tensors are stored in canonical name
order at the offsets recorded in the header.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .. import attention as attn
from ..autodiff import Tensor
from ..errors import ChecksumError, FormatError
from .graph import LayerSpec, NetworkGraph, ResidualSampler

MAGIC = b"APRN"
VERSION = 1
_DIGEST = 32


def _topology(graph: NetworkGraph) -> dict:
    return {
        "name": graph.name,
        "input_channels": graph.input_channels,
        "input_resolution": list(graph.input_resolution),
        "num_classes": graph.num_classes,
        "dtype": graph.dtype.name,
        "shape_only": graph.shape_only,
        "base_frozen": graph.base_frozen,
        "layers": [l.describe() for l in graph.layers],
        "samplers": {k: [bool(v) for v in s.keep_mask] for k, s in sorted(graph.samplers.items())},
        "attachments": [
            {
                "layer_id": s.layer_id,
                "channels": s.channels,
                "fc_mode": s.fc_mode,
                "variant": s.variant,
                "bn_momentum": s.bn_momentum,
                "bn_eps": s.bn_eps,
            }
            for _, s in sorted(graph.attachments.items())
        ],
    }


def dumps(graph: NetworkGraph) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, t in graph.named_tensors().items():
        arr = np.ascontiguousarray(t.data)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "requires_grad": t.requires_grad,
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": VERSION, "graph": _topology(graph), "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    body = MAGIC + struct.pack("<HQ", VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_model(graph: NetworkGraph, path) -> None:
    data = dumps(graph)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def loads(data: bytes) -> NetworkGraph:
    if len(data) < len(MAGIC) + 10 + _DIGEST:
        raise ChecksumError("model file is truncated")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("model file checksum mismatch (truncated or corrupt)")
    if body[:4] != MAGIC:
        raise FormatError("not an attnprune model file")
    version, hlen = struct.unpack_from("<HQ", body, 4)
    if version != VERSION:
        raise FormatError(f"unsupported model format version {version} (expected {VERSION})")
    start = 4 + 10
    header = json.loads(body[start : start + hlen].decode("utf-8"))
    blob = memoryview(body)[start + hlen :]
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).astype(np.dtype(e["dtype"]))
        tensors[e["name"]] = Tensor(arr.copy(), requires_grad=e["requires_grad"])
    return _rebuild(header["graph"], tensors)


def load_model(path) -> NetworkGraph:
    return loads(Path(path).read_bytes())


_PARAM_NAMES = ("weight", "bias", "gamma", "beta")
_BUFFER_NAMES = ("running_mean", "running_var")


def _rebuild(topo: dict, tensors: dict) -> NetworkGraph:
    layers = []
    for d in topo["layers"]:
        layer = LayerSpec(
            id=d["id"],
            kind=d["kind"],
            inputs=d["inputs"],
            in_channels=d["in_channels"],
            out_channels=d["out_channels"],
            kernel=tuple(d["kernel"]),
            stride=d["stride"],
            padding=d["padding"],
            bias=d["bias"],
            prunable=d["prunable"],
            role=d["role"],
            spatial=d["spatial"],
            eps=d["eps"],
            momentum=d["momentum"],
            in_index=d["in_index"],
            orig_in_channels=d["orig_in_channels"],
        )
        for n in _PARAM_NAMES:
            key = f"{layer.id}.{n}"
            if key in tensors:
                layer.params[n] = tensors[key]
        for n in _BUFFER_NAMES:
            key = f"{layer.id}.{n}"
            if key in tensors:
                layer.buffers[n] = tensors[key]
        layers.append(layer)
    g = NetworkGraph(
        topo["name"],
        topo["input_channels"],
        topo["input_resolution"],
        topo["num_classes"],
        layers,
        dtype=np.dtype(topo["dtype"]),
        shape_only=topo["shape_only"],
    )
    g.base_frozen = topo["base_frozen"]
    for lid, mask in topo["samplers"].items():
        g.samplers[lid] = ResidualSampler(lid, np.array(mask, dtype=bool))
    for a in topo["attachments"]:
        lid = a["layer_id"]
        pre = f"attention.{lid}."
        named = {k[len(pre):]: t for k, t in tensors.items() if k.startswith(pre)}
        try:
            g.attachments[lid] = attn.AttentionModuleState(
                layer_id=lid,
                channels=a["channels"],
                fc_mode=a["fc_mode"],
                variant=a["variant"],
                bn_momentum=a["bn_momentum"],
                bn_eps=a["bn_eps"],
                dw_kernel=named.get("dw_kernel"),
                **{k: named[k] for k in ("fc_weight", "fc_bias", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var")},
            )
        except KeyError as exc:
            raise FormatError(f"attention module {lid} is missing tensor {exc}") from None
    g.validate()
    return g
