"""Layer graphs with channel bookkeeping, freezing and attention attachment."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .. import attention as attn
from ..autodiff import Tensor, ops
from ..errors import DimensionError, InvalidInputError, InvalidStateError

KINDS = ("conv", "depthwise_conv", "fc", "batchnorm", "activation", "pool", "gap", "residual_add", "flatten")
# Layers that carry channels through unchanged (channel c in -> channel c out).
PASSTHROUGH = ("batchnorm", "activation", "pool", "gap", "depthwise_conv", "flatten")
INPUT = "input"


@dataclass
class LayerSpec:
    id: str
    kind: str
    inputs: list[str]
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    bias: bool = False
    prunable: bool = False
    role: str = ""
    spatial: tuple[int, int] | None = None
    eps: float = 1e-5
    momentum: float = 0.1
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, Tensor] = field(default_factory=dict)
    # Original ids of the input channels still present; None means all of them.
    in_index: list[int] | None = None
    orig_in_channels: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"layer {self.id}: unknown kind {self.kind!r}")
        self.kernel = tuple(self.kernel)
        if self.spatial is not None:
            self.spatial = tuple(self.spatial)
        if self.kind == "depthwise_conv" and self.bias:
            raise InvalidInputError(f"layer {self.id}: depthwise convolutions carry no bias")
        if self.orig_in_channels is None:
            self.orig_in_channels = self.in_channels

    def input_ids(self) -> list[int]:
        if self.in_index is None:
            return list(range(self.in_channels))
        return list(self.in_index)

    def describe(self) -> dict:
        """Topology record without tensors (used for files and reports)."""
        return {
            "id": self.id,
            "kind": self.kind,
            "inputs": list(self.inputs),
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": list(self.kernel),
            "stride": self.stride,
            "padding": self.padding,
            "bias": self.bias,
            "prunable": self.prunable,
            "role": self.role,
            "spatial": None if self.spatial is None else list(self.spatial),
            "eps": self.eps,
            "momentum": self.momentum,
            "in_index": self.in_index,
            "orig_in_channels": self.orig_in_channels,
        }


@dataclass
class ResidualSampler:
    """Index-select of trunk channels at the entry of a residual branch."""

    layer_id: str
    keep_mask: np.ndarray

    def __post_init__(self):
        self.keep_mask = np.asarray(self.keep_mask, dtype=bool)
        if not self.keep_mask.any():
            raise InvalidInputError(f"sampler at {self.layer_id} keeps no channel")

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep_mask)

    @property
    def is_identity(self) -> bool:
        return bool(self.keep_mask.all())


@dataclass
class ChannelSource:
    """Where the input channels of a layer come from.

    ``producer`` is the conv/FC layer whose output channels they are, ``chain``
    the channel-preserving layers between producer and target (nearest first),
    ``expand`` the number of feature columns per channel (>1 after flatten).
    ``coupled`` is set when the channels are tied to a residual addition or
    feed several consumers, so they cannot be removed at the producer.
    """

    target: str
    producer: str | None
    chain: list[str]
    coupled: bool
    expand: int
    channels: int


class NetworkGraph:
    def __init__(
        self,
        name,
        input_channels,
        input_resolution,
        num_classes,
        layers,
        dtype=np.float32,
        shape_only=False,
    ):
        self.name = name
        self.input_channels = int(input_channels)
        self.input_resolution = tuple(int(v) for v in input_resolution)
        self.num_classes = int(num_classes)
        self.layers: list[LayerSpec] = list(layers)
        self.dtype = np.dtype(dtype)
        self.shape_only = bool(shape_only)
        self.attachments: dict[str, attn.AttentionModuleState] = {}
        self.samplers: dict[str, ResidualSampler] = {}
        self.base_frozen = False
        self._reindex()

    def _reindex(self):
        self._index = {layer.id: layer for layer in self.layers}

    def __repr__(self):
        return f"NetworkGraph({self.name!r}, {len(self.layers)} layers, attachments={len(self.attachments)})"

    def layer(self, layer_id) -> LayerSpec:
        try:
            return self._index[layer_id]
        except KeyError:
            raise InvalidInputError(f"no layer {layer_id!r} in graph {self.name!r}") from None

    def __contains__(self, layer_id):
        return layer_id in self._index

    @property
    def output_id(self) -> str:
        return self.layers[-1].id

    def consumers(self, layer_id) -> list[str]:
        return [l.id for l in self.layers if layer_id in l.inputs]

    def edges(self) -> list[tuple[str, str]]:
        return [(src, l.id) for l in self.layers for src in l.inputs]

    def copy(self) -> "NetworkGraph":
        return copy.deepcopy(self)

    # --- parameters -----------------------------------------------------

    def base_parameters(self) -> list[Tensor]:
        return [t for l in self.layers for t in l.params.values()]

    def attention_parameters(self) -> list[Tensor]:
        return [t for s in self.attachments.values() for t in s.parameters()]

    def parameters(self) -> list[Tensor]:
        return self.base_parameters() + self.attention_parameters()

    def named_tensors(self) -> dict[str, Tensor]:
        """Every stored tensor in canonical order: base layers, then attention."""
        out = {}
        for l in self.layers:
            for k in sorted(l.params):
                out[f"{l.id}.{k}"] = l.params[k]
            for k in sorted(l.buffers):
                out[f"{l.id}.{k}"] = l.buffers[k]
        for lid in sorted(self.attachments):
            for k, t in sorted(self.attachments[lid].named_tensors().items()):
                out[f"attention.{lid}.{k}"] = t
        return out

    def checksum(self) -> str:
        """Digest of every base tensor's bytes (for the freeze contract)."""
        import hashlib

        h = hashlib.sha256()
        for name, t in self.named_tensors().items():
            if name.startswith("attention."):
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    # --- topology queries ----------------------------------------------

    def first_conv_id(self) -> str | None:
        for l in self.layers:
            if l.kind == "conv":
                return l.id
        return None

    def trace_source(self, target_id) -> ChannelSource:
        target = self.layer(target_id)
        if target.kind not in ("conv", "fc"):
            raise InvalidInputError(f"{target_id}: only conv and fc layers have prunable inputs")
        chain: list[str] = []
        expand = 1
        coupled = self.samplers.get(target_id) is not None
        node_id = target.inputs[0]
        while True:
            if node_id == INPUT:
                raise InvalidInputError(f"{target_id}: input channels come straight from the network input")
            if len(self.consumers(node_id)) > 1:
                coupled = True
            node = self.layer(node_id)
            if node.kind in ("conv", "fc"):
                producer = node_id
                break
            if node.kind == "residual_add":
                producer = None
                coupled = True
                break
            chain.append(node_id)
            if node.kind == "flatten":
                expand *= node.spatial[0] * node.spatial[1]
            node_id = node.inputs[0]
        channels = target.in_channels // expand
        if target_id in self.samplers:
            channels = len(self.samplers[target_id].keep_mask)
        return ChannelSource(target_id, producer, chain, coupled, expand, channels)

    def residual_groups(self) -> list[frozenset]:
        """Sets of layers whose channel extents are tied together by additions."""
        parent: dict[str, str] = {}

        def find(a):
            parent.setdefault(a, a)
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        def union(a, b):
            parent[find(a)] = find(b)

        def root(node_id):
            while node_id != INPUT:
                node = self.layer(node_id)
                if node.kind in ("conv", "fc", "residual_add"):
                    return node_id
                node_id = node.inputs[0]
            return INPUT

        for l in self.layers:
            if l.kind == "residual_add":
                for src in l.inputs:
                    union(l.id, root(src))
        groups: dict[str, set] = {}
        for a in list(parent):
            groups.setdefault(find(a), set()).add(a)
        return sorted((frozenset(g) for g in groups.values()), key=lambda g: sorted(g))

    def mark_prunable(self) -> None:
        """Set ``prunable`` from topology.

        Convs are prunable except the first one, depthwise convs and
        projection shortcuts. FC layers are prunable when their inputs trace
        cleanly (no flatten, no residual coupling) to a single producer.
        """
        first = self.first_conv_id()
        for l in self.layers:
            l.prunable = False
            if l.kind == "conv" and l.id != first and l.role != "shortcut":
                try:
                    self.trace_source(l.id)
                except InvalidInputError:
                    continue
                l.prunable = True
            elif l.kind == "fc":
                try:
                    src = self.trace_source(l.id)
                except InvalidInputError:
                    continue
                l.prunable = src.producer is not None and not src.coupled and src.expand == 1

    def prunable_layers(self, kind=None) -> list[str]:
        return [l.id for l in self.layers if l.prunable and (kind is None or l.kind == kind)]

    # --- validation -----------------------------------------------------

    def infer_shapes(self, resolution=None) -> dict[str, tuple]:
        """Per-layer output shape without batch: (C, H, W) or (F,)."""
        h, w = resolution if resolution is not None else self.input_resolution
        shapes: dict[str, tuple] = {INPUT: (self.input_channels, h, w)}
        for l in self.layers:
            src = shapes[l.inputs[0]]
            where = f"layer {l.id}"
            c = src[0]
            if l.id in self.samplers:
                c = len(self.samplers[l.id].indices)
            if c != l.in_channels:
                raise DimensionError(where, f"{l.in_channels} input channels", c)
            if l.kind in ("conv", "depthwise_conv", "pool"):
                if len(src) != 3:
                    raise DimensionError(where, "a spatial feature map", src)
                kh, kw = l.kernel
                ho = (src[1] + 2 * l.padding - kh) // l.stride + 1
                wo = (src[2] + 2 * l.padding - kw) // l.stride + 1
                if ho <= 0 or wo <= 0:
                    raise DimensionError(where, "positive output extent", (ho, wo))
                shapes[l.id] = (l.out_channels, ho, wo)
            elif l.kind == "gap":
                shapes[l.id] = (l.out_channels,)
            elif l.kind == "flatten":
                if len(src) != 3 or tuple(src[1:]) != tuple(l.spatial):
                    raise DimensionError(where, f"spatial extent {l.spatial}", src[1:])
                shapes[l.id] = (l.out_channels,)
            elif l.kind == "fc":
                if len(src) != 1:
                    raise DimensionError(where, "flat features", src)
                shapes[l.id] = (l.out_channels,)
            elif l.kind == "residual_add":
                other = shapes[l.inputs[1]]
                if other != src:
                    raise DimensionError(where, src, other, "residual operands differ")
                shapes[l.id] = src
            else:
                shapes[l.id] = (l.out_channels,) + tuple(src[1:])
        return shapes

    def validate(self) -> None:
        seen = {INPUT}
        for l in self.layers:
            if l.id in seen:
                raise InvalidStateError(f"duplicate layer id {l.id!r}")
            for src in l.inputs:
                if src not in seen:
                    raise InvalidStateError(f"layer {l.id} reads {src!r} before it is defined")
            want = 2 if l.kind == "residual_add" else 1
            if len(l.inputs) != want:
                raise InvalidStateError(f"layer {l.id} ({l.kind}) needs {want} input(s)")
            seen.add(l.id)
            self._check_layer(l)
        sinks = [l.id for l in self.layers if not self.consumers(l.id)]
        if sinks != [self.output_id]:
            raise InvalidStateError(f"graph must have exactly one output, found {sinks}")
        if not self.consumers(INPUT):
            raise InvalidStateError("graph input is unused")
        self.infer_shapes()
        for lid, state in self.attachments.items():
            if state.channels != self.layer(lid).in_channels:
                raise DimensionError(f"attention[{lid}]", self.layer(lid).in_channels, state.channels)
        for group in self.residual_groups():
            widths = {self._out_width(m) for m in group if m != INPUT}
            if len(widths) > 1:
                raise DimensionError("residual group", "one shared channel extent", sorted(widths))

    def _out_width(self, layer_id):
        return self.input_channels if layer_id == INPUT else self.layer(layer_id).out_channels

    def _check_layer(self, l: LayerSpec) -> None:
        where = f"layer {l.id}"
        if l.kind in PASSTHROUGH and l.kind != "flatten" and l.in_channels != l.out_channels:
            raise DimensionError(where, l.in_channels, l.out_channels, "channel-preserving layer")
        if l.kind == "flatten" and l.out_channels != l.in_channels * l.spatial[0] * l.spatial[1]:
            raise DimensionError(where, l.in_channels * l.spatial[0] * l.spatial[1], l.out_channels)
        if self.shape_only:
            return
        expected = {}
        if l.kind == "conv":
            expected["weight"] = (l.out_channels, l.in_channels) + l.kernel
        elif l.kind == "depthwise_conv":
            expected["weight"] = (l.out_channels, 1) + l.kernel
        elif l.kind == "fc":
            expected["weight"] = (l.out_channels, l.in_channels)
        elif l.kind == "batchnorm":
            expected.update(gamma=(l.in_channels,), beta=(l.in_channels,))
        if l.bias and l.kind in ("conv", "fc"):
            expected["bias"] = (l.out_channels,)
        for name, shape in expected.items():
            t = l.params.get(name)
            if t is None or t.shape != shape:
                raise DimensionError(f"{where}.{name}", shape, None if t is None else t.shape)
        if l.kind == "batchnorm":
            for name in ("running_mean", "running_var"):
                t = l.buffers.get(name)
                if t is None or t.shape != (l.in_channels,):
                    raise DimensionError(f"{where}.{name}", (l.in_channels,), None if t is None else t.shape)


# --- freezing -----------------------------------------------------------


def freeze_base(graph: NetworkGraph) -> None:
    """Stop gradients into every base parameter; base batch norm runs on its
    running statistics from now on."""
    for p in graph.base_parameters():
        p.requires_grad = False
        p.grad = None
    graph.base_frozen = True


def unfreeze(graph: NetworkGraph) -> None:
    for p in graph.base_parameters():
        p.requires_grad = True
    graph.base_frozen = False


# --- attention attachment ----------------------------------------------


def attach_attention(graph: NetworkGraph, targets="all_prunable", fc_mode=False, rng=None, **module_kwargs) -> list[str]:
    """Create one attention module in front of each target; returns their ids."""
    if graph.shape_only:
        raise InvalidStateError("cannot attach attention modules to a shape-only graph")
    kind = "fc" if fc_mode else "conv"
    first = graph.first_conv_id()
    if targets == "all_prunable":
        ids = graph.prunable_layers(kind)
    else:
        ids = list(targets)
    rng = rng if rng is not None else np.random.default_rng(0)
    for lid in ids:
        layer = graph.layer(lid)
        if lid == first:
            raise InvalidInputError(
                f"{lid} is the first convolution; its input is the image itself and it is never pruned"
            )
        if not layer.prunable:
            raise InvalidInputError(f"{lid} is not a prunable layer")
        if layer.kind != kind:
            raise InvalidInputError(f"{lid} is a {layer.kind} layer; fc_mode={fc_mode} expects {kind}")
        if lid in graph.attachments:
            raise InvalidStateError(f"{lid} already has an attention module")
    for lid in ids:
        layer = graph.layer(lid)
        graph.attachments[lid] = attn.init_attention_state(
            lid, layer.in_channels, fc_mode=fc_mode, rng=rng, dtype=graph.dtype, **module_kwargs
        )
    return ids


# --- forward ------------------------------------------------------------


def forward(graph: NetworkGraph, batch, mode="eval", alpha=None, capture=None) -> Tensor:
    """Run the network on ``batch`` (N x C x H x W) and return N x K logits.

    Attention modules, when attached, gate their target's input first;
    ``alpha`` is then required. With ``capture`` (a dict) the double-precision
    softmax output of every module is stored under its layer id.
    """
    if graph.shape_only:
        raise InvalidStateError(f"graph {graph.name!r} was built shape-only and cannot run")
    if mode not in ("train", "eval"):
        raise InvalidInputError(f"mode must be 'train' or 'eval', got {mode!r}")
    if graph.attachments and alpha is None:
        raise InvalidInputError("alpha is required when attention modules are attached")
    if alpha is not None and not graph.attachments:
        raise InvalidInputError("alpha given but no attention modules are attached")
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=graph.dtype))
    expect = (graph.input_channels,) + graph.input_resolution
    if x.ndim != 4 or x.shape[1] != graph.input_channels:
        raise DimensionError("network input", ("N",) + expect, x.shape)
    base_training = mode == "train" and not graph.base_frozen
    module_training = mode == "train"
    outs: dict[str, Tensor] = {INPUT: x}
    for layer in graph.layers:
        h = outs[layer.inputs[0]]
        sampler = graph.samplers.get(layer.id)
        if sampler is not None:
            h = ops.index_select_channels(h, sampler.indices)
        state = graph.attachments.get(layer.id)
        if state is not None:
            z = attn.attention_logits(h, state, training=module_training)
            if capture is not None:
                capture[layer.id] = attn.probabilities64(z, state.variant)
            gate, _ = attn.attention_gate(z, state, alpha)
            h = ops.channel_scale(h, gate)
        outs[layer.id] = _apply(layer, h, outs, base_training)
    return outs[graph.output_id]


def _apply(layer: LayerSpec, h: Tensor, outs, training) -> Tensor:
    p = layer.params
    k = layer.kind
    if k == "conv":
        return ops.conv2d(h, p["weight"], p.get("bias"), layer.stride, layer.padding, name=layer.id)
    if k == "depthwise_conv":
        return ops.depthwise_conv2d(h, p["weight"], layer.stride, layer.padding, name=layer.id)
    if k == "fc":
        return ops.linear(h, p["weight"], p.get("bias"), name=layer.id)
    if k == "batchnorm":
        b = layer.buffers
        return ops.batchnorm(
            h, p["gamma"], p["beta"], b["running_mean"], b["running_var"],
            training=training, momentum=layer.momentum, eps=layer.eps, name=layer.id,
        )
    if k == "activation":
        return ops.relu(h)
    if k == "pool":
        return ops.max_pool2d(h, layer.kernel[0], layer.stride, layer.padding)
    if k == "gap":
        return ops.global_average_pool(h)
    if k == "flatten":
        return ops.flatten(h)
    if k == "residual_add":
        return ops.add(h, outs[layer.inputs[1]])
    raise InvalidStateError(f"unhandled layer kind {k}")
