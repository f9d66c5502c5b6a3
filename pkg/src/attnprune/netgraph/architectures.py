"""Reference architectures and custom graphs from JSON layer lists."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..autodiff import Tensor
from ..errors import InvalidInputError
from .graph import INPUT, LayerSpec, NetworkGraph

ARCHITECTURES = ("vgg16", "resnet18", "resnet50", "mobilenet_075", "vgg10", "tiny_cnn", "custom")
# Architectures too large to allocate by default; built shape-only unless asked.
LARGE = ("vgg16", "resnet18", "resnet50", "mobilenet_075")


class GraphBuilder:
    """Appends layers while tracking the current channel count and spatial size."""

    def __init__(self, input_channels, resolution, rng=None, dtype=np.float32, shape_only=False):
        self.layers: list[LayerSpec] = []
        self.cursor = INPUT
        self.channels = input_channels
        self.hw = tuple(resolution)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = dtype
        self.shape_only = shape_only
        self._shape = {INPUT: (input_channels, self.hw)}
        self._count: dict[str, int] = {}

    def _id(self, prefix):
        n = self._count.get(prefix, 0) + 1
        self._count[prefix] = n
        return f"{prefix}{n}"

    def _tensor(self, a):
        return Tensor(np.asarray(a, dtype=self.dtype), requires_grad=True)

    def _push(self, layer: LayerSpec, hw):
        self.layers.append(layer)
        self.cursor = layer.id
        self.channels = layer.out_channels
        self.hw = hw
        self._shape[layer.id] = (layer.out_channels, hw)
        return layer.id

    def at(self, layer_id):
        """Move the cursor to an existing layer (for branching)."""
        self.cursor = layer_id
        self.channels, self.hw = self._shape[layer_id]
        return self

    @staticmethod
    def _out(n, k, s, p):
        return (n + 2 * p - k) // s + 1

    def conv(self, out, k=3, stride=1, padding=None, bias=False, id=None, role=""):
        padding = k // 2 if padding is None else padding
        lid = id or self._id("conv")
        layer = LayerSpec(lid, "conv", [self.cursor], self.channels, out, (k, k), stride, padding, bias, role=role)
        if not self.shape_only:
            std = np.sqrt(2.0 / (self.channels * k * k))
            layer.params["weight"] = self._tensor(self.rng.normal(0.0, std, size=(out, self.channels, k, k)))
            if bias:
                layer.params["bias"] = self._tensor(np.zeros(out))
        hw = (self._out(self.hw[0], k, stride, padding), self._out(self.hw[1], k, stride, padding))
        return self._push(layer, hw)

    def dwconv(self, k=3, stride=1, padding=None, id=None):
        padding = k // 2 if padding is None else padding
        c = self.channels
        layer = LayerSpec(id or self._id("dwconv"), "depthwise_conv", [self.cursor], c, c, (k, k), stride, padding)
        if not self.shape_only:
            std = np.sqrt(2.0 / (k * k))
            layer.params["weight"] = self._tensor(self.rng.normal(0.0, std, size=(c, 1, k, k)))
        hw = (self._out(self.hw[0], k, stride, padding), self._out(self.hw[1], k, stride, padding))
        return self._push(layer, hw)

    def bn(self, id=None):
        c = self.channels
        layer = LayerSpec(id or self._id("bn"), "batchnorm", [self.cursor], c, c)
        if not self.shape_only:
            layer.params["gamma"] = self._tensor(np.ones(c))
            layer.params["beta"] = self._tensor(np.zeros(c))
            layer.buffers["running_mean"] = Tensor(np.zeros(c, dtype=self.dtype))
            layer.buffers["running_var"] = Tensor(np.ones(c, dtype=self.dtype))
        return self._push(layer, self.hw)

    def relu(self, id=None):
        c = self.channels
        return self._push(LayerSpec(id or self._id("relu"), "activation", [self.cursor], c, c), self.hw)

    def pool(self, k=2, stride=None, padding=0, id=None):
        stride = stride or k
        c = self.channels
        layer = LayerSpec(id or self._id("pool"), "pool", [self.cursor], c, c, (k, k), stride, padding)
        hw = (self._out(self.hw[0], k, stride, padding), self._out(self.hw[1], k, stride, padding))
        return self._push(layer, hw)

    def gap(self, id=None):
        c = self.channels
        return self._push(LayerSpec(id or self._id("gap"), "gap", [self.cursor], c, c), (1, 1))

    def flatten(self, id=None):
        c = self.channels
        h, w = self.hw
        layer = LayerSpec(id or self._id("flatten"), "flatten", [self.cursor], c, c * h * w, spatial=(h, w))
        return self._push(layer, (1, 1))

    def fc(self, out, bias=True, id=None):
        lid = id or self._id("fc")
        layer = LayerSpec(lid, "fc", [self.cursor], self.channels, out, bias=bias)
        if not self.shape_only:
            std = np.sqrt(1.0 / self.channels)
            layer.params["weight"] = self._tensor(self.rng.normal(0.0, std, size=(out, self.channels)))
            if bias:
                layer.params["bias"] = self._tensor(np.zeros(out))
        return self._push(layer, (1, 1))

    def add(self, other, id=None):
        c = self.channels
        layer = LayerSpec(id or self._id("add"), "residual_add", [self.cursor, other], c, c)
        return self._push(layer, self.hw)

    def conv_bn_relu(self, out, k=3, stride=1, name=None, relu=True):
        self.conv(out, k, stride, id=name)
        self.bn(id=f"{name}_bn" if name else None)
        if relu:
            self.relu(id=f"{name}_relu" if name else None)
        return self.cursor

    def graph(self, name, input_channels, resolution, num_classes) -> NetworkGraph:
        g = NetworkGraph(name, input_channels, resolution, num_classes, self.layers, self.dtype, self.shape_only)
        g.mark_prunable()
        g.validate()
        return g


def _require_divisible(name, resolution, factor):
    if any(v % factor for v in resolution):
        raise InvalidInputError(f"{name} needs an input resolution divisible by {factor}, got {resolution}")


def _vgg16(b: GraphBuilder, num_classes, resolution):
    cfg = [(1, 2, 64), (2, 2, 128), (3, 3, 256), (4, 3, 512), (5, 3, 512)]
    for block, reps, width in cfg:
        for i in range(1, reps + 1):
            b.conv(width, 3, bias=True, id=f"conv{block}_{i}")
            b.relu(id=f"conv{block}_{i}_relu")
        b.pool(2, id=f"pool{block}")
    b.flatten(id="flatten")
    b.fc(4096, id="fc6")
    b.relu(id="fc6_relu")
    b.fc(4096, id="fc7")
    b.relu(id="fc7_relu")
    b.fc(num_classes, id="fc8")


def _vgg10(b: GraphBuilder, num_classes, resolution):
    cfg = [(1, 2, 64), (2, 2, 128), (3, 3, 256), (4, 3, 512)]
    for block, reps, width in cfg:
        for i in range(1, reps + 1):
            b.conv_bn_relu(width, 3, name=f"conv{block}_{i}")
        if block < 4:
            b.pool(2, id=f"pool{block}")
    b.gap(id="gap")
    b.fc(num_classes, id="fc")


def _tiny_cnn(b: GraphBuilder, num_classes, resolution):
    b.conv_bn_relu(8, 3, name="conv1")
    b.conv_bn_relu(16, 3, name="conv2")
    b.pool(2, id="pool")
    b.conv_bn_relu(32, 3, name="conv3")
    b.gap(id="gap")
    b.fc(num_classes, id="fc")


def _resnet_stem(b: GraphBuilder):
    b.conv_bn_relu(64, 7, stride=2, name="conv1")
    b.pool(3, 2, padding=1, id="pool1")


def _shortcut(b: GraphBuilder, trunk, out, stride, name):
    b.at(trunk)
    if stride != 1 or b.channels != out:
        b.conv(out, 1, stride, padding=0, id=f"{name}_down", role="shortcut")
        b.bn(id=f"{name}_down_bn")
    return b.cursor


def _basic_block(b: GraphBuilder, out, stride, name):
    trunk = b.cursor
    b.conv_bn_relu(out, 3, stride, name=f"{name}_conv1")
    branch = b.conv_bn_relu(out, 3, 1, name=f"{name}_conv2", relu=False)
    short = _shortcut(b, trunk, out, stride, name)
    b.at(branch).add(short, id=f"{name}_add")
    b.relu(id=f"{name}_relu")


def _bottleneck(b: GraphBuilder, width, stride, name):
    trunk = b.cursor
    # stride on the first 1x1, as in the original ResNet-50
    b.conv_bn_relu(width, 1, stride, name=f"{name}_conv1")
    b.conv_bn_relu(width, 3, 1, name=f"{name}_conv2")
    branch = b.conv_bn_relu(width * 4, 1, 1, name=f"{name}_conv3", relu=False)
    short = _shortcut(b, trunk, width * 4, stride, name)
    b.at(branch).add(short, id=f"{name}_add")
    b.relu(id=f"{name}_relu")


def _resnet(b: GraphBuilder, num_classes, block, depths):
    _resnet_stem(b)
    for stage, (reps, width) in enumerate(zip(depths, (64, 128, 256, 512)), start=2):
        for i in range(reps):
            stride = 2 if stage > 2 and i == 0 else 1
            block(b, width, stride, f"res{stage}_{i + 1}")
    b.gap(id="gap")
    b.fc(num_classes, id="fc")


def _mobilenet(b: GraphBuilder, num_classes, width_mult=0.75):
    def ch(v):
        return int(v * width_mult)

    b.conv_bn_relu(ch(32), 3, 2, name="conv1")
    plan = [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2)] + [(512, 1)] * 5 + [(1024, 2), (1024, 1)]
    for i, (out, stride) in enumerate(plan, start=2):
        b.dwconv(3, stride, id=f"dw{i}")
        b.bn(id=f"dw{i}_bn")
        b.relu(id=f"dw{i}_relu")
        b.conv_bn_relu(ch(out), 1, 1, name=f"pw{i}")
    b.gap(id="gap")
    b.fc(num_classes, id="fc")


def build_architecture(
    spec_name,
    input_resolution=None,
    num_classes=None,
    *,
    shape_only=None,
    dtype=np.float32,
    seed=0,
    spec=None,
) -> NetworkGraph:
    """Build a named architecture.

    ``shape_only`` defaults to True for the ImageNet-scale networks, which
    then carry channel and kernel bookkeeping but no parameter storage.
    ``spec`` (a dict or a path to JSON) describes the layers for ``custom``.
    """
    if spec_name not in ARCHITECTURES:
        raise InvalidInputError(f"unknown architecture {spec_name!r}; choose from {', '.join(ARCHITECTURES)}")
    if spec_name == "custom":
        return build_custom(spec, dtype=dtype, seed=seed, shape_only=bool(shape_only))
    defaults = {
        "vgg16": ((224, 224), 1000),
        "resnet18": ((224, 224), 1000),
        "resnet50": ((224, 224), 1000),
        "mobilenet_075": ((224, 224), 1000),
        "vgg10": ((32, 32), 10),
        "tiny_cnn": ((16, 16), 4),
    }
    res0, k0 = defaults[spec_name]
    resolution = tuple(input_resolution) if input_resolution is not None else res0
    if len(resolution) == 1:
        resolution = (resolution[0], resolution[0])
    num_classes = num_classes or k0
    if shape_only is None:
        shape_only = spec_name in LARGE
    factor = {"vgg10": 8, "tiny_cnn": 2}.get(spec_name, 32)
    _require_divisible(spec_name, resolution, factor)
    b = GraphBuilder(3, resolution, np.random.default_rng(seed), dtype, shape_only)
    if spec_name == "vgg16":
        _vgg16(b, num_classes, resolution)
    elif spec_name == "vgg10":
        _vgg10(b, num_classes, resolution)
    elif spec_name == "tiny_cnn":
        _tiny_cnn(b, num_classes, resolution)
    elif spec_name == "resnet18":
        _resnet(b, num_classes, _basic_block, (2, 2, 2, 2))
    elif spec_name == "resnet50":
        _resnet(b, num_classes, _bottleneck, (3, 4, 6, 3))
    elif spec_name == "mobilenet_075":
        _mobilenet(b, num_classes, 0.75)
    return b.graph(spec_name, 3, resolution, num_classes)


def build_custom(spec, dtype=np.float32, seed=0, shape_only=False) -> NetworkGraph:
    """Build from a layer list, e.g.::

        {"name": "toy", "input_channels": 3, "input_resolution": [8, 8],
         "num_classes": 2,
         "layers": [{"id": "c1", "kind": "conv", "out_channels": 4, "kernel": 3},
                    {"id": "b1", "kind": "batchnorm"}, ...]}

    Each layer reads the previous one unless ``inputs`` is given; a
    ``residual_add`` lists both operands.
    """
    if spec is None:
        raise InvalidInputError("custom architecture needs a layer specification")
    if isinstance(spec, (str, Path)):
        spec = json.loads(Path(spec).read_text())
    try:
        cin = int(spec.get("input_channels", 3))
        res = tuple(spec["input_resolution"])
        layers = spec["layers"]
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"custom spec is missing a field: {exc}") from None
    b = GraphBuilder(cin, res, np.random.default_rng(seed), dtype, shape_only)
    for entry in layers:
        kind = entry.get("kind")
        lid = entry.get("id")
        inputs = entry.get("inputs")
        if inputs:
            b.at(inputs[0])
        if kind == "conv":
            b.conv(entry["out_channels"], entry.get("kernel", 3), entry.get("stride", 1),
                   entry.get("padding"), entry.get("bias", False), id=lid, role=entry.get("role", ""))
        elif kind == "depthwise_conv":
            b.dwconv(entry.get("kernel", 3), entry.get("stride", 1), entry.get("padding"), id=lid)
        elif kind == "batchnorm":
            b.bn(id=lid)
        elif kind == "activation":
            b.relu(id=lid)
        elif kind == "pool":
            b.pool(entry.get("kernel", 2), entry.get("stride"), entry.get("padding", 0), id=lid)
        elif kind == "gap":
            b.gap(id=lid)
        elif kind == "flatten":
            b.flatten(id=lid)
        elif kind == "fc":
            b.fc(entry["out_channels"], entry.get("bias", True), id=lid)
        elif kind == "residual_add":
            if not inputs or len(inputs) != 2:
                raise InvalidInputError(f"residual_add {lid} needs two inputs")
            b.add(inputs[1], id=lid)
        else:
            raise InvalidInputError(f"custom spec: unknown layer kind {kind!r}")
    num_classes = spec.get("num_classes", b.channels)
    return b.graph(spec.get("name", "custom"), cin, res, num_classes)
