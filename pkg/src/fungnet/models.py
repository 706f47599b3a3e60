"""Architecture graphs for AlexNet, VGG16, DenseNet121 and ResNet50.

Parameter and buffer names follow the torchvision module paths
(``features.0.weight``, ``layer1.0.bn1.running_mean``,
``features.denseblock1.denselayer1.conv1.weight`` ...), so a torchvision
state dict converted to FGNT loads without renaming. The only torchvision
entries without a counterpart here are the ``num_batches_tracked`` counters.

A model is a :class:`ModelGraph`: an ordered list of nodes, each naming the
earlier nodes it reads. Residual joins are ``add`` nodes and dense-block
joins are ``concat`` nodes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import layers as L
from .tensor import ShapeError, Tape, Tensor, flatten

ARCHITECTURES = ("alexnet", "vgg16", "densenet121", "resnet50")
DISPLAY_NAMES = {
    "alexnet": "AlexNet",
    "vgg16": "VGG16",
    "densenet121": "DenseNet121",
    "resnet50": "ResNet50",
}
INPUT = "input"


@dataclass
class Node:
    name: str
    op: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)


@dataclass
class ModelGraph:
    arch: str
    num_classes: int
    input_shape: tuple = (3, 224, 224)
    nodes: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    head: str = ""
    feature_width: int = 0
    width_multiplier: float = 1.0

    def __post_init__(self):
        self._names = {INPUT}

    @property
    def output(self) -> str:
        return self.nodes[-1].name

    def _add(self, name, op, inputs, **attrs) -> str:
        if name in self._names:
            raise ValueError(f"duplicate node name {name!r}")
        inputs = tuple(inputs)
        for src in inputs:
            if src not in self._names:
                raise ValueError(f"node {name!r} reads {src!r} before it is defined")
        self.nodes.append(Node(name, op, inputs, attrs))
        self._names.add(name)
        return name

    def _param(self, name: str, value: np.ndarray) -> None:
        if name in self.params or name in self.buffers:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = Tensor(value, requires_grad=True)

    def conv(self, name, src, cin, cout, k, stride=1, pad=0, bias=True, rng=None) -> str:
        self._param(f"{name}.weight", kaiming_uniform(rng, (cout, cin, k, k)))
        if bias:
            self._param(f"{name}.bias", np.zeros(cout, dtype=np.float32))
        return self._add(name, "conv", [src], stride=stride, padding=pad, bias=bias)

    def bn(self, name, src, channels) -> str:
        self._param(f"{name}.weight", np.ones(channels, dtype=np.float32))
        self._param(f"{name}.bias", np.zeros(channels, dtype=np.float32))
        self.buffers[f"{name}.running_mean"] = np.zeros(channels, dtype=np.float32)
        self.buffers[f"{name}.running_var"] = np.ones(channels, dtype=np.float32)
        return self._add(name, "bn", [src], channels=channels)

    def linear(self, name, src, din, dout, rng=None) -> str:
        self._param(f"{name}.weight", kaiming_uniform(rng, (dout, din)))
        self._param(f"{name}.bias", np.zeros(dout, dtype=np.float32))
        return self._add(name, "linear", [src])

    def relu(self, name, src) -> str:
        return self._add(name, "relu", [src])

    def pool(self, name, src, kind, k=2, stride=None, pad=0) -> str:
        return self._add(name, "pool", [src], spec=L.PoolSpec(kind, k, stride, pad))

    def dropout(self, name, src, rate=0.5) -> str:
        return self._add(name, "dropout", [src], rate=rate)

    def flatten(self, name, src) -> str:
        return self._add(name, "flatten", [src])

    def add(self, name, a, b) -> str:
        return self._add(name, "add", [a, b])

    def concat(self, name, srcs) -> str:
        return self._add(name, "concat", srcs)

    def state(self) -> dict:
        """Every named array, parameters first, in construction order."""
        out = {k: t.data for k, t in self.params.items()}
        out.update(self.buffers)
        return out

    def trainable(self) -> dict:
        return {k: t for k, t in self.params.items() if t.requires_grad}


def kaiming_uniform(rng: Optional[np.random.Generator], shape, a: float = math.sqrt(5)) -> np.ndarray:
    """Kaiming-uniform fan-in init for a leaky-relu slope ``a``.

    The default ``a = sqrt(5)`` reduces the bound to ``1 / sqrt(fan_in)``, the
    usual framework default for conv and linear layers. ``a = 0`` gives the
    plain He bound ``sqrt(6 / fan_in)``, which makes the unnormalized
    AlexNet/VGG stacks emit logits in the hundreds at initialization.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    fan_in = int(np.prod(shape[1:]))
    gain = math.sqrt(2.0 / (1 + a * a))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _w(c: int, mult: float) -> int:
    return max(1, int(round(c * mult)))


def _alexnet(g: ModelGraph, rng, mult: float) -> str:
    c = [_w(v, mult) for v in (64, 192, 384, 256, 256)]
    hidden = _w(4096, mult)
    x = g.conv("features.0", INPUT, 3, c[0], 11, stride=4, pad=2, rng=rng)
    x = g.relu("features.1", x)
    x = g.pool("features.2", x, "max", 3, 2)
    x = g.conv("features.3", x, c[0], c[1], 5, pad=2, rng=rng)
    x = g.relu("features.4", x)
    x = g.pool("features.5", x, "max", 3, 2)
    x = g.conv("features.6", x, c[1], c[2], 3, pad=1, rng=rng)
    x = g.relu("features.7", x)
    x = g.conv("features.8", x, c[2], c[3], 3, pad=1, rng=rng)
    x = g.relu("features.9", x)
    x = g.conv("features.10", x, c[3], c[4], 3, pad=1, rng=rng)
    x = g.relu("features.11", x)
    x = g.pool("features.12", x, "max", 3, 2)
    x = g.flatten("flatten", x)
    x = g.dropout("classifier.0", x)
    x = g.linear("classifier.1", x, c[4] * 6 * 6, hidden, rng=rng)
    x = g.relu("classifier.2", x)
    x = g.dropout("classifier.3", x)
    x = g.linear("classifier.4", x, hidden, hidden, rng=rng)
    x = g.relu("classifier.5", x)
    g.feature_width = hidden
    return "classifier.6"


VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
             512, 512, 512, "M", 512, 512, 512, "M")


def _vgg16(g: ModelGraph, rng, mult: float) -> str:
    x, cin, idx = INPUT, 3, 0
    for v in VGG16_CFG:
        if v == "M":
            x = g.pool(f"features.{idx}", x, "max", 2, 2)
            idx += 1
            continue
        cout = _w(v, mult)
        x = g.conv(f"features.{idx}", x, cin, cout, 3, pad=1, rng=rng)
        x = g.relu(f"features.{idx + 1}", x)
        cin, idx = cout, idx + 2
    hidden = _w(4096, mult)
    x = g.flatten("flatten", x)
    x = g.linear("classifier.0", x, cin * 7 * 7, hidden, rng=rng)
    x = g.relu("classifier.1", x)
    x = g.dropout("classifier.2", x)
    x = g.linear("classifier.3", x, hidden, hidden, rng=rng)
    x = g.relu("classifier.4", x)
    x = g.dropout("classifier.5", x)
    g.feature_width = hidden
    return "classifier.6"


RESNET50_STAGES = ((3, 64), (4, 128), (6, 256), (3, 512))


def _resnet50(g: ModelGraph, rng, mult: float) -> str:
    stem = _w(64, mult)
    x = g.conv("conv1", INPUT, 3, stem, 7, stride=2, pad=3, bias=False, rng=rng)
    x = g.bn("bn1", x, stem)
    x = g.relu("relu", x)
    x = g.pool("maxpool", x, "max", 3, 2, 1)
    cin = stem
    for s, (blocks, width) in enumerate(RESNET50_STAGES, start=1):
        w = _w(width, mult)
        for b in range(blocks):
            p = f"layer{s}.{b}"
            stride = 2 if (b == 0 and s > 1) else 1
            y = g.conv(f"{p}.conv1", x, cin, w, 1, bias=False, rng=rng)
            y = g.relu(f"{p}.relu1", g.bn(f"{p}.bn1", y, w))
            y = g.conv(f"{p}.conv2", y, w, w, 3, stride=stride, pad=1, bias=False, rng=rng)
            y = g.relu(f"{p}.relu2", g.bn(f"{p}.bn2", y, w))
            y = g.conv(f"{p}.conv3", y, w, 4 * w, 1, bias=False, rng=rng)
            y = g.bn(f"{p}.bn3", y, 4 * w)
            shortcut = x
            if b == 0:
                shortcut = g.conv(f"{p}.downsample.0", x, cin, 4 * w, 1, stride=stride,
                                  bias=False, rng=rng)
                shortcut = g.bn(f"{p}.downsample.1", shortcut, 4 * w)
            x = g.relu(f"{p}.relu3", g.add(f"{p}.add", y, shortcut))
            cin = 4 * w
    x = g.pool("avgpool", x, "global_average")
    x = g.flatten("flatten", x)
    g.feature_width = cin
    return "fc"


DENSENET121_BLOCKS = (6, 12, 24, 16)


def _densenet121(g: ModelGraph, rng, mult: float) -> str:
    growth, init, bn_size = _w(32, mult), _w(64, mult), 4
    x = g.conv("features.conv0", INPUT, 3, init, 7, stride=2, pad=3, bias=False, rng=rng)
    x = g.bn("features.norm0", x, init)
    x = g.relu("features.relu0", x)
    x = g.pool("features.pool0", x, "max", 3, 2, 1)
    c = init
    for bi, n_layers in enumerate(DENSENET121_BLOCKS, start=1):
        block_in = c
        for li in range(1, n_layers + 1):
            p = f"features.denseblock{bi}.denselayer{li}"
            y = g.relu(f"{p}.relu1", g.bn(f"{p}.norm1", x, c))
            y = g.conv(f"{p}.conv1", y, c, bn_size * growth, 1, bias=False, rng=rng)
            y = g.relu(f"{p}.relu2", g.bn(f"{p}.norm2", y, bn_size * growth))
            y = g.conv(f"{p}.conv2", y, bn_size * growth, growth, 3, pad=1, bias=False, rng=rng)
            x = g.concat(f"{p}.concat", [x, y])
            c += growth
        if c != block_in + growth * n_layers:
            raise AssertionError(f"dense block {bi}: {c} channels, expected {block_in + growth * n_layers}")
        if bi < len(DENSENET121_BLOCKS):
            p = f"features.transition{bi}"
            x = g.relu(f"{p}.relu", g.bn(f"{p}.norm", x, c))
            x = g.conv(f"{p}.conv", x, c, c // 2, 1, bias=False, rng=rng)
            x = g.pool(f"{p}.pool", x, "average", 2, 2)
            c //= 2
    x = g.relu("features.relu5", g.bn("features.norm5", x, c))
    x = g.pool("avgpool", x, "global_average")
    x = g.flatten("flatten", x)
    g.feature_width = c
    return "classifier"


_BUILDERS = {
    "alexnet": _alexnet,
    "vgg16": _vgg16,
    "densenet121": _densenet121,
    "resnet50": _resnet50,
}


def build_model(arch: str, num_classes: int = 2, rng: Optional[np.random.Generator] = None,
                width_multiplier: float = 1.0) -> ModelGraph:
    """Build ``arch`` with a fresh ``num_classes``-wide linear head.

    ``width_multiplier`` scales every channel count and hidden width; values
    below 1 give cheap surrogates with the same topology.
    """
    if arch not in _BUILDERS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHITECTURES)}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if width_multiplier <= 0:
        raise ValueError(f"width_multiplier must be positive, got {width_multiplier}")
    rng = rng if rng is not None else np.random.default_rng(0)
    g = ModelGraph(arch, num_classes, width_multiplier=width_multiplier)
    head = _BUILDERS[arch](g, rng, width_multiplier)
    g.head = head
    g.linear(head, g.nodes[-1].name, g.feature_width, num_classes, rng=rng)
    return g


def replace_head(model: ModelGraph, num_classes: int, rng: Optional[np.random.Generator] = None) -> ModelGraph:
    """Swap the final linear layer for a fresh one of width ``num_classes``."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    rng = rng if rng is not None else np.random.default_rng(0)
    model.params[f"{model.head}.weight"] = Tensor(
        kaiming_uniform(rng, (num_classes, model.feature_width)), requires_grad=True)
    model.params[f"{model.head}.bias"] = Tensor(
        np.zeros(num_classes, dtype=np.float32), requires_grad=True)
    model.num_classes = num_classes
    return model


def freeze_backbone(model: ModelGraph, frozen: bool = True) -> None:
    prefix = model.head + "."
    for name, t in model.params.items():
        t.requires_grad = name.startswith(prefix) or not frozen
        t.grad = None


def count_params(model: ModelGraph) -> tuple[int, int]:
    """``(trainable, total)`` element counts; total adds the batchnorm running statistics."""
    trainable = sum(t.size for t in model.params.values())
    total = trainable + sum(b.size for b in model.buffers.values())
    return trainable, total


def forward(model: ModelGraph, batch: Tensor, mode: str = "eval",
            rng: Optional[np.random.Generator] = None, tape: Optional[Tape] = None,
            trace: Optional[dict] = None) -> Tensor:
    """Run the graph on an (N, C, H, W) batch and return (N, num_classes) logits.

    Pass ``tape`` to record the pass for :func:`fungnet.tensor.backward`.
    Train mode uses batch statistics and dropout (which needs ``rng``).
    ``trace``, if given, is filled with each node's output shape.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"expected input of shape (N, {', '.join(map(str, model.input_shape))}), "
                         f"got {batch.shape}")
    if tape is not None:
        with tape:
            return _run(model, batch, mode, rng, trace)
    return _run(model, batch, mode, rng, trace)


def _last_use(model: ModelGraph) -> dict:
    last = {}
    for i, node in enumerate(model.nodes):
        for src in node.inputs:
            last[src] = i
    return last


def _run(model: ModelGraph, batch: Tensor, mode: str, rng, trace=None) -> Tensor:
    values = {INPUT: batch}
    last = _last_use(model)
    p = model.params
    for i, node in enumerate(model.nodes):
        args = [values[s] for s in node.inputs]
        op, a = node.op, node.attrs
        if op == "conv":
            bias = p[f"{node.name}.bias"] if a["bias"] else None
            out = L.conv2d(args[0], L.ConvParams(p[f"{node.name}.weight"], bias, a["stride"], a["padding"]))
        elif op == "bn":
            state = L.BatchNormState(
                p[f"{node.name}.weight"], p[f"{node.name}.bias"],
                model.buffers[f"{node.name}.running_mean"], model.buffers[f"{node.name}.running_var"])
            out = L.batchnorm2d(args[0], state, mode)
        elif op == "relu":
            out = L.relu(args[0])
        elif op == "pool":
            out = L.pool2d(args[0], a["spec"])
        elif op == "flatten":
            out = flatten(args[0])
        elif op == "dropout":
            out = L.dropout(args[0], L.DropoutSpec(a["rate"], mode), rng)
        elif op == "linear":
            out = L.linear(args[0], p[f"{node.name}.weight"], p[f"{node.name}.bias"])
        elif op == "add":
            out = L.add(args[0], args[1])
        elif op == "concat":
            out = L.concat(args, axis=1)
        else:
            raise ValueError(f"unknown node op {op!r}")
        values[node.name] = out
        if trace is not None:
            trace[node.name] = out.shape
        for s in node.inputs:
            if last.get(s) == i:
                values.pop(s, None)
    return values[model.output]


def apply_weights(model: ModelGraph, named: Mapping[str, object], strict: bool = True) -> ModelGraph:
    """Copy named arrays or tensors into the model's parameters and buffers in place."""
    state = model.state()
    for name, value in named.items():
        if name not in state:
            raise KeyError(f"unknown parameter name {name!r}")
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if arr.shape != state[name].shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} does not match model shape {state[name].shape}")
    if strict:
        missing = [k for k in state if k not in named]
        if missing:
            raise KeyError(f"missing parameters: {', '.join(missing)}")
    for name, value in named.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if name in model.params:
            t = model.params[name]
            t.data = arr.astype(t.dtype, copy=True)
            t.grad = None
        else:
            model.buffers[name][...] = arr
    return model
