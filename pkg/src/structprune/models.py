"""Small feed-forward CNNs: layer records, forward pass, and the built-in architectures."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

WEIGHTED = ("conv", "fc")


@dataclass
class Layer:
    """One layer. Conv and fc layers carry ``weight`` and ``bias``.

    ``in_channels`` is the input channel count for conv and the input width for
    fc (fc layers use a 1x1 ``kernel``). A layer is dense when ``columns`` is
    None; otherwise ``weight`` is a matrix over the listed GEMM columns only.
    """

    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    in_channels: int = 0
    kernel: tuple = (1, 1)
    stride: int = 1
    pad: int = 0
    columns: np.ndarray | None = None
    size: int = 2

    @property
    def weighted(self):
        return self.kind in WEIGHTED

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def full_width(self):
        """Number of GEMM columns of the dense (uncompacted) layer."""
        return self.in_channels * self.kernel[0] * self.kernel[1]

    @property
    def width(self):
        return self.full_width if self.columns is None else len(self.columns)

    def matrix(self):
        """GEMM view of the weight: out x width (a view, not a copy)."""
        return self.weight.reshape(self.out_channels, -1)

    def column_channels(self):
        """Input channel index of each GEMM column."""
        cols = np.arange(self.full_width) if self.columns is None else self.columns
        return cols // (self.kernel[0] * self.kernel[1])


@dataclass
class Network:
    layers: list
    input_shape: tuple
    num_classes: int
    arch: str = "custom"
    masks: object = None
    _shapes: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self._shapes = None
        self.shapes()
        if not any(l.kind == "conv" for l in self.layers):
            raise ConfigError("a network needs at least one conv layer")
        last = self.layers[-1]
        if last.kind != "fc" or last.out_channels != self.num_classes:
            raise ConfigError("the last layer must be fc with one output per class")

    def shapes(self):
        """Per-layer input shapes (plus the final output shape at the end)."""
        if self._shapes is not None:
            return self._shapes
        shape = self.input_shape
        out = [shape]
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ShapeError(f"layer {i}: conv expects {layer.in_channels} channels, got {shape}")
                kh, kw = layer.kernel
                shape = (
                    layer.out_channels,
                    T.conv_output_size(shape[1], kh, layer.stride, layer.pad),
                    T.conv_output_size(shape[2], kw, layer.stride, layer.pad),
                )
            elif layer.kind == "fc":
                if len(shape) != 1 or shape[0] != layer.in_channels:
                    raise ShapeError(f"layer {i}: fc expects width {layer.in_channels}, got {shape}")
                shape = (layer.out_channels,)
            elif layer.kind == "maxpool":
                shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind != "relu":
                raise ConfigError(f"unknown layer kind {layer.kind!r}")
            if layer.weighted:
                if layer.bias is None or layer.bias.shape != (layer.out_channels,):
                    raise ShapeError(f"layer {i}: bias does not match {layer.out_channels} outputs")
                if layer.matrix().shape[1] != layer.width:
                    raise ShapeError(f"layer {i}: weight width does not match its columns")
            out.append(shape)
        self._shapes = out
        return out

    def weighted_indices(self):
        return [i for i, l in enumerate(self.layers) if l.weighted]

    def conv_indices(self):
        return [i for i, l in enumerate(self.layers) if l.kind == "conv"]

    def prunable_indices(self):
        """Layers the search assigns rates to: every conv layer."""
        return self.conv_indices()

    def output_hw(self, index):
        """Spatial size of a layer's output (1 x 1 for fc)."""
        shape = self.shapes()[index + 1]
        return (shape[1], shape[2]) if len(shape) == 3 else (1, 1)

    def consumer(self, index):
        """Index of the next weighted layer fed (through relu/pool/flatten) by ``index``."""
        for j in range(index + 1, len(self.layers)):
            if self.layers[j].weighted:
                return j
        return None

    def parameters(self):
        out = []
        for i in self.weighted_indices():
            out += [self.layers[i].weight, self.layers[i].bias]
        return out

    def with_parameters(self, params):
        net = self.clone()
        it = iter(params)
        for i in net.weighted_indices():
            net.layers[i].weight = np.array(next(it), dtype=np.float64)
            net.layers[i].bias = np.array(next(it), dtype=np.float64)
        return net

    def clone(self):
        return copy.deepcopy(self)

    def forward(self, x, params=None):
        """Logits for a batch ``x`` (N x C x H x W). ``params`` may supply
        tape-tracked tensors in ``parameters()`` order."""
        h = x if isinstance(x, T.Tensor) else T.Tensor(x)
        it = iter(params) if params is not None else None
        for layer in self.layers:
            if layer.weighted:
                w, b = (next(it), next(it)) if it is not None else (layer.weight, layer.bias)
                if layer.kind == "conv":
                    h = T.conv2d(h, w, b, layer.stride, layer.pad, kernel=layer.kernel, columns=layer.columns)
                else:
                    h = T.linear(h, w, b, columns=layer.columns)
            elif layer.kind == "relu":
                h = T.relu(h)
            elif layer.kind == "maxpool":
                h = T.maxpool2d(h, layer.size)
            elif layer.kind == "flatten":
                h = T.reshape(h, (h.shape[0], -1))
        return h

    def predict_logits(self, images, batch=500):
        chunks = [self.forward(images[s : s + batch]).data for s in range(0, len(images), batch)]
        return np.concatenate(chunks, axis=0)


# Layer plans: ("conv", out_channels) is a 3x3 stride-1 pad-1 convolution.
ARCHS = {
    "convnet-s": [("conv", 16), ("relu",), ("maxpool",), ("conv", 32), ("relu",), ("maxpool",),
                  ("conv", 32), ("relu",), ("flatten",), ("fc", 64), ("relu",)],
    "vgg-mini": [("conv", 16), ("relu",), ("conv", 16), ("relu",), ("maxpool",),
                 ("conv", 32), ("relu",), ("conv", 32), ("relu",), ("maxpool",),
                 ("conv", 64), ("relu",), ("conv", 64), ("relu",), ("maxpool",),
                 ("flatten",), ("fc", 64), ("relu",)],
}


def network_from_plan(plan, input_shape, num_classes, seed, arch="custom"):
    """He-initialised network from a layer plan; a classifier fc is appended."""
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers = []

    def weighted(kind, out, cin, kernel, pad):
        fan_in = cin * kernel[0] * kernel[1]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out, cin, *kernel) if kind == "conv" else (out, cin))
        return Layer(kind, weight=w, bias=np.zeros(out), in_channels=cin, kernel=kernel, pad=pad)

    for step in list(plan) + [("fc", num_classes)]:
        kind = step[0]
        if kind == "conv":
            layer = weighted("conv", step[1], shape[0], (3, 3), 1)
            shape = (step[1], shape[1], shape[2])
        elif kind == "fc":
            layer = weighted("fc", step[1], shape[0], (1, 1), 0)
            shape = (step[1],)
        elif kind == "maxpool":
            layer = Layer("maxpool", size=step[1] if len(step) > 1 else 2)
            shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
        elif kind == "flatten":
            layer = Layer("flatten")
            shape = (int(np.prod(shape)),)
        elif kind == "relu":
            layer = Layer("relu")
        else:
            raise ConfigError(f"unknown layer kind {kind!r} in plan")
        layers.append(layer)
    return Network(layers, tuple(input_shape), num_classes, arch=arch)


def build_network(arch, seed, input_shape=(1, 28, 28), num_classes=10):
    if arch not in ARCHS:
        raise ConfigError(f"unknown architecture {arch!r}; known: {', '.join(sorted(ARCHS))}")
    return network_from_plan(ARCHS[arch], input_shape, num_classes, seed, arch=arch)


def reinitialize(network, seed):
    """Fresh He-initialised weights on the same structure (masks kept)."""
    rng = np.random.default_rng(seed)
    net = network.clone()
    for i in net.weighted_indices():
        layer = net.layers[i]
        fan_in = layer.width
        if net.masks is not None and i in net.masks.layers:
            fan_in = max(1, int(net.masks.layers[i].columns.sum()))
        layer.weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=layer.weight.shape)
        layer.bias = np.zeros_like(layer.bias)
    if net.masks is not None:
        from .schemes import zero_masked

        zero_masked(net)
    return net
