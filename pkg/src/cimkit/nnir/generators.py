"""Synthetic benchmark graphs that mimic the layer patterns of ResNet18,
VGG19, MobileNetV2 and EfficientNetB0 at desk scale.

Weights are seeded pseudo-random int8 values.  Each MVM operator's
requantization is calibrated on a seeded random input batch so
activations stay inside the int8 range instead of saturating.
"""

from __future__ import annotations

import math

import numpy as np

from ..sim.reference import accumulate, execute_op
from .graph import CompGraph, Edge, ModelError, Operator, Quant, graph_to_doc, validate_graph

GENERATORS = ("resnet_like", "vgg_like", "mobilenet_like", "efficientnet_like")
CALIB_BATCH = 4
TARGET_ABS = 48


class _Builder:
    def __init__(self, name: str, input_shape: tuple[int, ...], seed: int):
        self.name = name
        self.rng = np.random.default_rng(seed)
        self.ops: list[Operator] = []
        self.edges: list[Edge] = []
        self.shapes: dict = {"x": tuple(input_shape)}
        calib = self.rng.integers(-128, 128, size=(CALIB_BATCH, *input_shape))
        self.values: dict = {"x": [c.astype(np.int8) for c in calib]}

    def _emit(self, kind, srcs, attrs=None, weights=None, quant=None) -> int:
        op = Operator(len(self.ops), kind, attrs or {}, weights, quant)
        for s in srcs:
            self.edges.append(Edge(s, op.id, self.shapes[s]))
        if op.is_mvm:
            accs = [accumulate(op, v) for v in self.values[srcs[0]]]
            op.quant = _calibrate(accs)
        outs = [execute_op(op, [self.values[s][b] for s in srcs]) for b in range(CALIB_BATCH)]
        op.out_shape = outs[0].shape
        self.ops.append(op)
        self.shapes[op.id] = tuple(outs[0].shape)
        self.values[op.id] = outs
        return op.id

    def _w(self, shape, fan_in):
        bound = max(4, int(127 / math.sqrt(max(fan_in, 1)) * 4))
        bound = min(bound, 127)
        return self.rng.integers(-bound, bound + 1, size=shape).astype(np.int8)

    def conv(self, src, cout, k=3, stride=1, pad=None):
        cin = self.shapes[src][2]
        pad = k // 2 if pad is None else pad
        w = self._w((k, k, cin, cout), k * k * cin)
        return self._emit("Conv2D", [src], {"kernel": [k, k], "stride": stride, "padding": pad,
                                            "in_channels": cin, "out_channels": cout}, w)

    def dwconv(self, src, k=3, stride=1):
        c = self.shapes[src][2]
        w = self._w((k, k, c), k * k)
        return self._emit("DepthwiseConv2D", [src], {"kernel": [k, k], "stride": stride,
                                                     "padding": k // 2, "channels": c}, w)

    def fc(self, src, n_out):
        n_in = int(np.prod(self.shapes[src]))
        w = self._w((n_in, n_out), n_in)
        return self._emit("FullyConnected", [src], {"in_features": n_in, "out_features": n_out}, w)

    def relu(self, src):
        return self._emit("Relu", [src])

    def add(self, a, b):
        return self._emit("Add", [a, b])

    def pool(self, src, mode, k, stride=None):
        return self._emit("Pool", [src], {"mode": mode, "kernel": [k, k], "stride": stride or k})

    def build(self) -> CompGraph:
        outputs = [op.id for op in self.ops if not any(e.src == op.id and isinstance(e.src, int)
                                                       for e in self.edges)]
        g = CompGraph(self.ops, self.edges, {"x": self.shapes["x"]}, outputs, self.name)
        return validate_graph(g)


def _calibrate(accs: list[np.ndarray]) -> Quant:
    flat = np.abs(np.concatenate([a.reshape(-1) for a in accs]))
    peak = max(1, int(np.percentile(flat, 99.5)))
    base = max(0, math.ceil(math.log2(peak)))
    shift = min(31, base + 7)
    mult = max(1, min(65535, round(TARGET_ABS * (1 << shift) / peak)))
    return Quant(mult, shift, 0)


def _width(base: int, scale: float) -> int:
    return max(4, int(round(base * scale / 4)) * 4)


def resnet_like(scale: float = 0.25, seed: int = 0, resolution: int = 16) -> CompGraph:
    b = _Builder("resnet_like", (resolution, resolution, 3), seed)
    c1, c2, c3 = _width(64, scale), _width(128, scale), _width(256, scale)
    x = b.relu(b.conv("x", c1))

    def block(x, cout, stride):
        y = b.relu(b.conv(x, cout, 3, stride))
        y = b.conv(y, cout, 3, 1)
        short = x if stride == 1 and b.shapes[x][2] == cout else b.conv(x, cout, 1, stride, 0)
        return b.relu(b.add(y, short))

    for cout, stride in ((c1, 1), (c1, 1), (c2, 2), (c2, 1), (c3, 2), (c3, 1)):
        x = block(x, cout, stride)
    h = b.shapes[x][0]
    x = b.pool(x, "avg", h)
    b.fc(x, 10)
    return b.build()


def vgg_like(scale: float = 0.25, seed: int = 0, resolution: int = 16) -> CompGraph:
    b = _Builder("vgg_like", (resolution, resolution, 3), seed)
    x = "x"
    for base, reps in ((64, 2), (128, 2), (256, 3)):
        for _ in range(reps):
            x = b.relu(b.conv(x, _width(base, scale)))
        x = b.pool(x, "max", 2)
    x = b.relu(b.fc(x, _width(256, scale)))
    b.fc(x, 10)
    return b.build()


def _inverted_residual(b: _Builder, x, cout: int, stride: int, expand: int, k: int = 3):
    cin = b.shapes[x][2]
    y = x
    if expand != 1:
        y = b.relu(b.conv(y, cin * expand, 1, 1, 0))
    y = b.relu(b.dwconv(y, k, stride))
    y = b.conv(y, cout, 1, 1, 0)
    if stride == 1 and cin == cout:
        y = b.add(y, x)
    return y


def mobilenet_like(scale: float = 0.25, seed: int = 0, resolution: int = 16) -> CompGraph:
    b = _Builder("mobilenet_like", (resolution, resolution, 3), seed)
    x = b.relu(b.conv("x", _width(64, scale)))
    c1, c2, c3 = _width(32, scale), _width(48, scale), _width(64, scale)
    for cout, stride, t in ((c1, 1, 1), (c2, 2, 4), (c2, 1, 4), (c3, 2, 4), (c3, 1, 4)):
        x = _inverted_residual(b, x, cout, stride, t)
    x = b.relu(b.conv(x, _width(256, scale), 1, 1, 0))
    x = b.pool(x, "avg", b.shapes[x][0])
    b.fc(x, 10)
    return b.build()


def efficientnet_like(scale: float = 0.25, seed: int = 0, resolution: int = 16) -> CompGraph:
    b = _Builder("efficientnet_like", (resolution, resolution, 3), seed)
    x = b.relu(b.conv("x", _width(64, scale)))
    c1, c2, c3, c4 = _width(32, scale), _width(48, scale), _width(64, scale), _width(96, scale)
    for cout, stride, t, k in ((c1, 1, 1, 3), (c2, 2, 6, 3), (c2, 1, 6, 3),
                               (c3, 2, 6, 5), (c3, 1, 6, 5), (c4, 1, 6, 3)):
        x = _inverted_residual(b, x, cout, stride, t, k)
    x = b.relu(b.conv(x, _width(256, scale), 1, 1, 0))
    x = b.pool(x, "avg", b.shapes[x][0])
    b.fc(x, 10)
    return b.build()


def mlp(hidden: int = 128, seed: int = 0, n_in: int = 784, n_out: int = 10) -> CompGraph:
    b = _Builder("mlp", (n_in,), seed)
    x = b.relu(b.fc("x", hidden))
    b.fc(x, n_out)
    return b.build()


_TABLE = {
    "resnet_like": resnet_like,
    "vgg_like": vgg_like,
    "mobilenet_like": mobilenet_like,
    "efficientnet_like": efficientnet_like,
}


def generate(name: str, scale: float = 0.25, seed: int = 0) -> CompGraph:
    if name not in _TABLE:
        raise ModelError(f"unknown generator {name!r}; choose from {', '.join(GENERATORS)}")
    if not 0 < scale <= 1:
        raise ModelError("scale must be in (0, 1]")
    return _TABLE[name](scale=scale, seed=seed)


def genmodel(name: str, scale: float = 0.25, seed: int = 0,
             sidecar_name: str | None = None) -> tuple[dict, bytes]:
    """Model document (and sidecar weight blob) for a named generator."""
    return graph_to_doc(generate(name, scale, seed), sidecar_name)
