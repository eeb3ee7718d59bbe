"""Quantized operator graphs: JSON import, validation and shape inference.

All activations are int8 tensors in HWC (or flat) layout.  MVM-based
operators accumulate in int32 and requantize with an integer multiplier
and a round-half-up arithmetic right shift before saturating to int8.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np

MVM_KINDS = frozenset({"Conv2D", "DepthwiseConv2D", "FullyConnected", "MatMul"})
OTHER_KINDS = frozenset({"Pool", "Relu", "Add", "Quantize"})
KINDS = MVM_KINDS | OTHER_KINDS

TensorRef = Union[int, str]  # producing operator id, or graph input name


class ModelError(ValueError):
    pass


class CycleError(ModelError):
    pass


class ShapeMismatchError(ModelError):
    def __init__(self, edge: tuple, message: str):
        super().__init__(f"edge {edge[0]}->{edge[1]}: {message}")
        self.edge = edge


class UnsupportedOperatorError(ModelError):
    pass


class DtypeError(ModelError):
    pass


@dataclass(frozen=True)
class Quant:
    multiplier: int = 1
    shift: int = 0
    zero_point: int = 0


@dataclass
class Operator:
    id: int
    kind: str
    attrs: dict[str, Any] = field(default_factory=dict)
    weights: np.ndarray | None = None
    quant: Quant | None = None
    out_shape: tuple[int, ...] = ()

    @property
    def is_mvm(self) -> bool:
        return self.kind in MVM_KINDS


@dataclass(frozen=True)
class Edge:
    src: TensorRef
    dst: int
    shape: tuple[int, ...]


@dataclass
class CompGraph:
    operators: list[Operator]
    edges: list[Edge]
    inputs: dict[str, tuple[int, ...]]
    outputs: list[int]
    name: str = "model"

    def producers(self, op_id: int) -> list[TensorRef]:
        return [e.src for e in self.edges if e.dst == op_id]

    def consumers(self, src: TensorRef) -> list[int]:
        return [e.dst for e in self.edges if e.src == src and type(e.src) is type(src)]

    def tensor_shape(self, ref: TensorRef) -> tuple[int, ...]:
        if isinstance(ref, str):
            return self.inputs[ref]
        return self.operators[ref].out_shape

    def topo_order(self) -> list[int]:
        return topo_sort(self)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ModelError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def topo_sort(g: CompGraph) -> list[int]:
    """Kahn's algorithm, smallest id first among ready operators."""
    import heapq

    indeg = {op.id: 0 for op in g.operators}
    succ: dict[int, list[int]] = {op.id: [] for op in g.operators}
    for e in g.edges:
        if isinstance(e.src, int):
            indeg[e.dst] += 1
            succ[e.src].append(e.dst)
    ready = [i for i, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(ready, j)
    if len(order) != len(g.operators):
        stuck = sorted(i for i, d in indeg.items() if d > 0)
        raise CycleError(f"cycle detected among operators {stuck}")
    return order


def _positive(op: Operator, name: str, value: int) -> int:
    if int(value) < 1:
        raise ModelError(f"operator {op.id}: attribute {name} must be positive")
    return int(value)


def infer_output_shape(op: Operator, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    k, a = op.kind, op.attrs
    arity = 2 if k == "Add" else 1
    if len(in_shapes) != arity:
        raise ModelError(f"operator {op.id} ({k}) takes {arity} input(s), got {len(in_shapes)}")
    x = in_shapes[0]
    if k == "Conv2D":
        kh, kw = _pair(a["kernel"])
        stride = _positive(op, "stride", a.get("stride", 1))
        pad = int(a.get("padding", 0))
        if len(x) != 3:
            raise ModelError(f"operator {op.id}: Conv2D input must be HWC, got {x}")
        cin, cout = op.weights.shape[2], op.weights.shape[3]
        if op.weights.shape[:2] != (kh, kw) or x[2] != cin:
            raise ModelError(f"operator {op.id}: weight shape {op.weights.shape} does not match "
                             f"kernel {kh}x{kw} / input channels {x[2]}")
        ho, wo = conv_out_hw(x[0], x[1], kh, kw, stride, pad)
        if ho < 1 or wo < 1:
            raise ModelError(f"operator {op.id}: empty convolution output")
        return (ho, wo, cout)
    if k == "DepthwiseConv2D":
        kh, kw = _pair(a["kernel"])
        stride = _positive(op, "stride", a.get("stride", 1))
        pad = int(a.get("padding", 0))
        if len(x) != 3 or op.weights.shape != (kh, kw, x[2]):
            raise ModelError(f"operator {op.id}: depthwise weight {op.weights.shape} vs input {x}")
        ho, wo = conv_out_hw(x[0], x[1], kh, kw, stride, pad)
        if ho < 1 or wo < 1:
            raise ModelError(f"operator {op.id}: empty convolution output")
        return (ho, wo, x[2])
    if k == "FullyConnected":
        n_in, n_out = op.weights.shape
        if int(np.prod(x)) != n_in:
            raise ModelError(f"operator {op.id}: FC expects {n_in} inputs, got shape {x}")
        return (n_out,)
    if k == "MatMul":
        kdim, n = op.weights.shape
        if len(x) != 2 or x[1] != kdim:
            raise ModelError(f"operator {op.id}: MatMul input {x} incompatible with weight {op.weights.shape}")
        return (x[0], n)
    if k == "Pool":
        if a.get("mode") not in ("max", "avg"):
            raise ModelError(f"operator {op.id}: pool mode must be 'max' or 'avg'")
        kh, kw = _pair(a["kernel"])
        stride = _positive(op, "stride", a.get("stride", kh))
        if len(x) != 3:
            raise ModelError(f"operator {op.id}: Pool input must be HWC")
        ho, wo = conv_out_hw(x[0], x[1], kh, kw, stride, 0)
        if ho < 1 or wo < 1:
            raise ModelError(f"operator {op.id}: pool window larger than input")
        return (ho, wo, x[2])
    if k == "Add":
        if in_shapes[0] != in_shapes[1]:
            raise ModelError(f"operator {op.id}: Add operands {in_shapes[0]} and {in_shapes[1]} differ")
        return x
    if k in ("Relu", "Quantize"):
        return x
    raise UnsupportedOperatorError(f"operator {op.id}: unsupported kind {k!r}")


def infer_shapes(g: CompGraph) -> CompGraph:
    """Fill ``out_shape`` for every operator and check edge shapes.  Idempotent."""
    order = topo_sort(g)
    for i in order:
        op = g.operators[i]
        ins = [g.tensor_shape(src) for src in g.producers(i)]
        op.out_shape = tuple(int(d) for d in infer_output_shape(op, ins))
    for e in g.edges:
        actual = g.tensor_shape(e.src)
        if tuple(e.shape) != tuple(actual):
            raise ShapeMismatchError((e.src, e.dst), f"declared shape {tuple(e.shape)} but producer "
                                     f"yields {tuple(actual)}")
    return g


def validate_graph(g: CompGraph) -> CompGraph:
    for idx, op in enumerate(g.operators):
        if op.id != idx:
            raise ModelError("operator ids must be 0..n-1 in order")
        if op.kind not in KINDS:
            raise UnsupportedOperatorError(f"operator {op.id}: unsupported kind {op.kind!r}")
        if op.is_mvm:
            if op.weights is None:
                raise ModelError(f"operator {op.id}: {op.kind} requires weights")
            if op.weights.dtype != np.int8:
                raise DtypeError(f"operator {op.id}: weights must be int8")
            q = op.quant or Quant()
            op.quant = q
        elif op.weights is not None:
            raise ModelError(f"operator {op.id}: {op.kind} must not carry weights")
        if op.kind == "Quantize":
            op.quant = op.quant or Quant(int(op.attrs.get("multiplier", 1)), int(op.attrs.get("shift", 0)))
        if op.quant is not None:
            q = op.quant
            if q.zero_point != 0:
                raise DtypeError(f"operator {op.id}: only symmetric int8 (zero_point 0) is supported")
            if not 1 <= q.multiplier < (1 << 16) or not 0 <= q.shift <= 31:
                raise ModelError(f"operator {op.id}: quant multiplier must be in [1, 65535] "
                                 f"and shift in [0, 31]")
    ids = {op.id for op in g.operators}
    for e in g.edges:
        if isinstance(e.src, str):
            if e.src not in g.inputs:
                raise ModelError(f"edge source {e.src!r} is not a graph input")
        elif e.src not in ids:
            raise ModelError(f"edge source {e.src} is not an operator")
        if e.dst not in ids:
            raise ModelError(f"edge destination {e.dst} is not an operator")
    for name in g.outputs:
        if name not in ids:
            raise ModelError(f"graph output {name} is not an operator")
    return infer_shapes(g)


# -- JSON document ------------------------------------------------------------

def _load_weights(spec: dict, blob: bytes | None, shape: tuple[int, ...], op_id: int) -> np.ndarray:
    ref = spec.get("weights_ref")
    if ref is None:
        raise ModelError(f"operator {op_id}: MVM operator needs weights_ref")
    if spec.get("weight_dtype", "int8") != "int8":
        raise DtypeError(f"operator {op_id}: weights must be int8")
    count = int(np.prod(shape))
    if "b64" in ref:
        raw = base64.b64decode(ref["b64"])
    else:
        if blob is None:
            raise ModelError(f"operator {op_id}: weights_ref points into a sidecar but none was given")
        off, length = int(ref["offset"]), int(ref["length"])
        raw = blob[off:off + length]
    if len(raw) != count:
        raise ModelError(f"operator {op_id}: expected {count} weight bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.int8).reshape(shape).copy()


def graph_from_doc(doc: dict, blob: bytes | None = None) -> CompGraph:
    inputs = {}
    for spec in doc.get("inputs", []):
        if spec.get("dtype", "int8") != "int8":
            raise DtypeError(f"input {spec['name']!r}: only int8 tensors are supported")
        inputs[spec["name"]] = tuple(int(d) for d in spec["shape"])
    ops = []
    for spec in sorted(doc.get("operators", []), key=lambda s: int(s["id"])):
        kind = spec["kind"]
        if kind not in KINDS:
            raise UnsupportedOperatorError(f"operator {spec['id']}: unsupported kind {kind!r}")
        if spec.get("dtype", "int8") != "int8":
            raise DtypeError(f"operator {spec['id']}: only int8 tensors are supported")
        weights = None
        if kind in MVM_KINDS:
            weights = _load_weights(spec, blob, tuple(int(d) for d in spec["weight_shape"]), spec["id"])
        q = spec.get("quant")
        quant = Quant(int(q.get("multiplier", 1)), int(q.get("shift", 0)), int(q.get("zero_point", 0))) \
            if q is not None else None
        ops.append(Operator(int(spec["id"]), kind, dict(spec.get("attrs", {})), weights, quant))
    edges = [Edge(e["src"] if isinstance(e["src"], str) else int(e["src"]), int(e["dst"]),
                  tuple(int(d) for d in e["shape"])) for e in doc.get("edges", [])]
    outputs = doc.get("outputs")
    g = CompGraph(ops, edges, inputs, [], doc.get("name", "model"))
    if outputs is None:
        outputs = [op.id for op in ops if not g.consumers(op.id)]
    g.outputs = [int(o) for o in outputs]
    return validate_graph(g)


def import_model(path: str | Path) -> CompGraph:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"malformed model document: {exc}") from exc
    blob = None
    sidecar = doc.get("weights_file")
    if sidecar:
        blob = (path.parent / sidecar).read_bytes()
    elif path.with_suffix(".bin").exists():
        blob = path.with_suffix(".bin").read_bytes()
    return graph_from_doc(doc, blob)


def graph_to_doc(g: CompGraph, sidecar_name: str | None = None) -> tuple[dict, bytes]:
    """Serialize to (document, weight blob).  Without a sidecar name weights are inlined."""
    blob = bytearray()
    ops = []
    for op in g.operators:
        spec: dict[str, Any] = {"id": op.id, "kind": op.kind, "attrs": op.attrs}
        if op.weights is not None:
            raw = op.weights.astype(np.int8).tobytes()
            spec["weight_shape"] = list(op.weights.shape)
            if sidecar_name is None:
                spec["weights_ref"] = {"b64": base64.b64encode(raw).decode()}
            else:
                spec["weights_ref"] = {"offset": len(blob), "length": len(raw)}
                blob += raw
        if op.quant is not None and op.kind != "Quantize":
            spec["quant"] = {"multiplier": op.quant.multiplier, "shift": op.quant.shift,
                             "zero_point": op.quant.zero_point}
        ops.append(spec)
    doc = {
        "name": g.name,
        "inputs": [{"name": n, "shape": list(s), "dtype": "int8"} for n, s in g.inputs.items()],
        "operators": ops,
        "edges": [{"src": e.src, "dst": e.dst, "shape": list(e.shape)} for e in g.edges],
        "outputs": list(g.outputs),
    }
    if sidecar_name is not None:
        doc["weights_file"] = sidecar_name
    return doc, bytes(blob)


# -- integer arithmetic shared by the operator definitions ---------------------

def requantize(acc: np.ndarray, multiplier: int, shift: int) -> np.ndarray:
    v = acc.astype(np.int64) * int(multiplier)
    if shift > 0:
        v = (v + (1 << (shift - 1))) >> shift
    return np.clip(v, -128, 127).astype(np.int8)


def mac_count(op: Operator, in_shape: tuple[int, ...]) -> int:
    if op.kind == "Conv2D":
        kh, kw, cin, cout = op.weights.shape
        ho, wo, _ = op.out_shape
        return kh * kw * cin * cout * ho * wo
    if op.kind == "DepthwiseConv2D":
        kh, kw, c = op.weights.shape
        ho, wo, _ = op.out_shape
        return kh * kw * c * ho * wo
    if op.kind == "FullyConnected":
        n_in, n_out = op.weights.shape
        return n_in * n_out
    if op.kind == "MatMul":
        kdim, n = op.weights.shape
        return in_shape[0] * kdim * n
    return 0


def mvm_geometry(op: Operator) -> tuple[int, int, int]:
    """(rows, cols, vectors) of the 2D weight layout an MVM operator maps to."""
    if op.kind == "Conv2D":
        kh, kw, cin, cout = op.weights.shape
        return kh * kw * cin, cout, op.out_shape[0] * op.out_shape[1]
    if op.kind == "DepthwiseConv2D":
        kh, kw, c = op.weights.shape
        return kh * kw * c, c, op.out_shape[0] * op.out_shape[1]
    if op.kind == "FullyConnected":
        n_in, n_out = op.weights.shape
        return n_in, n_out, 1
    if op.kind == "MatMul":
        kdim, n = op.weights.shape
        return kdim, n, op.out_shape[0]
    raise UnsupportedOperatorError(f"operator {op.id}: {op.kind} is not MVM-based")


def tensor_bytes(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape)) if shape else 1
