"""Direct nested-loop int8 executor used as the functional oracle."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from ..nnir.graph import CompGraph, Operator, _pair, requantize


def _pad_hwc(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((pad, pad), (pad, pad), (0, 0)))


def conv2d_acc(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    kh, kw, _, cout = w.shape
    xp = _pad_hwc(x.astype(np.int64), pad)
    ho = (xp.shape[0] - kh) // stride + 1
    wo = (xp.shape[1] - kw) // stride + 1
    w64 = w.astype(np.int64)
    acc = np.zeros((ho, wo, cout), dtype=np.int64)
    for oy in range(ho):
        for ox in range(wo):
            patch = xp[oy * stride:oy * stride + kh, ox * stride:ox * stride + kw, :]
            acc[oy, ox] = np.tensordot(patch, w64, axes=3)
    return acc


def depthwise_acc(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    kh, kw, c = w.shape
    xp = _pad_hwc(x.astype(np.int64), pad)
    ho = (xp.shape[0] - kh) // stride + 1
    wo = (xp.shape[1] - kw) // stride + 1
    w64 = w.astype(np.int64)
    acc = np.zeros((ho, wo, c), dtype=np.int64)
    for oy in range(ho):
        for ox in range(wo):
            patch = xp[oy * stride:oy * stride + kh, ox * stride:ox * stride + kw, :]
            acc[oy, ox] = (patch * w64).sum(axis=(0, 1))
    return acc


def pool(x: np.ndarray, mode: str, kh: int, kw: int, stride: int) -> np.ndarray:
    h, w, c = x.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((ho, wo, c), dtype=np.int8)
    n = kh * kw
    for oy in range(ho):
        for ox in range(wo):
            win = x[oy * stride:oy * stride + kh, ox * stride:ox * stride + kw, :].astype(np.int64)
            if mode == "max":
                out[oy, ox] = win.max(axis=(0, 1))
            else:
                s = win.sum(axis=(0, 1))
                out[oy, ox] = (2 * s + n) // (2 * n)
    return out


def accumulate(op: Operator, x: np.ndarray) -> np.ndarray:
    """int32-range accumulator of an MVM operator (before requantization)."""
    a = op.attrs
    if op.kind == "Conv2D":
        return conv2d_acc(x, op.weights, int(a.get("stride", 1)), int(a.get("padding", 0)))
    if op.kind == "DepthwiseConv2D":
        return depthwise_acc(x, op.weights, int(a.get("stride", 1)), int(a.get("padding", 0)))
    if op.kind == "FullyConnected":
        return x.reshape(-1).astype(np.int64) @ op.weights.astype(np.int64)
    if op.kind == "MatMul":
        return x.astype(np.int64) @ op.weights.astype(np.int64)
    raise ValueError(f"{op.kind} is not MVM-based")


def execute_op(op: Operator, args: list[np.ndarray]) -> np.ndarray:
    if op.is_mvm:
        return requantize(accumulate(op, args[0]), op.quant.multiplier, op.quant.shift)
    if op.kind == "Relu":
        return np.maximum(args[0], 0).astype(np.int8)
    if op.kind == "Add":
        s = args[0].astype(np.int16) + args[1].astype(np.int16)
        return np.clip(s, -128, 127).astype(np.int8)
    if op.kind == "Quantize":
        return requantize(args[0], op.quant.multiplier, op.quant.shift)
    if op.kind == "Pool":
        kh, kw = _pair(op.attrs["kernel"])
        return pool(args[0], op.attrs["mode"], kh, kw, int(op.attrs.get("stride", kh)))
    raise ValueError(f"unsupported operator kind {op.kind}")


def reference_execute(g: CompGraph, inputs: Mapping[str, np.ndarray],
                      keep_all: bool = False) -> dict:
    """Run one inference; returns {operator id: int8 tensor} for the graph outputs."""
    values: dict = {}
    for name, shape in g.inputs.items():
        arr = np.asarray(inputs[name])
        if arr.shape != tuple(shape):
            raise ValueError(f"input {name!r}: expected shape {shape}, got {arr.shape}")
        values[name] = arr.astype(np.int8)
    for i in g.topo_order():
        op = g.operators[i]
        values[i] = execute_op(op, [values[p] for p in g.producers(i)])
    if keep_all:
        return values
    return {o: values[o] for o in g.outputs}
