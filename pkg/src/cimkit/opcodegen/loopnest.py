"""Virtual and physical mapping of MVM-anchored nodes.

The flow for one node is

    virtual_map -> tile -> extract_mvm -> annotate_memory

``virtual_map`` lays the weights out as a 2D (reduction x output) matrix and
wraps a single abstract matrix-vector product in a loop over output
vectors.  ``tile`` cuts the matrix into macro-group sized tiles, and
``extract_mvm`` replaces the abstract product with one MvmTile per tile plus
the int32 partial-sum additions across row tiles.  ``annotate_memory``
decides where the input transfer from global memory sits in the nest.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..archconfig import ArchConfig
from ..nnir.condense import CondensedNode
from ..nnir.graph import CompGraph, Operator, UnsupportedOperatorError, _pair


class LoweringError(ValueError):
    pass


@dataclass(frozen=True)
class Loop:
    var: str
    bound: int
    step: int = 1
    level: str = "local"


@dataclass(frozen=True)
class MvmTile:
    row_tile: int
    col_tile: int
    rows: tuple[int, int]
    cols: tuple[int, int]
    mg: int | None = None


@dataclass(frozen=True)
class MemMove:
    src: str
    dst: str
    nbytes: int
    level: str = "local"


@dataclass(frozen=True)
class VecOp:
    kind: str
    length: int
    dst: str = ""
    srcs: tuple[str, ...] = ()


@dataclass(frozen=True)
class Send:
    peer: int
    nbytes: int
    buffer: str


@dataclass(frozen=True)
class Recv:
    peer: int
    nbytes: int
    buffer: str


@dataclass
class LoopNest:
    loops: list[Loop]
    body: list
    prologue: list = field(default_factory=list)
    epilogue: list = field(default_factory=list)
    # "input": where the anchor input lives while the loop runs
    annotations: dict[str, str] = field(default_factory=dict)

    def count(self, kind) -> int:
        return sum(isinstance(op, kind) for op in self.body)

    def text(self) -> str:
        lines = [f"{op}" for op in self.prologue]
        indent = ""
        for lp in self.loops:
            lines.append(f"{indent}for {lp.var} in 0..{lp.bound} step {lp.step}  @{lp.level}")
            indent += "  "
        lines += [f"{indent}{op}" for op in self.body]
        lines += [f"{op}" for op in self.epilogue]
        if self.annotations:
            lines.append("# " + ", ".join(f"{k}={v}" for k, v in sorted(self.annotations.items())))
        return "\n".join(lines)


@dataclass(frozen=True)
class VirtualLayout:
    rows: int
    cols: int
    # "im2col": patch gathered per output pixel; "direct": input rows are contiguous;
    # "block_diagonal": depthwise, one (ky, kx) block of rows per channel
    mode: str
    vectors: int
    op_kind: str = ""

    def weight_matrix(self, op: Operator) -> np.ndarray:
        """The (rows, cols) int8 matrix stored in the macros."""
        w = op.weights
        if op.kind == "Conv2D":
            return w.reshape(self.rows, self.cols)
        if op.kind == "DepthwiseConv2D":
            kh, kw, c = w.shape
            m = np.zeros((self.rows, self.cols), dtype=np.int8)
            blk = kh * kw
            for ch in range(c):
                m[ch * blk:(ch + 1) * blk, ch] = w[:, :, ch].reshape(-1)
            return m
        if op.kind in ("FullyConnected", "MatMul"):
            return w.reshape(self.rows, self.cols)
        raise UnsupportedOperatorError(f"{op.kind} has no weight layout")


@dataclass(frozen=True)
class Tile:
    row_tile: int
    col_tile: int
    rows: tuple[int, int]
    cols: tuple[int, int]
    mg: int                      # MG index relative to the node's first MG on a core

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows[1] - self.rows[0], self.cols[1] - self.cols[0]


@dataclass(frozen=True)
class MacroTile:
    row_tile: int
    col_tile: int
    rows: tuple[int, int]
    cols: tuple[int, int]
    mg: int
    macro: int                   # macro index inside its MG


@dataclass
class PhysicalTiling:
    grid: tuple[int, int]        # (row tiles, column groups)
    tiles: list[Tile]
    cores: list[int]             # core of each duplicate copy
    macro_rows: int
    mg_cols: int
    macro_cols: int = 64

    @property
    def mgs_per_copy(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def macro_grid(self) -> tuple[int, int]:
        """(row tiles, column tiles) at single-macro granularity."""
        cols = max((t.cols[1] for t in self.tiles), default=0)
        return self.grid[0], -(-cols // self.macro_cols)

    def macro_tiles(self) -> list[MacroTile]:
        """Macro-sized pieces of every MG tile; column macros fill an MG first."""
        out = []
        for t in self.tiles:
            for m, lo in enumerate(range(t.cols[0], t.cols[1], self.macro_cols)):
                hi = min(t.cols[1], lo + self.macro_cols)
                out.append(MacroTile(t.row_tile, lo // self.macro_cols, t.rows, (lo, hi), t.mg, m))
        return out

    def row_mask(self, row_tile: int, base: int) -> int:
        """MG activation mask for one row tile (all its column groups)."""
        c = self.grid[1]
        first = base + row_tile * c
        return ((1 << c) - 1) << first

    def images(self, matrix: np.ndarray) -> list[bytes]:
        """Per-tile weight images: tile rows x tile cols, row-major."""
        out = []
        for t in self.tiles:
            out.append(np.ascontiguousarray(
                matrix[t.rows[0]:t.rows[1], t.cols[0]:t.cols[1]]).astype(np.int8).tobytes())
        return out


def anchor_mode(op: Operator) -> str:
    if op.kind == "Conv2D":
        kh, kw = _pair(op.attrs.get("kernel", op.weights.shape[:2]))
        if kh == kw == 1 and int(op.attrs.get("stride", 1)) == 1 and int(op.attrs.get("padding", 0)) == 0:
            return "direct"
        return "im2col"
    if op.kind == "DepthwiseConv2D":
        return "block_diagonal"
    if op.kind in ("FullyConnected", "MatMul"):
        return "direct"
    raise UnsupportedOperatorError(f"{op.kind} is not MVM-based")


def virtual_map(n: CondensedNode, g: CompGraph | None = None) -> tuple[VirtualLayout, LoopNest]:
    """Constraint-free 2D layout of a node's weights and its vector loop."""
    if n.kind not in ("Conv2D", "DepthwiseConv2D", "FullyConnected", "MatMul"):
        raise UnsupportedOperatorError(f"node {n.id}: {n.kind} is not MVM-based")
    if g is not None:
        mode = anchor_mode(g.operators[n.anchor])
    else:
        mode = {"Conv2D": "im2col", "DepthwiseConv2D": "block_diagonal"}.get(n.kind, "direct")
    layout = VirtualLayout(n.rows, n.cols, mode, n.vectors, n.kind)
    body = []
    if mode != "direct":
        body.append(VecOp("im2col", n.rows, "col", ("in",)))
    body.append(MvmTile(0, 0, (0, n.rows), (0, n.cols)))
    return layout, LoopNest([Loop("v", n.vectors)], body)


def tile(v: VirtualLayout, cores: list[int], cfg: ArchConfig, mg_count: int | None = None) -> PhysicalTiling:
    """Cut the layout into MG tiles: column groups fastest, then row tiles."""
    mr, mc = cfg.unit.macro_rows, cfg.unit.mg_cols
    rt, ct = -(-v.rows // mr), -(-v.cols // mc)
    limit = cfg.core.mg_count if mg_count is None else mg_count
    if rt * ct > limit:
        raise LoweringError(f"layout {v.rows}x{v.cols} needs {rt * ct} MGs, a core has {limit}")
    tiles = []
    for r in range(rt):
        for c in range(ct):
            tiles.append(Tile(r, c, (r * mr, min(v.rows, (r + 1) * mr)),
                              (c * mc, min(v.cols, (c + 1) * mc)), r * ct + c))
    return PhysicalTiling((rt, ct), tiles, list(cores), mr, mc, cfg.unit.macro_cols)


def extract_mvm(nest: LoopNest, tiling: PhysicalTiling) -> LoopNest:
    """Replace the abstract product by per-tile MVMs and partial-sum reductions.

    Column tiles are innermost so one input slice feeds every column group
    before the next row tile is touched.
    """
    body = []
    for op in nest.body:
        if not isinstance(op, MvmTile):
            body.append(op)
            continue
        for t in tiling.tiles:
            body.append(MvmTile(t.row_tile, t.col_tile, t.rows, t.cols, t.mg))
        for t in tiling.tiles:
            if t.row_tile > 0:
                body.append(VecOp("add_i32", t.shape[1], "acc", ("acc", "partial")))
        ncols = max((t.cols[1] for t in tiling.tiles), default=0)
        body.append(VecOp("quant", ncols, "out", ("acc",)))
    return LoopNest(list(nest.loops), body, list(nest.prologue), list(nest.epilogue), dict(nest.annotations))


def annotate_memory(nest: LoopNest, cfg: ArchConfig, in_bytes: int, vector_bytes: int,
                    from_global: bool, budget: int | None = None) -> LoopNest:
    """Place the global-to-local input transfer at the outermost level that fits.

    ``in_bytes`` is the whole anchor input, ``vector_bytes`` the slice one
    loop iteration consumes.  Inputs already resident in local memory need
    no transfer.
    """
    budget = cfg.core.local_mem_bytes // cfg.core.local_mem_segments if budget is None else budget
    out = replace(nest, body=list(nest.body), prologue=list(nest.prologue),
                  annotations=dict(nest.annotations))
    if not from_global:
        out.annotations["input"] = "resident"
        return out
    if any(lp.bound == 0 for lp in nest.loops):
        out.annotations["input"] = "none"
        return out
    if in_bytes <= budget:
        out.prologue.append(MemMove("global:in", "local:in", in_bytes, "outer"))
        out.annotations["input"] = "hoisted"
        return out
    if vector_bytes > budget:
        raise LoweringError(f"input slice of {vector_bytes} bytes exceeds the {budget}-byte local segment")
    if out.body and isinstance(out.body[0], VecOp) and out.body[0].kind == "im2col":
        # gather the patch straight from global memory each iteration
        out.annotations["input"] = "streamed"
    else:
        out.body.insert(0, MemMove("global:in", "local:in", vector_bytes, "inner"))
        out.annotations["input"] = "streamed"
    return out
