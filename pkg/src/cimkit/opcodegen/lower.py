"""Lowering of a partitioned condensed graph to per-core instruction streams.

Layout of one program:

* global memory: per-node weight images (tile by tile), one slot per graph
  input and inference, one slot per stage-crossing or graph-output tensor
  and inference;
* local memory of a core: segment 0 holds buffers that outlive one work
  item (same-core producer outputs, received messages); segment 1 is item
  scratch and weight staging; the top ``SPILL_BYTES`` are register spills.

Each stage runs a weight prologue and then its work items ``(b, node)``
sorted by inference and topological position, which keeps every receive
behind the send it waits for.  Stages are separated by a SYNC over all
participating cores.
"""

from __future__ import annotations

from dataclasses import dataclass, field


from ..archconfig import ArchConfig
from ..isa.program import GLOBAL_BASE, Program, Section
from ..isa.table import DEFAULT_ISA, ISA, SReg
from ..nnir.condense import CondensedGraph, CondensedNode
from ..nnir.graph import TensorRef, _pair, tensor_bytes
from ..partition import PartitionSolution, Stage
from .coreir import (SPILL_BASE_REG, Phys, V, IRBuilder, IRInstr, assemble_ir,
                     constant_propagation, dead_code_elimination, format_ir, register_allocation)
from .loopnest import (Loop, LoopNest, LoweringError, PhysicalTiling, VirtualLayout,
                       annotate_memory, extract_mvm, tile, virtual_map)

SPILL_BYTES = 4096
ALIGN = 64


def _align(x: int, a: int = ALIGN) -> int:
    return -(-x // a) * a


def _signed32(v: int) -> int:
    v &= 0xFFFF_FFFF
    return v - (1 << 32) if v >= 1 << 31 else v


class _GlobalMap:
    def __init__(self, size: int):
        self.size = size
        self.cursor = 0
        self.sections: list[Section] = []
        self.addr: dict[str, int] = {}

    def alloc(self, name: str, nbytes: int, data: bytes | None = None) -> int:
        lo = self.cursor
        self.cursor = _align(lo + max(nbytes, 1))
        if self.cursor > self.size:
            raise LoweringError(f"global memory exhausted allocating {name!r} ({nbytes} bytes)")
        addr = GLOBAL_BASE + lo
        self.addr[name] = addr
        if data is not None:
            self.sections.append(Section(name, addr, data))
        return addr


class _FirstFit:
    """Free-list allocator for one local segment."""

    def __init__(self, lo: int, hi: int, name: str):
        self.lo, self.hi, self.name = lo, hi, name
        self.used: dict[int, int] = {}

    def alloc(self, nbytes: int) -> int:
        size = _align(max(nbytes, 1), 4)
        cur = self.lo
        for a in sorted(self.used):
            if a - cur >= size:
                break
            cur = max(cur, a + self.used[a])
        if cur + size > self.hi:
            raise LoweringError(f"local {self.name} overflow: {nbytes} bytes do not fit")
        self.used[cur] = size
        return cur

    def free(self, addr: int) -> None:
        del self.used[addr]


class _Bump:
    def __init__(self, lo: int, hi: int, name: str):
        self.lo, self.hi, self.name = lo, hi, name
        self.cur = lo

    def alloc(self, nbytes: int) -> int:
        a = self.cur
        if a + nbytes > self.hi:
            raise LoweringError(f"local {self.name} overflow: {nbytes} more bytes do not fit "
                                f"({self.hi - a} left)")
        self.cur = a + _align(max(nbytes, 1), 4)
        return a

    def left(self) -> int:
        return self.hi - self.cur

    def reset(self) -> None:
        self.cur = self.lo


@dataclass
class _Item:
    stage: int
    core: int
    b: int
    node: int
    copy: int
    index: int = 0               # position in the core's item list


@dataclass
class _NodeInfo:
    layout: VirtualLayout
    tiling: PhysicalTiling
    matrix_section: str
    nest_text: str


@dataclass
class _Plan:
    """Whole-program facts fixed before per-core emission."""
    stage_of: dict[int, int] = field(default_factory=dict)
    items: dict[int, list[_Item]] = field(default_factory=dict)
    sends: dict[int, list[tuple[int, tuple[int, int]]]] = field(default_factory=dict)
    global_tensors: set[tuple[int, int]] = field(default_factory=set)
    mg_base: dict[tuple[int, int], int] = field(default_factory=dict)


class _Lowerer:
    def __init__(self, sol: PartitionSolution, cg: CondensedGraph, cfg: ArchConfig, isa: ISA):
        if cg.graph is None:
            raise LoweringError("condensed graph carries no operator graph")
        self.sol, self.cg, self.g, self.cfg, self.isa = sol, cg, cg.graph, cfg, isa
        self.batch = sol.batch
        self.pos = {n: i for i, n in enumerate(cg.topo_order)}
        self.op_pos = {o: i for i, o in enumerate(self.g.topo_order())}
        self.gmem = _GlobalMap(cfg.chip.global_mem_bytes)
        self.nodes: dict[int, _NodeInfo] = {}
        self.plan = _Plan()
        self.ir_text: dict[str, str] = {}

    # -- planning ------------------------------------------------------------

    def consumers_in_group(self, o: int) -> list[int]:
        return sorted({self.cg.group_of[c] for c in self.g.consumers(o)} - {self.cg.group_of[o]})

    def plan_program(self) -> None:
        plan, cg = self.plan, self.cg
        for s, st in enumerate(self.sol.stages):
            for n in st.nodes:
                plan.stage_of[n] = s
        if set(plan.stage_of) != set(range(len(cg.nodes))):
            raise LoweringError("partition does not cover every condensed node")
        for n in cg.topo_order:
            self._plan_node(n)
        graph_out = set(self.g.outputs)
        for s, st in enumerate(self.sol.stages):
            self._place_mgs(s, st)
            for b in range(self.batch):
                for n in sorted(st.nodes, key=self.pos.__getitem__):
                    cp = st.mapping.copies[n]
                    k = b % len(cp)
                    plan.items.setdefault(cp[k], []).append(_Item(s, cp[k], b, n, k))
        for c, items in plan.items.items():
            items.sort(key=lambda it: (it.stage, it.b, self.pos[it.node]))
            for i, it in enumerate(items):
                it.index = i
        for c in sorted(plan.items):
            sends = plan.sends.setdefault(c, [])
            for it in plan.items[c]:
                st = self.sol.stages[it.stage]
                for o in cg.nodes[it.node].outputs:
                    dests = set()
                    for m in self.consumers_in_group(o):
                        if plan.stage_of[m] == it.stage:
                            dests.add(st.mapping.core_of(m, it.b))
                        else:
                            plan.global_tensors.add((o, it.b))
                    if o in graph_out:
                        plan.global_tensors.add((o, it.b))
                    for d in sorted(dests - {c}):
                        sends.append((d, (o, it.b)))
        for name, shape in self.g.inputs.items():
            for b in range(self.batch):
                self.gmem.alloc(f"in.{name}.{b}", tensor_bytes(shape))
        for o, b in sorted(plan.global_tensors):
            self.gmem.alloc(f"act.{o}.{b}", tensor_bytes(self.g.operators[o].out_shape))

    def _plan_node(self, n: int) -> None:
        node = self.cg.nodes[n]
        layout, nest = virtual_map(node, self.g)
        tiling = tile(layout, [], self.cfg)
        nest = extract_mvm(nest, tiling)
        anchor_in = self.g.producers(node.anchor)[0]
        in_bytes = tensor_bytes(self.g.tensor_shape(anchor_in))
        nest = annotate_memory(nest, self.cfg, in_bytes, layout.rows,
                               from_global=not self._in_group(anchor_in, n))
        matrix = layout.weight_matrix(self.g.operators[node.anchor])
        blob = b"".join(tiling.images(matrix))
        name = f"w{n}"
        self.gmem.alloc(name, len(blob), blob)
        self.nodes[n] = _NodeInfo(layout, tiling, name, nest.text())

    def _in_group(self, t: TensorRef, n: int) -> bool:
        return isinstance(t, int) and self.cg.group_of[t] == n

    def _place_mgs(self, s: int, st: Stage) -> None:
        used: dict[int, int] = {}
        for n in sorted(st.nodes, key=self.pos.__getitem__):
            for k, c in enumerate(st.mapping.copies[n]):
                base = used.get(c, 0)
                need = self.nodes[n].tiling.mgs_per_copy
                if base + need > self.cfg.core.mg_count:
                    raise LoweringError(f"stage {s}: core {c} needs {base + need} MGs, "
                                        f"has {self.cfg.core.mg_count}")
                self.plan.mg_base[(n, k)] = base
                used[c] = base + need

    # -- emission ------------------------------------------------------------

    def lower(self) -> Program:
        self.plan_program()
        ncores = max(self.plan.items, default=-1) + 1
        participants = sorted(self.plan.items)
        streams, labels = [], []
        for c in range(ncores):
            if c in self.plan.items:
                code = _CoreEmitter(self, c, participants).emit()
            else:
                code = [IRInstr("HALT", [])]
            instrs, lab = self._finish_core(c, code)
            streams.append(instrs)
            labels.append(lab)
        if not streams:
            instrs, lab = self._finish_core(0, [IRInstr("HALT", [])])
            streams, labels = [instrs], [lab]
        meta = self._metadata()
        return Program(streams, self.gmem.sections, [], labels, meta)

    def _finish_core(self, c: int, code: list[IRInstr]):
        dump = self.ir_text
        dump[f"core{c}.0-build.ir"] = format_ir(code)
        code = constant_propagation(code)
        dump[f"core{c}.1-constprop.ir"] = format_ir(code)
        code = dead_code_elimination(code)
        dump[f"core{c}.2-dce.ir"] = format_ir(code)
        spill_base = self.cfg.core.local_mem_bytes - SPILL_BYTES
        code, nslots = register_allocation(code, SPILL_BYTES // 4)
        if nslots:
            b = IRBuilder(c)
            b.set_const(V(-1), spill_base)
            head = [IRInstr(i.mnemonic, [Phys(SPILL_BASE_REG) if o == V(-1) else o for o in i.ops])
                    for i in b.code]
            code = head + code
        dump[f"core{c}.3-regalloc.ir"] = format_ir(code)
        instrs, lab = assemble_ir(code, self.isa)
        if len(instrs) > self.cfg.core.instr_mem_words:
            raise LoweringError(f"core {c}: {len(instrs)} instructions exceed instruction memory "
                                f"of {self.cfg.core.instr_mem_words} words")
        return instrs, lab

    def _metadata(self) -> dict:
        g, a = self.g, self.gmem.addr
        inputs = {name: {"shape": list(shape), "slots": [a[f"in.{name}.{b}"] for b in range(self.batch)]}
                  for name, shape in g.inputs.items()}
        outputs = {str(o): {"shape": list(g.operators[o].out_shape),
                            "slots": [a[f"act.{o}.{b}"] for b in range(self.batch)]}
                   for o in g.outputs}
        return {
            "model": g.name, "batch": self.batch, "strategy": self.sol.strategy,
            "inputs": inputs, "outputs": outputs, "stages": len(self.sol.stages),
            "arch_fingerprint": self.cfg.fingerprint(),
        }

    def loopnest_text(self) -> str:
        parts = []
        for n in self.cg.topo_order:
            info = self.nodes[n]
            t = info.tiling
            parts.append(f"# node {n} ({self.cg.nodes[n].kind}) layout {info.layout.rows}x"
                         f"{info.layout.cols} {info.layout.mode}, grid {t.grid[0]}x{t.grid[1]}")
            parts.append(info.nest_text)
        return "\n".join(parts) + "\n"


class _CoreEmitter:
    """Builds the IR of one core."""

    def __init__(self, low: _Lowerer, core: int, participants: list[int]):
        self.low, self.core, self.participants = low, core, participants
        self.cfg = low.cfg
        self.b = IRBuilder(core)
        seg = self.cfg.core.local_mem_bytes // max(2, self.cfg.core.local_mem_segments)
        top = self.cfg.core.local_mem_bytes - SPILL_BYTES
        self.persist = _FirstFit(0, seg, "segment 0")
        self.scratch = _Bump(seg, top, "segment 1")
        self.items = low.plan.items[core]
        self.buffers: dict[tuple[int, int], int] = {}        # (op, b) -> seg0 address
        self.last_use: dict[tuple[int, int], int] = {}
        self.expected: dict[int, list[tuple[int, int]]] = {}  # src core -> messages in order
        self.received: dict[int, int] = {}                    # src core -> count taken
        self.loaded: list[str] = []
        self._last_use()

    def _last_use(self) -> None:
        low, c = self.low, self.core
        for p, sends in low.plan.sends.items():
            seq = [key for d, key in sends if d == c]
            if seq:
                self.expected[p] = seq
                self.received[p] = 0
        for it in self.items:
            for t in low.cg.nodes[it.node].inputs:
                if isinstance(t, int):
                    self.last_use[(t, it.b)] = it.index

    # -- helpers -----------------------------------------------------------

    def addr(self, a: int) -> V:
        return self.b.li(_signed32(a))

    def cpy(self, src: int, dst: int, n: int, **meta) -> None:
        if n <= 0:
            return
        self.b.emit("MEM.CPY", self.addr(src), self.addr(dst), self.b.li(n), **meta)

    def emit(self) -> list[IRInstr]:
        stage = -1
        synced = 0
        for it in self.items:
            if it.stage != stage:
                # stage s starts after s barriers, including those of stages this core skips
                while synced < it.stage:
                    self._sync()
                    synced += 1
                stage = it.stage
                self._prologue(stage)
            self._item(it)
            self._release(it.index)
        while synced < len(self.low.sol.stages) - 1:
            self._sync()
            synced += 1
        self.b.emit("HALT")
        return self.b.code

    def _sync(self) -> None:
        mask = 0
        for c in self.participants:
            mask |= 1 << c
        self.b.cfg(SReg.SYNC_MASK_LO, _signed32(mask & 0xFFFF_FFFF))
        self.b.cfg(SReg.SYNC_MASK_HI, _signed32(mask >> 32))
        self.b.emit("SYNC")

    def _release(self, index: int) -> None:
        for key in [k for k, a in self.buffers.items() if self.last_use.get(k, -1) <= index]:
            self.persist.free(self.buffers.pop(key))

    # -- weight prologue -------------------------------------------------------

    def _prologue(self, s: int) -> None:
        low = self.low
        st = low.sol.stages[s]
        u = self.cfg.unit
        for n in sorted(st.nodes, key=low.pos.__getitem__):
            for k, c in enumerate(st.mapping.copies[n]):
                if c != self.core:
                    continue
                info = low.nodes[n]
                base = low.plan.mg_base[(n, k)]
                src = low.gmem.addr[info.matrix_section]
                for t in info.tiling.tiles:
                    rows, cols = t.shape
                    if rows > u.macro_rows or cols > u.mg_cols:
                        raise LoweringError(f"tile {rows}x{cols} exceeds an MG")
                    self.b.cfg(SReg.LDW_ROW_BYTES, cols)
                    chunk = max(1, min(rows, self.scratch.left() // max(cols, 1)))
                    stage_buf = self.scratch.alloc(chunk * cols)
                    done = 0
                    while done < rows:
                        nr = min(chunk, rows - done)
                        self.cpy(src, stage_buf, nr * cols)
                        self.b.emit("CIM.LDW", self.b.li(done), self.addr(stage_buf),
                                    self.b.li(nr), self.b.li(base + t.mg))
                        src += nr * cols
                        done += nr
                    self.scratch.reset()

    # -- work items --------------------------------------------------------------

    def _recv_until(self, p: int, key: tuple[int, int]) -> None:
        seq = self.expected.get(p, [])
        while key not in self.buffers:
            i = self.received.get(p, 0)
            if i >= len(seq):
                raise LoweringError(f"core {self.core}: no message from core {p} carries {key}")
            k = seq[i]
            n = tensor_bytes(self.low.g.operators[k[0]].out_shape)
            a = self.persist.alloc(n)
            self.buffers[k] = a
            self.b.emit("NOC.RECV", self.addr(a), self.b.li(n), self.b.li(p))
            self.received[p] = i + 1

    def _locate(self, t: TensorRef, it: _Item) -> tuple[str, int]:
        """("local"|"global", address) of an external input tensor."""
        low = self.low
        if isinstance(t, str):
            return "global", low.gmem.addr[f"in.{t}.{it.b}"]
        prod = low.cg.group_of[t]
        if low.plan.stage_of[prod] != it.stage:
            return "global", low.gmem.addr[f"act.{t}.{it.b}"]
        pc = low.sol.stages[it.stage].mapping.core_of(prod, it.b)
        key = (t, it.b)
        if pc != self.core:
            self._recv_until(pc, key)
        if key not in self.buffers:
            raise LoweringError(f"core {self.core}: tensor {key} is not resident")
        return "local", self.buffers[key]

    def _item(self, it: _Item) -> None:
        low, b = self.low, self.b
        g = low.g
        node: CondensedNode = low.cg.nodes[it.node]
        st = low.sol.stages[it.stage]
        self.scratch.reset()
        where: dict[TensorRef, tuple[str, int]] = {}
        for t in node.inputs:
            where[t] = self._locate(t, it)

        # output placement of every op in the group
        out_addr: dict[int, int] = {}
        for o in node.ops:
            n = tensor_bytes(g.operators[o].out_shape)
            local_consumer = o in node.outputs and any(
                low.plan.stage_of[m] == it.stage and st.mapping.core_of(m, it.b) == self.core
                for m in low.consumers_in_group(o))
            if local_consumer:
                a = self.persist.alloc(n)
                self.buffers[(o, it.b)] = a
            else:
                a = self.scratch.alloc(n)
            out_addr[o] = a

        def local_arg(t: TensorRef) -> int:
            if isinstance(t, int) and t in out_addr:
                return out_addr[t]
            kind, a = where[t]
            if kind == "local":
                return a
            n = tensor_bytes(g.tensor_shape(t))
            dst = self.scratch.alloc(n)
            self.cpy(a, dst, n, load=f"in.{t}")
            where[t] = ("local", dst)
            self.loaded.append(f"in.{t}")
            return dst

        for o in node.ops:
            op = g.operators[o]
            args = g.producers(o)
            if o == node.anchor:
                self._anchor(it, node, args[0], out_addr[o], where, out_addr, local_arg)
            else:
                self._vector_op(op, [local_arg(a) for a in args], out_addr[o])

        # outputs leave the item
        for o in node.outputs:
            n = tensor_bytes(g.operators[o].out_shape)
            for d, key in low.plan.sends[self.core]:
                if key == (o, it.b):
                    b.emit("NOC.SEND", self.addr(out_addr[o]), b.li(n), b.li(d))
            if (o, it.b) in low.plan.global_tensors:
                self.cpy(out_addr[o], low.gmem.addr[f"act.{o}.{it.b}"], n)

    def _reads(self) -> tuple[str, ...]:
        """Buffers loaded for the next consuming instruction (read by DCE)."""
        out, self.loaded = tuple(self.loaded), []
        return out

    def _vector_op(self, op, srcs: list[int], dst: int) -> None:
        b = self.b
        n = tensor_bytes(op.out_shape)
        reads = self._reads()
        if op.kind == "Relu":
            b.cfg(SReg.ELEM_BYTES, 1)
            b.emit("VEC.RELU", self.addr(dst), self.addr(srcs[0]), b.li(n), reads=reads)
        elif op.kind == "Add":
            b.cfg(SReg.ELEM_BYTES, 1)
            b.emit("VEC.ADD", self.addr(dst), self.addr(srcs[0]), self.addr(srcs[1]), b.li(n),
                   reads=reads)
        elif op.kind == "Quantize":
            b.cfg(SReg.QUANT_MULT, int(op.quant.multiplier))
            b.cfg(SReg.QUANT_SHIFT, int(op.quant.shift))
            b.cfg(SReg.QUANT_IN_BYTES, 1)
            b.emit("VEC.QUANT", self.addr(dst), self.addr(srcs[0]), b.li(n), reads=reads)
        elif op.kind == "Pool":
            h, w, c = self.low.g.tensor_shape(self.low.g.producers(op.id)[0])
            kh, kw = _pair(op.attrs["kernel"])
            stride = int(op.attrs.get("stride", kh))
            for s, v in ((SReg.GEO_H, h), (SReg.GEO_W, w), (SReg.GEO_C, c), (SReg.WIN_KH, kh),
                         (SReg.WIN_KW, kw), (SReg.WIN_STRIDE, stride)):
                b.cfg(s, v)
            mn = "VEC.POOLMAX" if op.attrs["mode"] == "max" else "VEC.POOLAVG"
            b.emit(mn, self.addr(dst), self.addr(srcs[0]), reads=reads)
        else:
            raise LoweringError(f"operator {op.id}: no vector lowering for {op.kind}")

    def _anchor(self, it: _Item, node: CondensedNode, src_t: TensorRef, out: int,
                where, out_addr, local_arg) -> None:
        low, b, cfg = self.low, self.b, self.cfg
        g = low.g
        op = g.operators[node.anchor]
        info = low.nodes[it.node]
        lay, tl = info.layout, info.tiling
        base = low.plan.mg_base[(it.node, it.copy)]
        R, C = tl.grid
        mr = cfg.unit.macro_rows
        rows, cols, npix = lay.rows, lay.cols, lay.vectors
        in_bytes = tensor_bytes(g.tensor_shape(src_t))

        acc = self.scratch.alloc(4 * cols)
        tmp = self.scratch.alloc(4 * cols) if R > 1 else None
        col = self.scratch.alloc(rows) if lay.mode != "direct" else None

        # where the anchor input sits while the loop runs
        in_local = isinstance(src_t, int) and src_t in out_addr or where[src_t][0] == "local"
        if in_local:
            src_addr, streamed = local_arg(src_t), False
        else:
            budget = self.scratch.left() - (rows if lay.mode == "direct" else 0)
            nest = annotate_memory(LoopNest([Loop("v", npix)], []), cfg, in_bytes, rows, True,
                                   budget=max(0, budget))
            if nest.annotations["input"] == "hoisted":
                src_addr, streamed = local_arg(src_t), False
            else:
                src_addr, streamed = where[src_t][1], True
        vecbuf = self.scratch.alloc(rows) if streamed and lay.mode == "direct" else None

        b.cfg(SReg.OUT_WIDTH, cols)
        b.cfg(SReg.QUANT_MULT, int(op.quant.multiplier))
        b.cfg(SReg.QUANT_SHIFT, int(op.quant.shift))
        b.cfg(SReg.QUANT_IN_BYTES, 4)
        if R > 1:
            b.cfg(SReg.ELEM_BYTES, 4)
        else:
            b.cfg(SReg.MG_MASK, _signed32(tl.row_mask(0, base)))
        if lay.mode != "direct":
            h, w, c = g.tensor_shape(src_t)
            kh, kw = (op.weights.shape[0], op.weights.shape[1])
            for s, v in ((SReg.GEO_H, h), (SReg.GEO_W, w), (SReg.GEO_C, c), (SReg.WIN_KH, kh),
                         (SReg.WIN_KW, kw), (SReg.WIN_STRIDE, int(op.attrs.get("stride", 1))),
                         (SReg.WIN_PAD, int(op.attrs.get("padding", 0))),
                         (SReg.IM2COL_ORDER, 1 if lay.mode == "block_diagonal" else 0)):
                b.cfg(s, v)

        # loop-invariant registers
        in_base = self.addr(src_addr) if lay.mode != "direct" else None
        col_r = self.addr(col) if col is not None else None
        vb_r = self.addr(vecbuf) if vecbuf is not None else None
        acc_r = self.addr(acc)
        tmp_r = self.addr(tmp) if tmp is not None else None
        cols_r = b.li(cols)
        lens = [min(mr, rows - r * mr) for r in range(R)]
        len_r = [b.li(n) for n in lens]
        masks = [b.li(_signed32(tl.row_mask(r, base))) for r in range(R)] if R > 1 else []
        col_off = [self.addr(col + r * mr) for r in range(R)] if col is not None else None
        vb_off = [self.addr(vecbuf + r * mr) for r in range(R)] if vecbuf is not None else None

        loop = npix > 1
        outp = b.new()
        b.set_const(outp, _signed32(out))
        pix = b.new()
        b.emit("S.LI", pix, 0)
        inp = None
        if lay.mode == "direct":
            inp = b.new()
            b.set_const(inp, _signed32(src_addr))
        npix_r = b.li(npix) if loop else None
        head = b.label("px")
        if loop:
            b.forget(SReg.MG_MASK)
            b.place(head)

        reads = self._reads()
        if lay.mode != "direct":
            b.emit("VEC.IM2COL", col_r, in_base, pix, reads=reads)
            srcs = col_off
        elif vecbuf is not None:
            b.emit("MEM.CPY", inp, vb_r, b.li(rows))
            srcs = vb_off
        else:
            srcs = [inp] + [None] * (R - 1)
        for r in range(R):
            if R > 1:
                b.emit("CIM.CFG", int(SReg.MG_MASK), masks[r], 0)
            s = srcs[r]
            if s is None:
                s = b.addi(inp, r * mr)
            b.emit("CIM.MVM", acc_r if r == 0 else tmp_r, s, len_r[r], reads=reads)
            if r > 0:
                b.emit("VEC.ADD", acc_r, acc_r, tmp_r, cols_r)
        if R > 1:
            b.sregs[SReg.MG_MASK] = _signed32(tl.row_mask(R - 1, base))
        b.emit("VEC.QUANT", outp, acc_r, cols_r)
        if loop:
            b.bump(outp, cols)
            if inp is not None:
                b.bump(inp, rows)
            b.bump(pix, 1)
            b.emit("BNE", pix, npix_r, head)


def lower_to_program(solution: PartitionSolution, g: CondensedGraph, cfg: ArchConfig,
                     isa: ISA = DEFAULT_ISA, ir_dump: dict[str, str] | None = None) -> Program:
    """Emit the per-core program for a partition solution.

    ``ir_dump``, if given, receives the loop nests and the per-pass core IR
    as text keyed by file name.
    """
    low = _Lowerer(solution, g, cfg, isa)
    prog = low.lower()
    if ir_dump is not None:
        ir_dump["loopnest.txt"] = low.loopnest_text()
        ir_dump.update(low.ir_text)
    return prog
