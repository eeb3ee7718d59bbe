"""Cycle-level multi-core simulator.

Each core is an in-order IF/DE/EX pipeline.  For instruction ``i``:

* it is fetched at ``F`` (cycle 0 for the first instruction, otherwise the
  cycle its predecessor entered DE, or one cycle after a taken branch left
  DE);
* it enters DE at ``max(F + 1, previous DE exit + 1)`` and leaves DE once
  its scoreboard bits, its unit, overlapping in-flight memory writes, and
  (for NOC.RECV / SYNC) the message or barrier allow;
* EX starts the cycle after DE exit and lasts the descriptor latency.

A written register is readable in DE the cycle after the writer's last EX
cycle.  Functional effects are applied in EX start order across the whole
chip, which keeps cross-core ordering (NoC snapshots, global memory)
consistent with time.  Operand reads are snapshots, so write-after-read is
never a hazard.

The engine is event driven: a core's next EX start is computed as soon as
its predecessor has issued, and a global queue ordered by (cycle, core)
applies the effects.  Cycle counts are identical to stepping every cycle.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from ..archconfig import ArchConfig
from ..isa.program import GLOBAL_BASE, Program, validate_program
from ..isa.table import BRANCHES, DEFAULT_ISA, ISA, Instruction, SReg
from ..nnir.graph import requantize
from .noc import NocState

UNIT_NAMES = ("cim", "vector", "scalar", "memory", "comm")
STALL_REASONS = ("raw", "unit", "memory", "recv", "sync")


class SimError(RuntimeError):
    pass


class AddressFault(SimError):
    pass


class CapacityFault(SimError):
    pass


class DeadlockError(SimError):
    def __init__(self, blocked: list[dict]):
        desc = "; ".join(f"core {b['core']} pc {b['pc']} {b['instr']} ({b['reason']})" for b in blocked)
        super().__init__(f"deadlock: {desc}")
        self.blocked = blocked


def _wrap32(v: int) -> int:
    return ((v + 0x8000_0000) & 0xFFFF_FFFF) - 0x8000_0000


_SCALAR_WRITERS = frozenset({"S.ADD", "S.SUB", "S.MUL", "S.SLT", "S.LI", "S.LUI", "S.ADDI", "S.LD"})
_VEC_BINARY = {"VEC.ADD": np.add, "VEC.SUB": np.subtract, "VEC.MUL": np.multiply, "VEC.MAX": np.maximum}
_GEO = (SReg.GEO_H, SReg.GEO_W, SReg.GEO_C, SReg.WIN_KH, SReg.WIN_KW, SReg.WIN_STRIDE)
_SREG_READS = {
    "CIM.MVM": (SReg.MG_MASK, SReg.OUT_WIDTH),
    "CIM.LDW": (SReg.LDW_ROW_BYTES,),
    "VEC.ADD": (SReg.ELEM_BYTES,), "VEC.SUB": (SReg.ELEM_BYTES,),
    "VEC.MUL": (SReg.ELEM_BYTES,), "VEC.MAX": (SReg.ELEM_BYTES,), "VEC.RELU": (SReg.ELEM_BYTES,),
    "VEC.QUANT": (SReg.QUANT_MULT, SReg.QUANT_SHIFT, SReg.QUANT_IN_BYTES),
    "VEC.POOLMAX": _GEO, "VEC.POOLAVG": _GEO,
    "VEC.IM2COL": _GEO + (SReg.WIN_PAD, SReg.IM2COL_ORDER),
    "SYNC": (SReg.SYNC_MASK_LO, SReg.SYNC_MASK_HI),
}


@dataclass
class _Plan:
    """Decode-time view of one instruction: operands, footprint and cost."""

    instr: Instruction
    pc: int
    unit: str
    latency: int
    energy: list[tuple[str, int]]
    reads: list[tuple[bool, int, int]]      # (is_global, lo, hi)
    writes: list[tuple[bool, int, int]]
    greg_reads: tuple[int, ...]
    greg_write: int | None
    sreg_reads: tuple[int, ...]
    sreg_write: int | None
    elements: int = 0
    d_start: int = 0
    d_end: int = 0
    x: int = 0
    done: int = 0
    stall: str | None = None


@dataclass
class CoreState:
    core: int
    stream: list[Instruction]
    local: np.ndarray
    g: list[int] = field(default_factory=lambda: [0] * 32)
    s: list[int] = field(default_factory=lambda: [0] * 32)
    pc: int = 0
    halted: bool = False
    fetch_at: int = 0
    prev_d_end: int = -1
    g_ready: list[int] = field(default_factory=lambda: [0] * 32)
    s_ready: list[int] = field(default_factory=lambda: [0] * 32)
    unit_free: dict[str, int] = field(default_factory=lambda: {u: 0 for u in UNIT_NAMES})
    pending_writes: list[tuple[bool, int, int, int]] = field(default_factory=list)
    max_done: int = -1
    mgs: dict[int, np.ndarray] = field(default_factory=dict)
    ldw_rows: dict[int, int] = field(default_factory=dict)
    busy: dict[str, int] = field(default_factory=lambda: {u: 0 for u in UNIT_NAMES})
    retired: int = 0
    fetched: int = 0
    stalls: Counter = field(default_factory=Counter)
    energy_fj: Counter = field(default_factory=Counter)
    parked: tuple | None = None
    sync_count: int = 0


@dataclass
class SimReport:
    total_cycles: int
    batch: int
    clock_hz: float
    core_count: int
    energy_fj: dict[str, int]
    energy_total_fj: int
    core_energy_fj: list[int]
    noc_energy_fj: int
    static_energy_fj: int
    unit_busy: dict[str, int]
    core_unit_busy: list[dict[str, int]]
    instructions: list[int]
    stalls: dict[str, int]
    noc: dict
    capacity: dict
    outputs: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def throughput(self) -> float:
        """Inferences per second at ``clock_hz``."""
        if self.total_cycles == 0:
            return 0.0
        return self.batch * self.clock_hz / self.total_cycles

    @property
    def energy_pj(self) -> float:
        return self.energy_total_fj / 1000

    def utilization(self, unit: str, core: int | None = None) -> Fraction:
        """Busy fraction of a unit, for one core or averaged over the program's cores."""
        if self.total_cycles == 0:
            return Fraction(0)
        if core is not None:
            return Fraction(self.core_unit_busy[core][unit], self.total_cycles)
        return Fraction(self.unit_busy[unit], self.total_cycles * max(1, self.core_count))

    def to_dict(self, include_outputs: bool = True) -> dict:
        d = {
            "total_cycles": self.total_cycles,
            "batch": self.batch,
            "throughput_inferences_per_s": self.throughput,
            "energy": {
                "total_fj": self.energy_total_fj,
                "total_pj": self.energy_pj,
                "breakdown_fj": dict(sorted(self.energy_fj.items())),
                "per_core_fj": self.core_energy_fj,
                "noc_fj": self.noc_energy_fj,
                "static_fj": self.static_energy_fj,
            },
            "utilization": {u: float(self.utilization(u)) for u in UNIT_NAMES},
            "unit_busy_cycles": dict(self.unit_busy),
            "per_core": [
                {"core": c, "instructions": self.instructions[c], "busy": self.core_unit_busy[c],
                 "energy_fj": self.core_energy_fj[c]}
                for c in range(self.core_count)
            ],
            "stalls": dict(sorted(self.stalls.items())),
            "noc": self.noc,
            "capacity": self.capacity,
        }
        if include_outputs:
            d["outputs"] = {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                            for k, v in sorted(self.outputs.items())}
        return d

    def to_json(self, include_outputs: bool = True) -> str:
        return json.dumps(self.to_dict(include_outputs), indent=2, sort_keys=True)


class Simulator:
    """Chip state plus the event queue; :meth:`run` drives it to completion."""

    def __init__(self, program: Program, cfg: ArchConfig, isa: ISA = DEFAULT_ISA,
                 inputs: Mapping[str, np.ndarray] | None = None, trace: bool = False,
                 require_halt: bool = False, max_cycles: int | None = None):
        validate_program(program, cfg, isa, require_halt=require_halt)
        isa.check_perf(cfg.perf)
        self.p, self.cfg, self.isa = program, cfg, isa
        self.perf = cfg.perf
        self.max_cycles = max_cycles
        self.trace_lines: list[str] | None = [] if trace else None
        self.noc = NocState(cfg.chip.mesh_width, cfg.chip.noc_flit_bytes, cfg.chip.noc_hop_latency)
        self.global_mem = np.zeros(cfg.chip.global_mem_bytes, dtype=np.uint8)
        self.cores: list[CoreState] = []
        for c, stream in enumerate(program.streams):
            local = np.zeros(cfg.core.local_mem_bytes if stream or program.local_sections[c] else 0,
                             dtype=np.uint8)
            st = CoreState(c, stream, local)
            for sec in program.local_sections[c]:
                local[sec.addr:sec.addr + len(sec.data)] = np.frombuffer(sec.data, dtype=np.uint8)
            self.cores.append(st)
        for sec in program.global_sections:
            lo = sec.addr - GLOBAL_BASE
            self.global_mem[lo:lo + len(sec.data)] = np.frombuffer(sec.data, dtype=np.uint8)
        self._coef = {}
        self._fj = {k: self.perf.energy_fj(k) for k in self.perf.energy}
        self._load_inputs(inputs or {})
        self.queue: list[tuple[int, int]] = []
        self.pending: dict[int, _Plan] = {}
        self.barriers: dict[int, dict[int, int]] = {}
        self.now = 0
        self.finished = False
        for st in self.cores:
            self._advance(st)

    # -- memory ------------------------------------------------------------

    def _load_inputs(self, inputs: Mapping[str, np.ndarray]) -> None:
        spec = self.p.metadata.get("inputs", {})
        for name, arr in inputs.items():
            if name not in spec:
                raise SimError(f"program has no input named {name!r}")
            info = spec[name]
            shape = tuple(info["shape"])
            a = np.asarray(arr)
            if a.shape == shape:
                a = a[None]
            if a.shape[1:] != shape:
                raise SimError(f"input {name!r}: expected shape {shape} or (batch, *{shape}), got {a.shape}")
            if a.shape[0] > len(info["slots"]):
                raise SimError(f"input {name!r}: {a.shape[0]} inferences given, program handles {len(info['slots'])}")
            if not np.issubdtype(a.dtype, np.integer) or a.min(initial=0) < -128 or a.max(initial=0) > 127:
                raise SimError(f"input {name!r} is not int8")
            for b in range(a.shape[0]):
                data = a[b].astype(np.int8).reshape(-1).view(np.uint8)
                lo = info["slots"][b] - GLOBAL_BASE
                self.global_mem[lo:lo + data.size] = data

    def _mem(self, st: CoreState, addr: int, n: int) -> tuple[np.ndarray, int]:
        if addr >= GLOBAL_BASE:
            off = addr - GLOBAL_BASE
            if off + n > self.global_mem.size:
                raise AddressFault(f"core {st.core}: global access {addr:#x}+{n} out of range")
            return self.global_mem, off
        if addr < 0 or addr + n > st.local.size:
            raise AddressFault(f"core {st.core}: local access {addr:#x}+{n} out of range")
        return st.local, addr

    def read(self, st: CoreState, addr: int, n: int) -> np.ndarray:
        arr, off = self._mem(st, addr, n)
        return arr[off:off + n].copy()

    def write(self, st: CoreState, addr: int, data: np.ndarray) -> None:
        raw = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
        arr, off = self._mem(st, addr, raw.size)
        arr[off:off + raw.size] = raw

    def read_i8(self, st, addr, n):
        return self.read(st, addr, n).view(np.int8)

    def read_i32(self, st, addr, n):
        return self.read(st, addr, 4 * n).view("<i4")

    # -- decode-time planning ------------------------------------------------

    def _cycles(self, key: str, amount: int = 1) -> int:
        coef = self._coef.get(key)
        if coef is None:
            coef = self._coef[key] = Fraction(str(self.perf.latency_coef(key)))
        if amount <= 0:
            return 1
        return max(1, math.ceil(coef * amount))

    @staticmethod
    def _rng(addr: int, n: int) -> tuple[bool, int, int]:
        return (addr >= GLOBAL_BASE, addr, addr + n)

    def _plan(self, st: CoreState, instr: Instruction) -> _Plan:
        desc = self.isa[instr.mnemonic]
        mn = instr.mnemonic
        g, s = st.g, st.s
        reads: list = []
        writes: list = []
        energy: list = []
        greg_write = None
        sreg_write = None
        used = desc.used_fields
        greg_reads = tuple(getattr(instr, f) for f in ("rd", "rs1", "rs2", "rs3") if f in used)
        elements = 0
        latency = None

        if mn in _SCALAR_WRITERS:
            greg_write = instr.rd
            greg_reads = tuple(r for f, r in (("rs1", instr.rs1), ("rs2", instr.rs2)) if f in used)
            if mn == "S.LD":
                addr = g[instr.rs1] + instr.imm
                reads.append(self._rng(addr, 4))
                glob = addr >= GLOBAL_BASE
                latency = self._cycles("mem_cycles_per_word_global" if glob else "mem_cycles_per_word_local")
                energy.append(("global_mem_byte" if glob else "local_mem_byte", 4))
        elif mn == "CIM.CFG":
            sreg_write = instr.rd
            greg_reads = (instr.rs1,)
        elif mn == "S.ST":
            addr = g[instr.rs1] + instr.imm
            writes.append(self._rng(addr, 4))
            glob = addr >= GLOBAL_BASE
            latency = self._cycles("mem_cycles_per_word_global" if glob else "mem_cycles_per_word_local")
            energy.append(("global_mem_byte" if glob else "local_mem_byte", 4))
        elif mn == "CIM.MVM":
            n = g[instr.rs2]
            width = s[SReg.OUT_WIDTH]
            active = bin(s[SReg.MG_MASK] & 0xFFFF_FFFF).count("1")
            reads.append(self._rng(g[instr.rs1], n))
            writes.append(self._rng(g[instr.rd], 4 * width))
            energy.append(("cim_mac", n * active * self.cfg.unit.mg_cols))
        elif mn == "CIM.LDW":
            rows, rb = g[instr.rs2], s[SReg.LDW_ROW_BYTES]
            reads.append(self._rng(g[instr.rs1], rows * rb))
            latency = self._cycles(desc.latency_key, rows)
            energy += [("cim_weight_write_byte", rows * rb), ("local_mem_byte", rows * rb)]
        elif mn in _VEC_BINARY or mn == "VEC.RELU" or mn == "VEC.QUANT":
            n = g[instr.rs3] if mn in _VEC_BINARY else g[instr.rs2]
            elements = n
            if mn == "VEC.QUANT":
                reads.append(self._rng(g[instr.rs1], n * s[SReg.QUANT_IN_BYTES]))
                writes.append(self._rng(g[instr.rd], n))
            else:
                eb = s[SReg.ELEM_BYTES]
                reads.append(self._rng(g[instr.rs1], n * eb))
                if mn in _VEC_BINARY:
                    reads.append(self._rng(g[instr.rs2], n * eb))
                writes.append(self._rng(g[instr.rd], n * eb))
        elif mn in ("VEC.POOLMAX", "VEC.POOLAVG"):
            h, w, c, kh, kw, stride = (s[r] for r in _GEO)
            ho, wo = (h - kh) // max(stride, 1) + 1, (w - kw) // max(stride, 1) + 1
            elements = h * w * c
            reads.append(self._rng(g[instr.rs1], h * w * c))
            writes.append(self._rng(g[instr.rd], max(ho, 0) * max(wo, 0) * c))
        elif mn == "VEC.IM2COL":
            h, w, c, kh, kw = (s[r] for r in _GEO[:5])
            elements = kh * kw * c
            reads.append(self._rng(g[instr.rs1], h * w * c))
            writes.append(self._rng(g[instr.rd], elements))
        elif mn == "MEM.CPY":
            src, dst, n = g[instr.rs1], g[instr.rs2], g[instr.rs3]
            reads.append(self._rng(src, n))
            writes.append(self._rng(dst, n))
            glob = src >= GLOBAL_BASE or dst >= GLOBAL_BASE
            latency = self._cycles("mem_cycles_per_word_global" if glob else "mem_cycles_per_word_local",
                                   -(-n // 4))
            energy += [("global_mem_byte" if src >= GLOBAL_BASE else "local_mem_byte", n),
                       ("global_mem_byte" if dst >= GLOBAL_BASE else "local_mem_byte", n)]
        elif mn == "NOC.SEND":
            n = g[instr.rs2]
            reads.append(self._rng(g[instr.rs1], n))
            latency = self._cycles(desc.latency_key, -(-n // 4))
            energy.append(("local_mem_byte", n))
        elif mn == "NOC.RECV":
            n = g[instr.rs2]
            writes.append(self._rng(g[instr.rd], n))
            latency = self._cycles(desc.latency_key, -(-n // 4))
            energy.append(("local_mem_byte", n))
        elif desc.semantics is not None:
            n = g[instr.rs2]
            elements = n
            reads.append(self._rng(g[instr.rs1], n))
            writes.append(self._rng(g[instr.rd], n))

        if latency is None:
            if desc.latency_basis == "elements":
                latency = self._cycles(desc.latency_key, elements)
            else:
                latency = self._cycles(desc.latency_key, 1)
        if desc.energy_key is not None and not energy:
            energy.append((desc.energy_key, elements if desc.latency_basis == "elements" else 1))
        return _Plan(instr, st.pc, desc.unit, latency, energy, reads, writes, greg_reads,
                     greg_write, _SREG_READS.get(mn, ()), sreg_write, elements)

    # -- timing ------------------------------------------------------------

    def _advance(self, st: CoreState) -> None:
        """Plan the next instruction of ``st`` and queue its EX start, or park it."""
        if st.halted:
            return
        if st.pc >= len(st.stream):
            st.halted = True
            return
        instr = st.stream[st.pc]
        plan = self._plan(st, instr)
        st.fetched += 1
        d_start = max(st.fetch_at + 1, st.prev_d_end + 1)
        plan.d_start = d_start
        t, reason = d_start, None

        def bump(v, why):
            nonlocal t, reason
            if v > t:
                t, reason = v, why

        for r in plan.greg_reads:
            bump(st.g_ready[r], "raw")
        if plan.greg_write is not None:
            bump(st.g_ready[plan.greg_write], "raw")
        for r in plan.sreg_reads:
            bump(st.s_ready[r], "raw")
        if plan.sreg_write is not None:
            bump(st.s_ready[plan.sreg_write], "raw")
        bump(st.unit_free[plan.unit] - 1, "unit")
        if st.pending_writes:
            st.pending_writes = [w for w in st.pending_writes if w[3] >= d_start]
            for glob, lo, hi in plan.reads + plan.writes:
                for wg, wlo, whi, wdone in st.pending_writes:
                    if wg == glob and lo < whi and wlo < hi:
                        bump(wdone + 1, "memory")
        plan.d_end, plan.stall = t, reason
        mn = instr.mnemonic
        if mn == "NOC.RECV":
            st.parked = ("recv", plan)
            self._try_recv(st)
        elif mn == "SYNC":
            bump(st.max_done + 1, "sync")
            plan.d_end, plan.stall = t, reason
            st.parked = ("sync", plan)
            self._arrive(st, plan)
        else:
            self._schedule(st, plan)

    def _schedule(self, st: CoreState, plan: _Plan) -> None:
        plan.x = plan.d_end + 1
        plan.done = plan.x + plan.latency - 1
        if plan.stall:
            st.stalls[plan.stall] += plan.d_end - plan.d_start
        st.parked = None
        self.pending[st.core] = plan
        heapq.heappush(self.queue, (plan.x, st.core))

    def _try_recv(self, st: CoreState) -> None:
        plan = st.parked[1]
        instr = plan.instr
        src = st.g[instr.rs3]
        if not 0 <= src < len(self.cores):
            raise SimError(f"core {st.core}: NOC.RECV from nonexistent core {src}")
        msg = self.noc.peek(src, st.core)
        if msg is None:
            return
        if msg.nbytes != st.g[instr.rs2]:
            raise SimError(f"core {st.core} pc {plan.pc}: NOC.RECV expects {st.g[instr.rs2]} bytes "
                           f"from core {src}, next message has {msg.nbytes}")
        if msg.complete > plan.d_end:
            plan.d_end, plan.stall = msg.complete, "recv"
        self._schedule(st, plan)

    def _sync_cores(self, st: CoreState) -> list[int]:
        mask = (st.s[SReg.SYNC_MASK_LO] & 0xFFFF_FFFF) | ((st.s[SReg.SYNC_MASK_HI] & 0xFFFF_FFFF) << 32)
        cores = [c for c in range(64) if mask >> c & 1]
        if st.core not in cores:
            cores.append(st.core)
        for c in cores:
            if c >= len(self.cores):
                raise SimError(f"core {st.core}: SYNC mask names core {c}, which has no stream")
        return sorted(cores)

    def _arrive(self, st: CoreState, plan: _Plan) -> None:
        cores = self._sync_cores(st)
        key = (tuple(cores), st.sync_count)
        st.sync_count += 1
        arrivals = self.barriers.setdefault(key, {})
        arrivals[st.core] = plan.d_end
        if len(arrivals) < len(cores):
            return
        release = max(arrivals.values())
        del self.barriers[key]
        for c in cores:
            other = self.cores[c]
            p = other.parked[1]
            if p.d_end < release:
                p.d_end, p.stall = release, "sync"
            self._schedule(other, p)

    # -- issue -------------------------------------------------------------

    def _issue(self, st: CoreState, plan: _Plan) -> None:
        instr = plan.instr
        mn = instr.mnemonic
        self._execute(st, plan)
        if plan.greg_write is not None and plan.greg_write != 0:
            st.g_ready[plan.greg_write] = plan.done + 1
        if plan.sreg_write is not None:
            st.s_ready[plan.sreg_write] = plan.done + 1
        st.unit_free[plan.unit] = plan.done + 1
        st.busy[plan.unit] += plan.latency
        for glob, lo, hi in plan.writes:
            st.pending_writes.append((glob, lo, hi, plan.done))
        st.max_done = max(st.max_done, plan.done)
        fj = self._fj
        e = st.energy_fj
        e["instr_fetch"] += fj["instr_fetch"]
        for event, count in plan.energy:
            e[event] += fj[event] * count
        st.retired += 1
        if self.trace_lines is not None:
            self.trace_lines.append(
                f"{plan.x:>8} core {st.core:>2} pc {plan.pc:>5} {str(instr):<32} "
                f"de {plan.d_start}-{plan.d_end} ex {plan.x}-{plan.done}"
                + (f" stall={plan.stall}" if plan.stall else ""))

        # control flow and the fetch time of the successor
        taken = None
        if mn in BRANCHES:
            if mn == "JMP":
                taken = True
            elif mn == "BEQ":
                taken = st.g[instr.rd] == st.g[instr.rs1]
            else:
                taken = st.g[instr.rd] != st.g[instr.rs1]
        st.prev_d_end = plan.d_end
        if taken:
            st.pc = plan.pc + 1 + instr.imm
            st.fetch_at = plan.d_end + 1
            e["instr_fetch"] += fj["instr_fetch"]     # squashed wrong-path fetch
            if not 0 <= st.pc <= len(st.stream):
                raise SimError(f"core {st.core} pc {plan.pc}: branch target {st.pc} outside the stream")
        else:
            st.pc = plan.pc + 1
            st.fetch_at = plan.d_start
        if mn == "HALT":
            st.halted = True
            return
        self._advance(st)

    def _execute(self, st: CoreState, plan: _Plan) -> None:
        instr = plan.instr
        mn = instr.mnemonic
        g, s = st.g, st.s
        rd = instr.rd
        if mn == "S.ADDI":
            self._setg(st, rd, g[instr.rs1] + instr.imm)
        elif mn == "S.LI":
            self._setg(st, rd, instr.imm)
        elif mn == "S.LUI":
            self._setg(st, rd, (instr.imm & 0xFFFF) << 16)
        elif mn == "S.ADD":
            self._setg(st, rd, g[instr.rs1] + g[instr.rs2])
        elif mn == "S.SUB":
            self._setg(st, rd, g[instr.rs1] - g[instr.rs2])
        elif mn == "S.MUL":
            self._setg(st, rd, g[instr.rs1] * g[instr.rs2])
        elif mn == "S.SLT":
            self._setg(st, rd, int(g[instr.rs1] < g[instr.rs2]))
        elif mn == "CIM.CFG":
            s[rd] = _wrap32(g[instr.rs1] + instr.imm)
        elif mn == "S.LD":
            self._setg(st, rd, int(self.read_i32(st, g[instr.rs1] + instr.imm, 1)[0]))
        elif mn == "S.ST":
            self.write(st, g[instr.rs1] + instr.imm, np.array([g[rd]], dtype="<i4"))
        elif mn == "CIM.MVM":
            self._mvm(st, g[rd], g[instr.rs1], g[instr.rs2])
        elif mn == "CIM.LDW":
            self._ldw(st, g[rd], g[instr.rs1], g[instr.rs2], g[instr.rs3])
        elif mn in _VEC_BINARY:
            n, eb = g[instr.rs3], s[SReg.ELEM_BYTES]
            if eb == 1:
                a = self.read_i8(st, g[instr.rs1], n).astype(np.int32)
                b = self.read_i8(st, g[instr.rs2], n).astype(np.int32)
                out = np.clip(_VEC_BINARY[mn](a, b), -128, 127).astype(np.int8)
            elif eb == 4:
                a = self.read_i32(st, g[instr.rs1], n).astype(np.int64)
                b = self.read_i32(st, g[instr.rs2], n).astype(np.int64)
                out = _VEC_BINARY[mn](a, b).astype("<i4")
            else:
                raise SimError(f"core {st.core} pc {plan.pc}: ELEM_BYTES must be 1 or 4, is {eb}")
            self.write(st, g[rd], out)
        elif mn == "VEC.RELU":
            n, eb = g[instr.rs2], s[SReg.ELEM_BYTES]
            src = self.read_i8(st, g[instr.rs1], n) if eb == 1 else self.read_i32(st, g[instr.rs1], n)
            self.write(st, g[rd], np.maximum(src, 0).astype(src.dtype))
        elif mn == "VEC.QUANT":
            n, ib = g[instr.rs2], s[SReg.QUANT_IN_BYTES]
            src = self.read_i8(st, g[instr.rs1], n) if ib == 1 else self.read_i32(st, g[instr.rs1], n)
            mult, shift = s[SReg.QUANT_MULT], s[SReg.QUANT_SHIFT]
            if not 0 <= shift <= 62:
                raise SimError(f"core {st.core} pc {plan.pc}: QUANT_SHIFT {shift} out of range")
            self.write(st, g[rd], requantize(src, mult, shift))
        elif mn in ("VEC.POOLMAX", "VEC.POOLAVG"):
            self._pool(st, mn == "VEC.POOLMAX", g[rd], g[instr.rs1])
        elif mn == "VEC.IM2COL":
            self._im2col(st, g[rd], g[instr.rs1], g[instr.rs2])
        elif mn == "MEM.CPY":
            n = g[instr.rs3]
            self.write(st, g[instr.rs2], self.read(st, g[instr.rs1], n))
        elif mn == "NOC.SEND":
            dst, n = g[instr.rs3], g[instr.rs2]
            if not 0 <= dst < len(self.cores):
                raise SimError(f"core {st.core}: NOC.SEND to nonexistent core {dst}")
            data = self.read(st, g[instr.rs1], n).tobytes()
            self.noc.send(st.core, dst, data, plan.x)
            other = self.cores[dst]
            if other.parked and other.parked[0] == "recv" and not other.halted:
                if other.g[other.parked[1].instr.rs3] == st.core:
                    self._try_recv(other)
        elif mn == "NOC.RECV":
            src = g[instr.rs3]
            msg = self.noc.take(src, st.core)
            self.write(st, g[rd], np.frombuffer(msg.data, dtype=np.uint8))
        elif mn in ("NOP", "HALT", "SYNC", "JMP", "BEQ", "BNE"):
            pass
        else:
            desc = self.isa[mn]
            if desc.semantics is None:
                raise SimError(f"core {st.core} pc {plan.pc}: no semantics for {mn}")
            n = g[instr.rs2]
            out = np.asarray(desc.semantics(self.read_i8(st, g[instr.rs1], n)))
            self.write(st, g[rd], np.clip(out, -128, 127).astype(np.int8))

    @staticmethod
    def _setg(st: CoreState, r: int, v: int) -> None:
        if r != 0:
            st.g[r] = _wrap32(v)

    def _mg(self, st: CoreState, mg: int) -> np.ndarray:
        arr = st.mgs.get(mg)
        if arr is None:
            arr = st.mgs[mg] = np.zeros((self.cfg.unit.macro_rows, self.cfg.unit.mg_cols), dtype=np.int32)
        return arr

    def _ldw(self, st: CoreState, row_off: int, src: int, rows: int, mg: int) -> None:
        u = self.cfg.unit
        rb = st.s[SReg.LDW_ROW_BYTES]
        if not 0 <= mg < self.cfg.core.mg_count:
            raise CapacityFault(f"core {st.core}: CIM.LDW to MG {mg}, core has {self.cfg.core.mg_count}")
        if row_off < 0 or rows < 0 or row_off + rows > u.macro_rows:
            raise CapacityFault(f"core {st.core}: CIM.LDW rows {row_off}..{row_off + rows} exceed "
                                f"{u.macro_rows} macro rows")
        if not 0 < rb <= u.mg_cols:
            raise CapacityFault(f"core {st.core}: CIM.LDW row of {rb} bytes exceeds {u.mg_cols} MG columns")
        data = self.read_i8(st, src, rows * rb).reshape(rows, rb)
        arr = self._mg(st, mg)
        arr[row_off:row_off + rows, :rb] = data
        arr[row_off:row_off + rows, rb:] = 0
        st.ldw_rows[mg] = max(st.ldw_rows.get(mg, 0), row_off + rows)

    def _mvm(self, st: CoreState, dst: int, src: int, n: int) -> None:
        u = self.cfg.unit
        mask = st.s[SReg.MG_MASK] & 0xFFFF_FFFF
        width = st.s[SReg.OUT_WIDTH]
        if not 0 < n <= u.macro_rows:
            raise SimError(f"core {st.core}: CIM.MVM length {n} outside 1..{u.macro_rows}")
        active = [m for m in range(self.cfg.core.mg_count) if mask >> m & 1]
        if mask >> self.cfg.core.mg_count:
            raise CapacityFault(f"core {st.core}: MG mask {mask:#x} names missing macro groups")
        if not 0 < width <= len(active) * u.mg_cols:
            raise SimError(f"core {st.core}: OUT_WIDTH {width} does not fit {len(active)} active MGs")
        x = self.read_i8(st, src, n).astype(np.int32)
        out = np.empty(width, dtype=np.int64)
        pos = 0
        for m in active:
            take = min(u.mg_cols, width - pos)
            if take <= 0:
                break
            out[pos:pos + take] = x @ self._mg(st, m)[:n, :take]
            pos += take
        self.write(st, dst, out.astype("<i4"))

    def _geometry(self, st: CoreState):
        s = st.s
        return (s[SReg.GEO_H], s[SReg.GEO_W], s[SReg.GEO_C], s[SReg.WIN_KH], s[SReg.WIN_KW],
                max(1, s[SReg.WIN_STRIDE]))

    def _pool(self, st: CoreState, is_max: bool, dst: int, src: int) -> None:
        h, w, c, kh, kw, stride = self._geometry(st)
        x = self.read_i8(st, src, h * w * c).reshape(h, w, c).astype(np.int64)
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        out = np.empty((ho, wo, c), dtype=np.int64)
        n = kh * kw
        for oy in range(ho):
            for ox in range(wo):
                win = x[oy * stride:oy * stride + kh, ox * stride:ox * stride + kw]
                out[oy, ox] = win.max(axis=(0, 1)) if is_max else (2 * win.sum(axis=(0, 1)) + n) // (2 * n)
        self.write(st, dst, out.astype(np.int8))

    def _im2col(self, st: CoreState, dst: int, src: int, pix: int) -> None:
        h, w, c, kh, kw, stride = self._geometry(st)
        pad, order = st.s[SReg.WIN_PAD], st.s[SReg.IM2COL_ORDER]
        wo = (w + 2 * pad - kw) // stride + 1
        oy, ox = divmod(pix, wo)
        x = self.read_i8(st, src, h * w * c).reshape(h, w, c)
        patch = np.zeros((kh, kw, c), dtype=np.int8)
        y0, x0 = oy * stride - pad, ox * stride - pad
        ya, yb = max(0, y0), min(h, y0 + kh)
        xa, xb = max(0, x0), min(w, x0 + kw)
        if ya < yb and xa < xb:
            patch[ya - y0:yb - y0, xa - x0:xb - x0] = x[ya:yb, xa:xb]
        if order == 1:
            patch = patch.transpose(2, 0, 1)
        self.write(st, dst, patch.reshape(-1))

    # -- driving -----------------------------------------------------------

    def step(self) -> int | None:
        """Issue every instruction whose EX starts at the next pending cycle.

        Returns that cycle, or None once nothing is left to issue.
        """
        if not self.queue:
            self._finish()
            return None
        cycle = self.queue[0][0]
        if self.max_cycles is not None and cycle > self.max_cycles:
            raise SimError(f"simulation exceeded {self.max_cycles} cycles")
        while self.queue and self.queue[0][0] == cycle:
            _, core = heapq.heappop(self.queue)
            st = self.cores[core]
            plan = self.pending.pop(core)
            self.now = cycle
            self._issue(st, plan)
        return cycle

    def run(self) -> SimReport:
        while self.step() is not None:
            pass
        return self.report()

    def _finish(self) -> None:
        if self.finished:
            return
        blocked = []
        for st in self.cores:
            if not st.halted:
                kind, plan = st.parked if st.parked else ("?", None)
                instr = st.stream[st.pc] if st.pc < len(st.stream) else None
                reason = "waiting for message" if kind == "recv" else "waiting at barrier"
                if kind == "recv":
                    reason += f" from core {st.g[plan.instr.rs3]}"
                blocked.append({"core": st.core, "pc": st.pc, "instr": str(instr), "reason": reason})
        if blocked:
            raise DeadlockError(blocked)
        self.finished = True

    def report(self) -> SimReport:
        self._finish()
        total = 0
        for st in self.cores:
            total = max(total, st.max_done + 1)
        if self.noc.bytes_sent:
            total = max(total, self.noc.last_arrival + 1)
        chip_cores = self.cfg.chip.core_count
        static_fj = self._fj.get("core_static_cycle", 0) * total * chip_cores
        breakdown: Counter = Counter()
        core_energy = []
        for st in self.cores:
            breakdown.update(st.energy_fj)
            core_energy.append(sum(st.energy_fj.values()))
        noc_fj = self._fj["noc_flit_hop"] * self.noc.flit_hops
        breakdown["noc_flit_hop"] += noc_fj
        if static_fj:
            breakdown["core_static_cycle"] += static_fj
        breakdown = Counter({k: v for k, v in breakdown.items() if v})
        energy_total = sum(core_energy) + noc_fj + static_fj
        unit_busy = {u: sum(st.busy[u] for st in self.cores) for u in UNIT_NAMES}
        stalls: Counter = Counter()
        for st in self.cores:
            stalls.update(st.stalls)
        pairs = sorted(set(self.noc.bytes_sent) | set(self.noc.bytes_received))
        noc = {
            "messages_in_flight": self.noc.in_flight(),
            "flit_hops": self.noc.flit_hops,
            "pairs": [{"src": s, "dst": d, "sent": self.noc.bytes_sent.get((s, d), 0),
                       "received": self.noc.bytes_received.get((s, d), 0)} for s, d in pairs],
        }
        capacity = {
            "macro_rows": self.cfg.unit.macro_rows,
            "mg_count": self.cfg.core.mg_count,
            "max_rows_loaded": max((max(st.ldw_rows.values(), default=0) for st in self.cores), default=0),
            "max_mgs_used": max((len(st.ldw_rows) for st in self.cores), default=0),
        }
        return SimReport(
            total_cycles=total, batch=int(self.p.metadata.get("batch", 1)),
            clock_hz=self.cfg.chip.clock_hz, core_count=len(self.cores),
            energy_fj=dict(breakdown), energy_total_fj=energy_total, core_energy_fj=core_energy,
            noc_energy_fj=noc_fj, static_energy_fj=static_fj, unit_busy=unit_busy,
            core_unit_busy=[dict(st.busy) for st in self.cores],
            instructions=[st.retired for st in self.cores], stalls=dict(stalls), noc=noc,
            capacity=capacity, outputs=self._outputs(),
        )

    def _outputs(self) -> dict[str, np.ndarray]:
        out = {}
        for name, info in self.p.metadata.get("outputs", {}).items():
            shape = tuple(info["shape"])
            n = int(np.prod(shape)) if shape else 1
            vals = []
            for addr in info["slots"]:
                lo = addr - GLOBAL_BASE
                vals.append(self.global_mem[lo:lo + n].view(np.int8).reshape(shape).copy())
            out[name] = np.stack(vals) if vals else np.zeros((0, *shape), dtype=np.int8)
        return out

    def trace(self) -> str:
        return "\n".join(self.trace_lines or []) + ("\n" if self.trace_lines else "")


def simulate(p: Program, cfg: ArchConfig, inputs: Mapping[str, np.ndarray] | None = None,
             isa: ISA = DEFAULT_ISA, trace: bool = False, max_cycles: int | None = None) -> SimReport:
    """Run ``p`` to completion and return the report."""
    return Simulator(p, cfg, isa, inputs, trace=trace, max_cycles=max_cycles).run()
