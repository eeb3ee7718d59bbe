"""Per-core IR with virtual registers, and the cleanup passes.

Operands follow assembly order.  Register operands are :class:`V` (virtual)
values; ``V(0)`` is the hard-wired zero register.  Immediates are ints and
branch targets are label names.  ``meta`` carries buffer names so dead
memory transfers can be found without alias analysis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..isa.table import BRANCHES, DEFAULT_ISA, ISA, Instruction, make
from .loopnest import LoweringError

IMM16 = (-(1 << 15), (1 << 15) - 1)
IMM10 = (-(1 << 9), (1 << 9) - 1)
SCALAR_WRITERS = frozenset({"S.ADD", "S.SUB", "S.MUL", "S.SLT", "S.LI", "S.LUI", "S.ADDI", "S.LD"})
PURE = SCALAR_WRITERS - {"S.LD"}

SPILL_BASE_REG = 31
SCRATCH_REGS = (27, 28, 29, 30)
ALLOCATABLE = tuple(range(1, 27))


@dataclass(frozen=True)
class V:
    n: int

    def __repr__(self) -> str:
        return f"v{self.n}" if self.n else "zero"


ZERO = V(0)


@dataclass(frozen=True)
class Phys:
    """A physical G_Reg after allocation."""
    n: int

    def __repr__(self) -> str:
        return f"r{self.n}"


@dataclass
class IRInstr:
    mnemonic: str
    ops: list
    meta: dict = field(default_factory=dict)

    @property
    def is_label(self) -> bool:
        return self.mnemonic == "LABEL"

    def defs(self) -> list[V]:
        if self.mnemonic in SCALAR_WRITERS and self.ops[0] != ZERO:
            return [self.ops[0]]
        return []

    def uses(self) -> list[V]:
        regs = [o for o in self.ops if isinstance(o, V)]
        if self.mnemonic in SCALAR_WRITERS:
            regs = regs[1:]
        return [r for r in regs if r != ZERO]

    def text(self) -> str:
        if self.is_label:
            return f"{self.ops[0]}:"
        ops = ", ".join(f"s{o}" if (i == 0 and self.mnemonic == "CIM.CFG") else
                        (repr(o) if isinstance(o, (V, Phys)) else str(o)) for i, o in enumerate(self.ops))
        return f"    {self.mnemonic} {ops}".rstrip()


def fits(v: int, rng: tuple[int, int]) -> bool:
    return rng[0] <= v <= rng[1]


class IRBuilder:
    """Emits IR for one core; tracks known special-register values."""

    def __init__(self, core: int):
        self.core = core
        self.code: list[IRInstr] = []
        self._next = 1
        self._labels = 0
        self.sregs: dict[int, int] = {}

    def new(self) -> V:
        v = V(self._next)
        self._next += 1
        return v

    def label(self, hint: str = "L") -> str:
        self._labels += 1
        return f"{hint}{self._labels}"

    def place(self, name: str) -> None:
        self.code.append(IRInstr("LABEL", [name]))

    def emit(self, mnemonic: str, *ops, **meta) -> None:
        self.code.append(IRInstr(mnemonic, list(ops), meta))

    def li(self, value: int) -> V:
        v = self.new()
        self.set_const(v, value)
        return v

    def set_const(self, v: V, value: int) -> None:
        if not -(1 << 31) <= value < (1 << 31):
            raise LoweringError(f"constant {value} does not fit 32 bits")
        if fits(value, IMM16):
            self.emit("S.LI", v, value)
            return
        hi = (value + 0x8000) >> 16
        lo = value - (hi << 16)
        if hi >= 1 << 15:
            hi -= 1 << 16
        self.emit("S.LUI", v, hi)
        if lo:
            self.emit("S.ADDI", v, v, lo)

    def addi(self, src: V, imm: int) -> V:
        v = self.new()
        if fits(imm, IMM16):
            self.emit("S.ADDI", v, src, imm)
        else:
            self.emit("S.ADD", v, src, self.li(imm))
        return v

    def bump(self, v: V, imm: int) -> None:
        """v += imm in place (a second definition; used for loop variables)."""
        if fits(imm, IMM16):
            self.emit("S.ADDI", v, v, imm)
        else:
            self.emit("S.ADD", v, v, self.li(imm))

    def cfg(self, sreg: int, value: int, force: bool = False) -> None:
        if not force and self.sregs.get(sreg) == value:
            return
        if fits(value, IMM10):
            self.emit("CIM.CFG", int(sreg), ZERO, value)
        else:
            self.emit("CIM.CFG", int(sreg), self.li(value), 0)
        self.sregs[sreg] = value

    def forget(self, *sregs: int) -> None:
        for s in sregs:
            self.sregs.pop(s, None)


def format_ir(code: list[IRInstr]) -> str:
    return "\n".join(i.text() for i in code) + "\n"


# -- passes ----------------------------------------------------------------

def _def_counts(code: list[IRInstr]) -> dict[V, int]:
    counts: dict[V, int] = {}
    for ins in code:
        for d in ins.defs():
            counts[d] = counts.get(d, 0) + 1
    return counts


def _wrap(v: int) -> int:
    return ((v + 0x8000_0000) & 0xFFFF_FFFF) - 0x8000_0000


_FOLD = {
    "S.ADD": lambda a, b: a + b,
    "S.SUB": lambda a, b: a - b,
    "S.MUL": lambda a, b: a * b,
    "S.SLT": lambda a, b: int(a < b),
}


def constant_propagation(code: list[IRInstr]) -> list[IRInstr]:
    """Fold single-definition constants and drop repeated special-register writes."""
    counts = _def_counts(code)
    known: dict[V, int] = {ZERO: 0}
    out: list[IRInstr] = []
    sregs: dict[int, int] = {}
    for ins in code:
        mn, ops = ins.mnemonic, ins.ops
        if ins.is_label or mn in BRANCHES or mn in ("SYNC", "NOC.RECV"):
            sregs = {}
        if mn in SCALAR_WRITERS and ops[0] != ZERO:
            dst = ops[0]
            single = counts.get(dst) == 1
            val = None
            if mn == "S.LI":
                val = ops[1]
            elif mn == "S.LUI":
                val = _wrap((ops[1] & 0xFFFF) << 16)
            elif mn == "S.ADDI" and ops[1] in known:
                val = _wrap(known[ops[1]] + ops[2])
            elif mn in _FOLD and ops[1] in known and ops[2] in known:
                val = _wrap(_FOLD[mn](known[ops[1]], known[ops[2]]))
            if val is not None and single:
                known[dst] = val
                if mn not in ("S.LI", "S.LUI") and fits(val, IMM16):
                    ins = IRInstr("S.LI", [dst, val], ins.meta)
            elif mn == "S.ADD" and ops[2] in known and fits(known[ops[2]], IMM16):
                ins = IRInstr("S.ADDI", [dst, ops[1], known[ops[2]]], ins.meta)
            elif mn == "S.ADD" and ops[1] in known and fits(known[ops[1]], IMM16):
                ins = IRInstr("S.ADDI", [dst, ops[2], known[ops[1]]], ins.meta)
        elif mn == "CIM.CFG":
            sreg, src, imm = ops
            if src in known:
                val = _wrap(known[src] + imm)
                if fits(val, IMM10):
                    ins = IRInstr("CIM.CFG", [sreg, ZERO, val], ins.meta)
                if sregs.get(sreg) == val:
                    continue
                sregs[sreg] = val
            else:
                sregs.pop(sreg, None)
        out.append(ins)
    return out


def dead_code_elimination(code: list[IRInstr]) -> list[IRInstr]:
    """Remove pure instructions whose results are never read, and memory
    transfers into buffers nobody reads."""
    code = list(code)
    while True:
        used: set[V] = set()
        read_bufs: set[str] = set()
        for ins in code:
            used.update(ins.uses())
            read_bufs.update(ins.meta.get("reads", ()))
        keep = []
        for ins in code:
            if ins.mnemonic in PURE and not any(d in used for d in ins.defs()) and ins.defs():
                continue
            if ins.meta.get("load") and ins.meta["load"] not in read_bufs:
                continue
            keep.append(ins)
        if len(keep) == len(code):
            return keep
        code = keep


@dataclass
class _Interval:
    v: V
    start: int
    end: int
    reg: int | None = None
    slot: int | None = None


def _intervals(code: list[IRInstr]) -> dict[V, _Interval]:
    iv: dict[V, _Interval] = {}
    for pos, ins in enumerate(code):
        for r in ins.uses() + ins.defs():
            if r not in iv:
                iv[r] = _Interval(r, pos, pos)
            else:
                iv[r].end = pos
    labels = {ins.ops[0]: pos for pos, ins in enumerate(code) if ins.is_label}
    # a value live into a loop stays live across the whole loop body
    changed = True
    while changed:
        changed = False
        for pos, ins in enumerate(code):
            if ins.mnemonic in BRANCHES and isinstance(ins.ops[-1], str):
                head = labels[ins.ops[-1]]
                if head > pos:
                    continue
                for it in iv.values():
                    if it.start < head <= it.end < pos:
                        it.end = pos
                        changed = True
    return iv


def register_allocation(code: list[IRInstr], spill_slots: int) -> tuple[list[IRInstr], int]:
    """Linear-scan allocation onto the physical G_Regs.

    Returns rewritten code (register operands become :class:`Phys`) and the number of
    spill slots used.  Spilled values live at ``r31 + 4*slot`` and are
    reloaded into scratch registers around each use.
    """
    iv = _intervals(code)
    order = sorted(iv.values(), key=lambda it: (it.start, it.v.n))
    free = list(ALLOCATABLE)
    active: list[_Interval] = []
    nslots = 0
    for it in order:
        for a in list(active):
            if a.end < it.start:
                active.remove(a)
                free.append(a.reg)
        free.sort()
        if free:
            it.reg = free.pop(0)
            active.append(it)
            continue
        victim = max(active, key=lambda a: (a.end, a.v.n))
        if victim.end > it.end:
            it.reg, victim.reg = victim.reg, None
            victim.slot = nslots
            active.remove(victim)
            active.append(it)
        else:
            it.slot = nslots
        nslots += 1
        if nslots > spill_slots:
            raise LoweringError(f"register pressure needs more than {spill_slots} spill slots")

    out: list[IRInstr] = []
    for ins in code:
        if ins.is_label:
            out.append(ins)
            continue
        pre, post = [], []
        scratch = list(SCRATCH_REGS)
        mapping: dict[V, int] = {ZERO: 0}
        for r in ins.uses():
            it = iv[r]
            if it.reg is not None:
                mapping[r] = it.reg
            elif r not in mapping:
                s = scratch.pop(0)
                mapping[r] = s
                pre.append(IRInstr("S.LD", [Phys(s), Phys(SPILL_BASE_REG), 4 * it.slot]))
        for d in ins.defs():
            it = iv[d]
            if it.reg is not None:
                mapping[d] = it.reg
            else:
                s = mapping.get(d) or scratch.pop(0)
                mapping[d] = s
                post.append(IRInstr("S.ST", [Phys(s), Phys(SPILL_BASE_REG), 4 * it.slot]))
        ops = [Phys(mapping[o]) if isinstance(o, V) else o for o in ins.ops]
        out.extend(pre)
        out.append(IRInstr(ins.mnemonic, ops, ins.meta))
        out.extend(post)
    return out, nslots


def assemble_ir(code: list[IRInstr], isa: ISA = DEFAULT_ISA) -> tuple[list[Instruction], dict[str, int]]:
    """Resolve labels and build machine instructions from allocated IR."""
    labels: dict[str, int] = {}
    pc = 0
    for ins in code:
        if ins.is_label:
            labels[ins.ops[0]] = pc
        else:
            pc += 1
    stream = []
    for ins in code:
        if ins.is_label:
            continue
        ops = list(ins.ops)
        if ins.mnemonic in BRANCHES and isinstance(ops[-1], str):
            ops[-1] = labels[ops[-1]] - (len(stream) + 1)
        if any(isinstance(o, V) for o in ops):
            raise LoweringError(f"unallocated register in {ins.text().strip()}")
        ops = [o.n if isinstance(o, Phys) else o for o in ops]
        stream.append(make(ins.mnemonic, *ops, isa=isa))
    return stream, labels
