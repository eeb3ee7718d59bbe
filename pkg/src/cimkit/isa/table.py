"""Instruction descriptors and the 32-bit encoding.

Three formats share one rule: the opcode lives in bits [31:26].

    R4    opcode:6 funct:6 rd:5 rs1:5 rs2:5 rs3:5
    RI16  opcode:6 rd:5 rs1:5 imm16:16
    RF10  opcode:6 funct:6 rd:5 rs1:5 imm10:10

Immediates are two's complement.  Fields an instruction does not use must
be zero, so every valid word decodes to exactly one Instruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Callable, Iterable

from ..archconfig import ENERGY_EVENTS, PerfModel

# (name, width) from most significant to least significant bit
FORMATS: dict[str, tuple[tuple[str, int], ...]] = {
    "R4": (("opcode", 6), ("funct", 6), ("rd", 5), ("rs1", 5), ("rs2", 5), ("rs3", 5)),
    "RI16": (("opcode", 6), ("rd", 5), ("rs1", 5), ("imm", 16)),
    "RF10": (("opcode", 6), ("funct", 6), ("rd", 5), ("rs1", 5), ("imm", 10)),
}
IMM_BITS = {"R4": 0, "RI16": 16, "RF10": 10}

UNITS = ("cim", "vector", "scalar", "memory", "comm")
CATEGORIES = ("cim", "vector", "scalar", "memory", "communication", "control")


class IllegalInstruction(ValueError):
    pass


class EncodingError(ValueError):
    pass


class ISAError(ValueError):
    pass


class SReg(IntEnum):
    """Fixed special-purpose register assignment."""

    MG_MASK = 0          # macro groups activated by CIM.MVM
    OUT_WIDTH = 1        # int32 outputs written by CIM.MVM
    QUANT_MULT = 2
    QUANT_SHIFT = 3
    ELEM_BYTES = 4       # 1 (int8, saturating) or 4 (int32, wrapping) for VEC arithmetic
    GEO_H = 5            # tensor geometry for VEC.IM2COL / VEC.POOL*
    GEO_W = 6
    GEO_C = 7
    WIN_KH = 8
    WIN_KW = 9
    WIN_STRIDE = 10
    WIN_PAD = 11
    IM2COL_ORDER = 12    # 0: (ky, kx, c) rows, 1: (c, ky, kx) rows
    SYNC_MASK_LO = 13
    SYNC_MASK_HI = 14
    QUANT_IN_BYTES = 15  # element width read by VEC.QUANT
    LDW_ROW_BYTES = 16   # bytes per weight row read by CIM.LDW


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    rs3: int = 0
    imm: int = 0

    def __str__(self) -> str:
        return format_instruction(self)


@dataclass(frozen=True)
class InstrDescriptor:
    mnemonic: str
    opcode: int
    funct: int | None
    fmt: str
    unit: str
    category: str
    latency_key: str
    energy_key: str | None
    # assembly operand order; entries are field names, "sd" marks rd as an S_Reg
    operands: tuple[str, ...] = ()
    # "fixed": latency = coefficient; "elements": coefficient * element count in rs2
    latency_basis: str = "fixed"
    # optional elementwise int8 kernel (numpy array -> numpy array) for vector extensions
    semantics: Callable | None = field(default=None, compare=False)

    @property
    def used_fields(self) -> frozenset[str]:
        return frozenset("rd" if o == "sd" else o for o in self.operands)


def _d(mn, op, funct, fmt, unit, cat, lat, energy, operands, basis="fixed"):
    return InstrDescriptor(mn, op, funct, fmt, unit, cat, lat, energy, tuple(operands), basis)


OP_NOP = 0x00
OP_CIM = 0x01
OP_CIM_CFG = 0x02
OP_VEC = 0x04
OP_SCALAR = 0x08
OP_LI = 0x09
OP_LUI = 0x0A
OP_ADDI = 0x0B
OP_LD = 0x0C
OP_ST = 0x0D
OP_MEM = 0x10
OP_NOC = 0x14
OP_JMP = 0x3C
OP_BEQ = 0x3D
OP_BNE = 0x3E
OP_HALT = 0x3F

R3 = ("rd", "rs1", "rs2")
R4ALL = ("rd", "rs1", "rs2", "rs3")

SHIPPED: tuple[InstrDescriptor, ...] = (
    _d("CIM.CFG", OP_CIM_CFG, 0, "RF10", "scalar", "cim", "scalar_cycles", "scalar_op", ("sd", "rs1", "imm")),
    _d("CIM.LDW", OP_CIM, 1, "R4", "cim", "cim", "cim_load_cycles_per_row", "cim_weight_write_byte", R4ALL),
    _d("CIM.MVM", OP_CIM, 2, "R4", "cim", "cim", "cim_mvm_cycles", "cim_mac", R3),
    _d("VEC.ADD", OP_VEC, 0, "R4", "vector", "vector", "vector_cycles_per_elem", "vector_elem_op", R4ALL, "elements"),
    _d("VEC.SUB", OP_VEC, 1, "R4", "vector", "vector", "vector_cycles_per_elem", "vector_elem_op", R4ALL, "elements"),
    _d("VEC.MUL", OP_VEC, 2, "R4", "vector", "vector", "vector_cycles_per_elem", "vector_elem_op", R4ALL, "elements"),
    _d("VEC.MAX", OP_VEC, 3, "R4", "vector", "vector", "vector_cycles_per_elem", "vector_elem_op", R4ALL, "elements"),
    _d("VEC.RELU", OP_VEC, 4, "R4", "vector", "vector", "vector_cycles_per_elem", "vector_elem_op", R3, "elements"),
    _d("VEC.QUANT", OP_VEC, 5, "R4", "vector", "vector", "vector_cycles_per_elem", "vector_elem_op", R3, "elements"),
    _d("VEC.POOLMAX", OP_VEC, 6, "R4", "vector", "vector", "vector_cycles_per_elem", "vector_elem_op", ("rd", "rs1"), "elements"),
    _d("VEC.POOLAVG", OP_VEC, 7, "R4", "vector", "vector", "vector_cycles_per_elem", "vector_elem_op", ("rd", "rs1"), "elements"),
    _d("VEC.IM2COL", OP_VEC, 8, "R4", "vector", "vector", "vector_cycles_per_elem", "vector_elem_op", R3, "elements"),
    _d("S.ADD", OP_SCALAR, 0, "R4", "scalar", "scalar", "scalar_cycles", "scalar_op", R3),
    _d("S.SUB", OP_SCALAR, 1, "R4", "scalar", "scalar", "scalar_cycles", "scalar_op", R3),
    _d("S.MUL", OP_SCALAR, 2, "R4", "scalar", "scalar", "scalar_cycles", "scalar_op", R3),
    _d("S.SLT", OP_SCALAR, 3, "R4", "scalar", "scalar", "scalar_cycles", "scalar_op", R3),
    _d("S.LI", OP_LI, None, "RI16", "scalar", "scalar", "scalar_cycles", "scalar_op", ("rd", "imm")),
    _d("S.LUI", OP_LUI, None, "RI16", "scalar", "scalar", "scalar_cycles", "scalar_op", ("rd", "imm")),
    _d("S.ADDI", OP_ADDI, None, "RI16", "scalar", "scalar", "scalar_cycles", "scalar_op", ("rd", "rs1", "imm")),
    _d("S.LD", OP_LD, None, "RI16", "memory", "scalar", "mem_cycles_per_word_local", "local_mem_byte", ("rd", "rs1", "imm")),
    _d("S.ST", OP_ST, None, "RI16", "memory", "scalar", "mem_cycles_per_word_local", "local_mem_byte", ("rd", "rs1", "imm")),
    _d("MEM.CPY", OP_MEM, 0, "R4", "memory", "memory", "mem_cycles_per_word_local", "local_mem_byte", ("rs1", "rs2", "rs3")),
    _d("NOC.SEND", OP_NOC, 0, "R4", "comm", "communication", "mem_cycles_per_word_local", "noc_flit_hop", ("rs1", "rs2", "rs3")),
    _d("NOC.RECV", OP_NOC, 1, "R4", "comm", "communication", "mem_cycles_per_word_local", "local_mem_byte", ("rd", "rs2", "rs3")),
    _d("SYNC", OP_NOC, 2, "R4", "comm", "communication", "scalar_cycles", None, ()),
    _d("JMP", OP_JMP, None, "RI16", "scalar", "control", "scalar_cycles", "scalar_op", ("imm",)),
    _d("BEQ", OP_BEQ, None, "RI16", "scalar", "control", "scalar_cycles", "scalar_op", ("rd", "rs1", "imm")),
    _d("BNE", OP_BNE, None, "RI16", "scalar", "control", "scalar_cycles", "scalar_op", ("rd", "rs1", "imm")),
    _d("NOP", OP_NOP, 0, "R4", "scalar", "control", "scalar_cycles", None, ()),
    _d("HALT", OP_HALT, 0, "R4", "scalar", "control", "scalar_cycles", None, ()),
)

BRANCHES = frozenset({"JMP", "BEQ", "BNE"})


class ISA:
    """Immutable instruction table; extend with :meth:`with_instruction`."""

    def __init__(self, descriptors: Iterable[InstrDescriptor], perf: PerfModel | None = None):
        self._by_mnemonic: dict[str, InstrDescriptor] = {}
        self._by_code: dict[tuple[int, int | None], InstrDescriptor] = {}
        self._fmt_of_opcode: dict[int, str] = {}
        for desc in descriptors:
            self._add(desc, perf)

    def _add(self, desc: InstrDescriptor, perf: PerfModel | None) -> None:
        if desc.fmt not in FORMATS:
            raise ISAError(f"{desc.mnemonic}: unknown format {desc.fmt}")
        if not 0 <= desc.opcode < 64:
            raise ISAError(f"{desc.mnemonic}: opcode out of range")
        if desc.fmt == "RI16":
            if desc.funct is not None:
                raise ISAError(f"{desc.mnemonic}: RI16 has no funct field")
        elif desc.funct is None or not 0 <= desc.funct < 64:
            raise ISAError(f"{desc.mnemonic}: {desc.fmt} needs a 6-bit funct")
        if desc.unit not in UNITS:
            raise ISAError(f"{desc.mnemonic}: unknown unit {desc.unit}")
        if desc.category not in CATEGORIES:
            raise ISAError(f"{desc.mnemonic}: unknown category {desc.category}")
        if desc.mnemonic in self._by_mnemonic:
            raise ISAError(f"duplicate mnemonic {desc.mnemonic}")
        known_fmt = self._fmt_of_opcode.get(desc.opcode)
        if known_fmt is not None and known_fmt != desc.fmt:
            raise ISAError(f"{desc.mnemonic}: opcode {desc.opcode:#x} already used by format {known_fmt}")
        key = (desc.opcode, desc.funct)
        if key in self._by_code or (desc.fmt == "RI16" and known_fmt is not None):
            raise ISAError(f"{desc.mnemonic}: opcode/funct collision {key}")
        perf = perf or PerfModel()
        if not perf.has_latency_key(desc.latency_key):
            raise ISAError(f"{desc.mnemonic}: unknown latency key {desc.latency_key!r}")
        if desc.energy_key is not None and desc.energy_key not in perf.energy:
            raise ISAError(f"{desc.mnemonic}: unknown energy key {desc.energy_key!r}")
        self._by_mnemonic[desc.mnemonic] = desc
        self._by_code[key] = desc
        self._fmt_of_opcode[desc.opcode] = desc.fmt

    def with_instruction(self, desc: InstrDescriptor, perf: PerfModel | None = None) -> "ISA":
        return ISA([*self.descriptors(), desc], perf)

    def descriptors(self) -> list[InstrDescriptor]:
        return list(self._by_mnemonic.values())

    def __contains__(self, mnemonic: str) -> bool:
        return mnemonic in self._by_mnemonic

    def __getitem__(self, mnemonic: str) -> InstrDescriptor:
        try:
            return self._by_mnemonic[mnemonic]
        except KeyError:
            raise ISAError(f"unknown mnemonic {mnemonic!r}") from None

    def lookup(self, opcode: int, funct: int | None) -> InstrDescriptor | None:
        return self._by_code.get((opcode, funct))

    def format_of(self, opcode: int) -> str | None:
        return self._fmt_of_opcode.get(opcode)

    def check_perf(self, perf: PerfModel) -> None:
        """Every descriptor key must resolve against ``perf``."""
        for desc in self.descriptors():
            if not perf.has_latency_key(desc.latency_key):
                raise ISAError(f"{desc.mnemonic}: unknown latency key {desc.latency_key!r}")
            if desc.energy_key is not None and desc.energy_key not in perf.energy:
                raise ISAError(f"{desc.mnemonic}: unknown energy key {desc.energy_key!r}")


def register_instruction(isa: ISA, desc: InstrDescriptor, perf: PerfModel | None = None) -> ISA:
    return isa.with_instruction(desc, perf)


DEFAULT_ISA = ISA(SHIPPED)
assert set(ENERGY_EVENTS) >= {d.energy_key for d in SHIPPED if d.energy_key}


def imm_range(fmt: str) -> tuple[int, int]:
    bits = IMM_BITS[fmt]
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def validate_instruction(instr: Instruction, isa: ISA = DEFAULT_ISA) -> InstrDescriptor:
    desc = isa[instr.mnemonic]
    used = desc.used_fields
    for name in ("rd", "rs1", "rs2", "rs3"):
        v = getattr(instr, name)
        if name in used:
            if not 0 <= v < 32:
                raise EncodingError(f"{instr.mnemonic}: {name}={v} out of range 0..31")
        elif v != 0:
            raise EncodingError(f"{instr.mnemonic}: field {name} is unused and must be 0")
    if "imm" in used:
        lo, hi = imm_range(desc.fmt)
        if not lo <= instr.imm <= hi:
            raise EncodingError(f"{instr.mnemonic}: immediate {instr.imm} outside [{lo}, {hi}]")
    elif instr.imm != 0:
        raise EncodingError(f"{instr.mnemonic}: immediate is unused and must be 0")
    return desc


def encode(instr: Instruction, isa: ISA = DEFAULT_ISA) -> int:
    desc = validate_instruction(instr, isa)
    values = {
        "opcode": desc.opcode,
        "funct": desc.funct or 0,
        "rd": instr.rd,
        "rs1": instr.rs1,
        "rs2": instr.rs2,
        "rs3": instr.rs3,
        "imm": instr.imm,
    }
    word = 0
    for name, width in FORMATS[desc.fmt]:
        word = (word << width) | (values[name] & ((1 << width) - 1))
    return word


def _fields(word: int, fmt: str) -> dict[str, int]:
    out = {}
    shift = 32
    for name, width in FORMATS[fmt]:
        shift -= width
        out[name] = (word >> shift) & ((1 << width) - 1)
    return out


def decode(word: int, isa: ISA = DEFAULT_ISA) -> Instruction:
    if not 0 <= word < (1 << 32):
        raise IllegalInstruction(f"word {word:#x} is not 32 bits")
    opcode = word >> 26
    fmt = isa.format_of(opcode)
    if fmt is None:
        raise IllegalInstruction(f"unassigned opcode {opcode:#04x} in word {word:#010x}")
    f = _fields(word, fmt)
    desc = isa.lookup(opcode, None if fmt == "RI16" else f["funct"])
    if desc is None:
        raise IllegalInstruction(f"unassigned funct {f.get('funct')} for opcode {opcode:#04x}")
    if "imm" in f:
        bits = IMM_BITS[fmt]
        if f["imm"] & (1 << (bits - 1)):
            f["imm"] -= 1 << bits
    used = desc.used_fields
    kwargs = {}
    for name in ("rd", "rs1", "rs2", "rs3", "imm"):
        v = f.get(name, 0)
        if name not in used:
            if v != 0:
                raise IllegalInstruction(f"{desc.mnemonic}: reserved field {name} is nonzero in {word:#010x}")
            continue
        kwargs[name] = v
    return Instruction(desc.mnemonic, **kwargs)


def format_instruction(instr: Instruction, isa: ISA = DEFAULT_ISA,
                       target_label: str | None = None) -> str:
    desc = isa[instr.mnemonic]
    parts = []
    for op in desc.operands:
        if op == "sd":
            parts.append(f"s{instr.rd}")
        elif op == "imm":
            if target_label is not None and instr.mnemonic in BRANCHES:
                parts.append(target_label)
            else:
                parts.append(str(instr.imm))
        else:
            parts.append(f"r{getattr(instr, op)}")
    return instr.mnemonic + (" " + ", ".join(parts) if parts else "")


def make(mnemonic: str, *operands: int, isa: ISA = DEFAULT_ISA) -> Instruction:
    """Build an instruction from positional operands in assembly order."""
    desc = isa[mnemonic]
    if len(operands) != len(desc.operands):
        raise EncodingError(f"{mnemonic} takes {len(desc.operands)} operands, got {len(operands)}")
    kwargs = {("rd" if name == "sd" else name): v for name, v in zip(desc.operands, operands)}
    instr = Instruction(mnemonic, **kwargs)
    validate_instruction(instr, isa)
    return instr


def replace_fields(instr: Instruction, **changes: int) -> Instruction:
    return replace(instr, **changes)
