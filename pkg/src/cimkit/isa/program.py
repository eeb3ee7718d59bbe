"""Program container: per-core instruction streams plus memory images."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Any

from ..archconfig import ArchConfig
from .table import DEFAULT_ISA, ISA, IllegalInstruction, Instruction, decode, encode, validate_instruction

# Unified address map seen by every core:
#   [0, local_mem_bytes)                       that core's local memory
#   [GLOBAL_BASE, GLOBAL_BASE + global bytes)  shared global memory
GLOBAL_BASE = 0x1000_0000

MAGIC = b"CIMB"
VERSION = 1


class ProgramError(ValueError):
    pass


@dataclass(frozen=True)
class Section:
    name: str
    addr: int
    data: bytes


@dataclass
class Program:
    streams: list[list[Instruction]]
    global_sections: list[Section] = field(default_factory=list)
    local_sections: list[list[Section]] = field(default_factory=list)
    labels: list[dict[str, int]] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.streams)
        if not self.local_sections:
            self.local_sections = [[] for _ in range(n)]
        if not self.labels:
            self.labels = [{} for _ in range(n)]

    @property
    def core_count(self) -> int:
        return len(self.streams)

    def instruction_count(self) -> int:
        return sum(len(s) for s in self.streams)


def is_global(addr: int) -> bool:
    return addr >= GLOBAL_BASE


def validate_program(p: Program, cfg: ArchConfig, isa: ISA = DEFAULT_ISA,
                     require_halt: bool = True) -> None:
    if p.core_count > cfg.chip.core_count:
        raise ProgramError(f"program has {p.core_count} streams but chip has {cfg.chip.core_count} cores")
    if len(p.local_sections) != p.core_count or len(p.labels) != p.core_count:
        raise ProgramError("per-core tables do not match stream count")
    for core, stream in enumerate(p.streams):
        if len(stream) > cfg.core.instr_mem_words:
            raise ProgramError(f"core {core}: {len(stream)} instructions exceed "
                               f"instruction memory of {cfg.core.instr_mem_words} words")
        if require_halt and (not stream or stream[-1].mnemonic != "HALT"):
            raise ProgramError(f"core {core}: stream must end with HALT")
        for pc, instr in enumerate(stream):
            try:
                validate_instruction(instr, isa)
            except ValueError as exc:
                raise ProgramError(f"core {core} pc {pc}: {exc}") from exc
        for sec in p.local_sections[core]:
            if sec.addr < 0 or sec.addr + len(sec.data) > cfg.core.local_mem_bytes:
                raise ProgramError(f"core {core}: local section {sec.name!r} outside local memory")
    for sec in p.global_sections:
        lo = sec.addr - GLOBAL_BASE
        if lo < 0 or lo + len(sec.data) > cfg.chip.global_mem_bytes:
            raise ProgramError(f"global section {sec.name!r} outside global memory")


# -- binary container ---------------------------------------------------------
#
# header   : magic "CIMB", u16 version, u16 core count, u32 section count, u32 metadata bytes
# per core : u32 stream offset (words), u32 stream length (words)
# sections : u16 name length, name, i32 core (-1 = global), u32 addr, u32 length, data
# metadata : UTF-8 JSON holding labels and the caller's metadata
# words    : all instruction words, little-endian u32, streams concatenated


def to_bytes(p: Program, isa: ISA = DEFAULT_ISA) -> bytes:
    import json

    sections = [(-1, s) for s in p.global_sections]
    for core, secs in enumerate(p.local_sections):
        sections.extend((core, s) for s in secs)
    meta = json.dumps({"labels": p.labels, "metadata": p.metadata}, sort_keys=True).encode()

    out = bytearray()
    out += MAGIC
    out += struct.pack("<HHII", VERSION, p.core_count, len(sections), len(meta))
    offset = 0
    for stream in p.streams:
        out += struct.pack("<II", offset, len(stream))
        offset += len(stream)
    for core, sec in sections:
        name = sec.name.encode()
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<iII", core, sec.addr, len(sec.data)) + sec.data
    out += meta
    for stream in p.streams:
        for instr in stream:
            out += struct.pack("<I", encode(instr, isa))
    return bytes(out)


def from_bytes(blob: bytes, isa: ISA = DEFAULT_ISA) -> Program:
    if blob[:4] != MAGIC:
        raise ProgramError("not a CIMB container (bad magic)")
    try:
        return _parse(blob, isa)
    except (ProgramError, IllegalInstruction):
        raise
    except (struct.error, UnicodeDecodeError, ValueError, KeyError) as exc:
        raise ProgramError(f"truncated or corrupt CIMB container: {exc}") from None


def _parse(blob: bytes, isa: ISA) -> Program:
    import json

    if blob[:4] != MAGIC:
        raise ProgramError("not a CIMB container (bad magic)")
    pos = 4
    version, ncores, nsec, nmeta = struct.unpack_from("<HHII", blob, pos)
    pos += struct.calcsize("<HHII")
    if version != VERSION:
        raise ProgramError(f"unsupported container version {version}")
    spans = []
    for _ in range(ncores):
        spans.append(struct.unpack_from("<II", blob, pos))
        pos += 8
    global_sections: list[Section] = []
    local_sections: list[list[Section]] = [[] for _ in range(ncores)]
    for _ in range(nsec):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        core, addr, length = struct.unpack_from("<iII", blob, pos)
        pos += 12
        sec = Section(name, addr, bytes(blob[pos:pos + length]))
        pos += length
        (global_sections if core < 0 else local_sections[core]).append(sec)
    meta = json.loads(blob[pos:pos + nmeta].decode())
    pos += nmeta
    streams = []
    for offset, length in spans:
        base = pos + 4 * offset
        if base + 4 * length > len(blob):
            raise ProgramError("truncated instruction stream")
        words = struct.unpack_from(f"<{length}I", blob, base)
        streams.append([decode(w, isa) for w in words])
    return Program(streams, global_sections, local_sections,
                   [dict(l) for l in meta["labels"]], meta["metadata"])
