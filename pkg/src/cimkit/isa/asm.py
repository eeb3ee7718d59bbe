"""Text assembler and disassembler.

Syntax (one statement per line, ``;`` starts a comment)::

    .meta {"json": "object"}     program metadata, at most once
    .global NAME ADDR            open a global-memory section
    .core N                      following instructions belong to core N
    .local NAME ADDR             open a local-memory section of the current core
    .data HEX                    append bytes to the open section
    label:                       label at the next instruction of the current core
    S.ADDI r1, r1, -4            registers r0..r31, special registers s0..s31
    BNE r1, r2, loop             branch targets: label or word offset from the next pc
"""

from __future__ import annotations

import json
import re

from ..archconfig import ArchConfig
from .program import Program, Section
from .table import BRANCHES, DEFAULT_ISA, ISA, EncodingError, format_instruction, make

_LABEL_RE = re.compile(r"^([A-Za-z_.$][\w.$]*):$")
_IDENT_RE = re.compile(r"^[A-Za-z_.$][\w.$]*$")
DATA_CHUNK = 64


class AsmError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _parse_int(tok: str) -> int:
    return int(tok, 0)


def assemble(text: str, cfg: ArchConfig | None = None, isa: ISA = DEFAULT_ISA) -> Program:
    streams: dict[int, list] = {}
    labels: dict[int, dict[str, int]] = {}
    local_secs: dict[int, list[list]] = {}
    global_secs: list[list] = []
    pending: dict[int, list[tuple[int, int, str, int]]] = {}  # core -> (pc, operand idx, label, line)
    metadata: dict = {}
    core: int | None = None
    open_section: list | None = None
    seen_meta = False

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith(".meta"):
            if seen_meta:
                raise AsmError(lineno, "duplicate .meta directive")
            try:
                metadata = json.loads(line[5:].strip() or "{}")
            except json.JSONDecodeError as exc:
                raise AsmError(lineno, f"bad .meta JSON: {exc}") from None
            seen_meta = True
            continue
        if line.startswith(".core"):
            parts = line.split()
            if len(parts) != 2:
                raise AsmError(lineno, ".core takes one argument")
            try:
                core = _parse_int(parts[1])
            except ValueError:
                raise AsmError(lineno, f"bad core id {parts[1]!r}") from None
            if core < 0:
                raise AsmError(lineno, "core id must be >= 0")
            streams.setdefault(core, [])
            labels.setdefault(core, {})
            local_secs.setdefault(core, [])
            open_section = None
            continue
        if line.startswith(".global") or line.startswith(".local"):
            parts = line.split()
            if len(parts) != 3:
                raise AsmError(lineno, f"{parts[0]} takes NAME ADDR")
            sec = [parts[1], _parse_int(parts[2]), bytearray()]
            if parts[0] == ".global":
                global_secs.append(sec)
            else:
                if core is None:
                    raise AsmError(lineno, ".local outside a .core block")
                local_secs[core].append(sec)
            open_section = sec
            continue
        if line.startswith(".data"):
            if open_section is None:
                raise AsmError(lineno, ".data without an open section")
            try:
                open_section[2] += bytes.fromhex(line[5:].strip())
            except ValueError:
                raise AsmError(lineno, "bad hex in .data") from None
            continue
        if line.startswith("."):
            raise AsmError(lineno, f"unknown directive {line.split()[0]}")
        if core is None:
            raise AsmError(lineno, "instruction or label outside a .core block")
        m = _LABEL_RE.match(line)
        if m:
            name = m.group(1)
            if name in labels[core]:
                raise AsmError(lineno, f"duplicate label {name!r}")
            labels[core][name] = len(streams[core])
            continue

        mnemonic, _, rest = line.partition(" ")
        mnemonic = mnemonic.upper()
        if mnemonic not in isa:
            raise AsmError(lineno, f"unknown mnemonic {mnemonic!r}")
        desc = isa[mnemonic]
        toks = [t.strip() for t in rest.split(",")] if rest.strip() else []
        if len(toks) != len(desc.operands):
            raise AsmError(lineno, f"{mnemonic} expects {len(desc.operands)} operands, got {len(toks)}")
        values = []
        for idx, (kind, tok) in enumerate(zip(desc.operands, toks)):
            if kind == "sd":
                if not re.fullmatch(r"[sS]\d+", tok):
                    raise AsmError(lineno, f"expected special register, got {tok!r}")
                values.append(int(tok[1:]))
            elif kind == "imm":
                try:
                    values.append(_parse_int(tok))
                except ValueError:
                    if mnemonic in BRANCHES and _IDENT_RE.match(tok):
                        pending.setdefault(core, []).append((len(streams[core]), idx, tok, lineno))
                        values.append(0)
                    else:
                        raise AsmError(lineno, f"bad immediate {tok!r}") from None
            else:
                if not re.fullmatch(r"[rR]\d+", tok):
                    raise AsmError(lineno, f"expected register, got {tok!r}")
                values.append(int(tok[1:]))
        try:
            streams[core].append(make(mnemonic, *values, isa=isa))
        except EncodingError as exc:
            raise AsmError(lineno, str(exc)) from None

    for c, fixups in pending.items():
        for pc, idx, name, lineno in fixups:
            if name not in labels[c]:
                raise AsmError(lineno, f"undefined label {name!r}")
            instr = streams[c][pc]
            ops = list(_operands_of(instr, isa))
            ops[idx] = labels[c][name] - (pc + 1)
            try:
                streams[c][pc] = make(instr.mnemonic, *ops, isa=isa)
            except EncodingError as exc:
                raise AsmError(lineno, f"branch to {name!r} out of range: {exc}") from None

    ncores = max(streams) + 1 if streams else 0
    if cfg is not None:
        if ncores > cfg.chip.core_count:
            raise AsmError(0, f"program uses {ncores} cores, chip has {cfg.chip.core_count}")
        for c, s in streams.items():
            if len(s) > cfg.core.instr_mem_words:
                raise AsmError(0, f"core {c}: stream overflow ({len(s)} > {cfg.core.instr_mem_words} words)")
    return Program(
        streams=[streams.get(c, []) for c in range(ncores)],
        global_sections=[Section(n, a, bytes(d)) for n, a, d in global_secs],
        local_sections=[[Section(n, a, bytes(d)) for n, a, d in local_secs.get(c, [])]
                        for c in range(ncores)],
        labels=[labels.get(c, {}) for c in range(ncores)],
        metadata=metadata,
    )


def _operands_of(instr, isa: ISA):
    desc = isa[instr.mnemonic]
    for kind in desc.operands:
        yield getattr(instr, "rd" if kind == "sd" else kind)


def _data_lines(data: bytes) -> list[str]:
    return [f".data {data[i:i + DATA_CHUNK].hex()}" for i in range(0, len(data), DATA_CHUNK)]


def disassemble(p: Program, isa: ISA = DEFAULT_ISA) -> str:
    out = []
    if p.metadata:
        out.append(".meta " + json.dumps(p.metadata, sort_keys=True, separators=(",", ":")))
    for sec in p.global_sections:
        out.append(f".global {sec.name} {sec.addr:#x}")
        out.extend(_data_lines(sec.data))
    for core, stream in enumerate(p.streams):
        out.append(f".core {core}")
        for sec in p.local_sections[core]:
            out.append(f".local {sec.name} {sec.addr:#x}")
            out.extend(_data_lines(sec.data))
        at_pc: dict[int, list[str]] = {}
        for name, pc in sorted(p.labels[core].items()):
            at_pc.setdefault(pc, []).append(name)
        for pc, instr in enumerate(stream):
            for name in at_pc.get(pc, []):
                out.append(f"{name}:")
            target = None
            if instr.mnemonic in BRANCHES:
                names = at_pc.get(pc + 1 + instr.imm)
                target = names[0] if names else None
            out.append("    " + format_instruction(instr, isa, target))
        for name in at_pc.get(len(stream), []):
            out.append(f"{name}:")
    return "\n".join(out) + "\n"
