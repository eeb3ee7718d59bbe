"""32-bit CIM instruction set: descriptors, encoding, programs, assembly."""

from .asm import AsmError, assemble, disassemble
from .program import (GLOBAL_BASE, Program, ProgramError, Section, from_bytes, is_global,
                      to_bytes, validate_program)
from .table import (BRANCHES, DEFAULT_ISA, ISA, EncodingError, IllegalInstruction, InstrDescriptor,
                    Instruction, ISAError, SReg, decode, encode, format_instruction, make,
                    register_instruction, validate_instruction)

__all__ = [
    "AsmError", "assemble", "disassemble", "GLOBAL_BASE", "Program", "ProgramError", "Section",
    "from_bytes", "is_global", "to_bytes", "validate_program", "BRANCHES", "DEFAULT_ISA", "ISA",
    "EncodingError", "IllegalInstruction", "InstrDescriptor", "Instruction", "ISAError", "SReg",
    "decode", "encode", "format_instruction", "make", "register_instruction",
    "validate_instruction",
]
