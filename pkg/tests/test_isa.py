import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cimkit.isa.asm import AsmError, assemble, disassemble
from cimkit.isa.program import Program, ProgramError, from_bytes, to_bytes, validate_program
from cimkit.isa.table import (DEFAULT_ISA, FORMATS, OP_VEC, EncodingError, IllegalInstruction,
                              InstrDescriptor, Instruction, ISAError, SReg, decode, encode, imm_range,
                              make, register_instruction)
from cimkit.sim import Simulator

from conftest import compiled


def test_halt_encoding():
    assert encode(Instruction("HALT")) == 0xFC000000
    assert decode(0xFC000000) == Instruction("HALT")


def test_li_zero_has_only_opcode_bits():
    w = encode(make("S.LI", 0, 0))
    assert w == DEFAULT_ISA["S.LI"].opcode << 26


def test_formats_are_32_bits_with_opcode_on_top():
    for fields in FORMATS.values():
        assert sum(w for _, w in fields) == 32
        assert fields[0] == ("opcode", 6)


def test_unassigned_opcode_is_illegal():
    used = {d.opcode for d in DEFAULT_ISA.descriptors()}
    free = next(op for op in range(64) if op not in used)
    with pytest.raises(IllegalInstruction):
        decode(free << 26)


def test_unassigned_funct_and_reserved_bits_are_illegal():
    with pytest.raises(IllegalInstruction):
        decode((OP_VEC << 26) | (40 << 20))
    with pytest.raises(IllegalInstruction):
        decode(0xFC000001)  # HALT with a nonzero reserved field


def test_opcode_funct_pairs_unique():
    keys = [(d.opcode, d.funct) for d in DEFAULT_ISA.descriptors()]
    assert len(keys) == len(set(keys))
    mnemonics = [d.mnemonic for d in DEFAULT_ISA.descriptors()]
    assert len(mnemonics) == len(set(mnemonics))


@pytest.mark.parametrize("desc", DEFAULT_ISA.descriptors(), ids=lambda d: d.mnemonic)
def test_descriptor_sweep(desc):
    """Each descriptor's canonical encoding decodes back to its own mnemonic."""
    word = encode(Instruction(desc.mnemonic))
    assert word >> 26 == desc.opcode
    assert decode(word).mnemonic == desc.mnemonic


def test_field_overflow_rejected():
    with pytest.raises(EncodingError):
        make("S.ADD", 32, 0, 0)
    with pytest.raises(EncodingError):
        make("S.LI", 1, 1 << 15)
    with pytest.raises(EncodingError):
        make("CIM.CFG", 0, 0, 512)
    with pytest.raises(EncodingError):
        encode(Instruction("HALT", rd=1))
    with pytest.raises(EncodingError):
        make("S.ADD", 1, 2)


def test_sreg_map_is_fixed():
    assert SReg.MG_MASK == 0 and SReg.OUT_WIDTH == 1
    assert SReg.SYNC_MASK_LO == 13 and SReg.SYNC_MASK_HI == 14
    assert max(SReg) < 32


@st.composite
def instructions(draw):
    desc = draw(st.sampled_from(DEFAULT_ISA.descriptors()))
    kw = {}
    for f in desc.used_fields:
        if f == "imm":
            lo, hi = imm_range(desc.fmt)
            kw[f] = draw(st.integers(lo, hi))
        else:
            kw[f] = draw(st.integers(0, 31))
    return Instruction(desc.mnemonic, **kw)


@settings(max_examples=2000, deadline=None)
@given(instructions())
def test_encode_decode_roundtrip(instr):
    w = encode(instr)
    assert 0 <= w < 1 << 32
    assert decode(w) == instr


@settings(max_examples=500, deadline=None)
@given(st.integers(0, (1 << 32) - 1))
def test_decode_is_total_or_illegal(word):
    """Every word decodes to something that re-encodes to itself, or is illegal."""
    try:
        instr = decode(word)
    except IllegalInstruction:
        return
    assert encode(instr) == word


KERNEL = """\
.meta {"name": "kernel"}
.global table 0x10000000
.data 0102030405060708
.core 0
.local buf 0
.data ff00ff00
    S.LI r1, 4
    S.LI r2, 0
loop:
    S.ADDI r2, r2, 1
    BNE r2, r1, loop
    CIM.CFG s4, r0, 1
    S.LUI r3, 4096
    MEM.CPY r3, r0, r1
    VEC.RELU r0, r0, r1
    NOP
    HALT
.core 1
    HALT
"""


def test_assemble_kernel():
    p = assemble(KERNEL)
    assert p.core_count == 2
    assert len(p.streams[0]) == 10
    assert p.labels[0] == {"loop": 2}
    assert p.streams[0][3] == make("BNE", 2, 1, -2)
    assert p.global_sections[0].data == bytes(range(1, 9))
    assert p.local_sections[0][0].data == b"\xff\x00\xff\x00"
    assert p.metadata == {"name": "kernel"}


@pytest.mark.parametrize("src", [".core 0\nHALT\n", KERNEL], ids=["minimal", "kernel"])
def test_asm_disasm_roundtrip(src):
    p = assemble(src)
    again = assemble(disassemble(p))
    assert to_bytes(again) == to_bytes(p)
    assert again.labels == p.labels


def test_minimal_program():
    p = assemble(".core 0\nHALT")
    assert p.streams == [[Instruction("HALT")]]


def test_compiled_program_roundtrips():
    p = compiled("mlp").program
    text = disassemble(p)
    again = assemble(text)
    assert to_bytes(again) == to_bytes(p)
    assert from_bytes(to_bytes(p)).streams == p.streams


@pytest.mark.parametrize("src,needle", [
    (".core 0\nJMP nowhere\nHALT", "nowhere"),
    (".core 0\nFOO r1\n", "FOO"),
    (".core 0\na:\na:\nHALT", "a"),
    ("HALT", "core"),
    (".core 0\nS.ADD r1, r2\n", "operand"),
])
def test_assembler_errors(src, needle):
    with pytest.raises(AsmError) as err:
        assemble(src)
    assert needle in str(err.value)


def test_stream_overflow(cfg):
    small = cfg.replace({"core": {"instr_mem_words": 2}})
    with pytest.raises((AsmError, ProgramError)):
        assemble(".core 0\nNOP\nNOP\nHALT", small)


def test_validate_requires_halt(cfg):
    p = Program([[Instruction("NOP")]])
    with pytest.raises(ProgramError):
        validate_program(p, cfg)
    validate_program(p, cfg, require_halt=False)


def test_binary_container_header():
    blob = to_bytes(assemble(".core 0\nHALT\n.core 1\nHALT"))
    assert blob[:4] == b"CIMB"
    with pytest.raises(ProgramError):
        from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ProgramError):
        from_bytes(blob[:10])


def _gelu_like(x):
    x = x.astype(np.int32)
    return np.where(x > 0, x, x // 8)


GELU = InstrDescriptor("VEC.GELU", OP_VEC, 9, "R4", "vector", "vector", "vector_cycles_per_elem",
                       "vector_elem_op", ("rd", "rs1", "rs2"), "elements", semantics=_gelu_like)


def test_register_instruction_extension(cfg):
    isa = register_instruction(DEFAULT_ISA, GELU)
    assert "VEC.GELU" not in DEFAULT_ISA
    src = """\
.core 0
.local x 0
.data 10f0207f80000102
    S.LI r1, 0
    S.LI r2, 64
    S.LI r3, 8
    VEC.GELU r2, r1, r3
    HALT
"""
    p = assemble(src, isa=isa)
    assert decode(encode(p.streams[0][3], isa), isa) == p.streams[0][3]
    assert assemble(disassemble(p, isa), isa=isa).streams == p.streams
    sim = Simulator(p, cfg, isa=isa)
    rep = sim.run()
    out = sim.cores[0].local[64:72].view(np.int8)
    x = np.frombuffer(bytes.fromhex("10f0207f80000102"), dtype=np.int8)
    assert out.tolist() == _gelu_like(x).tolist()
    # 8 elements at 1/16 cycle each -> 1 cycle; 8 vector element energy events
    assert rep.energy_fj["vector_elem_op"] == 8 * cfg.perf.energy_fj("vector_elem_op")
    with pytest.raises(IllegalInstruction):
        decode(encode(p.streams[0][3], isa))


def test_register_instruction_collision_and_bad_keys():
    clash = InstrDescriptor("VEC.CLASH", OP_VEC, 0, "R4", "vector", "vector",
                            "vector_cycles_per_elem", "vector_elem_op", ("rd", "rs1", "rs2"))
    with pytest.raises(ISAError, match="collision"):
        register_instruction(DEFAULT_ISA, clash)
    bad_energy = InstrDescriptor("VEC.X", OP_VEC, 10, "R4", "vector", "vector",
                                 "vector_cycles_per_elem", "no_such_event", ("rd", "rs1", "rs2"))
    with pytest.raises(ISAError, match="energy key"):
        register_instruction(DEFAULT_ISA, bad_energy)
    bad_latency = InstrDescriptor("VEC.Y", OP_VEC, 10, "R4", "vector", "vector",
                                  "no_such_latency", "vector_elem_op", ("rd", "rs1", "rs2"))
    with pytest.raises(ISAError, match="latency key"):
        register_instruction(DEFAULT_ISA, bad_latency)
    with pytest.raises(ISAError):
        register_instruction(DEFAULT_ISA, GELU).with_instruction(GELU)
