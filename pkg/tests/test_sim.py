import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cimkit.archconfig import default_arch
from cimkit.isa.asm import assemble
from cimkit.sim import AddressFault, CapacityFault, DeadlockError, SimError, Simulator, simulate
from cimkit.sim.engine import UNIT_NAMES

from conftest import CORPUS, compiled, run_asm


def _no_static(cfg=None):
    cfg = cfg or default_arch()
    return cfg.replace({"perf": {"energy": {**cfg.perf.energy, "core_static_cycle": 0}}})


def test_five_independent_adds():
    body = "".join(f"S.ADD r{i}, r0, r0\n" for i in range(1, 6))
    p = assemble(".core 0\n" + body)
    assert Simulator(p, default_arch(), require_halt=False).run().total_cycles == 7
    assert run_asm(".core 0\n" + body + "HALT").total_cycles == 8


def test_raw_hazard_stalls_one_cycle():
    p = assemble(".core 0\nS.LI r1, 5\nS.ADD r2, r1, r1\n")
    rep = Simulator(p, default_arch(), require_halt=False).run()
    assert rep.total_cycles == 5
    assert rep.stalls["raw"] == 1


def test_halt_only():
    cfg = _no_static()
    rep = run_asm(".core 0\nHALT", cfg)
    assert rep.total_cycles == 3
    assert rep.energy_fj == {"instr_fetch": 250}
    assert rep.energy_total_fj == 250
    # with the default static term every chip core leaks for the whole run
    rep = run_asm(".core 0\nHALT")
    assert rep.energy_fj["core_static_cycle"] == 2000 * 3 * 64


NOC_PROG = """\
.core 0
S.LI r1, 64
S.LI r2, 3
NOC.SEND r0, r1, r2
HALT
.core 1
HALT
.core 2
HALT
.core 3
S.LI r1, 64
S.LI r2, 0
NOC.RECV r0, r1, r2
HALT
"""


def test_noc_transfer_timing():
    # 64 bytes = 8 flits over 3 hops; the head leaves after SEND's EX at 5 and the
    # tail arrives at 16, so RECV on core 3 starts EX at 17 and takes 4 cycles.
    sim = Simulator(assemble(NOC_PROG), default_arch(), trace=True)
    sim.cores[0].local[:64] = np.arange(64, dtype=np.uint8)
    rep = sim.run()
    assert rep.total_cycles == 21
    recv = next(line for line in sim.trace().splitlines() if "NOC.RECV" in line)
    assert "ex 17-20" in recv and "stall=recv" in recv
    assert rep.noc["flit_hops"] == 8 * 3
    assert rep.noc["pairs"] == [{"src": 0, "dst": 3, "sent": 64, "received": 64}]
    assert sim.cores[3].local[:64].tolist() == list(range(64))
    assert rep.energy_fj["noc_flit_hop"] == 24 * 900


def test_zero_byte_send():
    src = ".core 0\nS.LI r2, 1\nNOC.SEND r0, r0, r2\nHALT\n.core 1\nNOC.RECV r0, r0, r0\nHALT\n"
    rep = run_asm(src)
    assert rep.noc["messages_in_flight"] == 0
    assert rep.noc["pairs"][0]["sent"] == rep.noc["pairs"][0]["received"] == 0


def test_deadlock_names_blocked_core():
    src = ".core 0\nS.LI r2, 1\nS.LI r1, 8\nNOC.RECV r0, r1, r2\nHALT\n.core 1\nHALT\n"
    with pytest.raises(DeadlockError) as err:
        run_asm(src)
    assert err.value.blocked[0]["core"] == 0
    assert "NOC.RECV" in err.value.blocked[0]["instr"]
    assert "from core 1" in str(err.value)


def test_sync_barrier():
    src = (".core 0\nCIM.CFG s13, r0, 3\nSYNC\nHALT\n"
           ".core 1\nCIM.CFG s13, r0, 3\nS.LI r1, 1\nS.LI r1, 2\nS.LI r1, 3\nSYNC\nHALT\n")
    rep = run_asm(src)
    assert rep.stalls["sync"] > 0


def test_address_fault():
    with pytest.raises(AddressFault):
        run_asm(".core 0\nS.LUI r1, 0x7000\nS.LD r2, r1, 0\nHALT")


def test_capacity_fault():
    rows = ".core 0\nCIM.CFG s16, r0, 8\nS.LI r2, 600\nCIM.LDW r0, r0, r2, r0\nHALT"
    with pytest.raises(CapacityFault, match="macro rows"):
        run_asm(rows)
    mg = ".core 0\nCIM.CFG s16, r0, 8\nS.LI r2, 4\nS.LI r3, 20\nCIM.LDW r0, r0, r2, r3\nHALT"
    with pytest.raises(CapacityFault, match="MG 20"):
        run_asm(mg)


def test_max_cycles_guard():
    with pytest.raises(SimError, match="exceeded"):
        simulate(assemble(".core 0\nloop:\nJMP loop\nHALT"), default_arch(), max_cycles=1000)


MVM_PROG = """\
.core 0
CIM.CFG s0, r0, 1
CIM.CFG s1, r0, 16
S.LI r1, 64
S.LI r2, 1024
CIM.MVM r2, r0, r1
{tail}HALT
"""


def test_mvm_overlaps_scalar_work():
    tail = "".join(f"S.ADDI r{i}, r0, {i}\n" for i in range(3, 9))
    with_mvm = run_asm(MVM_PROG.format(tail=tail))
    alone = run_asm(MVM_PROG.format(tail=""))
    # the six scalar instructions hide under the 10-cycle MVM
    assert with_mvm.total_cycles == alone.total_cycles
    assert with_mvm.core_unit_busy[0]["cim"] == 10
    # 64 input rows against one 512-column MG at 20 fJ per MAC
    assert with_mvm.energy_fj["cim_mac"] == 64 * 512 * 20


def test_mvm_functional_against_numpy():
    cfg = default_arch()
    rng = np.random.default_rng(0)
    w = rng.integers(-8, 8, size=(16, 32)).astype(np.int8)
    x = rng.integers(-128, 128, size=16).astype(np.int8)
    src = """\
.core 0
CIM.CFG s0, r0, 1
CIM.CFG s1, r0, 32
CIM.CFG s16, r0, 32
S.LI r1, 4096
S.LI r2, 16
CIM.LDW r0, r1, r2, r0
S.LI r3, 8192
S.LI r4, 12288
CIM.MVM r4, r3, r2
HALT
"""
    sim = Simulator(assemble(src), cfg)
    sim.cores[0].local[4096:4096 + w.size] = w.view(np.uint8).reshape(-1)
    sim.cores[0].local[8192:8208] = x.view(np.uint8)
    rep = sim.run()
    got = sim.cores[0].local[12288:12288 + 128].view("<i4")
    assert got.tolist() == (x.astype(np.int32) @ w.astype(np.int32)).tolist()
    assert rep.capacity["max_rows_loaded"] == 16 and rep.capacity["max_mgs_used"] == 1


# -- report invariants ---------------------------------------------------------------

def _check_report(rep):
    assert sum(rep.energy_fj.values()) == rep.energy_total_fj
    assert rep.energy_total_fj == sum(rep.core_energy_fj) + rep.noc_energy_fj + rep.static_energy_fj
    for c, n in enumerate(rep.instructions):
        if n:
            assert rep.total_cycles >= n + 2
        for u in UNIT_NAMES:
            assert rep.utilization(u, c) * rep.total_cycles == rep.core_unit_busy[c][u]
            assert 0 <= rep.utilization(u, c) <= 1
    assert rep.noc["messages_in_flight"] == 0
    for q in rep.noc["pairs"]:
        assert q["sent"] == q["received"]
    assert rep.capacity["max_rows_loaded"] <= rep.capacity["macro_rows"]
    assert rep.capacity["max_mgs_used"] <= rep.capacity["mg_count"]


def test_report_invariants_on_micro_programs():
    for src in (NOC_PROG, ".core 0\nHALT", MVM_PROG.format(tail="NOP\n")):
        _check_report(run_asm(src))


@pytest.mark.parametrize("name", CORPUS)
def test_report_invariants_on_corpus(name):
    c = compiled(name)
    _check_report(simulate(c.program, default_arch()))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(["S.ADD r{a}, r{b}, r{c}", "S.ADDI r{a}, r{b}, 7", "S.LI r{a}, 3",
                                 "S.ST r{a}, r0, 64", "S.LD r{a}, r0, 64", "NOP"]), max_size=30),
       st.lists(st.integers(1, 5), min_size=3, max_size=3))
def test_straight_line_timing_bounds(ops, regs):
    a, b, c = regs
    body = "".join(o.format(a=a, b=b, c=c) + "\n" for o in ops)
    rep = run_asm(".core 0\n" + body + "HALT")
    n = len(ops) + 1
    assert rep.instructions == [n]
    # one instruction per cycle at best, plus fetch and decode of the first
    assert rep.total_cycles >= n + 2
    _check_report(rep)


def test_determinism_of_report_json():
    c = compiled("mlp")
    a = simulate(c.program, default_arch()).to_json()
    b = simulate(c.program, default_arch()).to_json()
    assert a == b
