"""Operator-level lowering: weight layout, tiling and per-core code generation."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..archconfig import ArchConfig
from ..isa.program import Program
from ..isa.table import DEFAULT_ISA, ISA
from ..nnir.condense import CondensedGraph, condense
from ..nnir.graph import CompGraph
from ..partition import DEFAULT_BATCH, PartitionSolution, partition
from .coreir import (IRBuilder, IRInstr, V, assemble_ir, constant_propagation,
                     dead_code_elimination, format_ir, register_allocation)
from .loopnest import (Loop, LoopNest, LoweringError, MacroTile, MemMove, MvmTile, PhysicalTiling, Recv,
                       Send, Tile, VecOp, VirtualLayout, annotate_memory, extract_mvm, tile,
                       virtual_map)
from .lower import SPILL_BYTES, lower_to_program


@dataclass
class Compiled:
    program: Program
    solution: PartitionSolution
    condensed: CondensedGraph
    ir: dict[str, str] = field(default_factory=dict)


def compile_model(g: CompGraph, cfg: ArchConfig, strategy: str = "dp", batch: int = DEFAULT_BATCH,
                  isa: ISA = DEFAULT_ISA, emit_ir: bool = False) -> Compiled:
    """Condense, partition and lower ``g`` for ``cfg``."""
    cg = condense(g)
    sol = partition(cg, cfg, strategy, batch)
    ir: dict[str, str] | None = {} if emit_ir else None
    prog = lower_to_program(sol, cg, cfg, isa, ir_dump=ir)
    prog.metadata["partition_cost"] = sol.total_cost
    return Compiled(prog, sol, cg, ir or {})


__all__ = [
    "Compiled", "compile_model", "lower_to_program", "SPILL_BYTES", "IRBuilder", "IRInstr", "V", "MacroTile",
    "assemble_ir", "constant_propagation", "dead_code_elimination", "format_ir",
    "register_allocation", "Loop", "LoopNest", "LoweringError", "MemMove", "MvmTile",
    "PhysicalTiling", "Recv", "Send", "Tile", "VecOp", "VirtualLayout", "annotate_memory",
    "extract_mvm", "tile", "virtual_map",
]
