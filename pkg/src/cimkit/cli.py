"""Command-line driver: genmodel, compile, asm, disasm, simulate, run, bench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .archconfig import ArchConfig, ArchConfigError, ArchParseError, load_arch
from .harness import Experiment, atomic_write, run_experiment, write_results
from .isa.asm import AsmError, assemble, disassemble
from .isa.program import Program, ProgramError, from_bytes, to_bytes, validate_program
from .isa.table import EncodingError, IllegalInstruction, ISAError
from .nnir.generators import GENERATORS, genmodel
from .nnir.graph import ModelError, import_model
from .opcodegen import compile_model
from .opcodegen.loopnest import LoweringError
from .partition import DEFAULT_BATCH, PartitionError
from .sim import SimError, Simulator

ARCH_ENV = "CIMKIT_ARCH"

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_ARCH = 3
EXIT_MODEL = 4
EXIT_PARTITION = 5
EXIT_LOWERING = 6
EXIT_ISA = 7
EXIT_SIM = 8
EXIT_IO = 9

# most specific first
_ERRORS = (
    ((ArchConfigError, ArchParseError), EXIT_ARCH, "arch"),
    ((ModelError,), EXIT_MODEL, "model"),
    ((PartitionError,), EXIT_PARTITION, "partition"),
    ((LoweringError,), EXIT_LOWERING, "lowering"),
    ((AsmError, ProgramError, EncodingError, IllegalInstruction, ISAError), EXIT_ISA, "isa"),
    ((SimError,), EXIT_SIM, "sim"),
    ((OSError,), EXIT_IO, "io"),
)

log = logging.getLogger("cimkit")


class UsageError(Exception):
    pass


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({"level": record.levelname.lower(), "logger": record.name,
                           "message": record.getMessage()}, sort_keys=True)


def _setup_logging(verbose: int, json_logs: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if json_logs else logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger("cimkit")
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING - 10 * min(verbose, 2))
    root.propagate = False


def _arch(args) -> ArchConfig:
    path = args.arch or os.environ.get(ARCH_ENV)
    if not path:
        raise UsageError(f"--arch is required (or set {ARCH_ENV})")
    return load_arch(path)


def _load_inputs(path: str | None, prog: Program, seed: int) -> dict[str, np.ndarray]:
    spec = prog.metadata.get("inputs", {})
    if path is None:
        batch = int(prog.metadata.get("batch", 1))
        rng = np.random.default_rng(seed)
        return {name: rng.integers(-128, 128, size=(batch, *info["shape"]), dtype=np.int64).astype(np.int8)
                for name, info in sorted(spec.items())}
    with np.load(path) as npz:
        return {k: npz[k] for k in npz.files}


# -- subcommands -------------------------------------------------------------

def cmd_genmodel(args) -> int:
    out = Path(args.output)
    sidecar = out.with_suffix(".bin").name if args.sidecar else None
    doc, blob = genmodel(args.name, args.scale, args.seed, sidecar)
    if sidecar:
        atomic_write(out.with_suffix(".bin"), blob)
    atomic_write(out, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())
    log.info("wrote %s", out)
    return EXIT_OK


def _compile(args, cfg: ArchConfig):
    g = import_model(args.model)
    c = compile_model(g, cfg, args.strategy, args.batch, emit_ir=bool(args.emit_ir))
    if args.emit_partition:
        atomic_write(args.emit_partition, (c.solution.dumps() + "\n").encode())
    if args.emit_ir:
        for name, text in sorted(c.ir.items()):
            atomic_write(Path(args.emit_ir) / name, text.encode())
    log.info("compiled %s: %d stages, %d instructions", g.name, len(c.solution.stages),
             c.program.instruction_count())
    return c


def cmd_compile(args) -> int:
    cfg = _arch(args)
    c = _compile(args, cfg)
    atomic_write(args.output, to_bytes(c.program))
    return EXIT_OK


def cmd_asm(args) -> int:
    cfg = _arch(args) if (args.arch or os.environ.get(ARCH_ENV)) else None
    prog = assemble(Path(args.source).read_text(), cfg)
    atomic_write(args.output, to_bytes(prog))
    return EXIT_OK


def cmd_disasm(args) -> int:
    text = disassemble(from_bytes(Path(args.binary).read_bytes()))
    if args.output:
        atomic_write(args.output, text.encode())
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _simulate_and_report(args, prog: Program, cfg: ArchConfig) -> int:
    validate_program(prog, cfg, require_halt=False)
    inputs = _load_inputs(args.inputs, prog, args.seed)
    sim = Simulator(prog, cfg, inputs=inputs, trace=bool(args.trace))
    rep = sim.run()
    if args.trace:
        atomic_write(args.trace, sim.trace().encode())
    text = rep.to_json() + "\n"
    if args.output:
        atomic_write(args.output, text.encode())
    else:
        sys.stdout.write(text)
    log.info("%d cycles, %.3f nJ", rep.total_cycles, rep.energy_total_fj / 1e6)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _arch(args)
    prog = from_bytes(Path(args.program).read_bytes())
    return _simulate_and_report(args, prog, cfg)


def cmd_run(args) -> int:
    cfg = _arch(args)
    c = _compile(args, cfg)
    return _simulate_and_report(args, c.program, cfg)


def cmd_bench(args) -> int:
    spec_path = Path(args.spec)
    doc = json.loads(spec_path.read_text())
    if args.seed is not None:
        doc["seed"] = args.seed
    exp = Experiment.from_dict(doc, spec_path.parent)
    rows = run_experiment(exp)
    write_results(rows, args.out, plots=not args.no_plots)
    failed = [r for r in rows if r.status != "ok"]
    for r in failed:
        log.warning("cell %s failed: %s", r.cell, r.error)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cimkit", description="Compiler and simulator for digital CIM accelerators.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    p.add_argument("--json-logs", action="store_true", help="log as JSON lines on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def arch(sp):
        sp.add_argument("--arch", help=f"architecture JSON (default: ${ARCH_ENV})")

    def compile_flags(sp):
        sp.add_argument("model", help="model JSON")
        arch(sp)
        sp.add_argument("--strategy", choices=("dp", "generic"), default="dp")
        sp.add_argument("--batch", type=int, default=DEFAULT_BATCH, help="inferences per program")
        sp.add_argument("--emit-partition", metavar="PATH", help="write the partition solution JSON")
        sp.add_argument("--emit-ir", metavar="DIR", help="dump loop nests and per-pass core IR")

    def sim_flags(sp):
        sp.add_argument("--inputs", "--input", dest="inputs", metavar="NPZ",
                        help="input tensors (.npz) keyed by input name")
        sp.add_argument("--seed", type=int, default=0, help="seed for random inputs")
        sp.add_argument("--trace", metavar="PATH", help="write a per-instruction pipeline trace")
        sp.add_argument("-o", "--output", "--report", dest="output", help="report JSON (default: stdout)")

    sp = sub.add_parser("genmodel", help="write a generated benchmark model")
    sp.add_argument("name", choices=GENERATORS)
    sp.add_argument("--scale", type=float, default=0.25)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--sidecar", action="store_true", help="store weights in a .bin next to the JSON")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_genmodel)

    sp = sub.add_parser("compile", help="compile a model to a CIMB program")
    compile_flags(sp)
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_compile)

    sp = sub.add_parser("asm", help="assemble text to a CIMB program")
    sp.add_argument("source")
    arch(sp)
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_asm)

    sp = sub.add_parser("disasm", help="disassemble a CIMB program")
    sp.add_argument("binary")
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_disasm)

    sp = sub.add_parser("simulate", help="simulate a CIMB program")
    sp.add_argument("program")
    arch(sp)
    sim_flags(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run", help="compile and simulate in one step")
    compile_flags(sp)
    sim_flags(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("bench", help="run an experiment grid")
    sp.add_argument("--spec", required=True, help="experiment JSON")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, help="override the experiment seed")
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(func=cmd_bench)
    return p


def _fail(code: int, kind: str, msg: str, json_logs: bool) -> int:
    msg = " ".join(str(msg).split())
    if json_logs:
        sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": msg}, sort_keys=True) + "\n")
    else:
        sys.stderr.write(f"cimkit: error[{kind}]: {msg}\n")
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose, args.json_logs)
    if getattr(args, "batch", 1) < 1:
        return _fail(EXIT_USAGE, "usage", "--batch must be >= 1", args.json_logs)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, "usage", str(exc), args.json_logs)
    except Exception as exc:
        for types, code, kind in _ERRORS:
            if isinstance(exc, types):
                return _fail(code, kind, str(exc), args.json_logs)
        log.debug("internal error", exc_info=True)
        return _fail(EXIT_INTERNAL, "internal", f"{type(exc).__name__}: {exc}", args.json_logs)


if __name__ == "__main__":
    sys.exit(main())
