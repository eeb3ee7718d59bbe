"""Hierarchical hardware description (chip / core / unit) plus the
latency and energy coefficients shared by the compiler cost model and
the simulator.

Defaults reproduce the reference 64-core architecture: 64 cores, 8-byte
NoC flits, 16 MB global memory, 16 macro groups of 8 macros per core,
512 KB local memory, 512x64 macros built from 32x8 elements.  The
latency and energy coefficients shipped here are illustrative placeholders,
not characterized silicon numbers.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

# Energy events the simulator charges.  A PerfModel must price all of them.
ENERGY_EVENTS = (
    "cim_mac",
    "cim_weight_write_byte",
    "local_mem_byte",
    "global_mem_byte",
    "noc_flit_hop",
    "vector_elem_op",
    "scalar_op",
    "instr_fetch",
    "core_static_cycle",
)

LATENCY_KEYS = (
    "cim_mvm_cycles",
    "cim_load_cycles_per_row",
    "vector_cycles_per_elem",
    "scalar_cycles",
    "mem_cycles_per_word_local",
    "mem_cycles_per_word_global",
)

FIXED_REG_COUNT = 32


class ArchConfigError(ValueError):
    """Raised when an architecture document violates an invariant."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class ArchParseError(ValueError):
    pass


@dataclass(frozen=True)
class ChipConfig:
    core_count: int = 64
    mesh_width: int = 8
    noc_flit_bytes: int = 8
    noc_hop_latency: int = 1
    global_mem_bytes: int = 16 * 1024 * 1024
    clock_hz: float = 1.0e9

    @property
    def mesh_height(self) -> int:
        return self.core_count // self.mesh_width

    def coords(self, core: int) -> tuple[int, int]:
        """(x, y) position of a core in row-major mesh order."""
        return core % self.mesh_width, core // self.mesh_width


@dataclass(frozen=True)
class CoreConfig:
    mg_count: int = 16
    local_mem_bytes: int = 512 * 1024
    local_mem_segments: int = 2
    instr_mem_words: int = 8192
    g_reg_count: int = FIXED_REG_COUNT
    s_reg_count: int = FIXED_REG_COUNT

    @property
    def segment_bytes(self) -> int:
        return self.local_mem_bytes // self.local_mem_segments


@dataclass(frozen=True)
class UnitConfig:
    macros_per_mg: int = 8
    macro_rows: int = 512
    macro_cols: int = 64
    element_rows: int = 32
    element_cols: int = 8
    weight_bits: int = 8
    activation_bits: int = 8

    @property
    def mg_cols(self) -> int:
        """Output columns of one macro group (macros share the input rows)."""
        return self.macros_per_mg * self.macro_cols


def _default_energy() -> dict[str, float]:
    return {
        "cim_mac": 0.02,
        "cim_weight_write_byte": 0.6,
        "local_mem_byte": 0.12,
        "global_mem_byte": 1.2,
        "noc_flit_hop": 0.9,
        "vector_elem_op": 0.04,
        "scalar_op": 0.3,
        "instr_fetch": 0.25,
        "core_static_cycle": 2.0,
    }


@dataclass(frozen=True)
class PerfModel:
    cim_mvm_cycles: float = 10
    cim_load_cycles_per_row: float = 1
    vector_cycles_per_elem: float = 0.0625
    scalar_cycles: float = 1
    mem_cycles_per_word_local: float = 0.25
    mem_cycles_per_word_global: float = 1.0
    energy: dict[str, float] = field(default_factory=_default_energy)
    # named latency coefficients for instructions registered at runtime
    extra_latency: dict[str, float] = field(default_factory=dict)

    def latency_coef(self, key: str) -> float:
        if key in LATENCY_KEYS:
            return getattr(self, key)
        if key in self.extra_latency:
            return self.extra_latency[key]
        raise KeyError(key)

    def has_latency_key(self, key: str) -> bool:
        return key in LATENCY_KEYS or key in self.extra_latency

    def energy_fj(self, event: str) -> int:
        """Energy of one event in integer femtojoules."""
        return int(round(Fraction(str(self.energy[event])) * 1000))


def scaled_cycles(coef: float, amount: int, minimum: int = 1) -> int:
    """ceil(coef * amount) computed exactly on the decimal coefficient."""
    if amount <= 0:
        return minimum
    return max(minimum, math.ceil(Fraction(str(coef)) * amount))


@dataclass(frozen=True)
class ArchConfig:
    chip: ChipConfig = field(default_factory=ChipConfig)
    core: CoreConfig = field(default_factory=CoreConfig)
    unit: UnitConfig = field(default_factory=UnitConfig)
    perf: PerfModel = field(default_factory=PerfModel)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def fingerprint(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, overrides: Mapping[str, Mapping[str, Any]]) -> "ArchConfig":
        """Copy with per-section field overrides, re-validated."""
        doc = self.to_dict()
        for section, values in overrides.items():
            if section not in doc:
                raise ArchConfigError(section, "unknown section")
            doc[section].update(values)
        return from_dict(doc)


def cim_capacity(cfg: ArchConfig) -> int:
    """Weight bytes one core's CIM compute unit can hold."""
    u = cfg.unit
    return cfg.core.mg_count * u.macros_per_mg * u.macro_rows * u.macro_cols * u.weight_bits // 8


def _default_mesh_width(core_count: int) -> int:
    w = int(math.isqrt(core_count))
    while w > 1 and core_count % w:
        w -= 1
    return max(w, 1)


def _build(cls, data: Mapping[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ArchConfigError(f"{section}.{key}", "unknown field")
    return cls(**dict(data))


def _require(cond: bool, name: str, message: str) -> None:
    if not cond:
        raise ArchConfigError(name, message)


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def validate(cfg: ArchConfig) -> ArchConfig:
    c, k, u, p = cfg.chip, cfg.core, cfg.unit, cfg.perf
    for section, obj in (("chip", c), ("core", k), ("unit", u)):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if f.name == "clock_hz":
                _require(isinstance(v, (int, float)) and v > 0, "chip.clock_hz", "must be > 0")
                continue
            _require(_is_int(v), f"{section}.{f.name}", "must be an integer")

    _require(c.core_count >= 1, "core_count", "must be >= 1")
    _require(c.mesh_width >= 1, "mesh_width", "must be >= 1")
    _require(c.core_count % c.mesh_width == 0, "mesh_width",
             "mesh_width * mesh_height must equal core_count")
    _require(c.noc_flit_bytes >= 1, "noc_flit_bytes", "must be >= 1")
    _require(c.noc_hop_latency >= 1, "noc_hop_latency", "must be >= 1")
    _require(c.global_mem_bytes > 0, "global_mem_bytes", "must be > 0")

    _require(k.mg_count >= 1, "mg_count", "must be >= 1")
    _require(k.mg_count <= 32, "mg_count", "MG mask register holds at most 32 groups")
    _require(k.local_mem_bytes > 0, "local_mem_bytes", "must be > 0")
    _require(k.local_mem_segments >= 2, "local_mem_segments", "must be >= 2")
    _require(k.instr_mem_words >= 1, "instr_mem_words", "must be >= 1")
    _require(k.g_reg_count == FIXED_REG_COUNT, "g_reg_count", "fixed at 32 (5-bit operand fields)")
    _require(k.s_reg_count == FIXED_REG_COUNT, "s_reg_count", "fixed at 32 (5-bit operand fields)")

    for name in ("macros_per_mg", "macro_rows", "macro_cols", "element_rows",
                 "element_cols", "weight_bits", "activation_bits"):
        _require(getattr(u, name) >= 1, name, "must be >= 1")
    _require(u.macro_rows % u.element_rows == 0, "element_rows",
             "macro_rows must be a multiple of element_rows")
    _require(u.macro_cols % u.element_cols == 0, "element_cols",
             "macro_cols must be a multiple of element_cols")
    _require(u.weight_bits == 8, "weight_bits", "only int8 weights are supported")
    _require(u.activation_bits == 8, "activation_bits", "only int8 activations are supported")

    for key in LATENCY_KEYS:
        v = getattr(p, key)
        _require(isinstance(v, (int, float)) and not isinstance(v, bool) and v >= 0,
                 f"perf.{key}", "must be a number >= 0")
    for key, v in p.extra_latency.items():
        _require(isinstance(v, (int, float)) and v >= 0, f"perf.extra_latency.{key}", "must be >= 0")
    for event in ENERGY_EVENTS:
        _require(event in p.energy, f"perf.energy.{event}", "missing energy event")
    for event, v in p.energy.items():
        _require(isinstance(v, (int, float)) and not isinstance(v, bool) and v >= 0,
                 f"perf.energy.{event}", "must be a number >= 0")
    _require(cim_capacity(cfg) > 0, "cim_capacity", "must be > 0")
    return cfg


def from_dict(doc: Mapping[str, Any]) -> ArchConfig:
    if not isinstance(doc, Mapping):
        raise ArchParseError("architecture document must be a JSON object")
    for key in doc:
        if key not in ("chip", "core", "unit", "perf"):
            raise ArchConfigError(key, "unknown section")
    sections = {}
    for key in ("chip", "core", "unit", "perf"):
        value = doc.get(key, {})
        if not isinstance(value, Mapping):
            raise ArchParseError(f"section {key!r} must be an object")
        sections[key] = dict(value)

    chip = dict(sections["chip"])
    if "core_count" in chip and "mesh_width" not in chip and _is_int(chip["core_count"]) \
            and chip["core_count"] >= 1:
        chip["mesh_width"] = _default_mesh_width(chip["core_count"])

    perf = dict(sections["perf"])
    energy = _default_energy()
    energy.update(perf.pop("energy", {}) or {})
    perf["energy"] = energy

    cfg = ArchConfig(
        chip=_build(ChipConfig, chip, "chip"),
        core=_build(CoreConfig, sections["core"], "core"),
        unit=_build(UnitConfig, sections["unit"], "unit"),
        perf=_build(PerfModel, perf, "perf"),
    )
    return validate(cfg)


def loads(text: str) -> ArchConfig:
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ArchParseError(f"malformed architecture document: {exc}") from exc
    return from_dict(doc)


def load_arch(path: str | Path) -> ArchConfig:
    return loads(Path(path).read_text())


def default_arch() -> ArchConfig:
    return validate(ArchConfig())
