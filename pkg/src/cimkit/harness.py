"""Experiment grids: model x arch x strategy cells, results tables and plots."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .archconfig import ArchConfig, default_arch, load_arch
from .nnir.generators import generate
from .opcodegen import compile_model
from .partition import DEFAULT_BATCH
from .sim import simulate

log = logging.getLogger(__name__)

STRATEGIES = ("dp", "generic")


@dataclass
class ModelSpec:
    name: str
    scale: float = 0.25
    seed: int = 0

    @property
    def label(self) -> str:
        return f"{self.name}@{self.scale:g}"


@dataclass
class ArchVariant:
    label: str
    cfg: ArchConfig


@dataclass
class Experiment:
    models: list[ModelSpec] = field(default_factory=list)
    archs: list[ArchVariant] = field(default_factory=list)
    strategies: list[str] = field(default_factory=lambda: list(STRATEGIES))
    batch: int = DEFAULT_BATCH
    seed: int = 0
    metrics: list[str] = field(default_factory=lambda: ["cycles", "energy_fj", "throughput"])

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "Experiment":
        """Build from JSON.  Arch entries are ``{"label", "path"?, "overrides"?}``
        applied to the default (or ``base_arch``) configuration."""
        base = default_arch()
        if doc.get("base_arch"):
            p = Path(doc["base_arch"])
            base = load_arch(p if p.is_absolute() or base_dir is None else base_dir / p)
        archs = []
        for i, a in enumerate(doc.get("archs", [{"label": "default"}])):
            cfg = base
            if a.get("path"):
                p = Path(a["path"])
                cfg = load_arch(p if p.is_absolute() or base_dir is None else base_dir / p)
            if a.get("overrides"):
                cfg = cfg.replace(a["overrides"])
            archs.append(ArchVariant(a.get("label", f"arch{i}"), cfg))
        models = [ModelSpec(m["name"], float(m.get("scale", 0.25)), int(m.get("seed", doc.get("seed", 0))))
                  if isinstance(m, dict) else ModelSpec(str(m)) for m in doc.get("models", [])]
        strategies = list(doc.get("strategies", STRATEGIES))
        bad = [s for s in strategies if s not in STRATEGIES]
        if bad:
            raise ValueError(f"unknown strategies {bad}; choose from {list(STRATEGIES)}")
        return cls(models, archs, strategies, int(doc.get("batch", DEFAULT_BATCH)),
                   int(doc.get("seed", 0)), list(doc.get("metrics", cls().metrics)))


def sweep(base: ArchConfig, section: str, key: str, values) -> list[ArchVariant]:
    """Arch variants differing in one field."""
    return [ArchVariant(f"{key}={v}", base.replace({section: {key: v}})) for v in values]


@dataclass
class ResultRow:
    cell: str
    model: str
    arch: str
    strategy: str
    status: str = "ok"
    error: str = ""
    modeled_cost: int | None = None
    stages: int | None = None
    cycles: int | None = None
    energy_fj: int | None = None
    energy_breakdown: dict[str, int] = field(default_factory=dict)
    throughput: float | None = None
    speedup: float | None = None
    energy_ratio: float | None = None
    instructions: int | None = None

    def flat(self) -> dict[str, Any]:
        d = asdict(self)
        bd = d.pop("energy_breakdown")
        for k in sorted(bd):
            d[f"energy_{k}"] = bd[k]
        return d


def random_inputs(g, batch: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {name: rng.integers(-128, 128, size=(batch, *shape), dtype=np.int64).astype(np.int8)
            for name, shape in sorted(g.inputs.items())}


def run_cell(model: ModelSpec, arch: ArchVariant, strategy: str, batch: int, seed: int) -> ResultRow:
    row = ResultRow(f"{model.label}|{arch.label}|{strategy}", model.label, arch.label, strategy)
    try:
        g = generate(model.name, model.scale, model.seed)
        c = compile_model(g, arch.cfg, strategy, batch)
        rep = simulate(c.program, arch.cfg, random_inputs(g, batch, seed))
    except Exception as exc:  # a failed cell is recorded and the grid continues
        row.status, row.error = "failed", f"{type(exc).__name__}: {exc}"
        log.warning("cell %s failed: %s", row.cell, row.error)
        return row
    row.modeled_cost = int(c.solution.total_cost)
    row.stages = len(c.solution.stages)
    row.cycles = rep.total_cycles
    row.energy_fj = rep.energy_total_fj
    row.energy_breakdown = dict(rep.energy_fj)
    row.throughput = rep.throughput
    row.instructions = c.program.instruction_count()
    return row


def normalize(rows: list[ResultRow]) -> None:
    """Speedup and energy ratio against the generic cell of the same model and arch."""
    base = {(r.model, r.arch): r for r in rows if r.strategy == "generic" and r.status == "ok"}
    for r in rows:
        b = base.get((r.model, r.arch))
        if r.status != "ok" or b is None:
            continue
        r.speedup = b.cycles / r.cycles
        r.energy_ratio = r.energy_fj / b.energy_fj


def run_experiment(spec: Experiment) -> list[ResultRow]:
    rows = []
    for m in spec.models:
        for a in spec.archs:
            for s in spec.strategies:
                log.info("running %s on %s with %s", m.label, a.label, s)
                rows.append(run_cell(m, a, s, spec.batch, spec.seed))
    normalize(rows)
    return rows


def to_csv(rows: list[ResultRow]) -> str:
    flat = [r.flat() for r in rows]
    cols: list[str] = []
    for d in flat:
        cols.extend(k for k in d if k not in cols)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for d in flat:
        w.writerow(d)
    return buf.getvalue()


def to_json(rows: list[ResultRow]) -> str:
    return json.dumps([asdict(r) for r in rows], indent=2, sort_keys=True) + "\n"


def _plots(rows: list[ResultRow]) -> dict[str, str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "cimkit"
    ok = [r for r in rows if r.status == "ok"]
    out = {}
    groups = sorted({(r.model, r.arch) for r in ok})
    strategies = sorted({r.strategy for r in ok})
    if not groups:
        return out
    for metric, fname, ylabel in (("speedup", "speedup.svg", "speedup vs generic"),
                                  ("energy_ratio", "energy.svg", "energy / generic")):
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(groups)), 3.2))
        width = 0.8 / max(1, len(strategies))
        for i, s in enumerate(strategies):
            vals = []
            for grp in groups:
                hit = [r for r in ok if (r.model, r.arch) == grp and r.strategy == s]
                vals.append(getattr(hit[0], metric) or 0.0 if hit else 0.0)
            ax.bar(np.arange(len(groups)) + i * width, vals, width, label=s)
        ax.set_xticks(np.arange(len(groups)) + width * (len(strategies) - 1) / 2)
        ax.set_xticklabels([f"{m}\n{a}" for m, a in groups], fontsize=7)
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=7)
        fig.tight_layout()
        out[fname] = _svg(fig)
        plt.close(fig)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for s in strategies:
        pts = [r for r in ok if r.strategy == s]
        ax.scatter([r.throughput for r in pts], [r.energy_fj / 1e6 for r in pts], label=s, s=14)
    ax.set_xlabel("throughput (inferences/s)")
    ax.set_ylabel("energy (nJ)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    out["scatter.svg"] = _svg(fig)
    plt.close(fig)
    return out


def _svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def atomic_write(path: str | Path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    import os
    import tempfile

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_results(rows: list[ResultRow], out_dir: str | Path, plots: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"results.csv": to_csv(rows), "results.json": to_json(rows)}
    if plots:
        files.update(_plots(rows))
    written = []
    for name, text in files.items():
        atomic_write(out / name, text.encode())
        written.append(out / name)
    return written


__all__ = ["Experiment", "ModelSpec", "ArchVariant", "ResultRow", "run_experiment", "run_cell",
           "normalize", "sweep", "atomic_write", "random_inputs", "to_csv", "to_json", "write_results", "STRATEGIES"]
