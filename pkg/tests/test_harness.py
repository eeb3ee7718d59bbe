import json

import pytest

from cimkit.archconfig import default_arch
from cimkit.harness import (ArchVariant, Experiment, ModelSpec, ResultRow, atomic_write, normalize,
                            run_cell, run_experiment, sweep, to_csv, write_results)


def _tiny():
    return Experiment([ModelSpec("vgg_like", 0.1)], [ArchVariant("default", default_arch())], batch=2)


@pytest.fixture(scope="module")
def tiny_rows():
    return run_experiment(_tiny())


def test_one_row_per_cell(tiny_rows):
    assert [r.cell for r in tiny_rows] == ["vgg_like@0.1|default|dp", "vgg_like@0.1|default|generic"]
    assert all(r.status == "ok" for r in tiny_rows)
    for r in tiny_rows:
        assert r.cycles > 0 and r.energy_fj == sum(r.energy_breakdown.values())


def test_normalized_to_generic(tiny_rows):
    dp, gen = tiny_rows
    assert gen.speedup == 1.0 and gen.energy_ratio == 1.0
    assert dp.speedup == gen.cycles / dp.cycles
    assert dp.energy_ratio == dp.energy_fj / gen.energy_fj


def test_normalize_without_generic_leaves_blanks():
    rows = [ResultRow("a|x|dp", "a", "x", "dp", cycles=10, energy_fj=5)]
    normalize(rows)
    assert rows[0].speedup is None and rows[0].energy_ratio is None


def test_empty_experiment(tmp_path):
    rows = run_experiment(Experiment([], [ArchVariant("default", default_arch())]))
    assert rows == []
    files = write_results(rows, tmp_path)
    assert (tmp_path / "results.csv").read_text() == "\n"
    assert json.loads((tmp_path / "results.json").read_text()) == []
    assert {p.name for p in files} == {"results.csv", "results.json"}


def test_failed_cell_is_recorded_and_grid_continues():
    tiny = default_arch().replace({"core": {"instr_mem_words": 16}})
    spec = Experiment([ModelSpec("vgg_like", 0.1)],
                      [ArchVariant("tiny", tiny), ArchVariant("default", default_arch())],
                      strategies=["dp"], batch=2)
    rows = run_experiment(spec)
    assert [r.status for r in rows] == ["failed", "ok"]
    assert rows[0].error.startswith("LoweringError")
    assert rows[0].cycles is None


def test_csv_is_deterministic(tiny_rows, tmp_path):
    again = run_experiment(_tiny())
    assert to_csv(again) == to_csv(tiny_rows)
    a = [p.read_bytes() for p in write_results(tiny_rows, tmp_path / "a")]
    b = [p.read_bytes() for p in write_results(again, tmp_path / "b")]
    assert a == b
    header = to_csv(tiny_rows).splitlines()[0].split(",")
    assert header[:4] == ["cell", "model", "arch", "strategy"]
    assert "energy_instr_fetch" in header


def test_plots_written(tiny_rows, tmp_path):
    names = {p.name for p in write_results(tiny_rows, tmp_path)}
    assert {"speedup.svg", "energy.svg", "scatter.svg"} <= names
    assert (tmp_path / "speedup.svg").read_text().lstrip().startswith("<?xml")


def test_from_dict(tmp_path):
    arch = tmp_path / "arch.json"
    arch.write_text(json.dumps({"core": {"mg_count": 8}}))
    doc = {
        "models": ["mlp_like", {"name": "vgg_like", "scale": 0.5, "seed": 3}],
        "archs": [{"label": "a"}, {"label": "b", "path": "arch.json", "overrides": {"chip": {"noc_flit_bytes": 16}}}],
        "batch": 4, "seed": 9,
    }
    spec = Experiment.from_dict(doc, tmp_path)
    assert [m.label for m in spec.models] == ["mlp_like@0.25", "vgg_like@0.5"]
    assert spec.models[1].seed == 3
    assert spec.archs[1].cfg.core.mg_count == 8 and spec.archs[1].cfg.chip.noc_flit_bytes == 16
    assert spec.archs[0].cfg == default_arch()
    assert spec.strategies == ["dp", "generic"] and spec.batch == 4 and spec.seed == 9
    with pytest.raises(ValueError):
        Experiment.from_dict({"strategies": ["greedy"]})


def test_sweep_labels():
    vs = sweep(default_arch(), "core", "mg_count", [4, 8])
    assert [v.label for v in vs] == ["mg_count=4", "mg_count=8"]
    assert [v.cfg.core.mg_count for v in vs] == [4, 8]


def test_unknown_model_fails_cell():
    row = run_cell(ModelSpec("alexnet"), ArchVariant("d", default_arch()), "dp", 1, 0)
    assert row.status == "failed" and "alexnet" in row.error


def test_atomic_write_replaces(tmp_path):
    p = tmp_path / "sub" / "f.txt"
    atomic_write(p, b"one")
    atomic_write(p, b"two")
    assert p.read_bytes() == b"two"
    assert [q.name for q in p.parent.iterdir()] == ["f.txt"]
