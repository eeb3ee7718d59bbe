import functools

import numpy as np
import pytest

from cimkit.archconfig import default_arch
from cimkit.isa.asm import assemble
from cimkit.nnir.generators import _Builder, generate, mlp
from cimkit.opcodegen import compile_model
from cimkit.sim import simulate

CORPUS = ("resnet_like", "vgg_like", "mobilenet_like", "efficientnet_like", "mlp")


@pytest.fixture(scope="session")
def cfg():
    return default_arch()


def corpus_model(name: str):
    return mlp() if name == "mlp" else generate(name)


@functools.lru_cache(maxsize=None)
def compiled(name: str, strategy: str = "dp", batch: int = 8):
    """Compiled corpus model, shared across tests (programs are not mutated)."""
    return compile_model(corpus_model(name), default_arch(), strategy, batch)


def run_asm(text: str, cfg=None, **kw):
    return simulate(assemble(text), cfg or default_arch(), **kw)


def chain_graph(widths, seed=0):
    """FC chain x -> fc -> relu -> fc ... with the given layer widths."""
    b = _Builder("chain", (widths[0],), seed)
    x = "x"
    for w in widths[1:]:
        x = b.relu(b.fc(x, w))
    return b.build()


def int8_batch(shape, n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(-128, 128, size=(n, *shape)).astype(np.int8)


def synth_node(i, rows=256, cols=64, vectors=4, kind="FullyConnected"):
    from cimkit.nnir.condense import CondensedNode

    return CondensedNode(id=i, anchor=i, ops=[i], inputs=[], outputs=[i], weight_bytes=rows * cols,
                         mac_count=rows * cols * vectors, rows=rows, cols=cols, vectors=vectors,
                         in_bytes=rows * vectors, out_bytes=cols * vectors, fused_elems=0, kind=kind)


def synth_graph(n, edges, **node_kw):
    """Condensed graph with identical synthetic nodes; ids must already be topologically ordered."""
    from cimkit.nnir.condense import CondensedGraph

    sizes = node_kw.pop("sizes", None)
    nodes = []
    for i in range(n):
        kw = dict(node_kw)
        if sizes is not None:
            kw.update(sizes[i])
        nodes.append(synth_node(i, **kw))
    return CondensedGraph(nodes, sorted(set(edges)), list(range(n)))


def random_dag(rng, n_max=12):
    """Random condensed graph built from chain, diamond and residual blocks."""
    edges, sizes = [], []
    tail = None

    def new():
        sizes.append(dict(rows=rng.choice([128, 512, 1024, 2048]), cols=rng.choice([64, 256, 512, 1024]),
                          vectors=rng.choice([1, 4, 16, 64])))
        return len(sizes) - 1

    while len(sizes) < n_max:
        kind = rng.choice(["chain", "diamond", "residual"])
        if kind == "chain" or tail is None or len(sizes) + 3 > n_max:
            v = new()
            if tail is not None:
                edges.append((tail, v))
            tail = v
        elif kind == "diamond":
            a, b, c = new(), new(), new()
            edges += [(tail, a), (tail, b), (a, c), (b, c)]
            tail = c
        else:
            a, b = new(), new()
            edges += [(tail, a), (a, b), (tail, b)]
            tail = b
        if rng.random() < 0.15:
            break
    return synth_graph(len(sizes), edges, sizes=sizes)


def small_chip():
    """4 cores of 4 MGs: small enough that capacity forces several stages."""
    return default_arch().replace({"chip": {"core_count": 4, "mesh_width": 2}, "core": {"mg_count": 4}})


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{status}] {title}: {detail}")
