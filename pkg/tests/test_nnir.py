import base64
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cimkit.nnir import (GENERATORS, CondenseError, CycleError, DtypeError, ModelError, Operator,
                         Quant, ShapeMismatchError, UnsupportedOperatorError, condense, generate,
                         graph_from_doc, graph_to_doc, import_model, infer_shapes, mac_count,
                         node_cost_inputs)
from cimkit.nnir.generators import _Builder, genmodel
from cimkit.sim.reference import execute_op, reference_execute

from conftest import int8_batch


def _w(shape, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(-8, 8, size=shape).astype(np.int8)


def _b64(a):
    return {"b64": base64.b64encode(a.tobytes()).decode()}


def mlp_doc(bad_edge=False):
    w1, w2 = _w((784, 128)), _w((128, 10), 1)
    return {
        "name": "mlp2",
        "inputs": [{"name": "x", "shape": [784], "dtype": "int8"}],
        "operators": [
            {"id": 0, "kind": "FullyConnected", "weight_shape": [784, 128], "weights_ref": _b64(w1),
             "quant": {"multiplier": 1, "shift": 8}},
            {"id": 1, "kind": "Relu"},
            {"id": 2, "kind": "FullyConnected", "weight_shape": [128, 10], "weights_ref": _b64(w2),
             "quant": {"multiplier": 1, "shift": 6}},
        ],
        "edges": [
            {"src": "x", "dst": 0, "shape": [784]},
            {"src": 0, "dst": 1, "shape": [128]},
            {"src": 1, "dst": 2, "shape": [64 if bad_edge else 128]},
        ],
    }


def test_import_mlp(tmp_path):
    p = tmp_path / "mlp.json"
    p.write_text(json.dumps(mlp_doc()))
    g = import_model(p)
    assert len(g.operators) == 3
    assert sum(isinstance(e.src, int) for e in g.edges) == 2
    assert g.outputs == [2]
    assert g.operators[2].out_shape == (10,)


def test_shape_mismatch_names_edge():
    with pytest.raises(ShapeMismatchError) as err:
        graph_from_doc(mlp_doc(bad_edge=True))
    assert err.value.edge == (1, 2)
    assert "1->2" in str(err.value)


def test_import_errors():
    doc = mlp_doc()
    doc["operators"][1]["kind"] = "Softmax"
    with pytest.raises(UnsupportedOperatorError):
        graph_from_doc(doc)
    doc = mlp_doc()
    doc["inputs"][0]["dtype"] = "float32"
    with pytest.raises(DtypeError):
        graph_from_doc(doc)
    doc = mlp_doc()
    doc["edges"].append({"src": 2, "dst": 0, "shape": [10]})
    with pytest.raises(ModelError):
        graph_from_doc(doc)


def test_cycle_detected():
    doc = mlp_doc()
    doc["operators"].append({"id": 3, "kind": "Relu"})
    doc["operators"].append({"id": 4, "kind": "Relu"})
    doc["edges"] += [{"src": 3, "dst": 4, "shape": [10]}, {"src": 4, "dst": 3, "shape": [10]}]
    with pytest.raises(CycleError):
        graph_from_doc(doc)


def test_sidecar_roundtrip(tmp_path):
    doc, blob = genmodel("vgg_like", 0.25, 0, "m.bin")
    (tmp_path / "m.json").write_text(json.dumps(doc))
    (tmp_path / "m.bin").write_bytes(blob)
    g = import_model(tmp_path / "m.json")
    ref = generate("vgg_like")
    assert len(g.operators) == len(ref.operators)
    for a, b in zip(g.operators, ref.operators):
        assert a.kind == b.kind and a.out_shape == b.out_shape and a.quant == b.quant
        if a.weights is not None:
            assert np.array_equal(a.weights, b.weights)


def _conv_chain_with_quantize():
    b = _Builder("cq", (6, 6, 2), 0)
    x = b.conv("x", 4)
    x = b.relu(x)
    x = b._emit("Quantize", [x], {"multiplier": 1, "shift": 1}, quant=Quant(1, 1))
    b.conv(x, 4)
    return b.build()


def test_condense_conv_relu_quantize_conv():
    g = _conv_chain_with_quantize()
    cg = condense(g)
    assert len(cg.nodes) == 2
    assert [g.operators[o].kind for o in cg.nodes[0].ops] == ["Conv2D", "Relu", "Quantize"]
    assert [g.operators[o].kind for o in cg.nodes[1].ops] == ["Conv2D"]
    assert cg.edges == [(0, 1)]


def test_condense_single_fc():
    b = _Builder("fc", (16,), 0)
    b.fc("x", 8)
    cg = condense(b.build())
    assert len(cg.nodes) == 1 and cg.edges == []


def _diamond():
    b = _Builder("diamond", (6, 6, 4), 0)
    a = b.conv("x", 4)
    left = b.conv(a, 4)
    right = b.conv(a, 4)
    s = b.add(left, right)
    b.conv(s, 4)
    return b.build()


def test_condense_diamond_fuses_add_forward():
    g = _diamond()
    cg = condense(g)
    assert len(cg.nodes) == 4
    add = next(o.id for o in g.operators if o.kind == "Add")
    tail = cg.group_of[add]
    assert g.operators[cg.nodes[tail].anchor].kind == "Conv2D"
    assert cg.nodes[tail].anchor > add
    assert sorted(cg.edges) == [(0, 1), (0, 2), (1, 3), (2, 3)]


def test_orphan_operator_rejected():
    b = _Builder("orphan", (8,), 0)
    r = b.relu("x")
    b.relu(r)
    with pytest.raises(CondenseError):
        condense(b.build())


def test_mac_counts():
    b = _Builder("fc", (784,), 0)
    b.fc("x", 128)
    cg = condense(b.build())
    assert node_cost_inputs(cg.nodes[0])["weight_bytes"] == 100_352
    assert node_cost_inputs(cg.nodes[0])["mac_count"] == 100_352

    conv = Operator(0, "Conv2D", {"kernel": [3, 3], "padding": 1}, np.zeros((3, 3, 64, 64), np.int8),
                    out_shape=(56, 56, 64))
    assert mac_count(conv, (56, 56, 64)) == 115_605_504
    one = Operator(0, "Conv2D", {"kernel": [1, 1]}, np.zeros((1, 1, 1, 1), np.int8), out_shape=(1, 1, 1))
    assert mac_count(one, (1, 1, 1)) == 1
    dw = Operator(0, "DepthwiseConv2D", {"kernel": [3, 3]}, np.zeros((3, 3, 8), np.int8),
                  out_shape=(4, 4, 8))
    assert mac_count(dw, (6, 6, 8)) == 3 * 3 * 8 * 16


def test_requantize_round_half_up_and_saturation():
    from cimkit.nnir import requantize

    acc = np.array([5, -5, 6, -6, 1000, -1000, 3, -3])
    assert requantize(acc, 1, 1).tolist() == [3, -2, 3, -3, 127, -128, 2, -1]


def test_reference_identity_and_small_matmul():
    b = _Builder("id", (1,), 0)
    fc = b.fc("x", 1)
    g = b.build()
    g.operators[fc].weights = np.ones((1, 1), np.int8)
    g.operators[fc].quant = Quant(1, 0, 0)
    for v in (-128, -1, 0, 5, 127):
        assert reference_execute(g, {"x": np.array([v], np.int8)})[fc].tolist() == [v]
    op = Operator(0, "MatMul", {}, np.array([[1, 3], [2, 4]], np.int8))
    from cimkit.sim.reference import accumulate
    assert accumulate(op, np.array([[1, 1]])).tolist() == [[3, 7]]


@pytest.mark.parametrize("name", GENERATORS)
def test_generators(name):
    g = generate(name)
    again = generate(name)
    assert graph_to_doc(g) == graph_to_doc(again)
    assert graph_to_doc(generate(name, seed=1))[0] != graph_to_doc(g)[0]
    cg = condense(g)
    assert 1 <= len(cg.nodes) <= 64
    if name == "resnet_like":
        adds = [o for o in g.operators if o.kind == "Add"]
        assert adds and all(len(g.producers(o.id)) == 2 for o in adds)
    if name in ("mobilenet_like", "efficientnet_like"):
        assert any(o.kind == "DepthwiseConv2D" for o in g.operators)


def test_generator_rejects_unknown_name_and_scale():
    with pytest.raises(ModelError):
        generate("alexnet")
    with pytest.raises(ModelError):
        generate("vgg_like", scale=0)


# -- properties over random graphs ------------------------------------------------

@st.composite
def random_graphs(draw):
    seed = draw(st.integers(0, 2**16))
    c = draw(st.sampled_from([4, 8]))
    b = _Builder("rand", (6, 6, c), seed)
    tensors = ["x"]
    for _ in range(draw(st.integers(1, 7))):
        src = draw(st.sampled_from(tensors))
        kind = draw(st.sampled_from(["conv", "dw", "relu", "add", "pool"]))
        if kind == "conv":
            t = b.conv(src, c, k=draw(st.sampled_from([1, 3])))
        elif kind == "dw":
            t = b.dwconv(src)
        elif kind == "relu" and src != "x":
            t = b.relu(src)
        elif kind == "add" and src != "x":
            other = [t for t in tensors if t != "x" and t != src and b.shapes[t] == b.shapes[src]]
            if not other:
                continue
            t = b.relu(b.conv(b.add(src, draw(st.sampled_from(other))), c, k=1))
        elif kind == "pool" and src != "x" and b.shapes[src][0] >= 4:
            t = b.conv(b.pool(src, draw(st.sampled_from(["max", "avg"])), 2), c, k=1)
        else:
            t = b.conv(src, c, k=1)
        tensors.append(t)
    return b.build()


def _execute_condensed(cg, inputs):
    g = cg.graph
    values = dict(inputs)
    for nid in cg.topo_order:
        for o in cg.nodes[nid].ops:
            values[o] = execute_op(g.operators[o], [values[p] for p in g.producers(o)])
    return {o: values[o] for o in g.outputs}


@settings(max_examples=40, deadline=None)
@given(random_graphs(), st.integers(0, 1000))
def test_condense_properties(g, seed):
    cg = condense(g)
    ids = sorted(o for n in cg.nodes for o in n.ops)
    assert ids == list(range(len(g.operators)))
    pos = {n: i for i, n in enumerate(cg.topo_order)}
    assert sorted(cg.topo_order) == list(range(len(cg.nodes)))
    assert all(pos[u] < pos[v] for u, v in cg.edges)
    for n in cg.nodes:
        assert n.weight_bytes == g.operators[n.anchor].weights.size
    x = {"x": int8_batch(g.inputs["x"], 1, seed)[0]}
    ref = reference_execute(g, x)
    got = _execute_condensed(cg, x)
    assert all(np.array_equal(ref[o], got[o]) for o in g.outputs)


@settings(max_examples=20, deadline=None)
@given(random_graphs())
def test_shape_inference_idempotent(g):
    before = [o.out_shape for o in g.operators]
    infer_shapes(g)
    assert [o.out_shape for o in g.operators] == before
