"""Condense an operator graph into MVM-anchored groups.

Fusion rules, applied in topological order:

* a single-input non-MVM operator joins the group of its producer;
* a multi-input operator (Add) whose only consumer is an MVM operator is
  fused forward into that consumer's group;
* otherwise a multi-input operator joins the group of its producer that
  comes last in topological order;
* operators fed only by graph inputs fuse forward into the group of their
  unique consumer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .graph import CompGraph, ModelError, TensorRef, mac_count, mvm_geometry, tensor_bytes


class CondenseError(ModelError):
    pass


@dataclass
class CondensedNode:
    id: int
    anchor: int
    ops: list[int]                 # anchor plus fused operators, in execution order
    inputs: list[TensorRef]        # tensors produced outside the group
    outputs: list[int]             # operator outputs consumed outside the group
    weight_bytes: int
    mac_count: int
    rows: int
    cols: int
    vectors: int
    in_bytes: int
    out_bytes: int
    fused_elems: int               # elements touched by fused vector operators
    kind: str = ""

    @property
    def fused(self) -> list[int]:
        return [o for o in self.ops if o != self.anchor]


@dataclass
class CondensedGraph:
    nodes: list[CondensedNode]
    edges: list[tuple[int, int]]
    topo_order: list[int]
    graph: CompGraph | None = field(default=None, repr=False)
    group_of: dict[int, int] = field(default_factory=dict)

    def preds(self, n: int) -> list[int]:
        return [u for u, v in self.edges if v == n]

    def succs(self, n: int) -> list[int]:
        return [v for u, v in self.edges if u == n]

    def __len__(self) -> int:
        return len(self.nodes)


def node_cost_inputs(n: CondensedNode) -> dict[str, int]:
    return {"weight_bytes": n.weight_bytes, "mac_count": n.mac_count,
            "in_bytes": n.in_bytes, "out_bytes": n.out_bytes}


def _is_acyclic(n: int, edges: list[tuple[int, int]]) -> list[int] | None:
    import heapq

    indeg = [0] * n
    succ: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        indeg[v] += 1
        succ[u].append(v)
    ready = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(ready, j)
    return order if len(order) == n else None


def condense(g: CompGraph) -> CondensedGraph:
    order = g.topo_order()
    pos = {op_id: i for i, op_id in enumerate(order)}
    anchors = [i for i in order if g.operators[i].is_mvm]
    group_of: dict[int, int] = {a: k for k, a in enumerate(anchors)}
    deferred: list[int] = []

    for i in order:
        op = g.operators[i]
        if op.is_mvm:
            continue
        prods = g.producers(i)
        op_prods = [p for p in prods if isinstance(p, int)]
        cons = g.consumers(i)
        if len(prods) == 1:
            p = prods[0]
            if isinstance(p, int) and p in group_of:
                group_of[i] = group_of[p]
            else:
                deferred.append(i)
            continue
        if len(cons) == 1 and g.operators[cons[0]].is_mvm:
            deferred.append(i)
            continue
        assigned = [p for p in op_prods if p in group_of]
        if assigned and len(assigned) == len(op_prods):
            latest = max(assigned, key=lambda p: pos[p])
            group_of[i] = group_of[latest]
        else:
            deferred.append(i)

    for i in sorted(deferred, key=lambda o: pos[o], reverse=True):
        cons = g.consumers(i)
        if len(cons) != 1 or cons[0] not in group_of:
            raise CondenseError(f"operator {i} ({g.operators[i].kind}) is not adjacent to any "
                                f"MVM anchor it can fuse with")
        group_of[i] = group_of[cons[0]]

    members: list[list[int]] = [[] for _ in anchors]
    for i in order:
        members[group_of[i]].append(i)

    edges = set()
    for e in g.edges:
        if isinstance(e.src, int) and group_of[e.src] != group_of[e.dst]:
            edges.add((group_of[e.src], group_of[e.dst]))
    edge_list = sorted(edges)
    topo = _is_acyclic(len(anchors), edge_list)
    if topo is None:
        raise CondenseError("fusion produced a cyclic condensed graph")

    graph_outputs = set(g.outputs)
    nodes = []
    for k, anchor in enumerate(anchors):
        ops = members[k]
        mset = set(ops)
        inputs: list[TensorRef] = []
        for o in ops:
            for p in g.producers(o):
                if (isinstance(p, str) or p not in mset) and p not in inputs:
                    inputs.append(p)
        outputs = [o for o in ops
                   if o in graph_outputs or any(c not in mset for c in g.consumers(o))]
        aop = g.operators[anchor]
        rows, cols, vectors = mvm_geometry(aop)
        anchor_in = g.tensor_shape(g.producers(anchor)[0])
        fused_elems = sum(tensor_bytes(g.operators[o].out_shape) for o in ops if o != anchor)
        nodes.append(CondensedNode(
            id=k, anchor=anchor, ops=ops, inputs=inputs, outputs=outputs,
            weight_bytes=int(aop.weights.size), mac_count=mac_count(aop, anchor_in),
            rows=rows, cols=cols, vectors=vectors,
            in_bytes=sum(tensor_bytes(g.tensor_shape(t)) for t in inputs),
            out_bytes=sum(tensor_bytes(g.operators[o].out_shape) for o in outputs),
            fused_elems=fused_elems, kind=aop.kind,
        ))
    return CondensedGraph(nodes, edge_list, topo, g, group_of)
