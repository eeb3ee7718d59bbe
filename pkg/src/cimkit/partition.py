"""Stage partitioning and core mapping over dependency closures.

A dependency closure is a downward-closed node set of the condensed graph,
encoded as a bitmask whose bit ``i`` is the node at topological position
``i``.  Closures are sorted by popcount, so any subset of ``D[i]`` sits at a
smaller index and the DP over ``j < i`` sees every candidate predecessor.

The stage cost model works on integer cycles (coefficients are exact
fractions, rounded up once per term) so the DP and the brute-force oracle
compare costs exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

from .archconfig import ArchConfig
from .nnir.condense import CondensedGraph, CondensedNode

INF = math.inf
MASK_WIDTH = 64
DEFAULT_MASK_LIMIT = 100_000
DEFAULT_BATCH = 8
DEFAULT_DUP_CAP = 8
BRUTE_FORCE_MAX_NODES = 12


class PartitionError(ValueError):
    pass


class ClosureExplosionError(PartitionError):
    pass


class InfeasiblePartitionError(PartitionError):
    pass


def _frac(x) -> Fraction:
    return Fraction(str(x))


def _ceil(x: Fraction) -> int:
    return math.ceil(x)


@dataclass(frozen=True)
class CostParams:
    """Architecture numbers the cost model consumes, in exact arithmetic."""

    batch: int = DEFAULT_BATCH
    dup_cap: int = DEFAULT_DUP_CAP
    core_count: int = 64
    mesh_width: int = 8
    mg_count: int = 16
    macro_rows: int = 512
    mg_cols: int = 512
    flit_bytes: int = 8
    hop_latency: int = 1
    mvm_cycles: int = 10
    load_cycles_per_row: Fraction = Fraction(1)
    vector_cycles_per_elem: Fraction = Fraction(1, 16)
    global_cycles_per_word: Fraction = Fraction(1)
    local_cycles_per_word: Fraction = Fraction(1, 4)

    @classmethod
    def from_arch(cls, cfg: ArchConfig, batch: int = DEFAULT_BATCH,
                  dup_cap: int = DEFAULT_DUP_CAP) -> "CostParams":
        if batch < 1:
            raise PartitionError("batch must be >= 1")
        if dup_cap < 1:
            raise PartitionError("duplication cap must be >= 1")
        p = cfg.perf
        return cls(
            batch=batch, dup_cap=dup_cap,
            core_count=cfg.chip.core_count, mesh_width=cfg.chip.mesh_width,
            mg_count=cfg.core.mg_count, macro_rows=cfg.unit.macro_rows,
            mg_cols=cfg.unit.mg_cols, flit_bytes=cfg.chip.noc_flit_bytes,
            hop_latency=cfg.chip.noc_hop_latency,
            mvm_cycles=max(1, _ceil(_frac(p.cim_mvm_cycles))),
            load_cycles_per_row=_frac(p.cim_load_cycles_per_row),
            vector_cycles_per_elem=_frac(p.vector_cycles_per_elem),
            global_cycles_per_word=_frac(p.mem_cycles_per_word_global),
            local_cycles_per_word=_frac(p.mem_cycles_per_word_local),
        )

    def coords(self, core: int) -> tuple[int, int]:
        return core % self.mesh_width, core // self.mesh_width

    def hops(self, a: int, b: int) -> int:
        (ax, ay), (bx, by) = self.coords(a), self.coords(b)
        return abs(ax - bx) + abs(ay - by)


# -- per-node quantities ---------------------------------------------------

def tile_grid(n: CondensedNode, params: CostParams) -> tuple[int, int]:
    """(row tiles, column groups) of a node's 2D weight layout at MG granularity."""
    return -(-n.rows // params.macro_rows), -(-n.cols // params.mg_cols)


def mgs_needed(n: CondensedNode, params: CostParams) -> int:
    r, c = tile_grid(n, params)
    return r * c


def _vec(params: CostParams, elems: int) -> int:
    return _ceil(params.vector_cycles_per_elem * elems) if elems > 0 else 0


def node_latency(n: CondensedNode, params: CostParams) -> int:
    """Modeled cycles for one inference of node ``n`` on a single core."""
    r, _ = tile_grid(n, params)
    per_vec = r * params.mvm_cycles + _vec(params, n.cols) + 3
    if r > 1:
        per_vec += (r - 1) * _vec(params, n.cols)
    if n.kind in ("Conv2D", "DepthwiseConv2D"):
        per_vec += _vec(params, n.rows)
    return n.vectors * per_vec + _vec(params, n.fused_elems)


def weight_load_cycles(n: CondensedNode, params: CostParams) -> int:
    """Cycles to stream one copy of a node's weights from global memory into its MGs."""
    _, c = tile_grid(n, params)
    rows = n.rows * c
    return (_ceil(params.load_cycles_per_row * rows)
            + _ceil(params.global_cycles_per_word * Fraction(n.rows * n.cols, 4)))


def _global_io_cycles(params: CostParams, nbytes: int) -> int:
    return _ceil(params.global_cycles_per_word * Fraction(nbytes, 4)) if nbytes else 0


# -- closures --------------------------------------------------------------

def _pred_bits(g: CondensedGraph) -> tuple[list[int], list[int]]:
    """Predecessor bitmask per topological position, and node id per position."""
    pos = {nid: i for i, nid in enumerate(g.topo_order)}
    preds = [0] * len(g.topo_order)
    for u, v in g.edges:
        preds[pos[v]] |= 1 << pos[u]
    return preds, list(g.topo_order)


def dependency_masks(g: CondensedGraph, limit: int = DEFAULT_MASK_LIMIT) -> list[int]:
    """All downward-closed node sets, sorted by popcount then value."""
    n = len(g.topo_order)
    if n > MASK_WIDTH:
        raise PartitionError(f"condensed graph has {n} nodes; at most {MASK_WIDTH} are supported")
    preds, _ = _pred_bits(g)
    out: list[int] = []

    # iterative include/exclude walk over topological positions
    stack = [(0, 0)]
    while stack:
        i, mask = stack.pop()
        if i == n:
            out.append(mask)
            if len(out) > limit:
                raise ClosureExplosionError(
                    f"more than {limit} dependency closures; coarsen the graph or raise the limit")
            continue
        stack.append((i + 1, mask))
        if preds[i] & mask == preds[i]:
            stack.append((i + 1, mask | (1 << i)))
    out.sort(key=lambda m: (bin(m).count("1"), m))
    return out


def is_closed(mask: int, g: CondensedGraph) -> bool:
    preds, _ = _pred_bits(g)
    return all(preds[i] & mask == preds[i] for i in range(len(preds)) if mask >> i & 1)


def mask_nodes(mask: int, g: CondensedGraph) -> list[int]:
    """Node ids of a mask, in topological order."""
    return [nid for i, nid in enumerate(g.topo_order) if mask >> i & 1]


# -- mapping ---------------------------------------------------------------

@dataclass
class MappingPlan:
    # node id -> core of each copy; copy k serves inferences b with b % d == k
    copies: dict[int, list[int]] = field(default_factory=dict)

    def dup(self, node: int) -> int:
        return len(self.copies[node])

    def cluster(self, node: int) -> list[int]:
        return sorted(set(self.copies[node]))

    def core_of(self, node: int, inference: int) -> int:
        cores = self.copies[node]
        return cores[inference % len(cores)]

    def cores(self) -> list[int]:
        return sorted({c for cs in self.copies.values() for c in cs})

    def to_dict(self) -> dict:
        return {str(n): {"dup": len(c), "copies": list(c)} for n, c in sorted(self.copies.items())}


def place(nodes: list[int], dups: dict[int, int], g: CondensedGraph,
          params: CostParams) -> MappingPlan | None:
    """Assign node copies to cores, or None if the MG capacity does not allow it.

    One copy per core in row-major core order when the copies fit the chip;
    otherwise copies are packed sequentially by free macro groups.
    """
    need = {n: mgs_needed(g.nodes[n], params) for n in nodes}
    if any(v > params.mg_count for v in need.values()):
        return None
    total = sum(dups[n] for n in nodes)
    plan = MappingPlan()
    if total <= params.core_count:
        core = 0
        for n in nodes:
            plan.copies[n] = list(range(core, core + dups[n]))
            core += dups[n]
        return plan
    core, free = 0, params.mg_count
    for n in nodes:
        cores = []
        for _ in range(dups[n]):
            if need[n] > free:
                core, free = core + 1, params.mg_count
                if core >= params.core_count:
                    return None
            cores.append(core)
            free -= need[n]
        plan.copies[n] = cores
    return plan


def _share(batch: int, d: int, k: int) -> int:
    return len(range(k, batch, d))


def stage_cost(nodes: list[int], plan: MappingPlan, g: CondensedGraph,
               params: CostParams) -> int:
    """Integer cycle cost of one stage under a mapping plan.

    load: slowest core's weight streaming; compute: busiest core over the
    batch; transfer: flits times mean hop distance to each in-stage consumer.
    """
    in_stage = set(nodes)
    load: dict[int, int] = {}
    busy: dict[int, int] = {}
    transfer = 0
    b = params.batch
    for n in nodes:
        node = g.nodes[n]
        preds = g.preds(n)
        succs = g.succs(n)
        ext_in = sum(g.nodes[p].out_bytes for p in preds if p not in in_stage)
        if not preds:
            ext_in += node.in_bytes
        ext_out = node.out_bytes if (not succs or any(s not in in_stage for s in succs)) else 0
        lat = node_latency(node, params) + _global_io_cycles(params, ext_in + ext_out)
        wl = weight_load_cycles(node, params)
        d = len(plan.copies[n])
        for k, core in enumerate(plan.copies[n]):
            load[core] = load.get(core, 0) + wl
            busy[core] = busy.get(core, 0) + _share(b, d, k) * lat
        flits = -(-node.out_bytes // params.flit_bytes)
        for s in succs:
            if s not in in_stage:
                continue
            hop_sum = sum(params.hops(plan.core_of(n, i), plan.core_of(s, i)) for i in range(b))
            transfer += _ceil(Fraction(flits * hop_sum * params.hop_latency, b))
    if not nodes:
        return 0
    return max(load.values()) + max(busy.values()) + transfer


def optimal_mapping(nodes: list[int], g: CondensedGraph, cfg: ArchConfig | None = None,
                    params: CostParams | None = None) -> tuple[float | int, MappingPlan | None]:
    """Cheapest mapping of a stage found by greedy bottleneck duplication.

    Starts from one copy per node and doubles the duplication factor of the
    busiest node while that strictly lowers the stage cost.  Returns
    ``(INF, None)`` when the stage cannot be placed at all.
    """
    params = params or CostParams.from_arch(cfg)
    if not nodes:
        return 0, MappingPlan()
    dups = {n: 1 for n in nodes}
    plan = place(nodes, dups, g, params)
    if plan is None:
        return INF, None
    best = stage_cost(nodes, plan, g, params)
    cap = min(params.dup_cap, params.batch)
    lat = {n: node_latency(g.nodes[n], params) for n in nodes}
    while True:
        # bottleneck: largest per-copy batch share times latency; ties to topo order
        n = max(nodes, key=lambda x: (-(-params.batch // dups[x]) * lat[x], -nodes.index(x)))
        if dups[n] * 2 > cap:
            break
        trial = dict(dups)
        trial[n] *= 2
        tplan = place(nodes, trial, g, params)
        if tplan is None:
            break
        cost = stage_cost(nodes, tplan, g, params)
        if cost >= best:
            break
        dups, plan, best = trial, tplan, cost
    return best, plan


def single_copy_mapping(nodes: list[int], g: CondensedGraph,
                        params: CostParams) -> tuple[float | int, MappingPlan | None]:
    plan = place(nodes, {n: 1 for n in nodes}, g, params)
    if plan is None:
        return INF, None
    return stage_cost(nodes, plan, g, params), plan


# -- solutions -------------------------------------------------------------

@dataclass
class Stage:
    mask: int
    nodes: list[int]
    weight_bytes: int
    mapping: MappingPlan
    cost: int

    def to_dict(self) -> dict:
        return {"mask": hex(self.mask), "nodes": self.nodes, "weight_bytes": self.weight_bytes,
                "cost": self.cost, "mapping": self.mapping.to_dict()}


@dataclass
class PartitionSolution:
    stages: list[Stage]
    total_cost: int
    strategy: str = "dp"
    batch: int = DEFAULT_BATCH

    @property
    def stage_costs(self) -> list[int]:
        return [s.cost for s in self.stages]

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "batch": self.batch, "total_cost": self.total_cost,
                "stage_costs": self.stage_costs, "stages": [s.to_dict() for s in self.stages]}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class _StageCache:
    def __init__(self, g: CondensedGraph, params: CostParams, mapper):
        self.g, self.params, self.mapper = g, params, mapper
        self.memo: dict[int, tuple] = {}

    def __call__(self, mask: int) -> tuple:
        hit = self.memo.get(mask)
        if hit is None:
            hit = self.mapper(mask_nodes(mask, self.g), self.g, params=self.params)
            self.memo[mask] = hit
        return hit


def _build(g: CondensedGraph, masks_chain: list[int], cache: _StageCache,
           strategy: str) -> PartitionSolution:
    stages = []
    for lo, hi in zip(masks_chain, masks_chain[1:]):
        diff = hi & ~lo
        cost, plan = cache(diff)
        nodes = mask_nodes(diff, g)
        stages.append(Stage(diff, nodes, sum(g.nodes[n].weight_bytes for n in nodes), plan, int(cost)))
    return PartitionSolution(stages, sum(s.cost for s in stages), strategy, cache.params.batch)


def dp_partition(g: CondensedGraph, cfg: ArchConfig, batch: int = DEFAULT_BATCH,
                 dup_cap: int = DEFAULT_DUP_CAP, limit: int = DEFAULT_MASK_LIMIT,
                 params: CostParams | None = None) -> PartitionSolution:
    params = params or CostParams.from_arch(cfg, batch, dup_cap)
    masks = dependency_masks(g, limit)
    cache = _StageCache(g, params, optimal_mapping)
    dp = [INF] * len(masks)
    prev = [-1] * len(masks)
    dp[0] = 0
    for i in range(1, len(masks)):
        di = masks[i]
        for j in range(i):
            dj = masks[j]
            if dp[j] == INF or di & dj != dj or di == dj:
                continue
            cost, _ = cache(di & ~dj)
            if dp[j] + cost < dp[i]:
                dp[i] = dp[j] + cost
                prev[i] = j
    if dp[-1] == INF:
        raise InfeasiblePartitionError("no feasible partition: some node does not fit one core")
    chain = [len(masks) - 1]
    while chain[-1] != 0:
        chain.append(prev[chain[-1]])
    chain.reverse()
    return _build(g, [masks[k] for k in chain], cache, "dp")


def _chains(masks: list[int], full: int) -> Iterator[list[int]]:
    stack = [[0]]
    while stack:
        path = stack.pop()
        cur = path[-1]
        if cur == full:
            yield path
            continue
        for m in masks:
            if m != cur and m & cur == cur:
                stack.append(path + [m])


def brute_force_partition(g: CondensedGraph, cfg: ArchConfig, batch: int = DEFAULT_BATCH,
                          dup_cap: int = DEFAULT_DUP_CAP,
                          params: CostParams | None = None) -> PartitionSolution:
    """Exhaustive minimum over every chain of closures from the empty set to the full set."""
    if len(g.topo_order) > BRUTE_FORCE_MAX_NODES:
        raise PartitionError(f"brute force is limited to {BRUTE_FORCE_MAX_NODES} nodes")
    params = params or CostParams.from_arch(cfg, batch, dup_cap)
    masks = dependency_masks(g)
    full = masks[-1]
    cache = _StageCache(g, params, optimal_mapping)
    best, best_chain = INF, None
    for chain in _chains(masks, full):
        total = 0
        for lo, hi in zip(chain, chain[1:]):
            total += cache(hi & ~lo)[0]
        if total < best:
            best, best_chain = total, chain
    if best_chain is None:
        raise InfeasiblePartitionError("no feasible partition: some node does not fit one core")
    return _build(g, best_chain, cache, "brute_force")


def generic_mapping(g: CondensedGraph, cfg: ArchConfig, batch: int = DEFAULT_BATCH,
                    params: CostParams | None = None) -> PartitionSolution:
    """Topological greedy stage packing with one copy of every node."""
    params = params or CostParams.from_arch(cfg, batch)
    cache = _StageCache(g, params, single_copy_mapping)
    chain = [0]
    cur = 0
    for i, nid in enumerate(g.topo_order):
        if mgs_needed(g.nodes[nid], params) > params.mg_count:
            raise InfeasiblePartitionError(f"node {nid} does not fit one core")
        bit = 1 << i
        if cur and cache((cur | bit) & ~chain[-1])[0] == INF:
            chain.append(cur)
        cur |= bit
    if cur:
        chain.append(cur)
    return _build(g, chain, cache, "generic")


def partition(g: CondensedGraph, cfg: ArchConfig, strategy: str = "dp",
              batch: int = DEFAULT_BATCH) -> PartitionSolution:
    if strategy == "dp":
        return dp_partition(g, cfg, batch)
    if strategy == "generic":
        return generic_mapping(g, cfg, batch)
    raise PartitionError(f"unknown strategy {strategy!r} (expected dp or generic)")
