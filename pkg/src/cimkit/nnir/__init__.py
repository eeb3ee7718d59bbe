"""Quantized operator graphs: import, shape inference and condensation."""

from .condense import CondensedGraph, CondensedNode, CondenseError, condense, node_cost_inputs
from .graph import (
    KINDS, MVM_KINDS, CompGraph, CycleError, DtypeError, Edge, ModelError, Operator, Quant,
    ShapeMismatchError, UnsupportedOperatorError, graph_from_doc, graph_to_doc, import_model,
    infer_shapes, mac_count, mvm_geometry, requantize, topo_sort, validate_graph,
)
from .generators import GENERATORS, generate, genmodel
