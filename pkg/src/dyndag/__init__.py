"""Static shape analysis and planning for dynamic computational graphs."""

from .graph import Graph, GraphError, load_graph, parse_graph, topo_sort
from .ops import AnalysisError, DynClass
from .rdp import RdpResult, run_rdp

__version__ = "0.1.0"

__all__ = [
    "AnalysisError",
    "DynClass",
    "Graph",
    "GraphError",
    "RdpResult",
    "load_graph",
    "parse_graph",
    "run_rdp",
    "topo_sort",
]
