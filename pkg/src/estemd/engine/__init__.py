"""CEP dataflow engine: operators, windows and running topologies."""
from estemd.engine.operators import (
    ABSENT,
    WINDOW_END,
    WINDOW_START,
    Aggregation,
    AggSpec,
    Filter,
    FlatMap,
    Map,
    Negation,
    Projection,
    WindowSpec,
    apply_stateless,
    apply_values,
    output_schema,
)
from estemd.engine.runtime import Chain, RunningTopology, Topology, TopologyTask, run_topology
from estemd.engine.windows import (
    NegationState,
    WindowState,
    advance_negation,
    advance_watermark,
    advance_window,
)

__all__ = [
    "ABSENT",
    "WINDOW_END",
    "WINDOW_START",
    "Aggregation",
    "AggSpec",
    "Chain",
    "Filter",
    "FlatMap",
    "Map",
    "Negation",
    "NegationState",
    "Projection",
    "RunningTopology",
    "Topology",
    "TopologyTask",
    "WindowSpec",
    "WindowState",
    "advance_negation",
    "advance_watermark",
    "advance_window",
    "apply_stateless",
    "apply_values",
    "output_schema",
    "run_topology",
]
