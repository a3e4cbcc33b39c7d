"""Turn an analysed select into an operator topology.

Node order: Filter, Map, Aggregation or Negation, then Projection. Nodes that
would be identities are left out, so ``SELECT * FROM S`` plans to no nodes.
"""
from __future__ import annotations

from estemd.engine.operators import Aggregation, Filter, Map, Negation, Projection, output_schema
from estemd.engine.runtime import Topology
from estemd.eql.analyzer import AnalyzedSelect
from estemd.expr import Column


def plan_nodes(analyzed: AnalyzedSelect) -> tuple:
    select = analyzed.select
    schema = analyzed.source.schema
    nodes: list = []
    if analyzed.kind == "absence":
        neg = Negation(select.where, select.window)
        nodes.append(neg)
        current = output_schema(neg, schema)
    else:
        if select.where is not None:
            nodes.append(Filter(select.where))
        current = schema
        if analyzed.kind == "stateless":
            assignments = tuple(
                (name, e) for name, e in analyzed.columns if not (isinstance(e, Column) and e.name == name)
            )
            if assignments:
                m = Map(assignments)
                nodes.append(m)
                current = output_schema(m, current)
        else:
            agg = Aggregation(analyzed.aggregates, select.window, select.group_by)
            nodes.append(agg)
            current = output_schema(agg, current)
            renames = tuple(
                (name, e) for name, e in analyzed.columns if isinstance(e, Column) and e.name != name
            )
            if renames:
                m = Map(renames)
                nodes.append(m)
                current = output_schema(m, current)
    names = tuple(name for name, _ in analyzed.columns)
    if tuple(current.names) != names:
        nodes.append(Projection(names))
    return tuple(nodes)


def plan(analyzed: AnalyzedSelect, name: str = "interactive", output: str = "") -> Topology:
    return Topology(name, analyzed.source.topic, plan_nodes(analyzed), output)
