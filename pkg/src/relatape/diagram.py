"""Graphviz DOT rendering of the workflow graph.

Tier styles: manual green box, lookup grey box, imported blue ellipse,
computed red ellipse, part tables as plain text clustered with their master.
Solid edges are identity-inheriting foreign keys, dashed edges secondary
references. Tables that introduce new primary-key attributes (dimensions) have
underlined names. Output is deterministic: nodes in topological order, edges
sorted.
"""

from __future__ import annotations

import html

from .errors import UnknownSchema
from .model import SchemaRegistry, TableDef, Tier

TIER_STYLE = {
    Tier.MANUAL: ("box", "#9ccc9c"),
    Tier.LOOKUP: ("box", "#d3d3d3"),
    Tier.IMPORTED: ("ellipse", "#9fb7e8"),
    Tier.COMPUTED: ("ellipse", "#e89f9f"),
    Tier.PART: ("plaintext", "#ffffff"),
}


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _label(d: TableDef, dimension: bool, show_attrs: bool) -> str:
    title = html.escape(d.table_name)
    if dimension:
        title = f"<U>{title}</U>"
    if not show_attrs:
        return f"<{title}>"
    rows = [f"<TR><TD><B>{title}</B></TD></TR>"]
    for a in d.primary_attrs:
        rows.append(f'<TR><TD ALIGN="LEFT"><U>{html.escape(a.name)}</U> : {html.escape(str(a.type))}</TD></TR>')
    for a in d.secondary_attrs:
        rows.append(f'<TR><TD ALIGN="LEFT">{html.escape(a.name)} : {html.escape(str(a.type))}</TD></TR>')
    return '<<TABLE BORDER="0" CELLBORDER="0" CELLSPACING="0">' + "".join(rows) + "</TABLE>>"


def emit_dot(registry: SchemaRegistry, *, schema: str | None = None, show_attrs: bool = False) -> str:
    """The schema DAG (optionally one schema's tables) as a DOT digraph."""
    if schema is not None and schema not in registry.schemas:
        raise UnknownSchema(f"no schema {schema!r}")
    tables = [d for d in registry.topo_order() if schema is None or d.schema_name == schema]
    names = {d.name for d in tables}
    dims = registry.dimensions()
    lines = [
        "digraph workflow {",
        "  rankdir=LR;",
        '  node [fontname="Helvetica", fontsize=10, style=filled];',
        '  edge [arrowsize=0.6];',
    ]

    def node(d: TableDef, indent: str):
        shape, color = TIER_STYLE[d.tier]
        lines.append(
            f"{indent}{_quote(d.name)} [shape={shape}, fillcolor={_quote(color)}, "
            f"label={_label(d, d.name in dims, show_attrs)}, tooltip={_quote(d.comment or d.tier.value)}];"
        )

    for d in tables:
        if d.tier is Tier.PART:
            continue
        parts = [p for p in registry.parts(d.name) if p.name in names]
        if parts:
            lines.append(f"  subgraph {_quote('cluster_' + d.name)} {{")
            lines.append('    style=dotted; label="";')
            node(d, "    ")
            for p in parts:
                node(p, "    ")
            lines.append("  }")
        else:
            node(d, "  ")
    for d in tables:
        if d.tier is Tier.PART and d.master not in names:
            node(d, "  ")

    edges = []
    for child, parent, primary in registry.edges:
        if child in names and parent in names:
            edges.append((parent, child, primary))
    for parent, child, primary in sorted(edges):
        style = "solid" if primary else "dashed"
        lines.append(f"  {_quote(parent)} -> {_quote(child)} [style={style}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


__all__ = ["TIER_STYLE", "emit_dot"]
