"""Attribute provenance through foreign-key chains.

Every attribute instance carries the set of declaration sites it descends
from. Namesake attributes of two operands may be matched only when those sets
intersect.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass

from .errors import SemanticMismatch, UnknownAttribute
from .model import SchemaRegistry, TableDef


@dataclass(frozen=True, order=True)
class Origin:
    schema_name: str
    table_name: str
    attribute_name: str

    def __str__(self):
        return f"{self.schema_name}.{self.table_name}.{self.attribute_name}"


SYNTHETIC_SCHEMA = "~query"
_fresh = itertools.count(1)
_fresh_lock = threading.Lock()


def fresh_origin(attribute: str) -> Origin:
    """A new origin for a computed attribute; compatible only with itself."""
    with _fresh_lock:
        n = next(_fresh)
    return Origin(SYNTHETIC_SCHEMA, f"expr{n}", attribute)


def table_lineage(registry: SchemaRegistry, table: str | TableDef) -> dict[str, frozenset[Origin]]:
    """Origin set of every attribute of a declared table."""
    name = table if isinstance(table, str) else table.name
    cache = registry.derived.setdefault("lineage", {})
    hit = cache.get(name)
    if hit is not None:
        return hit
    d = registry[name]
    out: dict[str, frozenset[Origin]] = {}
    inherited: dict[str, set[Origin]] = {}
    for fk in d.foreign_keys:
        parent = table_lineage(registry, fk.parent)
        for child_attr, parent_attr in fk.attribute_map:
            inherited.setdefault(child_attr, set()).update(parent[parent_attr])
    for a in d.attributes:
        if a.name in inherited:
            out[a.name] = frozenset(inherited[a.name])
        else:
            out[a.name] = frozenset({Origin(d.schema_name, d.table_name, a.name)})
    cache[name] = out
    return out


class LineageGraph:
    """(table, attribute) -> origin set, for every table in a registry."""

    def __init__(self, registry: SchemaRegistry):
        self.registry = registry

    def origins(self, table: str, attribute: str) -> frozenset[Origin]:
        lineage = table_lineage(self.registry, self.registry.resolve(table))
        try:
            return lineage[attribute]
        except KeyError:
            raise UnknownAttribute(f"{table} has no attribute {attribute!r}") from None

    def items(self):
        for d in self.registry:
            for attr, origins in table_lineage(self.registry, d).items():
                yield (d.name, attr), origins


def origins_of(expr_or_table, attribute: str, registry: SchemaRegistry | None = None) -> frozenset[Origin]:
    """Origins of ``attribute`` in a query expression or a declared table."""
    heading = getattr(expr_or_table, "heading", None)
    if heading is not None:
        if attribute not in heading:
            raise UnknownAttribute(f"no attribute {attribute!r} in {heading.names}")
        return heading[attribute].origins
    if registry is None:
        raise TypeError("a registry is required to look up table lineage")
    return LineageGraph(registry).origins(expr_or_table.name if isinstance(expr_or_table, TableDef) else expr_or_table, attribute)


def semantically_compatible(a_origins, b_origins) -> bool:
    return not frozenset(a_origins).isdisjoint(b_origins)


def resolve_join_attrs(left_heading, right_heading) -> list[str]:
    """Namesakes of two headings, all of which must share lineage.

    Raises :class:`SemanticMismatch` on the first incompatible namesake
    (left-heading order); incompatible pairs are never silently dropped.
    """
    matched = []
    for name in left_heading.names:
        if name not in right_heading:
            continue
        lo, ro = left_heading[name].origins, right_heading[name].origins
        if not semantically_compatible(lo, ro):
            raise SemanticMismatch(name, lo, ro)
        matched.append(name)
    return matched
