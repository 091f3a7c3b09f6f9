"""Tables as workflow steps: tiers, attributes, foreign keys, and the schema DAG."""

from __future__ import annotations

import enum
import heapq
import re
from dataclasses import dataclass
from typing import Any

from .errors import (
    CycleError,
    DuplicateAttribute,
    InvalidDefinition,
    PartWithoutMaster,
    UnknownParent,
    UnknownTable,
)
from .types import TypeSpec

IDENTIFIER = re.compile(r"[a-z][a-z0-9_]*\Z")
MAX_NAME = 64


class Tier(str, enum.Enum):
    MANUAL = "manual"
    LOOKUP = "lookup"
    IMPORTED = "imported"
    COMPUTED = "computed"
    PART = "part"

    @property
    def auto_populated(self) -> bool:
        return self in (Tier.IMPORTED, Tier.COMPUTED)


class _Null:
    """Default marker for nullable attributes (``= null`` in definitions)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NULL"

    def __reduce__(self):
        return (_Null, ())


NULL = _Null()


def check_identifier(name: str, what: str = "name") -> None:
    if not IDENTIFIER.match(name) or len(name) > MAX_NAME:
        raise InvalidDefinition(f"invalid {what} {name!r}: must match [a-z][a-z0-9_]* (max {MAX_NAME} chars)")


@dataclass(frozen=True)
class Attribute:
    name: str
    type: TypeSpec
    default: Any = None  # None: required; NULL: nullable; otherwise a literal
    comment: str = ""
    in_primary_key: bool = False
    fk: int | None = None  # index of the foreign key that introduced this attribute

    @property
    def nullable(self) -> bool:
        return self.default is NULL

    @property
    def inherited(self) -> bool:
        return self.fk is not None


@dataclass(frozen=True)
class ForeignKey:
    parent: str  # qualified "schema.table"
    attribute_map: tuple[tuple[str, str], ...]  # (child_attr, parent_attr), parent PK order
    into_primary_key: bool

    @property
    def child_attrs(self) -> tuple[str, ...]:
        return tuple(c for c, _ in self.attribute_map)

    @property
    def renamed(self) -> tuple[tuple[str, str], ...]:
        return tuple((c, p) for c, p in self.attribute_map if c != p)


@dataclass(frozen=True)
class TableDef:
    schema_name: str
    table_name: str
    tier: Tier
    comment: str = ""
    primary_attrs: tuple[Attribute, ...] = ()
    secondary_attrs: tuple[Attribute, ...] = ()
    foreign_keys: tuple[ForeignKey, ...] = ()
    master: str | None = None

    @property
    def name(self) -> str:
        return f"{self.schema_name}.{self.table_name}"

    @property
    def attributes(self) -> tuple[Attribute, ...]:
        return self.primary_attrs + self.secondary_attrs

    @property
    def primary_key(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.primary_attrs)

    def attribute(self, name: str) -> Attribute:
        for a in self.attributes:
            if a.name == name:
                return a
        raise KeyError(name)

    def own_primary_attrs(self) -> tuple[Attribute, ...]:
        return tuple(a for a in self.primary_attrs if not a.inherited)


@dataclass(frozen=True)
class Diagnostic:
    code: str
    table: str
    message: str

    def __str__(self):
        return f"{self.table}: {self.message} [{self.code}]"


def master_name_of(schema_name: str, table_name: str) -> str | None:
    if "__" not in table_name:
        return None
    return f"{schema_name}.{table_name.split('__', 1)[0]}"


def _validate_shape(d: TableDef) -> None:
    check_identifier(d.schema_name, "schema name")
    check_identifier(d.table_name, "table name")
    if not d.primary_attrs:
        raise InvalidDefinition(f"{d.name}: a table needs at least one primary-key attribute")
    seen = set()
    for a in d.attributes:
        check_identifier(a.name, "attribute name")
        if a.name in seen:
            raise DuplicateAttribute(f"{d.name}: attribute {a.name!r} declared twice")
        seen.add(a.name)
    for a in d.primary_attrs:
        if not a.in_primary_key:
            raise InvalidDefinition(f"{d.name}.{a.name}: primary attribute not flagged in_primary_key")
        if a.nullable:
            raise InvalidDefinition(f"{d.name}.{a.name}: primary-key attributes cannot be nullable")
    for a in d.secondary_attrs:
        if a.in_primary_key:
            raise InvalidDefinition(f"{d.name}.{a.name}: secondary attribute flagged in_primary_key")
    for a in d.attributes:
        if a.fk is not None and not 0 <= a.fk < len(d.foreign_keys):
            raise InvalidDefinition(f"{d.name}.{a.name}: refers to missing foreign key #{a.fk}")


class SchemaRegistry:
    """Declared tables plus the foreign-key dependency DAG.

    Parents must be declared before their children, so declaration order is
    always a valid topological order and cycles can only arise when an already
    registered table is redeclared.
    """

    def __init__(self):
        self._tables: dict[str, TableDef] = {}
        self._order: dict[str, int] = {}
        self._children: dict[str, list[str]] = {}
        self.derived: dict = {}  # caches of per-table derived data (lineage)

    # -- lookup ----------------------------------------------------------

    def __contains__(self, name: str) -> bool:
        return name in self._tables

    def __len__(self) -> int:
        return len(self._tables)

    def __iter__(self):
        return iter(self._tables.values())

    def __getitem__(self, name: str) -> TableDef:
        try:
            return self._tables[name]
        except KeyError:
            raise UnknownTable(f"no table {name!r}") from None

    def resolve(self, name: str, schema: str | None = None) -> TableDef:
        """Find a table by qualified name, or by bare name within ``schema``
        (or anywhere, if unambiguous)."""
        if name in self._tables:
            return self._tables[name]
        if "." not in name:
            if schema is not None and f"{schema}.{name}" in self._tables:
                return self._tables[f"{schema}.{name}"]
            hits = [d for d in self._tables.values() if d.table_name == name]
            if len(hits) == 1:
                return hits[0]
            if len(hits) > 1:
                raise UnknownTable(f"table name {name!r} is ambiguous: " + ", ".join(h.name for h in hits))
        raise UnknownTable(f"no table {name!r}")

    @property
    def schemas(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for d in self._tables.values():
            out.setdefault(d.schema_name, []).append(d.name)
        return out

    @property
    def edges(self) -> list[tuple[str, str, bool]]:
        """(child, parent, into_primary_key), one per foreign key."""
        return [(d.name, fk.parent, fk.into_primary_key) for d in self._tables.values() for fk in d.foreign_keys]

    def parents(self, name: str) -> list[str]:
        out = []
        for fk in self[name].foreign_keys:
            if fk.parent not in out:
                out.append(fk.parent)
        return out

    def children(self, name: str) -> list[str]:
        return list(self._children.get(name, ()))

    def parts(self, master: str) -> list[TableDef]:
        return [d for d in self._tables.values() if d.master == master]

    def ancestors(self, name: str) -> set[str]:
        out: set[str] = set()
        stack = list(self.parents(name))
        while stack:
            p = stack.pop()
            if p not in out:
                out.add(p)
                stack.extend(self.parents(p))
        return out

    def descendants(self, name: str) -> set[str]:
        out: set[str] = set()
        stack = list(self.children(name))
        while stack:
            c = stack.pop()
            if c not in out:
                out.add(c)
                stack.extend(self.children(c))
        return out

    # -- mutation ----------------------------------------------------------------

    def declare(self, d: TableDef) -> TableDef:
        _validate_shape(d)
        existing = self._tables.get(d.name)
        for fk in d.foreign_keys:
            if fk.parent == d.name or (existing is not None and fk.parent in self.descendants(d.name)):
                cycle = [d.name, fk.parent] if fk.parent != d.name else [d.name, d.name]
                raise CycleError(cycle)
        if existing is not None:
            if existing == d:
                return existing
            raise InvalidDefinition(f"{d.name} is already declared with a different definition")
        self._check_foreign_keys(d)
        self._check_part(d)
        self._tables[d.name] = d
        self._order[d.name] = len(self._order)
        for p in self.parents(d.name):
            self._children.setdefault(p, []).append(d.name)
        return d

    def _check_foreign_keys(self, d: TableDef) -> None:
        names = {a.name: a for a in d.attributes}
        for i, fk in enumerate(d.foreign_keys):
            if fk.parent not in self._tables:
                raise UnknownParent(f"{d.name}: parent table {fk.parent!r} is not declared")
            parent = self._tables[fk.parent]
            mapped = [p for _, p in fk.attribute_map]
            if sorted(mapped) != sorted(parent.primary_key) or len(set(mapped)) != len(mapped):
                raise InvalidDefinition(
                    f"{d.name}: foreign key to {fk.parent} must map each of {list(parent.primary_key)} exactly once"
                )
            children = fk.child_attrs
            if len(set(children)) != len(children):
                raise InvalidDefinition(f"{d.name}: foreign key to {fk.parent} maps two parent attributes to one name")
            for child_attr, parent_attr in fk.attribute_map:
                a = names.get(child_attr)
                if a is None:
                    raise InvalidDefinition(f"{d.name}: foreign key attribute {child_attr!r} missing from heading")
                if a.type.family() != parent.attribute(parent_attr).type.family():
                    raise InvalidDefinition(
                        f"{d.name}.{child_attr}: type {a.type} does not match {fk.parent}.{parent_attr}"
                    )
                if fk.into_primary_key and not a.in_primary_key:
                    raise InvalidDefinition(f"{d.name}.{child_attr}: identity-inheriting key must be primary")

    def _check_part(self, d: TableDef) -> None:
        expected_master = master_name_of(d.schema_name, d.table_name)
        if d.tier is not Tier.PART:
            if d.master is not None or expected_master is not None:
                raise InvalidDefinition(f"{d.name}: only part tables may use '__' names or declare a master")
            return
        if expected_master is None or d.master != expected_master:
            raise PartWithoutMaster(f"{d.name}: part tables are named <master>__<part> and reference their master")
        master = self._tables.get(d.master)
        if master is None:
            raise PartWithoutMaster(f"{d.name}: master {d.master!r} is not declared")
        if master.tier is Tier.PART:
            raise InvalidDefinition(f"{d.name}: part tables cannot have their own parts")
        if not any(fk.parent == d.master and fk.into_primary_key for fk in d.foreign_keys):
            raise PartWithoutMaster(f"{d.name}: missing '-> master' above the separator")
        if d.primary_key[: len(master.primary_key)] != master.primary_key:
            raise InvalidDefinition(f"{d.name}: primary key must begin with the master's {list(master.primary_key)}")

    # -- queries over the DAG -------------------------------------------------------

    def topo_order(self) -> list[TableDef]:
        """Parents before children; ties broken by declaration order."""
        indegree = {n: len(self.parents(n)) for n in self._tables}
        ready = [(self._order[n], n) for n, k in indegree.items() if k == 0]
        heapq.heapify(ready)
        out = []
        while ready:
            _, n = heapq.heappop(ready)
            out.append(self._tables[n])
            for c in self.children(n):
                indegree[c] -= 1
                if indegree[c] == 0:
                    heapq.heappush(ready, (self._order[c], c))
        return out

    def dimensions(self) -> set[str]:
        """Tables that introduce at least one new primary-key attribute."""
        return {d.name for d in self._tables.values() if d.own_primary_attrs()}

    def lint(self) -> list[Diagnostic]:
        return lint_workflow_normalization(self)

    def manifest(self) -> str:
        from .dsl import render_manifest

        return render_manifest(self)


def declare_table(d: TableDef, registry: SchemaRegistry) -> TableDef:
    return registry.declare(d)


def topo_order(registry: SchemaRegistry) -> list[TableDef]:
    return registry.topo_order()


def dimensions(registry: SchemaRegistry) -> set[str]:
    return registry.dimensions()


def lint_workflow_normalization(registry: SchemaRegistry) -> list[Diagnostic]:
    out: list[Diagnostic] = []
    for d in registry.topo_order():
        if d.tier.auto_populated and not d.foreign_keys:
            out.append(Diagnostic("no-upstream", d.name, f"{d.tier.value} table has no upstream dependency"))
        if d.tier is Tier.PART and d.master in registry:
            master_pk = registry[d.master].primary_key
            if d.primary_key[: len(master_pk)] != master_pk:
                out.append(Diagnostic("part-key", d.name, "part primary key does not extend the master's"))
        if d.tier is Tier.MANUAL:
            for fk in d.foreign_keys:
                if registry[fk.parent].tier in (Tier.COMPUTED, Tier.IMPORTED) or (
                    registry[fk.parent].tier is Tier.PART
                    and registry[registry[fk.parent].master].tier.auto_populated
                ):
                    out.append(
                        Diagnostic(
                            "direction-inversion",
                            d.name,
                            f"manual table references derived table {fk.parent} (workflow direction inversion)",
                        )
                    )
        upstream_secondary = {
            a.name: anc for anc in sorted(registry.ancestors(d.name)) for a in registry[anc].secondary_attrs
        }
        for a in d.secondary_attrs:
            if not a.inherited and a.name in upstream_secondary:
                out.append(
                    Diagnostic(
                        "kitchen-sink",
                        d.name,
                        f"secondary attribute {a.name!r} duplicates {upstream_secondary[a.name]}.{a.name} "
                        "without shared lineage",
                    )
                )
        for a in d.attributes:
            if a.type.layer == "native" and not a.inherited:
                out.append(Diagnostic("native-type", d.name, f"attribute {a.name!r} uses native type {a.type}"))
    return out


def inherit(parent: TableDef, fk_index: int, renames: dict[str, str], into_primary_key: bool) -> ForeignKey:
    """Build a ForeignKey from a parent and an explicit child<-parent rename map."""
    inverse = {p: c for c, p in renames.items()}
    unknown = set(inverse) - set(parent.primary_key)
    if unknown:
        raise InvalidDefinition(f"rename refers to non-key attributes of {parent.name}: {sorted(unknown)}")
    amap = tuple((inverse.get(p, p), p) for p in parent.primary_key)
    return ForeignKey(parent.name, amap, into_primary_key)


class TableBuilder:
    """Programmatic alternative to the definition language.

    >>> b = TableBuilder("lab", "session", Tier.MANUAL, registry)
    >>> b.fk("lab.subject").pk("session_id", INT64).attr("notes", varchar(64))
    >>> registry.declare(b.build())
    """

    def __init__(self, schema_name: str, table_name: str, tier: Tier, registry: SchemaRegistry, comment: str = ""):
        self.schema_name = schema_name
        self.table_name = table_name
        self.tier = Tier(tier)
        self.registry = registry
        self.comment = comment
        self._pk: list[Attribute] = []
        self._sec: list[Attribute] = []
        self._fks: list[ForeignKey] = []

    def _names(self):
        return {a.name: a for a in self._pk + self._sec}

    def fk(self, parent: str, renames: dict[str, str] | None = None, *, primary: bool = True) -> TableBuilder:
        pdef = self.registry.resolve(parent, self.schema_name)
        index = len(self._fks)
        fk = inherit(pdef, index, renames or {}, primary)
        self._fks.append(fk)
        existing = self._names()
        target = self._pk if primary else self._sec
        for child_attr, parent_attr in fk.attribute_map:
            if child_attr in existing:
                continue
            pa = pdef.attribute(parent_attr)
            target.append(Attribute(child_attr, pa.type, None, pa.comment, primary, index))
        return self

    def pk(self, name: str, type: TypeSpec, default=None, comment: str = "") -> TableBuilder:
        self._pk.append(Attribute(name, type, default, comment, True))
        return self

    def attr(self, name: str, type: TypeSpec, default=None, comment: str = "") -> TableBuilder:
        self._sec.append(Attribute(name, type, default, comment, False))
        return self

    def build(self) -> TableDef:
        master = master_name_of(self.schema_name, self.table_name) if self.tier is Tier.PART else None
        return TableDef(
            self.schema_name,
            self.table_name,
            self.tier,
            self.comment,
            tuple(self._pk),
            tuple(self._sec),
            tuple(self._fks),
            master,
        )
