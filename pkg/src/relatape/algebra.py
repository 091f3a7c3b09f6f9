"""Five-operator query algebra with closure.

Expressions are immutable trees. Each node infers its heading (attribute
names, types, lineage, primary key) when it is built, so malformed queries
fail at construction rather than at evaluation. Every result is an entity set:
restrict, project, aggregate and union keep the left operand's primary key,
and join derives its key from the matched attributes.

    >>> q = (session * scan) & {"subject_id": "s1"}
    >>> q = q.proj("scan_time", dur="t_end - t_start")
    >>> rows = evaluate(q, db)
"""

from __future__ import annotations

import ast
import math
import operator
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .errors import (
    ConflictingDuplicate,
    HeadingMismatch,
    NameCollision,
    TypeMismatch,
    UnknownAggregate,
    UnknownAttribute,
    SemanticMismatch,
)
from .lineage import Origin, fresh_origin, resolve_join_attrs, table_lineage
from .model import SchemaRegistry
from .types import FLOAT64, INT64, ObjectRef, TypeSpec, canonical_json, coerce, decode_value, sort_key, varchar

# -- headings ----------------------------------------------------------------------


@dataclass(frozen=True)
class HeadingAttr:
    name: str
    type: TypeSpec
    origins: frozenset[Origin]
    in_primary_key: bool = False
    nullable: bool = False


class Heading:
    """Ordered attributes with types, origin sets and primary-key flags."""

    __slots__ = ("attrs", "_index")

    def __init__(self, attrs: Iterable[HeadingAttr]):
        self.attrs = tuple(attrs)
        self._index = {a.name: a for a in self.attrs}
        if len(self._index) != len(self.attrs):
            dup = sorted({a.name for a in self.attrs if sum(b.name == a.name for b in self.attrs) > 1})
            raise NameCollision(f"duplicate attribute names {dup}")
        if not any(a.in_primary_key for a in self.attrs):
            raise HeadingMismatch("a heading needs a non-empty primary key")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attrs)

    @property
    def primary_key(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attrs if a.in_primary_key)

    @property
    def secondary(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attrs if not a.in_primary_key)

    def __contains__(self, name) -> bool:
        return name in self._index

    def __getitem__(self, name: str) -> HeadingAttr:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownAttribute(f"no attribute {name!r} in heading {list(self.names)}") from None

    def __iter__(self):
        return iter(self.attrs)

    def __len__(self):
        return len(self.attrs)

    def __eq__(self, other):
        return isinstance(other, Heading) and self.attrs == other.attrs

    def __hash__(self):
        return hash(self.attrs)

    def __repr__(self):
        cols = [f"*{a.name}" if a.in_primary_key else a.name for a in self.attrs]
        return f"Heading({', '.join(cols)})"


# -- predicates ----------------------------------------------------------------------

_OPS = {
    "=": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


@dataclass(frozen=True)
class Cmp:
    attr: str
    op: str
    value: Any


@dataclass(frozen=True)
class In:
    attr: str
    values: tuple


def _atoms(cond) -> tuple:
    if isinstance(cond, (Cmp, In)):
        return (cond,)
    if isinstance(cond, Mapping):
        return tuple(Cmp(k, "=", v) for k, v in cond.items())
    if isinstance(cond, (list, tuple)):
        out = ()
        for c in cond:
            out += _atoms(c)
        return out
    raise TypeError(f"cannot restrict by {type(cond).__name__}")


def _check_atom(heading: Heading, atom):
    ha = heading[atom.attr]
    if ha.type.is_codec:
        raise TypeMismatch(f"cannot compare codec attribute {atom.attr!r} with a literal")
    if isinstance(atom, Cmp):
        if atom.op not in _OPS:
            raise TypeMismatch(f"unknown comparison {atom.op!r}")
        if atom.value is None:
            raise TypeMismatch(f"comparison of {atom.attr!r} with null is always false; use a non-null literal")
        return Cmp(atom.attr, atom.op, coerce(ha.type, atom.value, check_bounds=False))
    values = tuple(coerce(ha.type, v, check_bounds=False) for v in atom.values)
    return In(atom.attr, values)


def _hkey(v):
    """Hashable stand-in for a stored value."""
    if isinstance(v, ObjectRef):
        return ("ref", v.address.path, v.address.content_hash)
    if isinstance(v, (dict, list)):
        return ("json", canonical_json(v))
    return v


def _test(atom, row) -> bool:
    v = row[atom.attr]
    if v is None:
        return False
    if isinstance(atom, Cmp):
        if isinstance(v, (dict, list)):
            return atom.op in ("=", "!=") and _OPS[atom.op](canonical_json(v), canonical_json(atom.value))
        try:
            return _OPS[atom.op](v, atom.value)
        except TypeError:
            return False
    return _hkey(v) in {_hkey(x) for x in atom.values}


# -- scalar expressions for computed attributes ----------------------------------------------

_ARITH = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv}


class ScalarExpr:
    """Arithmetic (+ - * /) and string concatenation (+) over attributes."""

    def __init__(self, text: str, heading: Heading):
        self.text = text
        try:
            tree = ast.parse(text.strip(), mode="eval")
        except SyntaxError as exc:
            raise TypeMismatch(f"cannot parse expression {text!r}: {exc.msg}") from None
        self.body = tree.body
        self.type = self._infer(self.body, heading)
        self.attributes = sorted({n.id for n in ast.walk(self.body) if isinstance(n, ast.Name)})

    def _infer(self, node, heading) -> TypeSpec:
        if isinstance(node, ast.Constant):
            v = node.value
            if isinstance(v, bool) or not isinstance(v, (int, float, str)):
                raise TypeMismatch(f"unsupported literal {v!r} in {self.text!r}")
            if isinstance(v, str):
                return varchar(max(1, len(v)))
            return INT64 if isinstance(v, int) else FLOAT64
        if isinstance(node, ast.Name):
            t = heading[node.id].type
            if t.layer != "core" or t.name not in ("int64", "float64", "varchar"):
                raise TypeMismatch(f"attribute {node.id!r} of type {t} cannot appear in {self.text!r}")
            return t
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            t = self._infer(node.operand, heading)
            if not t.is_numeric:
                raise TypeMismatch(f"unary sign on non-numeric operand in {self.text!r}")
            return t
        if isinstance(node, ast.BinOp) and type(node.op) in _ARITH:
            lt, rt = self._infer(node.left, heading), self._infer(node.right, heading)
            if lt.name == "varchar" or rt.name == "varchar":
                if not (lt.name == rt.name == "varchar") or not isinstance(node.op, ast.Add):
                    raise TypeMismatch(f"strings only support concatenation with strings in {self.text!r}")
                return varchar(lt.params[0] + rt.params[0])
            if isinstance(node.op, ast.Div) or FLOAT64 in (lt, rt):
                return FLOAT64
            return INT64
        raise TypeMismatch(f"unsupported construct in expression {self.text!r}")

    def __call__(self, row: Mapping[str, Any]):
        return self._eval(self.body, row)

    def _eval(self, node, row):
        if isinstance(node, ast.Constant):
            return node.value
        if isinstance(node, ast.Name):
            return row[node.id]
        if isinstance(node, ast.UnaryOp):
            v = self._eval(node.operand, row)
            if v is None:
                return None
            return -v if isinstance(node.op, ast.USub) else v
        a = self._eval(node.left, row)
        b = self._eval(node.right, row)
        if a is None or b is None:
            return None
        if isinstance(node.op, ast.Div):
            if b == 0:
                return None
            return a / b
        return _ARITH[type(node.op)](a, b)


# -- expressions ---------------------------------------------------------------------------


AGGREGATES = ("count", "sum", "mean", "min", "max")


class QueryExpr:
    """Base of all expression nodes. Operators build new nodes:
    ``a & cond`` restrict, ``a - cond`` anti-restrict, ``a * b`` join,
    ``a + b`` union, ``a.proj(...)``, ``a.aggr(b, ...)``."""

    heading: Heading
    kind = "?"

    @property
    def children(self) -> tuple[QueryExpr, ...]:
        return ()

    @property
    def primary_key(self) -> tuple[str, ...]:
        return self.heading.primary_key

    def __and__(self, cond):
        return restrict(self, cond)

    def __sub__(self, cond):
        return restrict(self, cond, negate=True)

    def __mul__(self, other):
        return join(self, other)

    def __add__(self, other):
        return union(self, other)

    def proj(self, *keep: str, **named: str) -> Project:
        """Keep attributes; ``new='old'`` renames, ``new='a + b'`` computes."""
        renames = {k: v for k, v in named.items() if v in self.heading}
        computed = {k: v for k, v in named.items() if v not in self.heading}
        return project(self, keep, renames, computed)

    def aggr(self, other: QueryExpr, **specs) -> Aggregate:
        return aggregate(self, other, specs)


@dataclass(frozen=True, eq=False)
class TableRef(QueryExpr):
    table: str
    heading: Heading = field(repr=False)
    kind = "table"

    @classmethod
    def of(cls, registry: SchemaRegistry, name: str) -> TableRef:
        d = registry.resolve(name)
        lineage = table_lineage(registry, d)
        attrs = [
            HeadingAttr(a.name, a.type, lineage[a.name], a.in_primary_key, a.nullable) for a in d.attributes
        ]
        return cls(d.name, Heading(attrs))


@dataclass(frozen=True, eq=False)
class Restrict(QueryExpr):
    child: QueryExpr
    condition: Any  # tuple of atoms, or a QueryExpr
    negate: bool = False
    matched: tuple[str, ...] = ()
    kind = "restrict"

    @property
    def children(self):
        return (self.child,) + ((self.condition,) if isinstance(self.condition, QueryExpr) else ())

    @property
    def heading(self) -> Heading:
        return self.child.heading


@dataclass(frozen=True, eq=False)
class Project(QueryExpr):
    child: QueryExpr
    keep: tuple[str, ...]
    renames: tuple[tuple[str, str], ...]  # (new, old)
    computed: tuple[tuple[str, ScalarExpr], ...]
    heading: Heading = field(repr=False)
    kind = "project"

    @property
    def children(self):
        return (self.child,)


@dataclass(frozen=True, eq=False)
class Join(QueryExpr):
    left: QueryExpr
    right: QueryExpr
    matched: tuple[str, ...]
    heading: Heading = field(repr=False)
    kind = "join"

    @property
    def children(self):
        return (self.left, self.right)


@dataclass(frozen=True, eq=False)
class Aggregate(QueryExpr):
    left: QueryExpr
    right: QueryExpr
    specs: tuple[tuple[str, str, str | None], ...]  # (name, fn, attr)
    matched: tuple[str, ...]
    heading: Heading = field(repr=False)
    kind = "aggregate"

    @property
    def children(self):
        return (self.left, self.right)


@dataclass(frozen=True, eq=False)
class Union(QueryExpr):
    left: QueryExpr
    right: QueryExpr
    heading: Heading = field(repr=False)
    kind = "union"

    @property
    def children(self):
        return (self.left, self.right)


def _check_matched_types(a: Heading, b: Heading, matched: Sequence[str]) -> None:
    for name in matched:
        if a[name].type.family() != b[name].type.family():
            raise TypeMismatch(f"attribute {name!r} is {a[name].type} on the left but {b[name].type} on the right")


def restrict(a: QueryExpr, cond, negate: bool = False) -> Restrict:
    if isinstance(cond, QueryExpr):
        matched = tuple(resolve_join_attrs(a.heading, cond.heading))
        _check_matched_types(a.heading, cond.heading, matched)
        return Restrict(a, cond, negate, matched)
    atoms = tuple(_check_atom(a.heading, atom) for atom in _atoms(cond))
    return Restrict(a, atoms, negate)


def project(a: QueryExpr, keep: Sequence[str] = (), renames: Mapping[str, str] | None = None, computed: Mapping[str, str] | None = None) -> Project:
    renames = dict(renames or {})
    computed = dict(computed or {})
    h = a.heading
    if "..." in keep or "*" in keep or Ellipsis in keep:
        keep = [n for n in h.names if n not in renames.values()] + [k for k in keep if k not in ("...", "*", Ellipsis)]
    keep = list(dict.fromkeys(keep))
    for name in keep:
        h[name]
    for new, old in renames.items():
        h[old]
    renamed_sources = set(renames.values())
    for name in keep:
        if name in renamed_sources:
            raise NameCollision(f"attribute {name!r} is both kept and renamed")
    attrs: list[HeadingAttr] = []
    used: set[str] = set()

    def add(attr: HeadingAttr):
        if attr.name in used:
            raise NameCollision(f"attribute name {attr.name!r} produced twice by projection")
        used.add(attr.name)
        attrs.append(attr)

    inverse: dict[str, list[str]] = {}
    for new, old in renames.items():
        inverse.setdefault(old, []).append(new)
    for ha in h:
        if ha.name in inverse:
            for new in inverse[ha.name]:
                add(HeadingAttr(new, ha.type, ha.origins, ha.in_primary_key, ha.nullable))
        elif ha.in_primary_key or ha.name in keep:
            add(ha)
    for pk_name in h.primary_key:
        if len(inverse.get(pk_name, ())) > 1:
            raise NameCollision(f"primary-key attribute {pk_name!r} renamed twice")
    scalars = []
    for name, text in computed.items():
        expr = text if isinstance(text, ScalarExpr) else ScalarExpr(text, h)
        add(HeadingAttr(name, expr.type, frozenset({fresh_origin(name)}), False, True))
        scalars.append((name, expr))
    return Project(a, tuple(keep), tuple(renames.items()), tuple(scalars), Heading(attrs))


def join_primary_key(a: Heading, b: Heading, matched: Sequence[str]) -> tuple[str, ...]:
    """PK(a) plus PK(b) minus PK(b) attributes matched to PK(a) attributes."""
    a_pk = set(a.primary_key)
    collapsed = {n for n in matched if n in a_pk and b[n].in_primary_key}
    pk = set(a.primary_key) | (set(b.primary_key) - collapsed)
    order = list(a.names) + [n for n in b.names if n not in a]
    return tuple(n for n in order if n in pk)


def join(a: QueryExpr, b: QueryExpr) -> Join:
    ha, hb = a.heading, b.heading
    matched = tuple(resolve_join_attrs(ha, hb))
    _check_matched_types(ha, hb, matched)
    pk = set(join_primary_key(ha, hb, matched))
    attrs = []
    for x in ha:
        origins = x.origins | hb[x.name].origins if x.name in matched else x.origins
        attrs.append(HeadingAttr(x.name, x.type, origins, x.name in pk, x.nullable))
    for y in hb:
        if y.name not in ha:
            attrs.append(HeadingAttr(y.name, y.type, y.origins, y.name in pk, y.nullable))
    return Join(a, b, matched, Heading(attrs))


def _parse_spec(spec) -> tuple[str, str | None]:
    if isinstance(spec, tuple):
        fn = spec[0]
        attr = spec[1] if len(spec) > 1 else None
        return fn, attr
    text = str(spec).strip()
    if "(" in text and text.endswith(")"):
        fn, _, arg = text[:-1].partition("(")
        arg = arg.strip()
        return fn.strip(), (arg if arg and arg != "*" else None)
    return text, None


def aggregate(a: QueryExpr, b: QueryExpr, specs: Mapping[str, Any]) -> Aggregate:
    ha, hb = a.heading, b.heading
    matched = tuple(resolve_join_attrs(ha, hb))
    _check_matched_types(ha, hb, matched)
    attrs = list(ha)
    parsed = []
    for name, spec in specs.items():
        fn, attr = _parse_spec(spec)
        if fn not in AGGREGATES:
            raise UnknownAggregate(f"unknown aggregate {fn!r}; expected one of {AGGREGATES}")
        if name in ha:
            raise NameCollision(f"aggregate name {name!r} collides with an attribute of the left operand")
        if attr is None:
            if fn != "count":
                raise UnknownAttribute(f"{fn} needs an attribute of the right operand")
            t = INT64
        else:
            t = hb[attr].type
            if fn in ("sum", "mean") and not t.is_numeric:
                raise TypeMismatch(f"{fn}({attr}) needs a numeric attribute, got {t}")
            if fn in ("min", "max") and (t.is_codec or t.layer != "core" or t.name == "json"):
                raise TypeMismatch(f"{fn}({attr}) needs an ordered attribute, got {t}")
            t = INT64 if fn == "count" else FLOAT64 if fn == "mean" else t
        attrs.append(HeadingAttr(name, t, frozenset({fresh_origin(name)}), False, fn != "count"))
        parsed.append((name, fn, attr))
    return Aggregate(a, b, tuple(parsed), matched, Heading(attrs))


def union(a: QueryExpr, b: QueryExpr) -> Union:
    ha, hb = a.heading, b.heading
    if set(ha.names) != set(hb.names):
        raise HeadingMismatch(f"union needs identical attributes: {sorted(ha.names)} vs {sorted(hb.names)}")
    attrs = []
    for x in ha:
        y = hb[x.name]
        if x.type.family() != y.type.family():
            raise HeadingMismatch(f"attribute {x.name!r}: {x.type} vs {y.type}")
        if x.in_primary_key != y.in_primary_key:
            raise HeadingMismatch(f"attribute {x.name!r} is in only one operand's primary key")
        if x.origins.isdisjoint(y.origins):
            raise SemanticMismatch(x.name, x.origins, y.origins)
        attrs.append(HeadingAttr(x.name, x.type, x.origins | y.origins, x.in_primary_key, x.nullable or y.nullable))
    return Union(a, b, Heading(attrs))


# -- evaluation ---------------------------------------------------------------------------------


def _key(row, names):
    return tuple(_hkey(row[n]) for n in names)


def _rows(expr: QueryExpr, scan) -> list[dict]:
    kind = expr.kind
    if kind == "table":
        return scan(expr.table)
    if kind == "restrict":
        rows = _rows(expr.child, scan)
        if isinstance(expr.condition, QueryExpr):
            other = _rows(expr.condition, scan)
            m = expr.matched
            if not m:
                hit = bool(other)
                return [r for r in rows if hit != expr.negate]
            keys = {k for k in (_key(r, m) for r in other) if None not in k}
            return [r for r in rows if (_key(r, m) in keys) != expr.negate]
        atoms = expr.condition
        return [r for r in rows if all(_test(a, r) for a in atoms) != expr.negate]
    if kind == "project":
        out = []
        kept = [a.name for a in expr.child.heading if a.in_primary_key or a.name in expr.keep]
        renamed_away = {old for _, old in expr.renames}
        kept = [n for n in kept if n not in renamed_away]
        for r in _rows(expr.child, scan):
            new = {n: r[n] for n in kept}
            for nn, old in expr.renames:
                new[nn] = r[old]
            for nn, fn in expr.computed:
                new[nn] = fn(r)
            out.append(new)
        return out
    if kind == "join":
        m = expr.matched
        left, right = _rows(expr.left, scan), _rows(expr.right, scan)
        index: dict = {}
        for r in right:
            k = _key(r, m)
            if None not in k:
                index.setdefault(k, []).append(r)
        out = []
        for lrow in left:
            k = _key(lrow, m)
            if None in k:
                continue
            for rrow in index.get(k, ()):
                merged = dict(rrow)
                merged.update(lrow)
                out.append(merged)
        return out
    if kind == "aggregate":
        m = expr.matched
        left, right = _rows(expr.left, scan), _rows(expr.right, scan)
        groups: dict = {}
        for r in right:
            k = _key(r, m)
            if None not in k:
                groups.setdefault(k, []).append(r)
        out = []
        for lrow in left:
            k = _key(lrow, m)
            group = groups.get(k, []) if None not in k else []
            new = dict(lrow)
            for name, fn, attr in expr.specs:
                new[name] = _summarize(fn, attr, group)
            out.append(new)
        return out
    if kind == "union":
        pk = expr.heading.primary_key
        seen: dict = {}
        out = []
        for r in _rows(expr.left, scan) + _rows(expr.right, scan):
            k = _key(r, pk)
            prev = seen.get(k)
            if prev is None:
                seen[k] = r
                out.append(r)
            elif _key(prev, expr.heading.names) != _key(r, expr.heading.names):
                raise ConflictingDuplicate(f"union operands disagree on entity {dict(zip(pk, k))}")
        return out
    raise TypeError(f"unknown node {kind}")


def _summarize(fn: str, attr: str | None, group: list[dict]):
    if fn == "count":
        return len(group)
    values = [r[attr] for r in group if r[attr] is not None]
    if not values:
        return None
    if fn == "sum":
        if all(isinstance(v, int) for v in values):
            return sum(values)
        return math.fsum(values)
    if fn == "mean":
        return math.fsum(values) / len(values)
    return min(values) if fn == "min" else max(values)


def sort_rows(rows: list[dict], heading: Heading) -> list[dict]:
    pk = [(n, heading[n].type) for n in heading.primary_key]
    return sorted(rows, key=lambda r: tuple(sort_key(t, r[n]) for n, t in pk))


def evaluate(expr: QueryExpr, store, *, lazy: bool = True) -> list[dict]:
    """Rows of ``expr`` in primary-key order.

    ``store`` provides ``scan(table) -> list[dict]``; if it also has ``codecs``
    and ``load_object``, codec attributes come back as lazy references.
    """
    rows = sort_rows(_rows(expr, store.scan), expr.heading)
    names = expr.heading.names
    codec_attrs = [a for a in expr.heading if a.type.is_codec]
    out = []
    for r in rows:
        row = {n: r[n] for n in names}
        if lazy and codec_attrs:
            for a in codec_attrs:
                row[a.name] = decode_value(a.type, row[a.name], store.codecs, store.load_object)
        out.append(row)
    return out


def keys(expr: QueryExpr, store) -> list[dict]:
    """Primary-key records of ``expr``."""
    pk = expr.primary_key
    return [{n: r[n] for n in pk} for r in evaluate(expr, store, lazy=False)]
