"""Line-oriented table definitions.

A definition lists primary-key attributes above a ``---`` separator and
secondary attributes below it::

    # experimental session
    -> Subject
    session_id : int64
    ---
    session_date : datetime
    weight = null : float64       # grams
    -> Rig (rig = rig_id)

Attribute lines read ``name [= default] : type [# comment]``. Foreign-key lines
read ``-> [schema.]Table [(child = parent, ...)]``; their position relative to
the separator decides whether the parent's key joins the child's primary key.
Part tables reference their master with ``-> master``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .errors import CycleError, ParseError, UnknownTable
from .model import NULL, Attribute, ForeignKey, SchemaRegistry, TableDef, Tier, master_name_of
from .types import TypeMismatch, coerce, parse_type

EXTENSION = ".djt"

_IDENT = re.compile(r"[a-z][a-z0-9_]*")
_WORD = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER = re.compile(r"-?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?")
_FK = re.compile(
    r"->\s*(?:(?P<schema>[a-z][a-z0-9_]*)\.)?(?P<table>[A-Za-z][A-Za-z0-9_]*)\s*"
    r"(?:\((?P<renames>[^)]*)\))?\s*(?:#.*)?$"
)
_SEPARATOR = re.compile(r"-{3,}\s*(?:#.*)?$")
_PRAGMA = re.compile(r"@tier\s+(\w+)\s*$")


@dataclass(frozen=True)
class DefinitionSource:
    text: str
    table_name: str
    tier: Tier
    schema_name: str
    origin: str | None = None  # file name for error messages


def snake_case(name: str) -> str:
    """``MsSession`` -> ``ms_session``; already-lowercase names pass through."""
    if name.islower() or not any(c.isupper() for c in name):
        return name
    return re.sub(r"(?<=[a-z0-9])(?=[A-Z])", "_", name).lower()


def _parse_literal(text: str, pos: int, lineno: int, origin):
    if text.startswith('"', pos):
        decoder = json.JSONDecoder()
        try:
            value, end = decoder.raw_decode(text, pos)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad string literal: {exc.msg}", lineno, pos + 1, origin) from None
        return value, end
    if text.startswith("'", pos):
        end = text.find("'", pos + 1)
        if end < 0:
            raise ParseError("unterminated string literal", lineno, pos + 1, origin)
        return text[pos + 1 : end], end + 1
    for word, value in (("null", NULL), ("true", True), ("false", False)):
        if text.startswith(word, pos) and not (text[pos + len(word) : pos + len(word) + 1].isalnum()):
            return value, pos + len(word)
    m = _NUMBER.match(text, pos)
    if m:
        token = m.group()
        value = float(token) if any(c in token for c in ".eE") else int(token)
        return value, m.end()
    raise ParseError("default must be a literal (number, string, true, false or null)", lineno, pos + 1, origin)


def _skip_ws(text: str, pos: int) -> int:
    while pos < len(text) and text[pos] in " \t":
        pos += 1
    return pos


def _parse_attribute(line: str, lineno: int, indent: int, in_pk: bool, origin) -> Attribute:
    m = _WORD.match(line)
    if not m:
        raise ParseError("expected an attribute name, a foreign key or '---'", lineno, indent + 1, origin)
    name = m.group()
    if not _IDENT.fullmatch(name) or len(name) > 64:
        raise ParseError(f"bad identifier {name!r} (use lowercase snake_case)", lineno, indent + 1, origin)
    pos = _skip_ws(line, m.end())
    default = None
    if line.startswith("=", pos):
        default, pos = _parse_literal(line, _skip_ws(line, pos + 1), lineno, origin)
        pos = _skip_ws(line, pos)
    if not line.startswith(":", pos):
        raise ParseError("expected ':' before the attribute type", lineno, indent + pos + 1, origin)
    rest = line[pos + 1 :]
    type_text, _, comment = rest.partition("#")
    type_text = type_text.strip()
    try:
        spec = parse_type(type_text)
    except ValueError as exc:
        raise ParseError(str(exc), lineno, indent + pos + 2, origin) from None
    if default is NULL and in_pk:
        raise ParseError(f"primary-key attribute {name!r} cannot be nullable", lineno, indent + 1, origin)
    if default is not None and default is not NULL:
        if spec.is_codec:
            raise ParseError(f"codec attribute {name!r} cannot have a literal default", lineno, indent + 1, origin)
        if spec.layer == "core":
            try:
                coerce(spec, default)
            except TypeMismatch as exc:
                raise ParseError(f"default for {name!r}: {exc}", lineno, indent + 1, origin) from None
    return Attribute(name, spec, default, comment.strip(), in_pk)


def _parse_renames(text: str, lineno: int, origin) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        child, eq, parent = (s.strip() for s in item.partition("="))
        if not eq or not _IDENT.fullmatch(child) or not _IDENT.fullmatch(parent):
            raise ParseError(f"malformed rename {item!r} (expected child_attr = parent_attr)", lineno, 1, origin)
        if child in out:
            raise ParseError(f"attribute {child!r} renamed twice", lineno, 1, origin)
        out[child] = parent
    return out


def parse_definition(src: DefinitionSource, registry: SchemaRegistry | None = None) -> TableDef:
    """Parse definition text into a :class:`TableDef`.

    Foreign-key parents are looked up in ``registry`` to expand their primary
    keys into the child's heading.
    """
    origin = src.origin
    tier = Tier(src.tier)
    primary: list[Attribute] = []
    secondary: list[Attribute] = []
    fks: list[ForeignKey] = []
    comment = ""
    seen_body = False
    below = False
    separator_seen = False
    names: dict[str, int] = {}

    def add(attr: Attribute, lineno: int):
        if attr.name in names:
            raise ParseError(f"duplicate attribute {attr.name!r} (first on line {names[attr.name]})", lineno, 1, origin)
        names[attr.name] = lineno
        (secondary if below else primary).append(attr)

    for lineno, raw in enumerate(src.text.splitlines(), start=1):
        stripped = raw.strip()
        indent = len(raw) - len(raw.lstrip())
        if not stripped:
            continue
        if stripped.startswith("#"):
            if not seen_body and not comment:
                comment = stripped[1:].strip()
            continue
        seen_body = True
        if _SEPARATOR.match(stripped):
            if separator_seen:
                raise ParseError("second '---' separator", lineno, indent + 1, origin)
            separator_seen = below = True
            continue
        if stripped.startswith("->"):
            m = _FK.match(stripped)
            if not m:
                raise ParseError("malformed foreign key (expected '-> [schema.]Table [(a = b, ...)]')", lineno, indent + 1, origin)
            fk, inherited = _foreign_key(m, src, registry, len(fks), not below, lineno)
            fks.append(fk)
            for attr in inherited:
                if attr.name in names:
                    prev = (primary + secondary)[[a.name for a in primary + secondary].index(attr.name)]
                    if prev.type.family() != attr.type.family():
                        raise ParseError(f"inherited attribute {attr.name!r} conflicts with an earlier one", lineno, 1, origin)
                    if not below and not prev.in_primary_key:
                        raise ParseError(f"attribute {attr.name!r} already declared as secondary", lineno, 1, origin)
                    continue
                add(attr, lineno)
            continue
        add(_parse_attribute(stripped, lineno, indent, not below, origin), lineno)

    if not separator_seen:
        raise ParseError("missing '---' separator between primary and secondary attributes", max(1, len(src.text.splitlines())), 1, origin)
    if not primary:
        raise ParseError("no primary-key attributes above '---'", 1, 1, origin)
    master = master_name_of(src.schema_name, src.table_name) if tier is Tier.PART else None
    return TableDef(
        src.schema_name,
        src.table_name,
        tier,
        comment,
        tuple(primary),
        tuple(secondary),
        tuple(fks),
        master,
    )


def _foreign_key(m, src: DefinitionSource, registry, index: int, into_pk: bool, lineno: int):
    origin = src.origin
    table = m.group("table")
    schema = m.group("schema") or src.schema_name
    if table == "master" and m.group("schema") is None:
        parent_name = master_name_of(src.schema_name, src.table_name)
        if parent_name is None or Tier(src.tier) is not Tier.PART:
            raise ParseError("'-> master' is only allowed in part tables named <master>__<part>", lineno, 1, origin)
    else:
        parent_name = f"{schema}.{snake_case(table)}"
    if registry is None or parent_name not in registry:
        raise ParseError(f"unknown parent table {parent_name!r} (declare parents first)", lineno, 1, origin)
    parent = registry[parent_name]
    renames = _parse_renames(m.group("renames") or "", lineno, origin)
    inverse = {p: c for c, p in renames.items()}
    bad = set(inverse) - set(parent.primary_key)
    if bad:
        raise ParseError(f"{parent_name} has no primary-key attribute {sorted(bad)[0]!r}", lineno, 1, origin)
    amap = tuple((inverse.get(p, p), p) for p in parent.primary_key)
    attrs = []
    for child_attr, parent_attr in amap:
        pa = parent.attribute(parent_attr)
        attrs.append(Attribute(child_attr, pa.type, None, pa.comment, into_pk, index))
    return ForeignKey(parent_name, amap, into_pk), attrs


# -- rendering ------------------------------------------------------------------------


def _render_literal(value) -> str:
    if value is NULL:
        return "null"
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    return repr(value)


def _render_attr(a: Attribute) -> str:
    line = a.name
    if a.default is not None:
        line += f" = {_render_literal(a.default)}"
    line += f" : {a.type}"
    if a.comment:
        line += f"  # {a.comment}"
    return line


def _render_fk(d: TableDef, fk: ForeignKey) -> str:
    if d.tier is Tier.PART and fk.parent == d.master:
        target = "master"
    else:
        schema, table = fk.parent.split(".", 1)
        target = table if schema == d.schema_name else fk.parent
    line = f"-> {target}"
    if fk.renamed:
        line += " (" + ", ".join(f"{c} = {p}" for c, p in fk.renamed) + ")"
    return line


def render_definition(d: TableDef) -> str:
    lines = []
    if d.comment:
        lines.append(f"# {d.comment}")
    emitted: set[int] = set()
    sections = (
        (d.primary_attrs, [i for i, fk in enumerate(d.foreign_keys) if fk.into_primary_key]),
        (d.secondary_attrs, [i for i, fk in enumerate(d.foreign_keys) if not fk.into_primary_key]),
    )
    for k, (attrs, fk_indices) in enumerate(sections):
        if k == 1:
            lines.append("---")
        for a in attrs:
            if a.fk is None:
                lines.append(_render_attr(a))
                continue
            for i in fk_indices:
                if i <= a.fk and i not in emitted:
                    emitted.add(i)
                    lines.append(_render_fk(d, d.foreign_keys[i]))
        for i in fk_indices:
            if i not in emitted:
                emitted.add(i)
                lines.append(_render_fk(d, d.foreign_keys[i]))
    return "\n".join(lines) + "\n"


# -- manifests and directories ----------------------------------------------------------


def render_manifest(registry: SchemaRegistry) -> str:
    """Canonical text form of a registry: one block per table, declaration order."""
    blocks = []
    for d in registry:
        blocks.append(f"@table {d.name} {d.tier.value}\n{render_definition(d)}")
    return "\n".join(blocks)


def parse_manifest(text: str, declare: Callable[[TableDef], object] | None = None, registry: SchemaRegistry | None = None) -> SchemaRegistry:
    """Rebuild a registry from :func:`render_manifest` output."""
    registry = registry if registry is not None else SchemaRegistry()
    declare = declare or registry.declare
    header = None
    body: list[str] = []

    def flush():
        if header is None:
            return
        name, tier = header
        schema, table = name.split(".", 1)
        declare(parse_definition(DefinitionSource("\n".join(body), table, Tier(tier), schema, "manifest"), registry))

    for line in text.splitlines():
        if line.startswith("@table "):
            flush()
            parts = line.split()
            if len(parts) != 3:
                raise ParseError("malformed @table header", 1, 1, "manifest")
            header = (parts[1], parts[2])
            body = []
        else:
            body.append(line)
    flush()
    return registry


_FK_SCAN = re.compile(r"^\s*->\s*(?:([a-z][a-z0-9_]*)\.)?([A-Za-z][A-Za-z0-9_]*)")


def read_definition_file(path: Path, schema_name: str) -> DefinitionSource:
    """Read a ``.djt`` file. An optional ``@tier <tier>`` line sets the tier
    (default manual); it is blanked so line numbers stay accurate."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    tier = Tier.MANUAL
    for i, line in enumerate(lines):
        m = _PRAGMA.match(line.strip())
        if m:
            try:
                tier = Tier(m.group(1).lower())
            except ValueError:
                raise ParseError(f"unknown tier {m.group(1)!r}", i + 1, 1, str(path)) from None
            lines[i] = ""
    return DefinitionSource("\n".join(lines), path.stem, tier, schema_name, str(path))


def load_directory(
    directory: Path, registry: SchemaRegistry, declare: Callable[[TableDef], object] | None = None, schema_name: str | None = None
) -> list[TableDef]:
    """Parse every ``.djt`` file in ``directory`` and declare them parents-first.

    Pass one collects table names and their foreign-key references; pass two
    parses bodies in dependency order. Ties go alphabetically.
    """
    directory = Path(directory)
    schema_name = schema_name or directory.name
    declare = declare or registry.declare
    sources = {}
    for path in sorted(directory.glob("*" + EXTENSION)):
        src = read_definition_file(path, schema_name)
        sources[f"{schema_name}.{src.table_name}"] = src

    deps: dict[str, set[str]] = {}
    for name, src in sources.items():
        refs = set()
        for line in src.text.splitlines():
            m = _FK_SCAN.match(line)
            if not m:
                continue
            if m.group(2) == "master" and m.group(1) is None:
                ref = master_name_of(schema_name, src.table_name)
            else:
                ref = f"{m.group(1) or schema_name}.{snake_case(m.group(2))}"
            if ref in sources:
                refs.add(ref)
            elif ref is not None and ref not in registry:
                raise UnknownTable(f"{src.origin}: references unknown table {ref!r}")
        deps[name] = refs

    order = []
    done: set[str] = set()
    pending = dict(deps)
    while pending:
        ready = sorted(n for n, r in pending.items() if r <= done)
        if not ready:
            raise CycleError(_find_cycle(pending))
        for n in ready:
            order.append(n)
            done.add(n)
            del pending[n]

    out = []
    for name in order:
        d = parse_definition(sources[name], registry)
        declare(d)
        out.append(d)
    return out


def _find_cycle(deps: dict[str, set[str]]) -> list[str]:
    start = sorted(deps)[0]
    path = [start]
    while True:
        nxt = sorted(r for r in deps[path[-1]] if r in deps)[0]
        if nxt in path:
            return path[path.index(nxt) :] + [nxt]
        path.append(nxt)
