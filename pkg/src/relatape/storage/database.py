"""Object-augmented database: one transactional regime over tuples and objects.

Inserts validate everything first, then write objects, then commit tuples.
Deletes cascade through foreign-key children in one transaction. Shared
hash-addressed objects are reclaimed only by :meth:`Database.gc`, which scans
every reference before deleting anything.
"""

from __future__ import annotations

import collections
import hashlib
import itertools
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from ..algebra import QueryExpr, TableRef, evaluate, restrict
from ..dsl import DefinitionSource, parse_definition, parse_manifest, render_definition
from ..errors import (
    DuplicatePrimaryKey,
    FKViolation,
    IntegrityError,
    InvalidOperation,
    StorageFailure,
    TypeMismatch,
)
from ..model import NULL, SchemaRegistry, TableBuilder, TableDef, Tier
from ..types import (
    DATETIME,
    HASH,
    JSON,
    SCHEMA,
    CodecRegistry,
    EncodedPayload,
    LazyRef,
    ObjectRef,
    coerce,
    default_codecs,
    encode_value,
    varchar,
)
from .objects import SIDECAR, LocalObjectStore, MemoryObjectStore, ObjectStore, address_for, object_paths
from .relational import MemoryStore, RelationalStore, TableSchema, _atomic_write

log = logging.getLogger(__name__)

JOB_SUFFIX = "~jobs"
FAULT_POINTS = (
    "insert.objects_written",
    "insert.master_written",
    "insert.commit",
    "delete.commit",
    "gc.delete",
)


@dataclass
class InsertReport:
    inserted: dict[str, int] = field(default_factory=dict)
    skipped: int = 0
    objects_written: int = 0

    @property
    def total(self) -> int:
        return sum(self.inserted.values())


@dataclass
class DeleteReport:
    rows_removed: dict[str, int] = field(default_factory=dict)
    objects_released: int = 0

    @property
    def total(self) -> int:
        return sum(self.rows_removed.values())


@dataclass
class GcReport:
    scanned: int = 0
    referenced: int = 0
    deleted: int = 0


@dataclass(frozen=True)
class TxnLogEntry:
    txn_id: str
    phase: str  # objects_written | tuples_committed | rolled_back
    paths: tuple[str, ...] = ()


def job_table_name(table: str) -> str:
    return table + JOB_SUFFIX


def _job_schema(table: str) -> TableSchema:
    reg = SchemaRegistry()
    b = TableBuilder("jobs", "job", Tier.MANUAL, reg, comment=f"job reservations for {table}")
    b.pk("key_hash", varchar(64)).attr("key", JSON).attr("status", varchar(16))
    b.attr("worker_id", varchar(255)).attr("reserved_at", DATETIME)
    b.attr("error_message", varchar(4096), NULL).attr("error_stack", varchar(65535), NULL)
    d = b.build()
    return TableSchema(job_table_name(table), tuple((a.name, a.type) for a in d.attributes), d.primary_key, render_definition(d))


def table_schema(d: TableDef) -> TableSchema:
    return TableSchema(d.name, tuple((a.name, a.type) for a in d.attributes), d.primary_key, render_definition(d))


class Database:
    """Registry + relational store + object store + codecs.

    ``faults`` is an optional callable invoked with a point name from
    :data:`FAULT_POINTS`; raising from it simulates a failure there.
    """

    def __init__(
        self,
        registry: SchemaRegistry | None = None,
        store: RelationalStore | None = None,
        objects: ObjectStore | None = None,
        codecs: CodecRegistry | None = None,
        faults: Callable[[str], None] | None = None,
        root: Path | None = None,
    ):
        self.registry = registry if registry is not None else SchemaRegistry()
        self.store = store if store is not None else MemoryStore()
        self.objects = objects if objects is not None else MemoryObjectStore()
        self.codecs = codecs if codecs is not None else default_codecs()
        self.faults = faults
        self.root = Path(root) if root is not None else None
        self.txn_log: collections.deque[TxnLogEntry] = collections.deque(maxlen=10_000)
        self.makes: dict[str, Callable] = {}
        self._txn_ids = itertools.count(1)

    # -- persistence ----------------------------------------------------------------

    @classmethod
    def open(cls, root: str | Path, *, objects_root: str | Path | None = None, codecs: CodecRegistry | None = None, faults=None) -> Database:
        """Open (creating if needed) a directory-backed database."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        manifest = root / "registry.manifest"
        if not manifest.exists():
            _atomic_write(manifest, b"")
        db = cls(
            SchemaRegistry(),
            MemoryStore(root),
            LocalObjectStore(objects_root if objects_root is not None else root / "objects"),
            codecs,
            faults,
            root,
        )
        parse_manifest(manifest.read_text(encoding="utf-8"), declare=db._declare_loaded, registry=db.registry)
        db.recover()
        return db

    def _declare_loaded(self, d: TableDef) -> None:
        self.registry.declare(d)
        self._create_store_tables(d)

    def _write_manifest(self) -> None:
        if self.root is None:
            return
        path = self.root / "registry.manifest"
        text = self.registry.manifest().encode("utf-8")
        if not path.exists() or path.read_bytes() != text:
            _atomic_write(path, text)

    def _log(self, entry: TxnLogEntry) -> None:
        self.txn_log.append(entry)
        if self.root is not None:
            with open(self.root / "txn.log", "a", encoding="utf-8") as f:
                f.write(json.dumps({"txn": entry.txn_id, "phase": entry.phase, "paths": list(entry.paths)}) + "\n")
                f.flush()

    def recover(self) -> int:
        """Remove objects written by transactions that never finished.

        Returns the number of objects removed. Objects that ended up referenced
        anyway are left alone.
        """
        if self.root is None:
            return 0
        path = self.root / "txn.log"
        if not path.exists():
            return 0
        removed = 0
        with self.store.exclusive():
            open_txns: dict[str, list[str]] = {}
            for line in path.read_text(encoding="utf-8").splitlines():
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    continue
                if rec["phase"] == "objects_written":
                    open_txns[rec["txn"]] = rec["paths"]
                else:
                    open_txns.pop(rec["txn"], None)
            if open_txns:
                referenced = self.referenced_paths()
                for paths in open_txns.values():
                    for p in paths:
                        if p not in referenced and self.objects.delete(p):
                            self.objects.delete(p + SIDECAR)
                            removed += 1
            _atomic_write(path, b"")
        return removed

    def _fault(self, point: str) -> None:
        if self.faults is not None:
            self.faults(point)

    # -- schema ------------------------------------------------------------------------

    def declare(self, d: TableDef) -> TableDef:
        """Register a table and create its storage. Re-declaring is a no-op."""
        with self.store.exclusive():
            d = self.registry.declare(d)
            self._create_store_tables(d)
            self._write_manifest()
        return d

    def define(self, name: str, text: str, tier: Tier | str = Tier.MANUAL) -> TableDef:
        """Parse and declare a definition; ``name`` is ``schema.table``."""
        schema, table = name.split(".", 1)
        return self.declare(parse_definition(DefinitionSource(text, table, Tier(tier), schema), self.registry))

    def _create_store_tables(self, d: TableDef) -> None:
        for a in d.primary_attrs:
            if a.type.is_codec:
                raise TypeMismatch(f"{d.name}.{a.name}: codec attributes cannot be part of a primary key")
        self.store.create_table(table_schema(d))
        if d.tier.auto_populated:
            self.store.create_table(_job_schema(d.name))

    def table(self, name: str) -> TableRef:
        return TableRef.of(self.registry, name)

    __getitem__ = table

    # -- reads -------------------------------------------------------------------------

    def scan(self, table: str) -> list[dict]:
        return self.store.scan(table)

    def load_object(self, path: str) -> bytes:
        return self.objects.get(path)

    def fetch(self, expr: QueryExpr | str, *, lazy: bool = True) -> list[dict]:
        if isinstance(expr, str):
            expr = self.table(expr)
        return evaluate(expr, self, lazy=lazy)

    def count(self, table: str) -> int:
        return len(self.store.scan(self.registry.resolve(table).name))

    # -- insert --------------------------------------------------------------------------

    def insert(self, table: str, rows: Iterable[Mapping[str, Any]], parts: Mapping[str, Iterable[Mapping]] | None = None) -> InsertReport:
        """Insert rows into ``table``; part rows of a master go in ``parts``,
        keyed by part table name, and commit in the same transaction."""
        d = self.registry.resolve(table)
        if d.tier is Tier.PART:
            raise InvalidOperation(f"{d.name} is a part table; insert it together with its master {d.master}")
        batches = [(d, list(rows))]
        for part_name, part_rows in (parts or {}).items():
            pd = self._resolve_part(d, part_name)
            batches.append((pd, list(part_rows)))
        return self.insert_batches(batches)

    def _resolve_part(self, master: TableDef, name: str) -> TableDef:
        for candidate in (name, f"{master.name}__{name}", f"{master.schema_name}.{name}"):
            if candidate in self.registry and self.registry[candidate].master == master.name:
                return self.registry[candidate]
        raise InvalidOperation(f"{name!r} is not a part table of {master.name}")

    def _prepare(self, d: TableDef, row: Mapping[str, Any], index: int) -> tuple[dict, list]:
        known = {a.name for a in d.attributes}
        extra = set(row) - known
        if extra:
            raise TypeMismatch(f"row {index}: {d.name} has no attribute(s) {sorted(extra)}")
        out: dict[str, Any] = {}
        payloads = []
        for a in d.attributes:
            if a.name in row and row[a.name] is not None:
                value = row[a.name]
                try:
                    if a.type.is_codec and isinstance(value, (LazyRef, ObjectRef)) and a.type.store == HASH:
                        ref = value.ref if isinstance(value, LazyRef) else value
                        out[a.name] = ref
                        continue
                    if a.type.is_codec and isinstance(value, LazyRef):
                        value = value.materialize()
                    out[a.name] = encode_value(a.type, value, self.codecs)
                except TypeMismatch as exc:
                    raise TypeMismatch(f"row {index}: {d.name}.{a.name}: {exc}") from None
                if isinstance(out[a.name], EncodedPayload):
                    payloads.append(a)
            elif a.nullable:
                out[a.name] = None
            elif a.default is not None:
                out[a.name] = coerce(a.type, a.default)
            else:
                raise TypeMismatch(f"row {index}: {d.name}.{a.name} is required")
        writes = []
        for a in payloads:
            enc: EncodedPayload = out[a.name]
            context = None
            if a.type.store == SCHEMA:
                codec = self.codecs.resolve(enc.metadata["codec_id"], enc.metadata["version"])
                context = {
                    "schema": d.schema_name,
                    "table": d.table_name,
                    "key": [(n, d.attribute(n).type, out[n]) for n in d.primary_key],
                    "attribute": a.name,
                    "extension": codec.extension,
                }
            address = address_for(a.type.store, enc.payload, context)
            out[a.name] = ObjectRef(address, dict(enc.metadata))
            writes.append((address, enc.payload, enc.metadata))
        return out, writes

    def insert_batches(
        self, batches, extra: Callable[[], None] | None = None, guard: Callable[[], None] | None = None
    ) -> InsertReport:
        """Insert several (TableDef, rows) batches atomically, in order.

        ``guard`` runs first inside the tuple transaction and may veto it by
        raising; ``extra`` runs inside it after all rows are written.
        """
        prepared = []
        for d, rows in batches:
            prepared.append((d, [(i, *self._prepare(d, r, i)) for i, r in enumerate(rows)]))
        report = InsertReport()
        txn_id = f"{os.getpid()}-{next(self._txn_ids)}"
        created: list[str] = []
        with self.store.exclusive():
            try:
                with self.store.transaction():
                    if guard is not None:
                        guard()
                    staged = self._stage(prepared, report)
                    writes = [w for d, items in prepared for _, row, ws in items if id(row) in staged[d.name] for w in ws]
                    if writes:
                        self._log(TxnLogEntry(txn_id, "objects_written", tuple(sorted({a.path for a, _, _ in writes}))))
                    for address, payload, metadata in writes:
                        if self.objects.put(address.path, payload):
                            created.append(address.path)
                            report.objects_written += 1
                            self.objects.put(address.path + SIDECAR, _sidecar(metadata))
                            created.append(address.path + SIDECAR)
                        elif not self.objects.exists(address.path + SIDECAR):
                            self.objects.put(address.path + SIDECAR, _sidecar(metadata))
                            created.append(address.path + SIDECAR)
                    self._fault("insert.objects_written")
                    for i, (d, items) in enumerate(prepared):
                        rows = [row for _, row, _ in items if id(row) in staged[d.name]]
                        self.store.insert_rows(d.name, rows)
                        report.inserted[d.name] = report.inserted.get(d.name, 0) + len(rows)
                        if i == 0 and len(prepared) > 1:
                            self._fault("insert.master_written")
                    if extra is not None:
                        extra()
                    self._fault("insert.commit")
            except BaseException:
                for path in created:
                    self.objects.delete(path)
                if created:
                    self._log(TxnLogEntry(txn_id, "rolled_back", tuple(created)))
                raise
            if created:
                self._log(TxnLogEntry(txn_id, "tuples_committed"))
        return report

    def _stage(self, prepared, report: InsertReport) -> dict[str, set[int]]:
        """Duplicate and foreign-key checks. Returns ids of rows to insert."""
        pending: dict[str, dict[tuple, dict]] = {}
        staged: dict[str, set[int]] = {}
        for d, items in prepared:
            pend = pending.setdefault(d.name, {})
            staged.setdefault(d.name, set())
            for index, row, _ in items:
                key = tuple(row[n] for n in d.primary_key)
                existing = self.store.index_lookup(d.name, key)
                if existing is None:
                    existing = pend.get(key)
                if existing is not None:
                    if existing == row:
                        report.skipped += 1
                        continue
                    raise DuplicatePrimaryKey(f"{d.name} already has {dict(zip(d.primary_key, key))} with different values", index)
                pend[key] = row
                staged[d.name].add(id(row))
        for d, items in prepared:
            for index, row, _ in items:
                if id(row) not in staged[d.name]:
                    continue
                for fk in d.foreign_keys:
                    values = tuple(row[c] for c, _ in fk.attribute_map)
                    if any(v is None for v in values):
                        continue
                    if values in pending.get(fk.parent, {}) or self.store.index_lookup(fk.parent, values) is not None:
                        continue
                    missing = dict(zip((p for _, p in fk.attribute_map), values))
                    raise FKViolation(f"{d.name} references missing {fk.parent} {missing}", index)
        return staged

    # -- delete --------------------------------------------------------------------------

    def delete(self, table: str | QueryExpr, restriction=None) -> DeleteReport:
        """Delete matching rows and everything that depends on them."""
        if isinstance(table, TableRef):
            table = table.table
        d = self.registry.resolve(table) if isinstance(table, str) else None
        if d is None:
            raise InvalidOperation("delete takes a table name or table reference")
        if d.tier is Tier.PART:
            raise InvalidOperation(f"{d.name} is a part table; delete from its master {d.master}")
        report = DeleteReport({d.name: 0, **{n: 0 for n in sorted(self.registry.descendants(d.name))}})
        owned: list[str] = []
        with self.store.exclusive():
            with self.store.transaction():
                expr = self.table(d.name)
                if restriction is not None:
                    expr = restrict(expr, restriction)
                doomed: dict[str, dict[tuple, dict]] = {}
                frontier = [(d.name, evaluate(expr, self, lazy=False))]
                while frontier:
                    name, rows = frontier.pop()
                    tdef = self.registry[name]
                    bucket = doomed.setdefault(name, {})
                    new = []
                    for r in rows:
                        k = tuple(r[n] for n in tdef.primary_key)
                        if k not in bucket:
                            bucket[k] = self.store.index_lookup(name, k)
                            new.append(r)
                    if not new:
                        continue
                    for child in self.registry.children(name):
                        cdef = self.registry[child]
                        for fk in cdef.foreign_keys:
                            if fk.parent != name:
                                continue
                            parent_keys = {tuple(r[p] for _, p in fk.attribute_map) for r in new}
                            hits = [
                                cr for cr in self.store.scan(child)
                                if tuple(cr[c] for c, _ in fk.attribute_map) in parent_keys
                            ]
                            if hits:
                                frontier.append((child, hits))
                for tdef in reversed(self.registry.topo_order()):
                    bucket = doomed.get(tdef.name)
                    if not bucket:
                        continue
                    self.store.delete_rows(tdef.name, list(bucket))
                    report.rows_removed[tdef.name] = len(bucket)
                    for row in bucket.values():
                        for v in row.values():
                            if isinstance(v, ObjectRef):
                                report.objects_released += 1
                                if v.address.scheme == SCHEMA:
                                    owned.append(v.address.path)
                self._fault("delete.commit")
            for path in owned:
                try:
                    self.objects.delete(path)
                    self.objects.delete(path + SIDECAR)
                except StorageFailure:
                    log.warning("could not remove %s after delete; gc will reclaim it", path)
        report.rows_removed = dict(sorted(report.rows_removed.items()))
        return report

    def register_make(self, table: str, fn: Callable) -> None:
        """Attach the make function used to populate ``table``."""
        self.makes[self.registry.resolve(table).name] = fn

    # -- garbage collection -------------------------------------------------------------------

    def referenced_paths(self) -> set[str]:
        refs: set[str] = set()
        for d in self.registry:
            codec_attrs = [a.name for a in d.attributes if a.type.is_codec]
            if not codec_attrs:
                continue
            for row in self.store.scan(d.name):
                for n in codec_attrs:
                    v = row[n]
                    if isinstance(v, ObjectRef):
                        refs.add(v.address.path)
        return refs

    def gc(self) -> GcReport:
        """Delete every stored object no tuple references."""
        with self.store.exclusive():
            referenced = self.referenced_paths()
            stored = object_paths(self.objects)
            report = GcReport(scanned=len(stored), referenced=len(referenced))
            for path in stored:
                if path in referenced:
                    continue
                self._fault("gc.delete")
                self.objects.delete(path)
                self.objects.delete(path + SIDECAR)
                report.deleted += 1
            for path in self.objects.list(""):
                if path.endswith(SIDECAR) and not self.objects.exists(path[: -len(SIDECAR)]):
                    self.objects.delete(path)
        return report

    # -- snapshots ----------------------------------------------------------------------------

    def snapshot(self) -> dict[str, bytes]:
        """Canonical bytes of the whole database: manifest, tables, objects."""
        with self.store.exclusive():
            out = {"registry.manifest": self.registry.manifest().encode("utf-8")}
            for name in self.store.tables():
                out[f"tables/{name}.tbl"] = self.store.table_bytes(name)
            lines = []
            for path in self.objects.list(""):
                data = self.objects.peek(path) or b""
                lines.append(f"{path} {hashlib.sha256(data).hexdigest()} {len(data)}")
            out["objects.manifest"] = ("\n".join(lines) + "\n").encode("utf-8")
        return out

    def snapshot_digest(self) -> str:
        h = hashlib.sha256()
        for name, data in sorted(self.snapshot().items()):
            h.update(name.encode() + b"\0" + hashlib.sha256(data).digest())
        return h.hexdigest()


def _sidecar(metadata: Mapping[str, Any]) -> bytes:
    from ..types import canonical_json

    return canonical_json(dict(metadata)).encode("utf-8")


def open_database(root: str | Path, **kwargs) -> Database:
    return Database.open(root, **kwargs)


__all__ = [
    "Database",
    "DeleteReport",
    "GcReport",
    "InsertReport",
    "IntegrityError",
    "TxnLogEntry",
    "job_table_name",
    "open_database",
]
