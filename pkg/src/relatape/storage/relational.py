"""Tuple storage: the pluggable relational-store interface and the bundled
in-memory reference store.

The reference store keeps each table as a dict keyed by primary-key tuple and
serializes every transaction through one re-entrant lock. Given a directory it
also persists: each commit rewrites the touched tables as snapshot files and
bumps a generation counter, and an advisory file lock extends the global lock
across processes (a process that sees a newer generation reloads first).

Snapshot file format, one per table: a header line holding a canonical json
object ``{"columns", "definition", "primary_key", "table"}``, then one
canonical json record per row, sorted by primary key.
"""

from __future__ import annotations

import abc
import fcntl
import json
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from ..errors import StorageFailure, UnknownTable
from ..types import TypeSpec, canonical_json, from_json, parse_type, sort_key, to_json


@dataclass(frozen=True)
class TableSchema:
    name: str
    columns: tuple[tuple[str, TypeSpec], ...]
    primary_key: tuple[str, ...]
    definition: str = ""

    def header(self) -> str:
        return canonical_json(
            {
                "columns": [[n, str(t)] for n, t in self.columns],
                "definition": self.definition,
                "primary_key": list(self.primary_key),
                "table": self.name,
            }
        )

    @classmethod
    def from_header(cls, line: str) -> TableSchema:
        obj = json.loads(line)
        return cls(
            obj["table"],
            tuple((n, parse_type(t)) for n, t in obj["columns"]),
            tuple(obj["primary_key"]),
            obj["definition"],
        )


class RelationalStore(abc.ABC):
    """Operations the engine needs from a tuple store.

    Transactions are serializable for the tables they touch;
    :meth:`atomic_insert_unique` never blocks on an existing key, it fails.
    """

    @abc.abstractmethod
    def create_table(self, schema: TableSchema) -> None: ...

    @abc.abstractmethod
    def has_table(self, name: str) -> bool: ...

    @abc.abstractmethod
    def insert_rows(self, table: str, rows: Iterable[dict]) -> int: ...

    @abc.abstractmethod
    def delete_rows(self, table: str, keys: Iterable[tuple]) -> int: ...

    @abc.abstractmethod
    def scan(self, table: str) -> list[dict]: ...

    @abc.abstractmethod
    def index_lookup(self, table: str, key: tuple) -> dict | None: ...

    @abc.abstractmethod
    def atomic_insert_unique(self, table: str, row: dict) -> bool: ...

    @abc.abstractmethod
    def transaction(self): ...

    @abc.abstractmethod
    def exclusive(self):
        """Hold off every other transaction (used by garbage collection)."""


class _Table:
    __slots__ = ("schema", "rows")

    def __init__(self, schema: TableSchema):
        self.schema = schema
        self.rows: dict[tuple, dict] = {}

    def key(self, row: dict) -> tuple:
        return tuple(row[n] for n in self.schema.primary_key)


class MemoryStore(RelationalStore):
    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._lock = threading.RLock()
        self._lock_depth = 0
        self._txn_depth = 0
        self._undo: list[tuple] = []
        self._dirty: set[str] = set()
        self._tables: dict[str, _Table] = {}
        self._generation = -1
        self._lock_fd: int | None = None
        self.commits = 0
        if self.root is not None:
            (self.root / "tables").mkdir(parents=True, exist_ok=True)
            with self._guard():
                pass

    # -- locking ----------------------------------------------------------------

    @contextmanager
    def _guard(self) -> Iterator[None]:
        with self._lock:
            self._lock_depth += 1
            try:
                if self._lock_depth == 1 and self.root is not None:
                    self._file_lock()
                    self._maybe_reload()
                yield
            finally:
                if self._lock_depth == 1 and self.root is not None:
                    self._file_unlock()
                self._lock_depth -= 1

    def _file_lock(self):
        fd = os.open(self.root / "store.lock", os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX)
        except OSError:
            os.close(fd)
            raise
        self._lock_fd = fd

    def _file_unlock(self):
        fd, self._lock_fd = self._lock_fd, None
        if fd is not None:
            fcntl.flock(fd, fcntl.LOCK_UN)
            os.close(fd)

    def _read_generation(self) -> int:
        try:
            return int((self.root / "generation").read_text().strip() or 0)
        except FileNotFoundError:
            return 0

    def _maybe_reload(self):
        gen = self._read_generation()
        if gen == self._generation:
            return
        tables = {}
        for path in sorted((self.root / "tables").glob("*.tbl")):
            table = self._read_table_file(path)
            tables[table.schema.name] = table
        self._tables = tables
        self._generation = gen

    def _read_table_file(self, path: Path) -> _Table:
        with open(path, encoding="utf-8") as f:
            header = f.readline()
            schema = TableSchema.from_header(header)
            table = _Table(schema)
            types = dict(schema.columns)
            for line in f:
                if not line.strip():
                    continue
                obj = json.loads(line)
                row = {n: from_json(types[n], obj.get(n)) for n in types}
                table.rows[table.key(row)] = row
        return table

    # -- transactions ------------------------------------------------------------

    @contextmanager
    def transaction(self) -> Iterator[MemoryStore]:
        """Re-entrant: nested blocks join the outermost transaction."""
        with self._guard():
            self._txn_depth += 1
            try:
                yield self
            except BaseException:
                self._txn_depth -= 1
                if self._txn_depth == 0:
                    self._rollback()
                raise
            self._txn_depth -= 1
            if self._txn_depth == 0:
                self._commit()

    @contextmanager
    def exclusive(self) -> Iterator[MemoryStore]:
        with self._guard():
            yield self

    def _rollback(self):
        for entry in reversed(self._undo):
            op, name, key = entry[:3]
            rows = self._tables[name].rows
            if op == "ins":
                rows.pop(key, None)
            elif op == "del":
                rows[key] = entry[3]
            elif op == "create":
                self._tables.pop(name, None)
        self._undo.clear()
        self._dirty.clear()

    def _commit(self):
        try:
            if self.root is not None and self._dirty:
                for name in sorted(self._dirty):
                    self._write_table(name)
                self._generation = self._read_generation() + 1
                _atomic_write(self.root / "generation", f"{self._generation}\n".encode())
        except OSError as exc:
            self._rollback()
            raise StorageFailure(f"could not persist transaction: {exc}") from exc
        self._undo.clear()
        self._dirty.clear()
        self.commits += 1

    def _write_table(self, name: str):
        _atomic_write(self.root / "tables" / (name + ".tbl"), self.table_bytes(name))

    # -- interface ----------------------------------------------------------------------

    def _table(self, name: str) -> _Table:
        try:
            return self._tables[name]
        except KeyError:
            raise UnknownTable(f"store has no table {name!r}") from None

    def create_table(self, schema: TableSchema) -> None:
        with self.transaction():
            existing = self._tables.get(schema.name)
            if existing is not None:
                if existing.schema != schema:
                    raise StorageFailure(f"table {schema.name!r} exists with a different layout")
                return
            self._tables[schema.name] = _Table(schema)
            self._undo.append(("create", schema.name, None))
            self._dirty.add(schema.name)

    def has_table(self, name: str) -> bool:
        with self._guard():
            return name in self._tables

    def tables(self) -> list[str]:
        with self._guard():
            return sorted(self._tables)

    def insert_rows(self, table: str, rows: Iterable[dict]) -> int:
        n = 0
        with self.transaction():
            t = self._table(table)
            for row in rows:
                key = t.key(row)
                if key in t.rows:
                    raise StorageFailure(f"{table}: key {key} already present")
                t.rows[key] = dict(row)
                self._undo.append(("ins", table, key))
                n += 1
            if n:
                self._dirty.add(table)
        return n

    def delete_rows(self, table: str, keys: Iterable[tuple]) -> int:
        n = 0
        with self.transaction():
            t = self._table(table)
            for key in keys:
                row = t.rows.pop(tuple(key), None)
                if row is not None:
                    self._undo.append(("del", table, tuple(key), row))
                    n += 1
            if n:
                self._dirty.add(table)
        return n

    def scan(self, table: str) -> list[dict]:
        """Rows of ``table``. The dicts are shared; callers must not mutate them."""
        with self._guard():
            return list(self._table(table).rows.values())

    def index_lookup(self, table: str, key: tuple) -> dict | None:
        with self._guard():
            return self._table(table).rows.get(tuple(key))

    def count(self, table: str) -> int:
        with self._guard():
            return len(self._table(table).rows)

    def atomic_insert_unique(self, table: str, row: dict) -> bool:
        with self.transaction():
            t = self._table(table)
            key = t.key(row)
            if key in t.rows:
                return False
            t.rows[key] = dict(row)
            self._undo.append(("ins", table, key))
            self._dirty.add(table)
            return True

    def schema(self, table: str) -> TableSchema:
        with self._guard():
            return self._table(table).schema

    def table_bytes(self, name: str) -> bytes:
        """Canonical snapshot of one table."""
        with self._guard():
            t = self._table(name)
            types = dict(t.schema.columns)
            pk = [(n, types[n]) for n in t.schema.primary_key]
            rows = sorted(t.rows.values(), key=lambda r: tuple(sort_key(s, r[n]) for n, s in pk))
            lines = [t.schema.header()]
            for r in rows:
                lines.append(canonical_json({n: to_json(types[n], r.get(n)) for n in types}))
            return ("\n".join(lines) + "\n").encode("utf-8")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
