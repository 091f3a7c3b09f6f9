"""Populating imported and computed tables from their upstream keys.

The key source of a table is the join of the primary keys of the parents it
inherits identity from. Each pending key is reserved with an atomic unique
insert into the table's job table, computed by the registered make function
outside any transaction, and committed together with its part rows and the
removal of the reservation. A failing make leaves an error record; a crashed
worker leaves a reservation that :func:`clear_errors` can expire.

A make function has the signature ``make(key, ctx)`` and returns either the
secondary values of the master row, or ``(master_values, {part: rows})``.
"""

from __future__ import annotations

import datetime as dt
import os
import socket
import threading
import traceback
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from .algebra import QueryExpr, TableRef, evaluate, join, project, restrict
from .errors import AccessError, InvalidOperation, MakeError, NotAutoPopulated, RelatapeError
from .model import TableDef
from .storage.database import Database, job_table_name
from .types import key_hash, to_json

MAX_MESSAGE = 4096
MAX_STACK = 65535


@dataclass
class PopulateReport:
    succeeded: int = 0
    failed: int = 0
    skipped: int = 0
    errors: list[tuple[dict, str]] = field(default_factory=list)

    def __iadd__(self, other: PopulateReport) -> PopulateReport:
        self.succeeded += other.succeeded
        self.failed += other.failed
        self.skipped += other.skipped
        self.errors.extend(other.errors)
        return self

    def as_dict(self) -> dict:
        return {"succeeded": self.succeeded, "failed": self.failed, "skipped": self.skipped}


@dataclass
class JobStatus:
    pending: int = 0
    reserved: int = 0
    error: int = 0
    done: int = 0
    records: list[dict] = field(default_factory=list, repr=False)

    @property
    def total(self) -> int:
        return self.pending + self.reserved + self.error + self.done

    def as_dict(self) -> dict:
        return {"pending": self.pending, "reserved": self.reserved, "error": self.error, "done": self.done}


class _LostReservation(RelatapeError):
    pass


def default_worker_id() -> str:
    return os.environ.get("RELATAPE_WORKER_ID") or f"{socket.gethostname()}:{os.getpid()}"


def _target(db: Database, table: str) -> TableDef:
    d = db.registry.resolve(table)
    if not d.tier.auto_populated:
        raise NotAutoPopulated(f"{d.name} is a {d.tier.value} table; only imported and computed tables are populated")
    return d


def key_source(db: Database, table: str) -> QueryExpr:
    """Join of the primary keys of every parent ``table`` inherits identity from.

    Attributes renamed by a foreign key appear under the child's names.
    Non-identifying (secondary) references do not contribute.
    """
    d = _target(db, table)
    expr = None
    for fk in d.foreign_keys:
        if not fk.into_primary_key:
            continue
        parent = TableRef.of(db.registry, fk.parent)
        renames = {c: p for c, p in fk.attribute_map if c != p}
        node = project(parent, (), renames)
        expr = node if expr is None else join(expr, node)
    if expr is None:
        raise InvalidOperation(f"{d.name} has no identifying parents to draw keys from")
    return expr


def _hash(expr: QueryExpr, key: Mapping[str, Any]) -> str:
    """SHA-256 over the canonical encoding of the key, in declaration order."""
    names = expr.heading.primary_key
    return key_hash([expr.heading[n].type for n in names], [key[n] for n in names])


def _existing_keys(db: Database, d: TableDef, names) -> set[tuple]:
    return {tuple(r[n] for n in names) for r in db.store.scan(d.name)}


def _target_has(db: Database, d: TableDef, key: Mapping[str, Any]) -> bool:
    if set(key) == set(d.primary_key):
        return db.store.index_lookup(d.name, tuple(key[n] for n in d.primary_key)) is not None
    return any(all(r[n] == v for n, v in key.items()) for r in db.store.scan(d.name))


def _jobs(db: Database, d: TableDef) -> dict[str, dict]:
    return {r["key_hash"]: r for r in db.store.scan(job_table_name(d.name))}


def pending_keys(db: Database, table: str, restriction=None) -> list[dict]:
    """Key-source keys with neither a target row nor a job record."""
    d = _target(db, table)
    ks = key_source(db, table)
    if restriction is not None:
        ks = restrict(ks, restriction)
    names = ks.heading.primary_key
    with db.store.exclusive():
        done = _existing_keys(db, d, names)
        jobs = _jobs(db, d)
        out = []
        for row in evaluate(ks, db, lazy=False):
            key = {n: row[n] for n in names}
            if tuple(key.values()) in done or _hash(ks, key) in jobs:
                continue
            out.append(key)
    return out


def job_status(db: Database, table: str) -> JobStatus:
    """Counts of key-source keys by state; they always sum to the key-source size."""
    d = _target(db, table)
    ks = key_source(db, table)
    names = ks.heading.primary_key
    status = JobStatus()
    with db.store.exclusive():
        done = _existing_keys(db, d, names)
        jobs = _jobs(db, d)
        for row in evaluate(ks, db, lazy=False):
            key = {n: row[n] for n in names}
            if tuple(key.values()) in done:
                status.done += 1
                continue
            job = jobs.get(_hash(ks, key))
            if job is None:
                status.pending += 1
            elif job["status"] == "error":
                status.error += 1
            else:
                status.reserved += 1
        status.records = sorted(jobs.values(), key=lambda r: r["key_hash"])
    return status


def reserve(db: Database, table: str, key: Mapping[str, Any], worker_id: str) -> dict | None:
    """Claim ``key``. Returns the job record, or None if someone else holds it."""
    d = _target(db, table)
    ks = key_source(db, table)
    job = {
        "key_hash": _hash(ks, key),
        "key": {n: to_json(ks.heading[n].type, key[n]) for n in ks.heading.primary_key},
        "status": "reserved",
        "worker_id": worker_id[:255],
        "reserved_at": dt.datetime.now(dt.timezone.utc),
        "error_message": None,
        "error_stack": None,
    }
    return job if db.store.atomic_insert_unique(job_table_name(d.name), job) else None


def _is_ours(current: dict | None, job: dict) -> bool:
    return current is not None and current["worker_id"] == job["worker_id"] and current["reserved_at"] == job["reserved_at"]


def _release(db: Database, d: TableDef, job: dict) -> None:
    """Drop our reservation, unless it was cleared (and maybe re-taken) meanwhile."""
    table = job_table_name(d.name)
    with db.store.transaction():
        if _is_ours(db.store.index_lookup(table, (job["key_hash"],)), job):
            db.store.delete_rows(table, [(job["key_hash"],)])


def _record_error(db: Database, d: TableDef, job: dict, exc: BaseException) -> None:
    table = job_table_name(d.name)
    with db.store.transaction():
        if not _is_ours(db.store.index_lookup(table, (job["key_hash"],)), job):
            return
        db.store.delete_rows(table, [(job["key_hash"],)])
        failed = dict(job)
        failed["status"] = "error"
        failed["error_message"] = f"{type(exc).__name__}: {exc}"[:MAX_MESSAGE]
        failed["error_stack"] = "".join(traceback.format_exception(type(exc), exc, exc.__traceback__))[-MAX_STACK:]
        db.store.insert_rows(table, [failed])


class MakeContext:
    """Read-only access for a make function.

    Only the ancestors of the table being populated (and their part tables)
    are visible. :meth:`fetch` restricts to the current key by default.
    """

    def __init__(self, db: Database, table: TableDef, key: Mapping[str, Any]):
        self._db = db
        self.table = table
        self.key = dict(key)
        visible = set(db.registry.ancestors(table.name))
        for name in list(visible):
            visible.update(p.name for p in db.registry.parts(name))
        self._visible = visible

    def _ref(self, name: str) -> TableRef:
        d = self._db.registry.resolve(name, self.table.schema_name)
        if d.name not in self._visible:
            raise AccessError(f"{self.table.name} may only read its ancestors, not {d.name}")
        return TableRef.of(self._db.registry, d.name)

    def fetch(self, table: str, restriction=None, *, by_key: bool = True, lazy: bool = True) -> list[dict]:
        expr: QueryExpr = self._ref(table)
        if by_key:
            cond = {k: v for k, v in self.key.items() if k in expr.heading}
            if cond:
                expr = restrict(expr, cond)
        if restriction is not None:
            expr = restrict(expr, restriction)
        return evaluate(expr, self._db, lazy=lazy)

    def fetch1(self, table: str, restriction=None, **kwargs) -> dict:
        rows = self.fetch(table, restriction, **kwargs)
        if len(rows) != 1:
            raise MakeError(f"expected exactly one row of {table} for {self.key}, found {len(rows)}")
        return rows[0]

    def insert(self, *args, **kwargs):
        raise AccessError("make functions return rows; they cannot insert")

    delete = insert


def _split_result(result) -> tuple[Mapping, Mapping]:
    if result is None:
        return {}, {}
    if isinstance(result, tuple):
        if len(result) != 2:
            raise MakeError("a make function returns master values or (master values, {part: rows})")
        return result[0] or {}, result[1] or {}
    if isinstance(result, Mapping):
        return result, {}
    raise MakeError(f"make returned {type(result).__name__}; expected a mapping")


def run_make(db: Database, table: str, key: Mapping[str, Any], job: dict, make: Callable) -> None:
    """Compute and commit one key. Exceptions propagate to the caller."""
    d = db.registry.resolve(table)
    master, parts = _split_result(make(dict(key), MakeContext(db, d, key)))
    batches = [(d, [{**master, **key}])]
    for part_name, rows in parts.items():
        pd = db._resolve_part(d, part_name)
        batches.append((pd, [{**r, **key} for r in rows]))
    jobs = job_table_name(d.name)

    def verify():
        if not _is_ours(db.store.index_lookup(jobs, (job["key_hash"],)), job):
            raise _LostReservation(f"reservation for {dict(key)} was cleared")
        if _target_has(db, d, key):
            raise _LostReservation(f"{dict(key)} was populated by another worker")

    def release():
        db.store.delete_rows(jobs, [(job["key_hash"],)])

    db.insert_batches(batches, extra=release, guard=verify)


def _populate_one_worker(db, d, make, worker_id, restriction, limit, counter, counter_lock) -> PopulateReport:
    report = PopulateReport()
    for key in pending_keys(db, d.name, restriction):
        if limit is not None:
            with counter_lock:
                if counter[0] >= limit:
                    break
        job = reserve(db, d.name, key, worker_id)
        if job is None:
            report.skipped += 1
            continue
        if limit is not None:
            with counter_lock:
                if counter[0] >= limit:
                    _release(db, d, job)
                    break
                counter[0] += 1
        if _target_has(db, d, key):
            _release(db, d, job)
            report.skipped += 1
            continue
        try:
            run_make(db, d.name, key, job, make)
        except _LostReservation:
            _release(db, d, job)
            report.skipped += 1
        except Exception as exc:
            _record_error(db, d, job, exc)
            report.failed += 1
            report.errors.append((dict(key), f"{type(exc).__name__}: {exc}"))
        else:
            report.succeeded += 1
    return report


def populate(
    db: Database,
    table: str,
    *,
    restriction=None,
    limit: int | None = None,
    workers: int = 1,
    worker_id: str | None = None,
    make: Callable | None = None,
) -> PopulateReport:
    """Run the make function for every pending key of ``table``.

    With ``workers > 1`` that many threads share the work through the job
    table; each gets the worker id ``<id>/<n>``.
    """
    d = _target(db, table)
    make = make or db.makes.get(d.name)
    if make is None:
        raise NotAutoPopulated(f"no make function registered for {d.name}")
    worker_id = worker_id or default_worker_id()
    counter, counter_lock = [0], threading.Lock()
    if workers <= 1:
        return _populate_one_worker(db, d, make, worker_id, restriction, limit, counter, counter_lock)
    reports = [PopulateReport() for _ in range(workers)]
    crashes: list[BaseException] = []

    def work(i):
        try:
            reports[i] = _populate_one_worker(db, d, make, f"{worker_id}/{i}", restriction, limit, counter, counter_lock)
        except BaseException as exc:  # a crashed worker leaves its reservation behind
            crashes.append(exc)

    threads = [threading.Thread(target=work, args=(i,), name=f"populate-{i}") for i in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    total = PopulateReport()
    for r in reports:
        total += r
    failures = [c for c in crashes if isinstance(c, Exception)]
    if failures:
        raise failures[0]
    return total


def populate_all(db: Database, *, workers: int = 1, worker_id: str | None = None) -> dict[str, PopulateReport]:
    """Populate every table that has a make function, parents first."""
    out = {}
    for d in db.registry.topo_order():
        if d.tier.auto_populated and d.name in db.makes:
            out[d.name] = populate(db, d.name, workers=workers, worker_id=worker_id)
    return out


def clear_errors(db: Database, table: str, restriction=None, *, stale_after: float | None = None) -> int:
    """Remove error records (and, with ``stale_after`` seconds, reservations
    older than that) so their keys become pending again."""
    d = _target(db, table)
    ks = key_source(db, table)
    allowed = None
    if restriction is not None:
        allowed = {_hash(ks, r) for r in evaluate(restrict(ks, restriction), db, lazy=False)}
    now = dt.datetime.now(dt.timezone.utc)
    jobs = job_table_name(d.name)
    with db.store.transaction():
        doomed = []
        for job in db.store.scan(jobs):
            if allowed is not None and job["key_hash"] not in allowed:
                continue
            if job["status"] == "error":
                doomed.append((job["key_hash"],))
            elif stale_after is not None and (now - job["reserved_at"]).total_seconds() >= stale_after:
                doomed.append((job["key_hash"],))
        db.store.delete_rows(jobs, doomed)
    return len(doomed)


def errors(db: Database, table: str) -> list[dict]:
    d = _target(db, table)
    return sorted(
        (r for r in db.store.scan(job_table_name(d.name)) if r["status"] == "error"),
        key=lambda r: r["key_hash"],
    )


__all__ = [
    "JobStatus",
    "MakeContext",
    "PopulateReport",
    "clear_errors",
    "default_worker_id",
    "errors",
    "job_status",
    "key_source",
    "pending_keys",
    "populate",
    "populate_all",
    "reserve",
    "run_make",
]
