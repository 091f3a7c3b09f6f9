"""Command-line interface.

Exit codes: 0 success, 1 operational error, 2 semantic mismatch,
3 storage failure. The store directory comes from ``--store`` or the
``RELATAPE_STORE`` environment variable.

Query pipelines are read left to right::

    relatape query "ms_session | restrict sample_id=s1 | join acquisition | proj n_scans"
    relatape query "ms_session | aggr acquisition__scan count()->n"
"""

from __future__ import annotations

import argparse
import importlib
import importlib.util
import json
import os
import re
import shlex
import sys
from pathlib import Path
from typing import Any

from . import autopopulate
from .algebra import Cmp, QueryExpr, join, restrict, union
from .diagram import emit_dot
from .dsl import load_directory
from .errors import RelatapeError, SemanticMismatch, StorageFailure
from .lineage import LineageGraph
from .storage.database import Database
from .types import LazyRef, format_datetime, from_json, to_json

EXIT_OK, EXIT_ERROR, EXIT_MISMATCH, EXIT_STORAGE = 0, 1, 2, 3
DEFAULT_STORE = ".relatape"


# -- helpers ------------------------------------------------------------------------------


def _store_root(args) -> Path:
    return Path(args.store or os.environ.get("RELATAPE_STORE") or DEFAULT_STORE)


def _open(args) -> Database:
    root = _store_root(args)
    if not (root / "registry.manifest").exists():
        raise StorageFailure(f"{root} is not an initialized store; run 'relatape init' first")
    return Database.open(root, objects_root=args.objects)


def _emit(args, payload: Any, text: str | None = None) -> None:
    if args.format == "json":
        print(json.dumps(payload, sort_keys=True, indent=None))
    else:
        print(text if text is not None else json.dumps(payload, sort_keys=True, indent=2))


def _literal(text: str):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


_ATOM = re.compile(r"^\s*([a-z][a-z0-9_]*)\s*(<=|>=|!=|=|<|>)\s*(.+?)\s*$")


def _atoms(words: list[str]) -> list[Cmp]:
    out = []
    for w in words:
        m = _ATOM.match(w)
        if not m:
            raise RelatapeError(f"cannot parse condition {w!r}; expected attr=value")
        out.append(Cmp(m.group(1), m.group(2), _literal(m.group(3))))
    return out


def _render_value(heading, name, value):
    if isinstance(value, LazyRef):
        return {"$ref": value.address.path, **{k: v for k, v in sorted(value.describe().items())}}
    if value is None:
        return None
    return to_json(heading[name].type, value)


def _load_makes(db: Database, spec: str | None) -> None:
    if not spec:
        return
    if spec.endswith(".py") or os.sep in spec:
        module_spec = importlib.util.spec_from_file_location("relatape_makes", spec)
        module = importlib.util.module_from_spec(module_spec)
        module_spec.loader.exec_module(module)
    else:
        module = importlib.import_module(spec)
    register = getattr(module, "register", None)
    if register is None:
        raise RelatapeError(f"{spec} has no register(db) function")
    register(db)


# -- query pipelines --------------------------------------------------------------------


_AGGR = re.compile(r"^\s*([a-z]+\s*\(\s*[a-z0-9_]*\s*\)|[a-z]+)\s*(?:->|→)\s*([a-z][a-z0-9_]*)\s*$")


def parse_pipeline(db: Database, text: str) -> QueryExpr:
    """``table | restrict a=1 b>2 | exclude ... | join t | union t | proj a,b,c=d | aggr t count()->n``"""
    stages = [s.strip() for s in text.split("|")]
    if not stages or not stages[0]:
        raise RelatapeError("empty query")
    expr: QueryExpr = db.table(stages[0])
    for stage in stages[1:]:
        op, _, rest = stage.partition(" ")
        rest = rest.strip()
        if op in ("restrict", "exclude"):
            words = shlex.split(rest)
            negate = op == "exclude"
            if len(words) == 1 and _ATOM.match(words[0]) is None:
                expr = restrict(expr, db.table(words[0]), negate)
            else:
                expr = restrict(expr, _atoms(words), negate)
        elif op == "join":
            expr = join(expr, db.table(rest))
        elif op == "union":
            expr = union(expr, db.table(rest))
        elif op == "proj":
            keep, named = [], {}
            for item in (i.strip() for i in rest.split(",") if i.strip()):
                if "=" in item:
                    new, _, old = item.partition("=")
                    named[new.strip()] = old.strip()
                else:
                    keep.append(item)
            expr = expr.proj(*keep, **named)
        elif op == "aggr":
            table, _, specs_text = rest.partition(" ")
            specs = {}
            for item in (i for i in specs_text.split(",") if i.strip()):
                m = _AGGR.match(item)
                if not m:
                    raise RelatapeError(f"cannot parse aggregate {item.strip()!r}; expected fn(attr)->name")
                specs[m.group(2)] = m.group(1).replace(" ", "")
            expr = expr.aggr(db.table(table), **specs)
        else:
            raise RelatapeError(f"unknown pipeline stage {op!r}")
    return expr


# -- commands -----------------------------------------------------------------------------


def cmd_init(args) -> int:
    root = _store_root(args)
    existed = (root / "registry.manifest").exists()
    Database.open(root, objects_root=args.objects)
    _emit(args, {"store": str(root), "created": not existed}, f"{'initialized' if not existed else 'already initialized'} {root}")
    return EXIT_OK


def cmd_declare(args) -> int:
    db = _open(args)
    before = set(d.name for d in db.registry)
    tables = load_directory(Path(args.directory), db.registry, declare=db.declare, schema_name=args.schema)
    new = [d.name for d in tables if d.name not in before]
    lint = [str(x) for x in db.registry.lint() if x.table in {d.name for d in tables}]
    _emit(
        args,
        {"declared": len(tables), "new": len(new), "tables": new, "lint": lint},
        "\n".join([f"declared {len(tables)} tables ({len(new)} new)"] + [f"  + {n}" for n in new] + [f"  lint: {x}" for x in lint]),
    )
    return EXIT_OK


def _read_rows(db: Database, table: str, path: Path) -> list[dict]:
    d = db.registry.resolve(table)
    names = {a.name for a in d.attributes}
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            raw = json.loads(line)
            row = {}
            for k, v in raw.items():
                if isinstance(v, dict) and "$file" in v:
                    codec = db.codecs.resolve(v.get("$codec") or d.attribute(k).type.codec_id)
                    file = Path(v["$file"])
                    if not file.is_absolute():
                        file = path.parent / file
                    row[k] = codec.load_file(file)
                elif k in names and v is not None and not d.attribute(k).type.is_codec:
                    row[k] = from_json(d.attribute(k).type, v)
                else:
                    row[k] = v
            rows.append(row)
    return rows


def cmd_insert(args) -> int:
    db = _open(args)
    rows = _read_rows(db, args.table, Path(args.rows))
    report = db.insert(args.table, rows)
    _emit(
        args,
        {"inserted": report.total, "skipped": report.skipped, "objects_written": report.objects_written},
        f"inserted {report.total} rows ({report.skipped} already present, {report.objects_written} new objects)",
    )
    return EXIT_OK


def cmd_populate(args) -> int:
    db = _open(args)
    _load_makes(db, args.makes)
    report = autopopulate.populate(
        db, args.table, limit=args.limit, workers=args.workers, worker_id=os.environ.get("RELATAPE_WORKER_ID") or args.worker_id
    )
    payload = report.as_dict()
    lines = [f"succeeded {report.succeeded}, failed {report.failed}, skipped {report.skipped}"]
    lines += [f"  error {json.dumps(k, default=str, sort_keys=True)}: {msg}" for k, msg in report.errors]
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK if report.failed == 0 else EXIT_ERROR


def cmd_query(args) -> int:
    db = _open(args)
    expr = parse_pipeline(db, args.pipeline)
    rows = db.fetch(expr)
    if args.limit is not None:
        rows = rows[: args.limit]
    h = expr.heading
    out = [{n: _render_value(h, n, r[n]) for n in h.names} for r in rows]
    if args.format == "json":
        print(json.dumps(out, sort_keys=True))
    else:
        for r in out:
            print(json.dumps(r, sort_keys=True))
        print(f"({len(out)} rows)", file=sys.stderr)
    return EXIT_OK


def cmd_delete(args) -> int:
    db = _open(args)
    restriction = _atoms(args.where) if args.where else None
    report = db.delete(args.table, restriction)
    _emit(
        args,
        {"rows_removed": report.rows_removed, "objects_released": report.objects_released},
        "\n".join([f"{t}: {n}" for t, n in report.rows_removed.items()] + [f"objects released: {report.objects_released}"]),
    )
    return EXIT_OK


def cmd_gc(args) -> int:
    db = _open(args)
    r = db.gc()
    _emit(args, {"scanned": r.scanned, "referenced": r.referenced, "deleted": r.deleted}, f"scanned {r.scanned}, referenced {r.referenced}, deleted {r.deleted}")
    return EXIT_OK


def cmd_status(args) -> int:
    db = _open(args)
    tables = [db.registry.resolve(args.table).name] if args.table else [d.name for d in db.registry.topo_order() if d.tier.auto_populated]
    payload, lines = {}, []
    for t in tables:
        s = autopopulate.job_status(db, t)
        jobs = [
            {
                "key": r["key"],
                "status": r["status"],
                "worker_id": r["worker_id"],
                "reserved_at": format_datetime(r["reserved_at"]),
                "error_message": r["error_message"],
            }
            for r in s.records
        ]
        payload[t] = {**s.as_dict(), "jobs": jobs}
        lines.append(f"{t}: pending {s.pending}, reserved {s.reserved}, error {s.error}, done {s.done}")
        lines += [f"  {j['status']} {json.dumps(j['key'], sort_keys=True)} by {j['worker_id']}: {j['error_message'] or ''}" for j in jobs]
    _emit(args, payload, "\n".join(lines) if lines else "no auto-populated tables")
    return EXIT_OK


def cmd_diagram(args) -> int:
    db = _open(args)
    dot = emit_dot(db.registry, schema=args.schema, show_attrs=args.attrs)
    if args.output:
        Path(args.output).write_text(dot, encoding="utf-8")
    else:
        sys.stdout.write(dot)
    return EXIT_OK


def cmd_lineage(args) -> int:
    db = _open(args)
    table, _, attr = args.attribute.rpartition(".")
    origins = sorted(LineageGraph(db.registry).origins(table, attr))
    _emit(args, {"attribute": args.attribute, "origins": [str(o) for o in origins]}, "\n".join(str(o) for o in origins))
    return EXIT_OK


def cmd_clear_errors(args) -> int:
    db = _open(args)
    restriction = _atoms(args.where) if args.where else None
    n = autopopulate.clear_errors(db, args.table, restriction, stale_after=args.stale_after)
    _emit(args, {"cleared": n}, f"cleared {n} job records")
    return EXIT_OK


def cmd_lint(args) -> int:
    db = _open(args)
    diags = db.registry.lint()
    _emit(args, [{"code": d.code, "table": d.table, "message": d.message} for d in diags], "\n".join(map(str, diags)) or "clean")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relatape", description="Relational workflow engine.")
    p.add_argument("--store", help=f"store directory (default: $RELATAPE_STORE or {DEFAULT_STORE})")
    p.add_argument("--objects", help="object store directory (default: <store>/objects)")
    p.add_argument("--format", choices=("text", "json"), default="text")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="create an empty store")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("declare", help="declare every .djt file in a directory")
    s.add_argument("directory")
    s.add_argument("--schema", help="schema name (default: directory name)")
    s.set_defaults(func=cmd_declare)

    s = sub.add_parser("insert", help="insert json-lines rows")
    s.add_argument("table")
    s.add_argument("rows", help='json-lines file; codec values as {"$file": path, "$codec": id}')
    s.set_defaults(func=cmd_insert)

    s = sub.add_parser("populate", help="run make functions for pending keys")
    s.add_argument("table")
    s.add_argument("--makes", help="module or .py file with register(db)")
    s.add_argument("--limit", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--worker-id")
    s.set_defaults(func=cmd_populate)

    s = sub.add_parser("query", help="evaluate a query pipeline")
    s.add_argument("pipeline")
    s.add_argument("--limit", type=int)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("delete", help="delete rows and everything downstream")
    s.add_argument("table")
    s.add_argument("--where", nargs="*", default=[], help="conditions such as subject_id=s1")
    s.set_defaults(func=cmd_delete)

    s = sub.add_parser("gc", help="remove unreferenced objects")
    s.set_defaults(func=cmd_gc)

    s = sub.add_parser("status", help="job counts per auto-populated table")
    s.add_argument("table", nargs="?")
    s.set_defaults(func=cmd_status)

    s = sub.add_parser("diagram", help="emit the workflow graph as DOT")
    s.add_argument("--schema")
    s.add_argument("--attrs", action="store_true", help="list attributes in each node")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_diagram)

    s = sub.add_parser("lineage", help="origins of table.attribute")
    s.add_argument("attribute")
    s.set_defaults(func=cmd_lineage)

    s = sub.add_parser("clear-errors", help="drop error (and stale) job records")
    s.add_argument("table")
    s.add_argument("--where", nargs="*", default=[])
    s.add_argument("--stale-after", type=float, help="also drop reservations older than this many seconds")
    s.set_defaults(func=cmd_clear_errors)

    s = sub.add_parser("lint", help="workflow-normalization diagnostics")
    s.set_defaults(func=cmd_lint)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SemanticMismatch as exc:
        print(f"semantic mismatch on {exc.attribute!r}", file=sys.stderr)
        print(f"  left origins:  {', '.join(sorted(map(str, exc.left_origins)))}", file=sys.stderr)
        print(f"  right origins: {', '.join(sorted(map(str, exc.right_origins)))}", file=sys.stderr)
        return EXIT_MISMATCH
    except (StorageFailure, OSError) as exc:
        print(f"storage failure: {exc}", file=sys.stderr)
        return EXIT_STORAGE
    except RelatapeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
