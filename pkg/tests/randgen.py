"""Random schemas, rows and query trees for oracle comparisons.

Query trees are plain tuples:

    ("table", name)
    ("restrict", child, atoms, negate)        atoms: (attr, op, value) or ("in", attr, values)
    ("restrict_rel", child, other, negate)
    ("proj", child, keep, renames, computed)  renames: {new: old}; computed: {name: (text, family)}
    ("join", a, b)
    ("aggr", a, b, {name: (fn, attr)})
    ("union", a, b)
"""

from __future__ import annotations

import random

from relatape.algebra import Cmp, In, TableRef, aggregate, join, project, restrict, union
from relatape.model import NULL, SchemaRegistry, TableBuilder, Tier
from relatape.storage import Database
from relatape.types import FLOAT64, INT64, varchar

from oracles import OracleMismatch, declaration_sites

TYPES = {"int64": INT64, "float64": FLOAT64, "varchar": varchar(8)}
DOMAIN = {"int64": [0, 1, 2, 3], "float64": [0.5, 1.0, 1.5, 2.0], "varchar": ["a", "b", "c"]}
KEY_NAMES = ["id", "k", "x", "code"]
SECONDARY_NAMES = ["v", "w", "score", "label", "x", "n"]


def random_schema(rng: random.Random, max_tables: int = 6, schema: str = "rs") -> Database:
    """Declare up to ``max_tables`` tables with random identifying and
    secondary references, homonyms and renames."""
    db = Database()
    reg = db.registry
    n_tables = rng.randint(1, max_tables)
    for i in range(n_tables):
        name = f"t{i}"
        b = TableBuilder(schema, name, Tier.MANUAL, reg)
        taken: dict[str, frozenset] = {}
        earlier = [d for d in reg]
        parents = rng.sample(earlier, k=min(len(earlier), rng.choice([0, 1, 1, 2])))
        flags = sorted((rng.random() >= 0.75 for _ in parents))  # identifying references first
        for p, dashed in zip(parents, flags):
            primary = not dashed
            renames = {}
            for attr in p.primary_key:
                origin = _origins(reg, p.name, attr)
                if attr in taken and not (taken[attr] & origin):
                    renames[f"{attr}_{p.table_name}"] = attr
                elif rng.random() < 0.15:
                    renames[f"{attr}_via_{p.table_name}"] = attr
            for new, old in renames.items():
                taken[new] = _origins(reg, p.name, old)
            for attr in p.primary_key:
                if attr not in renames.values():
                    taken[attr] = _origins(reg, p.name, attr)
            b.fk(p.name, renames, primary=primary)
        existing = {a.name for a in b._pk + b._sec}
        n_own = rng.choice([0, 1, 1, 2]) if any(a.in_primary_key for a in b._pk) else rng.choice([1, 1, 2])
        for _ in range(n_own):
            choices = [n for n in KEY_NAMES if n not in existing]
            if not choices:
                break
            attr = rng.choice(choices)
            existing.add(attr)
            b.pk(attr, TYPES[rng.choice(list(TYPES))])
        for _ in range(rng.randint(0, 3)):
            choices = [n for n in SECONDARY_NAMES if n not in existing]
            if not choices:
                break
            attr = rng.choice(choices)
            existing.add(attr)
            b.attr(attr, TYPES[rng.choice(list(TYPES))], NULL if rng.random() < 0.3 else None)
        if not b._pk:
            b.pk(next(n for n in KEY_NAMES + [f"key{i}"] if n not in existing), INT64)
        db.declare(b.build())
    return db


def _origins(reg: SchemaRegistry, table: str, attr: str) -> frozenset:
    return declaration_sites(reg, table, attr)


def fill_rows(db: Database, rng: random.Random, max_rows: int = 8) -> dict[str, list[dict]]:
    """Insert random rows (respecting foreign keys) and return them per table."""
    out: dict[str, list[dict]] = {}
    for d in db.registry.topo_order():
        rows: dict[tuple, dict] = {}
        for _ in range(rng.randint(0, max_rows)):
            row = {}
            ok = True
            for fk in d.foreign_keys:
                parent_rows = out[fk.parent]
                if not parent_rows:
                    ok = False
                    break
                pr = rng.choice(parent_rows)
                for c, p in fk.attribute_map:
                    if c in row and row[c] != pr[p]:
                        ok = False
                    row[c] = pr[p]
            if not ok:
                continue
            for a in d.attributes:
                if a.name in row:
                    continue
                if a.nullable and rng.random() < 0.25:
                    row[a.name] = None
                else:
                    row[a.name] = rng.choice(DOMAIN[a.type.name])
            key = tuple(row[n] for n in d.primary_key)
            rows.setdefault(key, row)
        db.insert(d.name, list(rows.values()))
        out[d.name] = [dict(r) for r in db.store.scan(d.name)]
    return out


class ExprGen:
    """Random query trees whose construction the oracle can judge."""

    def __init__(self, db: Database, oracle, rng: random.Random):
        self.db = db
        self.oracle = oracle
        self.rng = rng
        self.tables = [d.name for d in db.registry]
        self.counter = 0

    def fresh(self, prefix: str) -> str:
        self.counter += 1
        return f"{prefix}{self.counter}"

    def cols(self, node):
        return self.oracle.heading(node)

    def generate(self, depth: int = 3):
        rng = self.rng
        if depth <= 0 or rng.random() < 0.25:
            return ("table", rng.choice(self.tables))
        kind = rng.choice(["restrict", "restrict", "restrict_rel", "proj", "proj", "join", "join", "aggr", "union"])
        child = self.generate(depth - 1)
        try:
            cols = self.cols(child)
        except OracleMismatch:
            return child
        if kind == "restrict":
            atoms = [self.atom(cols) for _ in range(rng.randint(1, 2))]
            atoms = [a for a in atoms if a is not None]
            if not atoms:
                return child
            return ("restrict", child, tuple(atoms), rng.random() < 0.3)
        if kind == "restrict_rel":
            return ("restrict_rel", child, self.generate(depth - 1), rng.random() < 0.4)
        if kind == "proj":
            return self.proj(child, cols)
        if kind == "join":
            return ("join", child, self.generate(depth - 1))
        if kind == "aggr":
            other = self.generate(depth - 1)
            try:
                ocols = self.cols(other)
            except OracleMismatch:
                return child
            specs = {}
            for _ in range(rng.randint(1, 2)):
                fn = rng.choice(["count", "sum", "mean", "min", "max"])
                if fn == "count":
                    specs[self.fresh("g")] = ("count", None)
                    continue
                pool = [c for c in ocols if c.family in ("int64", "float64")] if fn in ("sum", "mean") else list(ocols)
                if pool:
                    specs[self.fresh("g")] = (fn, rng.choice(pool).name)
            return ("aggr", child, other, specs)
        # union of two restrictions of the same subtree
        left = ("restrict", child, tuple(a for a in [self.atom(cols)] if a), False)
        right = ("restrict", child, tuple(a for a in [self.atom(cols)] if a), rng.random() < 0.5)
        if not left[2] or not right[2]:
            return child
        return ("union", left, right)

    def atom(self, cols):
        rng = self.rng
        usable = [c for c in cols if c.family in DOMAIN]
        if not usable:
            return None
        c = rng.choice(usable)
        if rng.random() < 0.15:
            return ("in", c.name, tuple(rng.sample(DOMAIN[c.family], 2)))
        op = rng.choice(["=", "=", "!=", "<", "<=", ">", ">="])
        return (c.name, op, rng.choice(DOMAIN[c.family]))

    def proj(self, child, cols):
        rng = self.rng
        secondary = [c.name for c in cols if not c.pk]
        keep = tuple(n for n in secondary if rng.random() < 0.5)
        renames = {}
        if rng.random() < 0.4:
            src = rng.choice([c.name for c in cols])
            if src not in keep:
                renames[self.fresh("r")] = src
        computed = {}
        numeric = [c for c in cols if c.family in ("int64", "float64")]
        strings = [c for c in cols if c.family == "varchar"]
        if rng.random() < 0.6 and numeric:
            a, b = rng.choice(numeric), rng.choice(numeric)
            op = rng.choice(["+", "-", "*", "/"])
            fam = "float64" if op == "/" or "float64" in (a.family, b.family) else "int64"
            computed[self.fresh("c")] = (f"{a.name} {op} {b.name}", fam)
        elif rng.random() < 0.3 and strings:
            computed[self.fresh("c")] = (f"{rng.choice(strings).name} + 'z'", "varchar")
        elif rng.random() < 0.3 and numeric:
            c = rng.choice(numeric)
            computed[self.fresh("c")] = (f"-{c.name} * 2", c.family)
        return ("proj", child, keep, renames, computed)


def build(node, registry, memo=None):
    """Engine expression for a query tree; shared subtrees become shared nodes."""
    memo = {} if memo is None else memo
    key = id(node)
    if key in memo:
        return memo[key][1]
    kind = node[0]
    if kind == "table":
        expr = TableRef.of(registry, node[1])
    elif kind == "restrict":
        atoms = [In(a[1], a[2]) if a[0] == "in" else Cmp(*a) for a in node[2]]
        expr = restrict(build(node[1], registry, memo), atoms, node[3])
    elif kind == "restrict_rel":
        expr = restrict(build(node[1], registry, memo), build(node[2], registry, memo), node[3])
    elif kind == "proj":
        _, child, keep, renames, computed = node
        expr = project(build(child, registry, memo), keep, renames, {k: v[0] for k, v in computed.items()})
    elif kind == "join":
        expr = join(build(node[1], registry, memo), build(node[2], registry, memo))
    elif kind == "aggr":
        expr = aggregate(build(node[1], registry, memo), build(node[2], registry, memo), node[3])
    elif kind == "union":
        expr = union(build(node[1], registry, memo), build(node[2], registry, memo))
    else:
        raise ValueError(kind)
    memo[key] = (node, expr)
    return expr
