import itertools

import pytest

from relatape import Database, lcms
from relatape.errors import CycleError, InvalidDefinition, PartWithoutMaster, UnknownParent
from relatape.model import SchemaRegistry, TableBuilder, Tier
from relatape.types import INT64, varchar


def chain(db):
    db.define("lab.subject", "subject_id : varchar(16)\n---\nspecies : varchar(32)")
    db.define("lab.session", "-> subject\nsession_id : int64\n---\nnotes = '' : varchar(64)")
    db.define("lab.scan", "-> session\nscan_idx : int64\n---")
    return db


def test_declare_root():
    reg = SchemaRegistry()
    reg.declare(TableBuilder("lab", "subject", Tier.MANUAL, reg).pk("subject_id", varchar(16)).build())
    assert len(reg) == 1 and reg.edges == []


def test_identity_inheritance_adds_solid_edge(db):
    chain(db)
    assert db.registry["lab.session"].primary_key == ("subject_id", "session_id")
    assert ("lab.session", "lab.subject", True) in db.registry.edges


def test_redeclare_identical_is_noop_and_different_fails(db):
    chain(db)
    before = db.registry.manifest()
    db.define("lab.session", "-> subject\nsession_id : int64\n---\nnotes = '' : varchar(64)")
    assert db.registry.manifest() == before
    with pytest.raises(InvalidDefinition):
        db.define("lab.session", "-> subject\nsession_id : int64\n---")


def test_unknown_parent(db):
    from relatape.model import Attribute, ForeignKey, TableDef

    d = TableDef(
        "lab",
        "orphan",
        Tier.MANUAL,
        primary_attrs=(Attribute("subject_id", varchar(16), in_primary_key=True, fk=0),),
        foreign_keys=(ForeignKey("lab.subject", (("subject_id", "subject_id"),), True),),
    )
    with pytest.raises(UnknownParent):
        db.registry.declare(d)


def test_self_reference_is_a_cycle(db):
    chain(db)
    from relatape.model import ForeignKey

    d = db.registry["lab.subject"]
    looped = d.__class__(d.schema_name, d.table_name, d.tier, d.comment, d.primary_attrs, d.secondary_attrs,
                         (ForeignKey("lab.subject", (("subject_id", "subject_id"),), False),))
    with pytest.raises(CycleError):
        db.registry.declare(looped)


def test_redeclare_with_descendant_parent_is_a_cycle(db):
    chain(db)
    d = db.registry["lab.subject"]
    reg = db.registry
    b = TableBuilder("lab", "subject", Tier.MANUAL, reg).pk("subject_id", varchar(16)).fk("lab.scan", {
        "s_subject": "subject_id", "s_session": "session_id", "s_scan": "scan_idx"}, primary=False)
    with pytest.raises(CycleError) as info:
        reg.declare(b.build())
    assert "lab.subject" in info.value.tables and d is reg["lab.subject"]


def test_invalid_names():
    reg = SchemaRegistry()
    with pytest.raises(InvalidDefinition):
        reg.declare(TableBuilder("lab", "Bad", Tier.MANUAL, reg).pk("a", INT64).build())
    with pytest.raises(InvalidDefinition):
        reg.declare(TableBuilder("lab", "t", Tier.MANUAL, reg).pk("a" * 65, INT64).build())
    with pytest.raises(InvalidDefinition):
        reg.declare(TableBuilder("lab", "t", Tier.MANUAL, reg).attr("a", INT64).build())


def test_topo_chain_and_roots(db):
    chain(db)
    db.define("lab.rig", "rig_id : int64\n---")
    assert [d.table_name for d in db.registry.topo_order()] == ["subject", "session", "scan", "rig"]


def _diamond():
    reg = SchemaRegistry()
    reg.declare(TableBuilder("d", "a", Tier.MANUAL, reg).pk("a_id", INT64).build())
    reg.declare(TableBuilder("d", "b", Tier.MANUAL, reg).fk("d.a").pk("b_id", INT64).build())
    reg.declare(TableBuilder("d", "c", Tier.MANUAL, reg).fk("d.a").pk("c_id", INT64).build())
    reg.declare(TableBuilder("d", "e", Tier.MANUAL, reg).fk("d.b").fk("d.c").build())
    return reg


def test_diamond_topo_is_a_valid_sort_and_breaks_ties_by_declaration():
    reg = _diamond()
    names = [d.name for d in reg]
    edges = [(p, c) for c, p, _ in reg.edges]
    valid = [
        list(p)
        for p in itertools.permutations(names)
        if all(p.index(parent) < p.index(child) for parent, child in edges)
    ]
    got = [d.name for d in reg.topo_order()]
    assert got in valid
    assert got == ["d.a", "d.b", "d.c", "d.e"]
    assert len(valid) == 2


def test_dimensions(db):
    chain(db)
    db.define("lab.stats", "-> scan\n---\nmean : float64", Tier.COMPUTED)
    dims = db.registry.dimensions()
    assert {"lab.subject", "lab.session", "lab.scan"} <= dims
    assert "lab.stats" not in dims


def test_lint_rules(db):
    db.define("lab.orphan", "k : int64\n---\nv : float64", Tier.COMPUTED)
    db.define("lab.note", "-> orphan\nnote_id : int64\n---", Tier.MANUAL)
    codes = {(d.code, d.table) for d in db.registry.lint()}
    assert ("no-upstream", "lab.orphan") in codes
    assert ("direction-inversion", "lab.note") in codes
    messages = [str(d) for d in db.registry.lint()]
    assert any("has no upstream dependency" in m for m in messages)


def test_lint_native_type(db):
    db.define("lab.legacy", "k : bigint\n---")
    assert [d.code for d in db.registry.lint()] == ["native-type"]


def test_lcms_fixture_is_lint_clean():
    db = Database()
    lcms.declare(db)
    assert len(db.registry) == 9
    assert db.registry.lint() == []


def test_part_rules(db):
    chain(db)
    db.define("lab.scan__frame", "-> master\nframe_idx : int64\n---", Tier.PART)
    part = db.registry["lab.scan__frame"]
    assert part.master == "lab.scan"
    assert part.primary_key[:3] == db.registry["lab.scan"].primary_key
    with pytest.raises(PartWithoutMaster):
        db.define("lab.ghost__frame", "-> subject\nframe_idx : int64\n---", Tier.PART)
    with pytest.raises(InvalidDefinition):
        db.define("lab.scan__note", "note_id : int64\n---", Tier.MANUAL)
