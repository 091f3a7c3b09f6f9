import pytest

from relatape import Database, lcms
from relatape.errors import SemanticMismatch, UnknownAttribute
from relatape.lineage import LineageGraph, Origin, origins_of, resolve_join_attrs, semantically_compatible

from oracles import declaration_sites


def test_declared_and_inherited(lab):
    g = LineageGraph(lab.registry)
    assert g.origins("lab.subject", "subject_id") == {Origin("lab", "subject", "subject_id")}
    assert g.origins("lab.session", "subject_id") == {Origin("lab", "subject", "subject_id")}
    assert g.origins("lab.scan", "session_id") == {Origin("lab", "session", "session_id")}
    with pytest.raises(UnknownAttribute):
        g.origins("lab.scan", "nope")


def test_rename_preserves_and_compute_is_fresh(lab):
    scan = lab.table("lab.scan")
    q = scan.proj(length="duration", twice="duration * 2")
    assert origins_of(q, "length") == origins_of(scan, "duration")
    assert not semantically_compatible(origins_of(q, "twice"), origins_of(scan, "duration"))


def test_compatibility_is_intersection():
    a = Origin("s", "a", "id")
    b = Origin("s", "b", "id")
    assert semantically_compatible({a}, {a})
    assert not semantically_compatible({a}, {b})
    assert semantically_compatible({a, b}, {b})


def test_diamond_inheritance_shares_root():
    db = Database()
    db.define("d.root", "root_id : int64\n---")
    db.define("d.left", "-> root\nl : int64\n---")
    db.define("d.right", "-> root\nr : int64\n---")
    db.define("d.both", "-> left\n-> right\n---")
    g = LineageGraph(db.registry)
    assert g.origins("d.both", "root_id") == g.origins("d.root", "root_id")
    resolve_join_attrs(db.table("d.both").heading, db.table("d.root").heading)


def test_renamed_diamond_unions_origins():
    db = Database()
    db.define("d.a", "x : int64\n---")
    db.define("d.b", "x : int64\n---")
    db.define("d.c", "-> a\n-> b (y = x)\n---")
    db.define("d.e", "k : int64\n---\n-> a\n-> c (x2 = x)")
    assert origins_of("d.c", "y", db.registry) == {Origin("d", "b", "x")}
    assert declaration_sites(db.registry, "d.e", "x2") == {("d", "a", "x")}


def test_join_attrs_examples(lab):
    session, scan = lab.table("lab.session"), lab.table("lab.scan")
    assert resolve_join_attrs(session.heading, scan.heading) == ["subject_id", "session_id"]


def test_homonyms_rejected_even_alongside_compatible_names():
    db = Database()
    db.define("h.subject", "subject_id : int64\n---")
    db.define("h.ephys", "-> subject\nid : int64\n---\nts : float64")
    db.define("h.video", "-> subject\nid : int64\n---\nts : float64")
    with pytest.raises(SemanticMismatch) as info:
        resolve_join_attrs(db.table("h.ephys").heading, db.table("h.video").heading)
    assert info.value.attribute == "id"
    ephys = db.table("h.ephys").proj("ts", ephys_id="id")
    video = db.table("h.video").proj("ts", video_id="id")
    with pytest.raises(SemanticMismatch) as info:
        resolve_join_attrs(ephys.heading, video.heading)
    assert info.value.attribute == "ts"
    assert info.value.left_origins.isdisjoint(info.value.right_origins)
    ephys = db.table("h.ephys").proj(ephys_id="id", ephys_ts="ts")
    assert resolve_join_attrs(ephys.heading, video.heading) == ["subject_id"]


def test_lineage_matches_path_walk_on_fixture():
    db = Database()
    lcms.declare(db)
    for (table, attr), origins in LineageGraph(db.registry).items():
        expected = declaration_sites(db.registry, table, attr)
        assert {(o.schema_name, o.table_name, o.attribute_name) for o in origins} == expected
