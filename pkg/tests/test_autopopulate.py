import itertools
import threading
import time

import pytest

from relatape.autopopulate import (
    clear_errors,
    errors,
    job_status,
    key_source,
    pending_keys,
    populate,
    reserve,
)
from relatape.errors import InjectedFault, NotAutoPopulated
from relatape.algebra import evaluate


@pytest.fixture
def three(db):
    db.define("p.item", "item_id : int64\n---\nvalue : float64")
    db.define("p.unrelated", "u : int64\n---")
    db.define("p.squared", "-> item\n---\nsq : float64", "computed")
    db.define("p.squared__digit", "-> master\nd : int64\n---", "part")
    db.insert("p.item", [{"item_id": i, "value": float(i)} for i in (1, 2, 3)])
    return db


def square(key, ctx):
    v = ctx.fetch1("item")["value"]
    return {"sq": v * v}, {"digit": [{"d": 0}, {"d": 1}]}


def test_pending_is_set_difference(three):
    populate(three, "p.squared", make=square, restriction={"item_id": 1})
    assert [k["item_id"] for k in pending_keys(three, "p.squared")] == [2, 3]


def test_error_keys_excluded_until_cleared(three):
    def flaky(key, ctx):
        if key["item_id"] == 2:
            raise ValueError("bad item")
        return square(key, ctx)

    rep = populate(three, "p.squared", make=flaky)
    assert rep.as_dict() == {"succeeded": 2, "failed": 1, "skipped": 0}
    assert populate(three, "p.squared", make=flaky).as_dict() == {"succeeded": 0, "failed": 0, "skipped": 0}
    assert pending_keys(three, "p.squared") == []
    errs = errors(three, "p.squared")
    assert len(errs) == 1 and "bad item" in errs[0]["error_message"] and "Traceback" in errs[0]["error_stack"]
    st = job_status(three, "p.squared")
    assert st.as_dict() == {"pending": 0, "reserved": 0, "error": 1, "done": 2}
    assert clear_errors(three, "p.squared") == 1
    assert clear_errors(three, "p.squared") == 0
    assert [k["item_id"] for k in pending_keys(three, "p.squared")] == [2]
    assert populate(three, "p.squared", make=square).succeeded == 1
    assert job_status(three, "p.squared").done == 3


def test_populate_all_then_idempotent(three):
    assert job_status(three, "p.squared").as_dict() == {"pending": 3, "reserved": 0, "error": 0, "done": 0}
    three.register_make("p.squared", square)
    assert populate(three, "p.squared").as_dict() == {"succeeded": 3, "failed": 0, "skipped": 0}
    assert three.count("p.squared__digit") == 6
    assert three.store.count("p.squared~jobs") == 0
    assert populate(three, "p.squared").as_dict() == {"succeeded": 0, "failed": 0, "skipped": 0}


def test_missing_make(three):
    with pytest.raises(NotAutoPopulated):
        populate(three, "p.squared")
    with pytest.raises(NotAutoPopulated):
        populate(three, "p.item", make=square)


def test_reserve_once(three):
    key = {"item_id": 1}
    assert reserve(three, "p.squared", key, "w1") is not None
    assert reserve(three, "p.squared", key, "w2") is None
    assert job_status(three, "p.squared").reserved == 1


def test_reserve_on_error_record_fails(three):
    populate(three, "p.squared", make=lambda k, c: 1 / 0, restriction={"item_id": 1})
    assert reserve(three, "p.squared", {"item_id": 1}, "w") is None


def test_eight_racers_one_key(three):
    barrier = threading.Barrier(8)
    wins = []

    def go(i):
        barrier.wait()
        if reserve(three, "p.squared", {"item_id": 2}, f"w{i}"):
            wins.append(i)

    threads = [threading.Thread(target=go, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(wins) == 1


def test_make_sees_only_ancestors(three):
    def peek(key, ctx):
        ctx.fetch("unrelated")

    rep = populate(three, "p.squared", make=peek, restriction={"item_id": 1})
    assert rep.failed == 1 and "AccessError" in rep.errors[0][1]

    def writes(key, ctx):
        ctx.insert("p.item", [{"item_id": 9, "value": 0.0}])

    rep = populate(three, "p.squared", make=writes, restriction={"item_id": 2})
    assert rep.failed == 1 and "AccessError" in rep.errors[0][1]
    assert three.count("p.item") == 3


def test_fault_between_master_and_parts(three):
    def fail(point):
        if point == "insert.master_written":
            raise InjectedFault(point)

    three.faults = fail
    rep = populate(three, "p.squared", make=square)
    assert rep.failed == 3
    assert three.count("p.squared") == 0 and three.count("p.squared__digit") == 0


def test_two_parents_key_source_matches_cross_product(db):
    db.define("k.a", "a : int64\n---")
    db.define("k.b", "b : varchar(4)\n---")
    db.define("k.ab", "-> a\n-> b\n---\nv : int64", "computed")
    db.insert("k.a", [{"a": i} for i in range(3)])
    db.insert("k.b", [{"b": s} for s in "xy"])
    populate(db, "k.ab", make=lambda k, c: {"v": k["a"]}, restriction={"a": 0, "b": "x"})
    expected = {(a, b) for a, b in itertools.product(range(3), "xy")} - {(0, "x")}
    got = {(k["a"], k["b"]) for k in pending_keys(db, "k.ab")}
    assert got == expected
    st = job_status(db, "k.ab")
    assert st.total == len(evaluate(key_source(db, "k.ab"), db)) == 6


def test_four_workers_hundred_keys(db):
    db.define("w.src", "i : int64\n---")
    db.define("w.out", "-> src\n---\nv : int64", "computed")
    db.insert("w.src", [{"i": i} for i in range(100)])
    calls = {}
    lock = threading.Lock()

    def make(key, ctx):
        with lock:
            calls[key["i"]] = calls.get(key["i"], 0) + 1
        time.sleep(0.0005)
        return {"v": key["i"] * 2}

    rep = populate(db, "w.out", make=make, workers=4, worker_id="t")
    assert rep.succeeded == 100 and db.count("w.out") == 100
    assert max(calls.values()) == 1


def test_stale_reservations_cleared(three):
    reserve(three, "p.squared", {"item_id": 1}, "ghost")
    assert populate(three, "p.squared", make=square).as_dict() == {"succeeded": 2, "failed": 0, "skipped": 0}
    assert job_status(three, "p.squared").reserved == 1
    assert clear_errors(three, "p.squared", stale_after=3600) == 0
    assert clear_errors(three, "p.squared", stale_after=0) == 1
    assert populate(three, "p.squared", make=square).succeeded == 1
