import json

import pytest

from relatape import Database, lcms
from relatape.cli import main

from oracles import orphans


def run(capsys, store, *argv):
    code = main(["--store", str(store), *argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def run_json(capsys, store, *argv):
    code, out, err = run(capsys, store, "--format", "json", *argv)
    return code, json.loads(out) if out.strip() else None


@pytest.fixture
def lab_dir(tmp_path):
    d = tmp_path / "lab"
    d.mkdir()
    (d / "subject.djt").write_text("subject_id : varchar(16)\n---\nspecies : varchar(32)\n")
    (d / "session.djt").write_text("-> Subject\nsession_id : int64\n---\n")
    (d / "scan.djt").write_text("-> Session\nscan_idx : int64\n---\nraw = null : <f64_array>\n")
    (d / "scan_size.djt").write_text("@tier computed\n-> Scan\n---\nn : int64\n")
    rows = tmp_path / "rows"
    rows.mkdir()
    (rows / "subject.jsonl").write_text('{"subject_id": "s1", "species": "mouse"}\n{"subject_id": "s2", "species": "rat"}\n')
    (rows / "session.jsonl").write_text("".join(json.dumps({"subject_id": "s1", "session_id": i}) + "\n" for i in (1, 2)))
    (rows / "scan.jsonl").write_text("".join(
        json.dumps({"subject_id": "s1", "session_id": 1, "scan_idx": i, "raw": [1.0, 2.0]}) + "\n" for i in range(3)
    ))
    (rows / "bad.jsonl").write_text('{"subject_id": "s1", "session_id": 3}\n{"subject_id": "nobody", "session_id": 1}\n')
    (tmp_path / "makes.py").write_text(
        "def register(db):\n"
        "    db.register_make('lab.scan_size', lambda key, ctx: {'n': ctx.fetch1('scan')['raw'].shape[0]})\n"
    )
    return tmp_path


def test_init_twice(tmp_path, capsys):
    store = tmp_path / "s"
    code, payload = run_json(capsys, store, "init")
    assert code == 0 and payload["created"] and (store / "registry.manifest").exists()
    code, payload = run_json(capsys, store, "init")
    assert code == 0 and not payload["created"]


def test_commands_need_an_initialized_store(tmp_path, capsys):
    code, _, err = run(capsys, tmp_path / "nothing", "status")
    assert code == 3 and "init" in err


def test_init_where_directory_cannot_exist(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, blocker / "store", "init")
    assert code == 3 and "storage failure" in err


def test_full_session(lab_dir, capsys):
    store = lab_dir / "store"
    run(capsys, store, "init")
    code, payload = run_json(capsys, store, "declare", str(lab_dir / "lab"))
    assert code == 0 and payload["declared"] == 4 and payload["lint"] == []
    code, payload = run_json(capsys, store, "declare", str(lab_dir / "lab"))
    assert payload["new"] == 0

    rows = lab_dir / "rows"
    for t in ("subject", "session", "scan"):
        code, payload = run_json(capsys, store, "insert", f"lab.{t}", str(rows / f"{t}.jsonl"))
        assert code == 0
    assert payload["inserted"] == 3 and payload["objects_written"] == 1
    code, payload = run_json(capsys, store, "insert", "lab.subject", str(rows / "subject.jsonl"))
    assert payload["inserted"] == 0 and payload["skipped"] == 2
    code, _, err = run(capsys, store, "insert", "lab.session", str(rows / "bad.jsonl"))
    assert code == 1 and "row 1" in err

    code, payload = run_json(capsys, store, "status")
    assert payload["lab.scan_size"]["pending"] == 3
    code, _, err = run(capsys, store, "populate", "lab.scan_size")
    assert code == 1 and "NotAutoPopulated" in err
    code, payload = run_json(capsys, store, "populate", "lab.scan_size", "--makes", str(lab_dir / "makes.py"), "--workers", "2")
    assert (payload["succeeded"], payload["failed"]) == (3, 0)
    assert code == 0

    code, payload = run_json(capsys, store, "query", "lab.session | aggr lab.scan count()->n")
    assert [r["n"] for r in payload] == [3, 0]
    code, payload = run_json(capsys, store, "query", "subject | restrict subject_id=s1")
    assert payload == [{"subject_id": "s1", "species": "mouse"}]
    code, payload = run_json(capsys, store, "query", "session | exclude scan")
    assert [r["session_id"] for r in payload] == [2]
    code, payload = run_json(capsys, store, "query", "scan | proj r=raw")
    assert payload[0]["r"]["shape"] == [2]

    code, payload = run_json(capsys, store, "lineage", "lab.scan.subject_id")
    assert payload["origins"] == ["lab.subject.subject_id"]
    code, out, _ = run(capsys, store, "diagram")
    assert out.startswith("digraph") and out.count("->") == 3

    code, payload = run_json(capsys, store, "delete", "lab.subject", "--where", "subject_id=s1")
    assert payload["rows_removed"] == {"lab.scan": 3, "lab.scan_size": 3, "lab.session": 2, "lab.subject": 1}
    code, payload = run_json(capsys, store, "gc")
    assert payload["deleted"] == 1
    assert orphans(Database.open(store)) == []
    code, payload = run_json(capsys, store, "lint")
    assert payload == []


def test_semantic_mismatch_exit_code(tmp_path, capsys):
    d = tmp_path / "h"
    d.mkdir()
    (d / "ephys.djt").write_text("id : int64\n---\n")
    (d / "video.djt").write_text("id : int64\n---\n")
    store = tmp_path / "store"
    run(capsys, store, "init")
    run(capsys, store, "declare", str(d))
    code, _, err = run(capsys, store, "query", "ephys | join video")
    assert code == 2
    assert "'id'" in err and "h.ephys.id" in err and "h.video.id" in err


def test_errors_and_clear(lab_dir, capsys):
    store = lab_dir / "store"
    run(capsys, store, "init")
    run(capsys, store, "declare", str(lab_dir / "lab"))
    for t in ("subject", "session", "scan"):
        run(capsys, store, "insert", f"lab.{t}", str(lab_dir / "rows" / f"{t}.jsonl"))
    broken = lab_dir / "broken.py"
    broken.write_text("def register(db):\n    db.register_make('lab.scan_size', lambda k, c: 1 / 0)\n")
    code, _, out = run(capsys, store, "populate", "lab.scan_size", "--makes", str(broken))
    assert code == 1
    code, payload = run_json(capsys, store, "status", "lab.scan_size")
    assert payload["lab.scan_size"]["error"] == 3
    assert "ZeroDivisionError" in payload["lab.scan_size"]["jobs"][0]["error_message"]
    code, payload = run_json(capsys, store, "clear-errors", "lab.scan_size", "--where", "scan_idx=1")
    assert payload["cleared"] == 1


def test_lcms_via_cli_matches_library(tmp_path, capsys):
    store = tmp_path / "store"
    run(capsys, store, "init")
    run(capsys, store, "declare", str(lcms.FIXTURE_DIR), "--schema", "lcms")
    paths = lcms.write_rows_files(tmp_path / "rows", seed=0)
    for table in ("lcms.instrument", "lcms.processing_param", "lcms.sample", "lcms.ms_session"):
        assert run(capsys, store, "insert", table, str(paths[table]))[0] == 0
    for table in ("acquisition", "spectrum", "peak_detection"):
        assert run(capsys, store, "populate", f"lcms.{table}", "--makes", "relatape.lcms", "--workers", "3")[0] == 0
    ref = Database()
    lcms.run_pipeline(ref, seed=0)
    got = Database.open(store)
    assert got.snapshot() == ref.snapshot()
