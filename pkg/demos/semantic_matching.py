"""Why namesake attributes are matched by lineage, not by name.

Two acquisition tables both call their key ``id``. Joining them by name would
silently pair unrelated recordings; the engine refuses and says which
attribute to rename.
"""

from relatape import Database, SemanticMismatch, origins_of


def main():
    db = Database()
    db.define("lab.subject", "subject_id : varchar(16)\n---\nspecies : varchar(32)")
    db.define("lab.ephys", "-> subject\nid : int64\n---\nts : float64   # seconds since session start")
    db.define("lab.video", "-> subject\nid : int64\n---\nts : float64   # frame timestamp")
    db.insert("lab.subject", [{"subject_id": "m1", "species": "mouse"}])
    db.insert("lab.ephys", [{"subject_id": "m1", "id": i, "ts": 0.5 * i} for i in range(3)])
    db.insert("lab.video", [{"subject_id": "m1", "id": i, "ts": 0.04 * i} for i in range(3)])

    ephys, video = db.table("ephys"), db.table("video")
    print("origins of ephys.subject_id:", sorted(map(str, origins_of(ephys, "subject_id"))))
    print("origins of video.subject_id:", sorted(map(str, origins_of(video, "subject_id"))))
    print("origins of ephys.id:        ", sorted(map(str, origins_of(ephys, "id"))))
    print("origins of video.id:        ", sorted(map(str, origins_of(video, "id"))))

    try:
        ephys * video
    except SemanticMismatch as exc:
        print(f"\nephys * video refused: {exc}")

    # renaming id alone is not enough: ts is a homonym too, and it is not silently dropped
    try:
        ephys.proj("ts", ephys_id="id") * video.proj("ts", frame="id")
    except SemanticMismatch as exc:
        print(f"\nafter renaming id, still refused on {exc.attribute!r}")

    both = ephys.proj(ephys_id="id", ephys_ts="ts") * video.proj(frame="id", frame_ts="ts")
    rows = db.fetch(both)
    print(f"\nrenamed join matches on subject_id only: {len(rows)} rows, key {both.primary_key}")
    for r in rows[:4]:
        print("  ", r)


if __name__ == "__main__":
    main()
