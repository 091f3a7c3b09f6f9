"""Run the LC-MS pipeline end to end and look at what it produced.

    python3 demos/lcms_pipeline.py [--store DIR] [--workers N] [--seed S]
"""

import argparse
import tempfile

from relatape import Database, emit_dot, job_status, lcms


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--store", help="directory for the store (default: a temporary one)")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    root = args.store or tempfile.mkdtemp(prefix="lcms-")
    db = Database.open(root)
    reports = lcms.run_pipeline(db, seed=args.seed, workers=args.workers)
    print(f"store: {root}")
    for table, report in reports.items():
        print(f"populate {table:15s} {report}")

    print("\ntable sizes")
    for d in db.registry.topo_order():
        print(f"  {d.name:28s} {d.tier.value:9s} {db.count(d.name):4d}")

    print("\njob status")
    for table in ("acquisition", "spectrum", "peak_detection"):
        print(f"  lcms.{table:15s} {job_status(db, 'lcms.' + table).as_dict()}")

    # peaks per spectrum under the stricter parameter set, joined to the session's instrument
    session = db.table("ms_session")
    peaks = (db.table("peak_detection") & {"param_set": 2}) * session
    print("\npeak counts with param_set 2 (first five)")
    for row in db.fetch(peaks.proj("instrument", "n_peaks"))[:5]:
        print(f"  {row['sample_id']} session {row['session_idx']} scan {row['scan_idx']}: "
              f"{row['n_peaks']} peaks on {row['instrument']}")

    per_session = session.aggr(db.table("acquisition__scan"), scans="count", mean_rt="mean(retention_time)")
    print("\nscans per session")
    for row in db.fetch(per_session):
        print(f"  {row['sample_id']}/{row['session_idx']}: {row['scans']} scans, mean retention {row['mean_rt']:.2f} min")

    reads = db.objects.reads
    spectrum = db.fetch(db.table("spectrum"))[0]["spectrum"]
    print(f"\nlazy reference: {spectrum.describe()}, object reads so far: {db.objects.reads - reads}")
    values = spectrum.materialize()
    print(f"materialized {values.shape[0]} bins, object reads: {db.objects.reads - reads}")

    print(f"\nsnapshot digest: {db.snapshot_digest()}")
    print("\n" + emit_dot(db.registry))


if __name__ == "__main__":
    main()
