"""LC-MS demonstration pipeline.

Samples -> instrument sessions -> scan acquisition -> smoothed spectra ->
peak detection. Signals are synthetic and fully determined by the seed and
the entity key, so two runs produce identical stores.

    >>> db = Database()
    >>> run_pipeline(db, seed=7)
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
from pathlib import Path

import numpy as np

from .autopopulate import populate
from .dsl import load_directory
from .storage.database import Database

FIXTURE_DIR = Path(__file__).parent / "fixtures" / "lcms"
SCHEMA = "lcms"
N_BINS = 256
MZ = np.linspace(100.0, 1000.0, N_BINS)


def declare(db: Database) -> list:
    return load_directory(FIXTURE_DIR, db.registry, declare=db.declare, schema_name=SCHEMA)


def _rng(seed: int, *parts) -> np.random.Generator:
    text = json.dumps([seed, *parts], sort_keys=True, default=str)
    return np.random.default_rng(int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little"))


def upstream_rows(seed: int = 0, n_samples: int = 3, sessions_per_sample: int = 2) -> dict[str, list[dict]]:
    """Manual and lookup rows for one run."""
    rng = _rng(seed, "upstream")
    organisms = ["mouse", "yeast", "human", "zebrafish"]
    base = dt.datetime(2024, 3, 1, 9, 0, tzinfo=dt.timezone.utc)
    samples = [
        {
            "sample_id": f"s{i + 1}",
            "organism": organisms[int(rng.integers(len(organisms)))],
            "collected": base + dt.timedelta(hours=int(rng.integers(0, 24 * 30))),
        }
        for i in range(n_samples)
    ]
    instruments = [
        {"instrument": "orbitrap", "vendor": "thermo", "resolution": 120000},
        {"instrument": "qtof", "vendor": "agilent", "resolution": 40000},
    ]
    sessions = []
    for s in samples:
        for j in range(sessions_per_sample):
            sessions.append(
                {
                    "sample_id": s["sample_id"],
                    "session_idx": j,
                    "instrument": instruments[int(rng.integers(len(instruments)))]["instrument"],
                    "operator": ["ana", "ben", "chen"][int(rng.integers(3))],
                }
            )
    params = [
        {"param_set": 1, "smooth_window": 3, "threshold": 0.2},
        {"param_set": 2, "smooth_window": 7, "threshold": 0.35},
    ]
    return {
        f"{SCHEMA}.sample": samples,
        f"{SCHEMA}.instrument": instruments,
        f"{SCHEMA}.ms_session": sessions,
        f"{SCHEMA}.processing_param": params,
    }


def insert_upstream(db: Database, seed: int = 0, **kwargs) -> int:
    total = 0
    for table, rows in upstream_rows(seed, **kwargs).items():
        total += db.insert(table, rows).total
    return total


def make_acquisition(seed: int = 0):
    """Imported make: read (synthesize) the scans of one session."""

    def make(key, ctx):
        rng = _rng(seed, "acquisition", key["sample_id"], key["session_idx"])
        n_scans = 3 + int(rng.integers(0, 3))
        centers = rng.uniform(150.0, 950.0, size=4)
        scans = []
        for i in range(n_scans):
            heights = rng.uniform(0.2, 1.0, size=centers.size) * (1.0 + 0.3 * i)
            signal = (heights[:, None] * np.exp(-0.5 * ((MZ[None, :] - centers[:, None]) / 6.0) ** 2)).sum(axis=0)
            signal += np.abs(rng.normal(0.0, 0.02, size=N_BINS))
            scans.append({"scan_idx": i, "retention_time": round(1.5 * i + 0.25, 4), "raw": signal})
        tic = float(sum(float(np.sum(s["raw"])) for s in scans))
        return {"n_scans": n_scans, "tic": tic}, {"scan": scans}

    return make


def make_spectrum(key, ctx):
    """Moving-average smoothing of one scan."""
    raw = ctx.fetch1("acquisition__scan")["raw"].materialize()
    window = int(ctx.fetch1("processing_param")["smooth_window"])
    kernel = np.ones(window) / window
    smooth = np.convolve(raw, kernel, mode="same")
    return {"spectrum": smooth, "base_peak": float(smooth.max())}


def make_peak_detection(key, ctx):
    """Local maxima above ``threshold`` times the base peak."""
    row = ctx.fetch1("spectrum")
    spectrum = row["spectrum"].materialize()
    cutoff = float(ctx.fetch1("processing_param")["threshold"]) * row["base_peak"]
    interior = (spectrum[1:-1] > spectrum[:-2]) & (spectrum[1:-1] >= spectrum[2:]) & (spectrum[1:-1] >= cutoff)
    idx = np.flatnonzero(interior) + 1
    peaks = [{"peak_idx": k, "mz": float(MZ[i]), "intensity": float(spectrum[i])} for k, i in enumerate(idx)]
    return {"n_peaks": len(peaks)}, {"peak": peaks}


def register(db: Database, seed: int = 0) -> None:
    """Attach the make functions (also the CLI's ``--makes`` hook)."""
    db.register_make(f"{SCHEMA}.acquisition", make_acquisition(seed))
    db.register_make(f"{SCHEMA}.spectrum", make_spectrum)
    db.register_make(f"{SCHEMA}.peak_detection", make_peak_detection)


def run_pipeline(db: Database, seed: int = 0, workers: int = 1) -> dict:
    """Declare, insert, and populate the whole pipeline; returns populate reports."""
    declare(db)
    register(db, seed)
    insert_upstream(db, seed)
    out = {}
    for table in ("acquisition", "spectrum", "peak_detection"):
        out[table] = populate(db, f"{SCHEMA}.{table}", workers=workers).as_dict()
    return out


def write_rows_files(directory: str | Path, seed: int = 0) -> dict[str, Path]:
    """Write the upstream rows as json-lines files for ``relatape insert``."""
    from .types import to_json

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    scratch = Database()
    declare(scratch)
    for table, rows in upstream_rows(seed).items():
        d = scratch.registry[table]
        path = directory / f"{d.table_name}.jsonl"
        with open(path, "w", encoding="utf-8") as f:
            for r in rows:
                f.write(json.dumps({k: to_json(d.attribute(k).type, v) for k, v in r.items()}, sort_keys=True) + "\n")
        paths[table] = path
    return paths
