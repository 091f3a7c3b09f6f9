import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

from relatape import Database  # noqa: E402


@pytest.fixture
def db():
    return Database()


@pytest.fixture
def lab(db):
    """subject <- session <- scan, plus a part table on scan."""
    db.define("lab.subject", "subject_id : varchar(16)\n---\nspecies : varchar(32)")
    db.define("lab.session", "-> subject\nsession_id : int64\n---\nnotes = '' : varchar(64)")
    db.define("lab.scan", "-> session\nscan_idx : int64\n---\nduration : float64\nraw = null : <f64_array>")
    return db
