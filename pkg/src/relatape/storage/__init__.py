"""Tuple store, object store, and the database that keeps them consistent."""

from .database import Database, DeleteReport, GcReport, InsertReport, job_table_name, open_database
from .objects import LocalObjectStore, MemoryObjectStore, ObjectStore, put_object, schema_path
from .relational import MemoryStore, RelationalStore, TableSchema

__all__ = [
    "Database",
    "DeleteReport",
    "GcReport",
    "InsertReport",
    "LocalObjectStore",
    "MemoryObjectStore",
    "MemoryStore",
    "ObjectStore",
    "RelationalStore",
    "TableSchema",
    "job_table_name",
    "open_database",
    "put_object",
    "schema_path",
]
