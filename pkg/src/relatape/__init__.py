"""Relational workflow engine: tables are workflow steps, rows are artifacts,
foreign keys prescribe execution order.

    >>> from relatape import Database, Tier
    >>> db = Database()
    >>> db.define("lab.subject", "subject_id : varchar(16)\\n---\\nspecies : varchar(32)")
"""

from .algebra import Cmp, In, QueryExpr, TableRef, aggregate, evaluate, join, project, restrict, union
from .autopopulate import clear_errors, job_status, key_source, pending_keys, populate, populate_all, reserve, run_make
from .diagram import emit_dot
from .dsl import DefinitionSource, load_directory, parse_definition, render_definition
from .errors import *  # noqa: F401,F403
from .lineage import LineageGraph, Origin, origins_of, resolve_join_attrs, semantically_compatible
from .model import NULL, SchemaRegistry, TableBuilder, TableDef, Tier, declare_table, dimensions, lint_workflow_normalization, topo_order
from .storage import Database, LocalObjectStore, MemoryObjectStore, MemoryStore, put_object
from .types import Codec, CodecRegistry, LazyRef, default_codecs, parse_type

__version__ = "0.1.0"
