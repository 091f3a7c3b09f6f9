"""Exception hierarchy.

Every error raised by the engine derives from :class:`RelatapeError`. The CLI
maps the three families below onto stable exit codes:

* :class:`SemanticMismatch` -> 2
* :class:`StorageFailure` -> 3
* everything else -> 1
"""

from __future__ import annotations


class RelatapeError(Exception):
    """Base class for all engine errors."""


# -- schema ------------------------------------------------------------------


class SchemaError(RelatapeError):
    pass


class CycleError(SchemaError):
    def __init__(self, tables, message: str | None = None):
        self.tables = list(tables)
        super().__init__(message or "foreign keys form a cycle: " + " -> ".join(self.tables))


class UnknownParent(SchemaError):
    pass


class DuplicateAttribute(SchemaError):
    pass


class PartWithoutMaster(SchemaError):
    pass


class InvalidDefinition(SchemaError):
    pass


class UnknownTable(SchemaError):
    pass


class UnknownSchema(SchemaError):
    pass


class ParseError(SchemaError):
    def __init__(self, message: str, line: int, column: int = 1, source: str | None = None):
        self.line = line
        self.column = column
        self.source = source
        where = f"{source}:" if source else "line "
        super().__init__(f"{where}{line}:{column}: {message}")
        self.message = message


# -- types ---------------------------------------------------------------------


class TypeMismatch(RelatapeError):
    pass


class UnknownCodec(RelatapeError):
    pass


class DuplicateCodec(RelatapeError):
    pass


class CorruptPayload(RelatapeError):
    pass


# -- queries -------------------------------------------------------------------


class QueryError(RelatapeError):
    pass


class UnknownAttribute(QueryError):
    pass


class NameCollision(QueryError):
    pass


class UnknownAggregate(QueryError):
    pass


class HeadingMismatch(QueryError):
    pass


class ConflictingDuplicate(QueryError):
    pass


class SemanticMismatch(QueryError):
    """Namesake attributes of two operands have disjoint lineage."""

    def __init__(self, attribute: str, left_origins, right_origins):
        self.attribute = attribute
        self.left_origins = frozenset(left_origins)
        self.right_origins = frozenset(right_origins)
        left = ", ".join(sorted(map(str, self.left_origins)))
        right = ", ".join(sorted(map(str, self.right_origins)))
        super().__init__(
            f"attribute {attribute!r} has unrelated lineage in the two operands "
            f"(left: {{{left}}}, right: {{{right}}}); rename one side with proj()"
        )


# -- storage ---------------------------------------------------------------------


class IntegrityError(RelatapeError):
    def __init__(self, message: str, row_index: int | None = None):
        self.row_index = row_index
        if row_index is not None:
            message = f"row {row_index}: {message}"
        super().__init__(message)


class FKViolation(IntegrityError):
    pass


class DuplicatePrimaryKey(IntegrityError):
    pass


class InvalidOperation(RelatapeError):
    pass


class StorageFailure(RelatapeError):
    pass


class InjectedFault(StorageFailure):
    """Raised by fault injectors at instrumented commit points."""


# -- jobs ------------------------------------------------------------------------


class NotAutoPopulated(RelatapeError):
    pass


class MakeError(RelatapeError):
    pass


class AccessError(RelatapeError):
    """A make callback read a table that is not upstream of its target."""
