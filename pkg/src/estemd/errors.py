"""Exception hierarchy. Every error carries a stable ``code`` used on the wire."""
from __future__ import annotations


class EstemdError(Exception):
    code = "error"
    #: process exit code used by the CLI when this error escapes a subcommand
    exit_code = 1

    def __init__(self, message: str = "", **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> dict:
        return {"code": self.code, "msg": self.message}


class InvalidNameError(EstemdError):
    code = "invalid_name"


class SchemaError(EstemdError):
    code = "invalid_schema"


class ValidationError(EstemdError):
    code = "validation_failed"

    def __init__(self, violations, message: str | None = None):
        self.violations = list(violations)
        super().__init__(message or "; ".join(str(v) for v in self.violations))


class UnknownTopicError(EstemdError):
    code = "unknown_topic"


class UnknownPartitionError(EstemdError):
    code = "unknown_partition"


class DuplicateTopicError(EstemdError):
    code = "duplicate_topic"


class OffsetOutOfRangeError(EstemdError):
    code = "offset_out_of_range"

    def __init__(self, requested: int, earliest: int):
        super().__init__(
            f"offset {requested} is below the earliest available offset {earliest}"
        )
        self.requested = requested
        self.earliest = earliest


class OffsetBeyondEndError(EstemdError):
    code = "offset_beyond_end"


class StorageError(EstemdError):
    code = "storage_error"


class CorruptLogError(StorageError):
    code = "corrupt_log"


class TransformError(EstemdError):
    code = "transform_failed"

    def __init__(self, index: int, reason: str):
        super().__init__(f"transform #{index} failed: {reason}")
        self.index = index
        self.reason = reason


class RecordParseError(EstemdError):
    code = "parse_failed"

    def __init__(self, message: str, position: int | None = None, field: str | None = None):
        super().__init__(message)
        self.position = position
        self.field = field


class EqlError(EstemdError):
    code = "eql_error"


class EqlSyntaxError(EqlError):
    code = "syntax_error"

    def __init__(self, message: str, position: int, expected=()):
        super().__init__(f"{message} at byte {position}")
        self.position = position
        self.expected = tuple(expected)


class SemanticError(EqlError):
    code = "semantic_error"


class UnknownQueryError(EqlError):
    code = "unknown_query"


class NoDataError(EstemdError):
    code = "no_data"


class ProtocolError(EstemdError):
    code = "bad_frame"


class ConnectionClosedError(EstemdError):
    code = "connection_closed"
    exit_code = 2


class RemoteError(EstemdError):
    """An error response relayed from the server, keeping its code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
