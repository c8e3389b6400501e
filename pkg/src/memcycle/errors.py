"""Exception hierarchy shared by every memcycle module."""
from __future__ import annotations


class MemcycleError(Exception):
    """Base class for all memcycle errors."""


# memory bank

class UnknownTarget(MemcycleError):
    def __init__(self, target_id: str):
        super().__init__(f"no entry with id {target_id!r}")
        self.target_id = target_id


class MalformedAction(MemcycleError):
    pass


class DimensionMismatch(MemcycleError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected dimension {expected}, got {got}")
        self.expected = expected
        self.got = got


class MissingAnchor(MemcycleError):
    pass


class SchemaViolation(MemcycleError):
    """Input file content breaks its schema.

    ``location`` is a line number for JSONL inputs and a JSON path such as
    ``sessions[0].turns[2].speaker`` for JSON documents.
    """

    def __init__(self, message: str, location: int | str | None = None):
        prefix = f"{location}: " if location is not None else ""
        super().__init__(prefix + message)
        self.location = location


class IoFailure(MemcycleError):
    pass


# providers

class ProviderUnavailable(MemcycleError):
    pass


class CassetteExhausted(MemcycleError):
    def __init__(self, role: str, index: int):
        super().__init__(f"cassette has no response #{index} for role {role!r}")
        self.role = role
        self.index = index


class MissingEmbedding(MemcycleError):
    pass


# structured output

class UnparseableResponse(MemcycleError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class SchemaMismatch(MemcycleError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


# prompts

class MissingSlot(MemcycleError):
    def __init__(self, name: str):
        super().__init__(f"missing slot {name!r}")
        self.name = name


class UnknownSlot(MemcycleError):
    def __init__(self, name: str):
        super().__init__(f"unknown slot {name!r}")
        self.name = name


class ConfigError(MemcycleError):
    pass
