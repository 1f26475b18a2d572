"""
Exception hierarchy shared by every stage.
The CLI maps any SquashfixError to exit code 2 with a one-line message.
"""


class SquashfixError(Exception):
    """Base class for all domain errors."""


# ─── Dump analysis ────────────────────────────────────────────────────────────

class DumpError(SquashfixError, ValueError):
    pass


# ─── SquashFS ─────────────────────────────────────────────────────────────────

class SquashfsError(SquashfixError):
    pass


class BadMagicError(SquashfsError):
    pass


class UnsupportedError(SquashfsError):
    pass


class MetadataError(SquashfsError):
    """A metadata block failed to inflate or overflowed 8KiB."""

    def __init__(self, message: str, block_offset: int):
        super().__init__(message)
        self.block_offset = block_offset


class TableRangeError(SquashfsError):
    pass


class DirectoryCycleError(SquashfsError):
    pass


# ─── Search / stats / merge / corpus ─────────────────────────────────────────

class SearchError(SquashfixError):
    pass


class StatsError(SquashfixError):
    pass


class MergeError(SquashfixError):
    pass


class LengthMismatchError(MergeError):
    pass


class NoAdmissibleLengthsError(MergeError):
    pass


class CorpusError(SquashfixError):
    pass
