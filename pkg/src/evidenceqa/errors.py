"""Exception kinds shared across the evidence pipeline."""

from __future__ import annotations


class EvidenceError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(EvidenceError, ValueError):
    """A caller-supplied value violates an operation's precondition."""


class InvariantError(EvidenceError):
    """An internal consistency check failed; never surfaced to model clients."""


class NotFoundError(EvidenceError):
    """A requested video ID is not present in the database."""


class ValidationError(EvidenceError):
    """Stored or ingested data violates a structural invariant."""


class DimensionError(EvidenceError):
    """An embedding's length does not match the store's dimension."""


class SchemaError(EvidenceError):
    """A model reply did not match the demanded structured schema.

    The offending raw text is kept on ``raw_text`` for diagnosis.
    """

    def __init__(self, message: str, raw_text: str | None = None):
        super().__init__(message)
        self.raw_text = raw_text


class BuildError(EvidenceError):
    """Evidence construction failed after bounded retries.

    ``chunk_index`` names the first failing chunk; ``failures`` lists every
    ``(chunk_index, message)`` pair when several chunks failed.
    """

    def __init__(self, message: str, chunk_index: int,
                 failures: list[tuple[int, str]] | None = None):
        super().__init__(message)
        self.chunk_index = chunk_index
        self.failures = failures if failures is not None else [(chunk_index, message)]


class PersistenceError(EvidenceError):
    """Base for on-disk format errors; carries a location when known.

    ``line`` is 1-based for line-delimited files, ``offset`` is a byte
    offset for binary files.
    """

    def __init__(self, message: str, *, line: int | None = None,
                 offset: int | None = None):
        super().__init__(message)
        self.line = line
        self.offset = offset


class FormatError(PersistenceError):
    """The file is not in the expected format (bad magic, bad structure)."""


class VersionError(PersistenceError):
    """The file declares an unsupported format version."""


class TruncatedError(PersistenceError):
    """The file ends in the middle of a record."""


class ParseError(PersistenceError):
    """A line of a line-delimited file could not be decoded."""


class ClientError(EvidenceError):
    """A model endpoint call failed (timeout, transport, or HTTP error)."""

    def __init__(self, message: str, *, retryable: bool = True,
                 status: int | None = None):
        super().__init__(message)
        self.retryable = retryable
        self.status = status


class StrictMockError(EvidenceError):
    """A mock client received a request with no matching fixture entry.

    Deliberately not a :class:`ClientError`: a missing fixture is a test
    authoring bug and must fail loudly instead of triggering retries or
    answer fallbacks.
    """


class ProtocolError(EvidenceError):
    """A model reply violated the wire contract (shape or dimension drift)."""


class AnswerParseError(EvidenceError):
    """The answerer's reply matched none of the offered choices."""

    def __init__(self, message: str, raw_reply: str):
        super().__init__(message)
        self.raw_reply = raw_reply


class InputError(EvidenceError):
    """Scoring input is inconsistent (unknown or duplicated question IDs)."""
