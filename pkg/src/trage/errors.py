"""Exception hierarchy.

Every error the library raises on bad *data* derives from :class:`TrageError`;
the CLI maps those to exit code 2.
"""

from __future__ import annotations


class TrageError(Exception):
    """Base class for data errors."""


# ingest
class UnknownMagic(TrageError):
    pass


class CorruptHeader(TrageError):
    pass


class MalformedIP(TrageError):
    pass


class MalformedTransport(TrageError):
    pass


# tokenize / masking
class NotInvertible(TrageError):
    pass


class PlanMismatch(TrageError):
    pass


# encoder / training
class ShapeMismatch(TrageError):
    pass


class EmptyBatch(TrageError):
    pass


class EmptyCorpus(TrageError):
    pass


class TrainingDiverged(TrageError):
    pass


# checkpoints
class BadMagic(TrageError):
    pass


class VersionUnsupported(TrageError):
    pass


class ManifestMismatch(TrageError):
    pass


# classify
class DegenerateDataset(TrageError):
    pass


class LengthMismatch(TrageError):
    pass


class TooFewFlows(UserWarning):
    """A class had fewer flows than the split minimum and was dropped."""


# config
class ConfigError(TrageError):
    pass


class ParseError(ConfigError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class UnknownKey(ConfigError):
    pass


# cli
class OutputBusy(TrageError):
    """Another run holds the output directory's lock."""
