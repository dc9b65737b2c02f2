"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto
its documented codes (2 config, 3 data, 4 stage failure).
"""
from __future__ import annotations


class IconoError(Exception):
    exit_code = 4


class ConfigError(IconoError):
    exit_code = 2

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# -- data errors -----------------------------------------------------------

class DataError(IconoError):
    exit_code = 3


class ManifestError(DataError):
    """A manifest row (or header) violates the CSV contract.

    ``row`` is the 1-based line number in the file (the header is line 1).
    ``errors`` holds every problem found in the file, this one included.
    """

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        self.errors: list[ManifestError] = [self]
        prefix = f"row {row}: " if row is not None else ""
        super().__init__(prefix + message)


class MissingColumn(ManifestError):
    pass


class BadLabel(ManifestError):
    pass


class BoxOutOfBounds(ManifestError):
    pass


class DuplicateImageId(ManifestError):
    pass


class InsufficientClassCount(DataError):
    pass


class InsufficientContent(DataError):
    pass


class UndecodableImage(DataError):
    pass


class LengthMismatch(DataError):
    pass


class UnknownLabel(DataError):
    pass


class EmptyMatrix(DataError):
    pass


class SingleClassData(DataError):
    pass


class DimensionMismatch(DataError):
    pass


# -- model / stage errors --------------------------------------------------

class MissingWeights(IconoError):
    pass


class WeightMismatch(IconoError):
    pass


class ArchitectureMismatch(IconoError):
    pass


class ProvenanceError(IconoError):
    pass


class Divergence(IconoError):
    """Training produced a non-finite loss. ``logs`` holds the completed epochs."""

    def __init__(self, message: str, logs=None):
        self.logs = list(logs or [])
        super().__init__(message)


class EmptyLog(IconoError):
    pass
