"""Exception hierarchy shared across the toolkit.

Three broad families map onto the CLI exit codes: configuration problems
(exit 1), malformed or degenerate input data (exit 2), and numerical
failures during computation (exit 3).
"""


class SzdlError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SzdlError):
    """Invalid configuration: bad hyperparameters, unknown keys, bad flags."""


class DataError(SzdlError):
    """Malformed input files or degenerate datasets."""


class NumericalError(SzdlError):
    """Non-finite values or degenerate statistics produced at run time."""


# --- file formats (NIfTI and checkpoints share the magic check) ---

class BadMagic(DataError):
    pass


class UnsupportedDatatype(DataError):
    pass


class Truncated(DataError):
    pass


class DimMismatch(DataError):
    pass


class VersionMismatch(DataError):
    pass


class CorruptPayload(DataError):
    pass


# --- manifests and splits ---

class EmptyManifest(DataError):
    pass


class SingleClass(DataError):
    pass


class UnknownSite(DataError):
    pass


class EmptySplit(DataError):
    pass


class SingleClassSplit(DataError):
    pass


# --- phantom generation ---

class SizeTooSmall(ConfigError):
    pass


# --- tensor engine ---

class ShapeMismatch(SzdlError):
    pass


class OddExtent(SzdlError):
    pass


class DegenerateBatch(SzdlError):
    pass


class BadProbability(ConfigError):
    pass


class BadLabel(DataError):
    pass


class DetachedOutput(SzdlError):
    pass


# --- model configuration ---

class IndivisibleSERatio(ConfigError):
    pass


class BadInputExtent(ConfigError):
    pass


# --- optimizer ---

class NonFiniteGradient(NumericalError):
    pass


# --- evaluation ---

class MisalignedInputs(DataError):
    pass


class TooFewCases(DataError):
    pass


# --- CAM aggregation ---

class EmptyList(DataError):
    pass


class MixedExtents(DataError):
    pass
