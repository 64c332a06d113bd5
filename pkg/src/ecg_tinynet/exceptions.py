"""Exception hierarchy.

Every error the library raises derives from :class:`EcgError`, and the CLI
maps the three families below onto its exit codes (2 config, 3 data,
4 numeric).
"""


class EcgError(Exception):
    pass


class ConfigError(EcgError, ValueError):
    """Invalid configuration or arguments (CLI exit 2)."""


class DataError(EcgError, ValueError):
    """Unreadable, inconsistent or missing data (CLI exit 3)."""


class NumericError(EcgError, ArithmeticError):
    """Training or inference produced non-finite numbers (CLI exit 4)."""


# ecg-io
class MalformedHeader(DataError):
    pass


class MissingDx(DataError):
    pass


class SizeMismatch(DataError):
    pass


class UnknownEncoding(DataError):
    pass


class EmptyDataset(DataError):
    pass


class ClassTooSmall(UserWarning):
    """A class has fewer records than folds; the class is kept."""


# dsp
class NonIntegerRatio(ConfigError):
    pass


class InvalidCutoff(ConfigError):
    pass


# tensor core / model
class ShapeMismatch(EcgError, ValueError):
    pass


class UninitializedState(EcgError, RuntimeError):
    pass


class IndexOutOfRange(EcgError, IndexError):
    pass


class InvalidConfig(ConfigError):
    pass


class UnknownVariant(ConfigError):
    pass


# training
class NonFiniteGradient(NumericError):
    pass


class DivergedLoss(NumericError):
    pass


# eval
class LengthMismatch(EcgError, ValueError):
    pass


# weights archive
class BadMagic(DataError):
    pass


class CrcMismatch(DataError):
    pass


class NameSetMismatch(DataError):
    pass


class LeadCountMismatch(DataError):
    pass
