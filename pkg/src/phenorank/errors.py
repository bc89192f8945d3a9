"""Exception hierarchy.

Two broad buckets matter for the CLI: ConfigError maps to exit code 2
(usage / configuration problems), DataError maps to exit code 3 (the
inputs themselves are bad).
"""


class PhenorankError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PhenorankError):
    """Invalid configuration, CLI usage, or generator spec."""


class DataError(PhenorankError):
    """Invalid or inconsistent input data."""


# -- embedding file I/O -------------------------------------------------

class MalformedHeader(DataError):
    pass


class MalformedRow(DataError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DuplicateKey(DataError):
    pass


class IoFailure(DataError):
    pass


# -- distance kernel -----------------------------------------------------

class ZeroVector(DataError):
    pass


class DimensionMismatch(DataError):
    pass


# -- ensemble ------------------------------------------------------------

class UnknownVariantTag(DataError):
    pass


class MissingVariant(DataError):
    pass


class EmptyGallery(DataError):
    pass


# -- evaluation ----------------------------------------------------------

class EmptyGalleryAfterExclusion(DataError):
    pass


class NoTestImages(DataError):
    pass


# -- cross-validation ----------------------------------------------------

class SingletonClass(DataError):
    pass


class EmptyFold(DataError):
    pass


class SplitMetadataMissing(DataError):
    pass


# -- losses / training ---------------------------------------------------

class LabelOutOfRange(DataError):
    pass


class EmptyFrequencies(DataError):
    pass


class ZeroCount(DataError):
    pass


class NonFinite(DataError):
    pass


class NonFiniteLoss(DataError):
    pass


class ConfigInvalid(ConfigError):
    pass


class SpecInvalid(ConfigError):
    pass
