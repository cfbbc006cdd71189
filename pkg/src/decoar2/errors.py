"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 1 usage, 2 data, 3 numerical.
"""


class Decoar2Error(Exception):
    exit_code = 2


class ConfigError(Decoar2Error, ValueError):
    exit_code = 1


class DataError(Decoar2Error, ValueError):
    exit_code = 2


class NumericalError(Decoar2Error, ArithmeticError):
    exit_code = 3


class WavFormatError(DataError):
    pass


class FeatureFileError(DataError):
    pass


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class TruncatedPayloadError(FeatureFileError):
    pass


class CheckpointError(DataError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class MissingBlobError(CheckpointError):
    pass
