"""Exception hierarchy shared across the package."""


class RawLMError(Exception):
    """Base class for every error raised by rawlm."""


class DimensionError(RawLMError, ValueError):
    pass


class ConfigError(RawLMError, ValueError):
    pass


class DataError(RawLMError, ValueError):
    pass


class WindowError(DataError):
    """Not enough history before a target position."""


class UsageError(RawLMError, RuntimeError):
    pass


class UnsupportedFormatError(RawLMError):
    pass


class WavParseError(RawLMError):
    pass


class RateMismatchError(RawLMError):
    pass


class ChecksumError(RawLMError):
    pass


class UnsupportedVersionError(RawLMError):
    pass
