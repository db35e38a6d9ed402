"""Exception hierarchy shared by every module."""


class SesomError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SesomError, ValueError):
    pass


class NumericError(SesomError, ArithmeticError):
    pass


class DegenerateInputError(SesomError, ValueError):
    pass


class ConfigError(SesomError, ValueError):
    pass


class InvalidMapError(ConfigError):
    """Verbalizer remap whose keys and values overlap, or that is not injective."""


class FormatError(SesomError, IOError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    pass


class LookupFailure(SesomError, KeyError):
    pass
