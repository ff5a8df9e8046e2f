"""Exception types shared across the package."""


class LoraFLError(Exception):
    """Base class for all errors raised by lorafl."""


class InvalidInputError(LoraFLError, ValueError):
    """An argument has the wrong shape, is non-finite, or is empty."""


class ConfigError(LoraFLError, ValueError):
    """A configuration value violates its constraints.

    ``key`` names the offending field when it is known, so the CLI can
    report it.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class FormatError(LoraFLError, ValueError):
    """A file on disk does not follow the expected binary or text layout."""


class ProtocolError(LoraFLError, RuntimeError):
    """The federation protocol was driven in an impossible state."""
