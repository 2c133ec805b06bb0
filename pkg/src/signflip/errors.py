"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SignflipError(Exception):
    exit_code = 1


class ConfigError(SignflipError, ValueError):
    """Bad flags, bad config files, out-of-range knobs."""

    exit_code = 2


class DataError(SignflipError, ValueError):
    """Malformed archives, manifests, plans or sidecars."""

    exit_code = 3


class FormatError(DataError):
    """A container failed to parse. ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class PreconditionError(SignflipError, ValueError):
    """An operation was asked for something its contract rules out."""

    exit_code = 4
