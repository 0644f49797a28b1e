"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data and
parse problems exit 2.
"""


class ConfigurationError(ValueError):
    """A requested configuration is outside the supported envelope."""


class InvariantError(ValueError):
    """A structural invariant (mesh topology, shape contract) is violated."""


class DomainError(ValueError):
    """A numeric argument is outside the mathematical domain."""


class ShapeError(ValueError):
    """Array shapes or channel counts do not line up."""


class UsageError(ValueError):
    """An API was called in a way that cannot be satisfied."""


class ParseError(ValueError):
    """A file could not be parsed; carries the byte offset of the failure."""

    def __init__(self, message, *, offset=None, path=None):
        self.offset = offset
        self.path = path
        detail = message
        if path is not None:
            detail = f"{path}: {detail}"
        if offset is not None:
            detail = f"{detail} (byte offset {offset})"
        super().__init__(detail)
