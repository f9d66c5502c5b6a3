"""Exception types shared across the package."""


class AttnPruneError(Exception):
    """Base class for every error raised by attnprune."""

    kind = "error"


class DimensionError(AttnPruneError, ValueError):
    """Tensor extents do not fit together."""

    kind = "dimension"

    def __init__(self, where, expected, actual, detail=""):
        self.where = where
        self.expected = expected
        self.actual = actual
        msg = f"{where}: expected {expected}, got {actual}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class InvalidInputError(AttnPruneError, ValueError):
    kind = "invalid-input"


class InvalidStateError(AttnPruneError, RuntimeError):
    kind = "invalid-state"


class FormatError(AttnPruneError, ValueError):
    """A file on disk does not follow the expected layout."""

    kind = "format"


class ChecksumError(FormatError):
    kind = "checksum"


class DivergenceError(AttnPruneError, RuntimeError):
    """Training produced a non-finite loss."""

    kind = "divergence"
