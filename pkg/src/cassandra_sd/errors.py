"""Exception types shared across the package."""


class FormatError(ValueError):
    """A stream or file is corrupt, truncated or out of order."""


class NonFiniteError(ValueError):
    """Inf/NaN reached an encoder."""

    def __init__(self, msg: str = "non-finite"):
        super().__init__(msg)
