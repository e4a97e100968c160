"""Exception hierarchy shared by every kanet module."""


class KanetError(Exception):
    pass


class DimensionError(KanetError, ValueError):
    pass


class DomainError(KanetError, ValueError):
    pass


class GeometryError(KanetError, ValueError):
    pass


class ConfigError(KanetError, ValueError):
    pass


class UnsupportedOrderError(KanetError, ValueError):
    pass


class InsufficientSamplesError(KanetError, ValueError):
    pass


class DegenerateSpanError(KanetError, ValueError):
    pass


class PaddingError(KanetError, ValueError):
    pass


class NonFiniteError(KanetError, FloatingPointError):
    pass


class FormatError(KanetError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
