"""Exception hierarchy shared across the package."""


class SpecReconError(Exception):
    """Base class for all package errors."""


class ShapeError(SpecReconError, ValueError):
    pass


class PaddingError(SpecReconError, ValueError):
    pass


class ConfigError(SpecReconError, ValueError):
    pass


class TrainingError(SpecReconError, RuntimeError):
    pass


class FormatError(SpecReconError):
    """Malformed or truncated file.

    ``offset`` is the byte position where parsing failed, when known.
    """

    def __init__(self, message, path=None, offset=None):
        parts = []
        if path is not None:
            parts.append(str(path))
        if offset is not None:
            parts.append(f"byte {offset}")
        prefix = ": ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.offset = offset
