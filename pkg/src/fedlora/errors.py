"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(ValueError):
    """Invalid configuration value or file."""


class FormatError(ValueError):
    """Malformed dataset or config file on disk."""


class ProtocolError(RuntimeError):
    """Client/server exchange violated the expected tensor layout."""


class IntegrityError(ValueError):
    """Serialized bytes are inconsistent with their declared layout."""
