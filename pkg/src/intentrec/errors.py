"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed or unusable dataset content."""


class IntegrityError(DataError):
    """Dataset violates a structural guarantee (e.g. one item, two intents)."""
