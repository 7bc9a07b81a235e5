"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid model, training, dataset or evaluation configuration."""


class FormatError(ValueError):
    """Malformed, truncated or unsupported file."""
