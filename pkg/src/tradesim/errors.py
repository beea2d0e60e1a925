"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration: bad scenario/topology fields, empty hash ring, ..."""


class WarmupError(RuntimeError):
    """Not enough history yet to compute features or forecasts."""


class DivergenceError(RuntimeError):
    """Training produced non-finite losses or activations."""
