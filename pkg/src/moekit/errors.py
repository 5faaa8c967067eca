"""Shared exception types."""


class ContractError(ValueError):
    """An operation was called in a way its contract forbids."""


class ConfigError(ValueError):
    """A configuration value is invalid; the message names the field."""
