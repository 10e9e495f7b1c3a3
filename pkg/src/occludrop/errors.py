"""Exception hierarchy mapped to the CLI's structured exit codes."""


class OccludropError(Exception):
    """Base class; `category` selects the CLI exit code."""

    category = "contract"
    exit_code = 5


class ConfigError(OccludropError):
    category = "config"
    exit_code = 2


class DataError(OccludropError):
    category = "data"
    exit_code = 3


class NumericError(OccludropError):
    category = "numeric"
    exit_code = 4


class ContractError(OccludropError):
    category = "contract"
    exit_code = 5


class DimensionError(ContractError):
    """Shape mismatch; the message names the offending axes."""


class InsufficientBatchError(ContractError):
    """Batch statistics need at least two values per channel."""


class DegenerateChannelError(ContractError):
    """Every sample in the batch dropped the same channel."""
