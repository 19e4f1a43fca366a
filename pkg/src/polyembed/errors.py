"""Shared exception types."""


class PolyembedError(Exception):
    """Base class for all library errors."""


class DimensionError(PolyembedError):
    """Shapes are incompatible for the requested operation."""


class DegenerateInputError(PolyembedError):
    """Input is numerically degenerate (zero-norm vector, fully masked row, ...)."""


class ContractError(PolyembedError):
    """An API contract was violated (non-scalar loss, missing gradient, ...)."""


class ConfigError(PolyembedError):
    """Invalid configuration."""


class RoutingError(PolyembedError):
    """Unknown language requested from the adapter bank."""


class CorpusError(PolyembedError):
    """Corpus file missing, unreadable, or structurally broken."""


class CheckpointError(PolyembedError):
    """Checkpoint file corrupt or incompatible."""
