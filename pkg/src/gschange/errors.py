"""Exception types shared across the package."""


class GschangeError(Exception):
    """Base class for all package errors."""


class FormatError(GschangeError):
    """A binary or text file does not match its documented layout."""


class DataError(GschangeError):
    """A file parsed fine but carries values violating an invariant."""


class ContractError(GschangeError):
    """Caller violated an operation precondition (e.g. dimension mismatch)."""


class DegenerateAxisError(GschangeError):
    """PCA input had zero covariance; no principal axis exists."""


class EmptyVoteError(GschangeError):
    """Every view was skipped during multi-view voting."""


class PlacementError(GschangeError):
    """An inserted or moved object could not be placed without overlap."""


class DivergenceError(GschangeError):
    """Masked optimization diverged (loss repeatedly above 10x initial)."""
