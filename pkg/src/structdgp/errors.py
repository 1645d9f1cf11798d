"""Error types shared across the package."""


class NotPositiveDefinite(RuntimeError):
    """A matrix expected to be SPD failed to factorize (even after jitter)."""


class DimensionMismatch(ValueError):
    """Operands have incompatible shapes."""


class TooLarge(ValueError):
    """A dense/brute-force code path was invoked above its size guard."""


class DegenerateWeights(RuntimeError):
    """Importance-sampling weights collapsed (effective sample size too small)."""


class IndexOutOfRange(IndexError):
    """A (layer, gp) block index lies outside the architecture."""
