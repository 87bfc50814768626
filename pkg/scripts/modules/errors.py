#!/usr/bin/env python
"""Exception types shared by every hyperzoo module.

Each error subclasses the closest builtin so code catching ValueError or
RuntimeError keeps working. exit_code is what scripts/hyperZoo.py returns
when the error escapes a command.
"""


class HyperZooError(Exception):
    """Base class of all hyperzoo errors."""
    exit_code = 1


class ConfigError(HyperZooError, ValueError):
    """Invalid configuration value or flag combination."""
    exit_code = 2


class DimensionError(HyperZooError, ValueError):
    """Tensor shapes do not agree."""
    exit_code = 2


class StateError(HyperZooError, RuntimeError):
    """Object used in a state that does not allow the call."""
    exit_code = 3


class FormatError(HyperZooError, ValueError):
    """File content is not in the expected format."""
    exit_code = 3


class LengthError(HyperZooError, ValueError):
    """File or buffer is shorter than its header promises."""
    exit_code = 3


class ConsistencyError(HyperZooError, ValueError):
    """Two inputs that must agree do not."""
    exit_code = 3


class LayoutError(HyperZooError, ValueError):
    """Weight vector and layer layout do not match."""
    exit_code = 3


class SymmetryError(HyperZooError, ValueError):
    """Permutation requested on a layer that is not permutable."""
    exit_code = 3


class DataError(HyperZooError, ValueError):
    """Data missing or unusable for the requested computation."""
    exit_code = 3


class BatchError(HyperZooError, ValueError):
    """Batch too small for the requested loss."""
    exit_code = 3


class StorageError(HyperZooError, IOError):
    """Reading or writing zoo artifacts failed."""
    exit_code = 3


class VerificationError(HyperZooError, RuntimeError):
    """An equivalence check exceeded its tolerance."""
    exit_code = 4
