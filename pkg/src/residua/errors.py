"""Exception types shared across the package."""


class ResiduaError(Exception):
    pass


class ShapeError(ResiduaError, ValueError):
    """Tensor shapes or spatial sizes violate an operation's contract."""


class ArgumentError(ResiduaError, ValueError):
    pass


class StateError(ResiduaError, RuntimeError):
    """A cache or optimizer state does not match the objects it is used with."""


class FormatError(ResiduaError, ValueError):
    """A file on disk is malformed (checkpoint, mask, manifest)."""


class DataError(ResiduaError, ValueError):
    """Dataset content breaks a pipeline rule, e.g. anomalous data in training."""
