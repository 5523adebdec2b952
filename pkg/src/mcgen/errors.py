"""Exception hierarchy shared by every mcgen module."""


class McgenError(Exception):
    """Base class for all structured engine errors."""


class ShapeError(McgenError, ValueError):
    pass


class DTypeError(McgenError, TypeError):
    pass


class UnknownKernelError(McgenError, KeyError):
    pass


class UninitializedStatsError(McgenError, RuntimeError):
    """Raised when batch norm runs in eval mode before any training step."""


class BackwardError(McgenError, RuntimeError):
    pass


class DegenerateWeightError(McgenError, ValueError):
    """Spectral normalization of a weight whose singular value estimate is zero."""


class CapacityError(McgenError, ValueError):
    """More codewords requested than there are non-zero binary words."""


class SelectorError(McgenError, ValueError):
    """A modality selector row is not one-hot (or not on the simplex)."""


class FormatError(McgenError, ValueError):
    """Malformed serialized data: images, codebooks, checkpoints."""


class NonFiniteError(McgenError, FloatingPointError):
    """A gradient, loss or flow scale became NaN or infinite."""

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class DivergenceError(NonFiniteError):
    """Training produced a non-finite loss; carries the last good checkpoint path."""

    def __init__(self, message, epoch, checkpoint=None):
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint = checkpoint


class DegenerateClusteringError(McgenError, ValueError):
    pass
