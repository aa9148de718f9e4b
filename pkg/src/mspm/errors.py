"""Exception types shared across the package."""


class MspmError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(MspmError, ValueError):
    """An argument violates an operation's preconditions."""


class NoGraph(MspmError, RuntimeError):
    """backward() was called on a tensor that is not connected to a tape."""


class NoGrad(MspmError, RuntimeError):
    """An optimizer step found a parameter whose gradient is missing."""


class FormatError(MspmError, ValueError):
    """A file has a bad magic number or unsupported version."""


class CorruptFile(MspmError, ValueError):
    """A file's payload is truncated or internally inconsistent."""


class CheckpointMismatch(MspmError, ValueError):
    """A checkpoint does not match the model it is being loaded into."""


class Divergence(MspmError, RuntimeError):
    """Training produced a non-finite loss and was aborted."""
