"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up where finite values are required."""


class TapeConsumedError(RuntimeError):
    """backward() was called twice on the same tape."""


class DegenerateSeries(ValueError):
    """A series has zero variance, so its correlation is undefined."""


class EmptyTrial(ValueError):
    """A trial is too short to yield a single windowed sample."""


class ProtocolError(Exception):
    """Base class for split-protocol failures."""


class BadMagic(ProtocolError):
    pass


class Truncation(ProtocolError):
    pass


class VersionMismatch(ProtocolError):
    pass


class UnknownMessageType(ProtocolError):
    pass


class TransportError(ProtocolError):
    """The channel failed mid-exchange; the step can be retried."""
