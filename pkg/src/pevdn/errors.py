"""Exception hierarchy shared across the package."""


class PEVDNError(Exception):
    """Base class for every error raised by this package."""


class InvalidPartyCount(PEVDNError, ValueError):
    pass


class RangeOverflow(PEVDNError, ValueError):
    """A real value does not fit the fixed-point encoding range."""


class ActionOutOfRange(PEVDNError, ValueError):
    pass


class StepAfterDone(PEVDNError, RuntimeError):
    pass


class UnsupportedEnv(PEVDNError, TypeError):
    pass


class ShapeMismatch(PEVDNError, ValueError):
    pass


class MisalignedBuffers(PEVDNError, RuntimeError):
    pass


class ProtocolError(PEVDNError, RuntimeError):
    """Any violation of the summation protocol's phase or payload rules."""


class IncompleteRound(ProtocolError):
    pass


class LengthMismatch(ProtocolError):
    pass


class ProtocolTimeout(ProtocolError):
    pass


class EmptyEpisode(PEVDNError, ValueError):
    pass


class NumericalFailure(PEVDNError, ArithmeticError):
    pass


class ConfigError(PEVDNError, ValueError):
    """Invalid run configuration. ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class MissingMode(PEVDNError, ValueError):
    pass
