class RlmcmcError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RlmcmcError, ValueError):
    pass


class StateValidityError(RlmcmcError, ValueError):
    """A channel lies (partly) outside the domain or has a non-positive size."""

    def __init__(self, message: str, agent: int | None = None):
        super().__init__(message)
        self.agent = agent


class InfeasibleActionError(RlmcmcError, ValueError):
    pass


class AssemblyError(RlmcmcError, ValueError):
    pass


class NumericalError(RlmcmcError, ArithmeticError):
    pass


class ContractError(RlmcmcError, ValueError):
    """Caller violated a precondition (shapes, sizes, empty inputs)."""


class DataError(RlmcmcError, ValueError):
    pass
