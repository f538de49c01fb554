"""Exception hierarchy shared across the package."""


class FairMEDLError(Exception):
    """Base class for all package errors."""


class DimensionError(FairMEDLError, ValueError):
    pass


class ConfigurationError(FairMEDLError, ValueError):
    pass


class ContractError(FairMEDLError, ValueError):
    """A caller violated an operation's precondition."""


class DegenerateInputError(ContractError):
    pass


class IngestionError(FairMEDLError, ValueError):
    pass


class DivergenceError(FairMEDLError, RuntimeError):
    pass
