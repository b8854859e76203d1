"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition of a public operation was violated."""


class DimensionError(ContractError):
    """Operand shapes do not fit together."""


class AmortizationUnsupported(ContractError):
    """Amortized inference was requested for a fusion mode that lets history attend to candidates."""
