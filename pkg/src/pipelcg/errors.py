"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke a documented precondition (shapes, partitions, handle reuse...)."""


class FabricSaturationError(ContractViolation):
    """More reductions in flight than the fabric allows."""


class BreakdownError(ArithmeticError):
    """A recurrence hit a singular or indefinite quantity.

    ``where`` names the step that failed (``"sqrt"``, ``"delta"``, ``"eta"``,
    ``"pAp"``...), ``value`` is the offending number.
    """

    def __init__(self, where, value, message=None):
        self.where = where
        self.value = value
        super().__init__(message or f"breakdown in {where}: {value!r}")
