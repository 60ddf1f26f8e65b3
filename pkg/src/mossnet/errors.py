"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ParameterDomainError(ValueError):
    """SSM parameters fall outside their admissible domain."""


class SingularityError(ArithmeticError):
    """A cumulative inverse product would leave the representable range."""


class ConfigError(ValueError):
    """Invalid configuration. ``violations`` lists every failed check."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class TrainingDiverged(RuntimeError):
    pass
