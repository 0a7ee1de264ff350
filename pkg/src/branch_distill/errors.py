"""Exception hierarchy shared by every layer of the package."""


class BranchDistillError(Exception):
    """Base class for all errors raised by branch_distill."""

    exit_code = 1


class ShapeError(BranchDistillError, ValueError):
    """Operand shapes are invalid for an operation."""

    def __init__(self, op, shapes, detail=""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ContractError(BranchDistillError, ValueError):
    """A precondition of an operation was violated by the caller."""


class NumericFault(BranchDistillError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""

    exit_code = 4

    def __init__(self, component, detail=""):
        self.component = component
        msg = f"non-finite value in {component}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ConfigError(BranchDistillError, ValueError):
    """Invalid configuration: unknown key, bad value, unsupported architecture."""

    exit_code = 2


class DataError(BranchDistillError, OSError):
    """Dataset files are missing or malformed."""

    exit_code = 3
