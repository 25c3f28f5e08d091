"""Exception types shared across the package."""


class SwitchKDError(Exception):
    pass


class ShapeError(SwitchKDError, ValueError):
    """Operand shapes do not agree."""


class ContractError(SwitchKDError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(SwitchKDError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class BoundsError(SwitchKDError, IndexError):
    pass


class DegenerateDistribution(SwitchKDError):
    """Raised when a logits vector has zero range and cannot be normalized."""


class CompatibilityError(SwitchKDError, ValueError):
    """Teacher and student configs cannot be combined on the switch pathway."""

    def __init__(self, field: str, teacher_value, student_value):
        self.field = field
        super().__init__(
            f"switch-incompatible configs: field {field!r} differs "
            f"(teacher={teacher_value!r}, student={student_value!r})"
        )


class DatasetParseError(SwitchKDError, ValueError):
    def __init__(self, path, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"{path}: line {line_no}: {reason}")


class GenerationError(SwitchKDError):
    pass


class TrainingDiverged(SwitchKDError, RuntimeError):
    pass


class MissingArtifact(SwitchKDError, FileNotFoundError):
    """An input produced by an earlier command is not on disk."""

    def __init__(self, what: str, path, hint: str):
        super().__init__(f"{what} not found at {path}; {hint}")
