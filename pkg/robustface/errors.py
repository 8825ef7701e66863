"""
Exception hierarchy for robustface.

Every error carries an ``exit_code`` so the CLI can map failures onto its
stable scripting contract: 1 usage/config, 2 data, 3 numeric.
"""

from typing import Optional, Sequence


class RobustFaceError(Exception):
    exit_code = 3


# -- usage / configuration (exit 1) ---------------------------------------

class UsageError(RobustFaceError):
    exit_code = 1


class ConfigError(RobustFaceError):
    """Invalid RunConfig; ``pointer`` is a JSON pointer to the bad value."""

    exit_code = 1

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer or "/"
        super().__init__(f"{self.pointer}: {message}")


class RunLockedError(RobustFaceError):
    exit_code = 1


# -- data (exit 2) ----------------------------------------------------------

class DataError(RobustFaceError):
    exit_code = 2


class ManifestError(DataError):
    def __init__(self, row: int, message: str):
        self.row = row
        super().__init__(f"manifest row {row}: {message}")


class MissingImageError(ManifestError):
    pass


class ImageShapeError(ManifestError):
    pass


class ImageFormatError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class SamplingError(DataError):
    pass


class ShapeError(DataError):
    """Dimension mismatch between two operands."""

    def __init__(self, what: str, left: Sequence[int], right: Optional[Sequence[int]] = None):
        self.left = tuple(left)
        self.right = tuple(right) if right is not None else None
        if right is None:
            super().__init__(f"{what}: unexpected shape {self.left}")
        else:
            super().__init__(f"{what}: shapes {self.left} and {self.right} are incompatible")


class CheckpointError(DataError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


# -- numeric (exit 3) -------------------------------------------------------

class NumericError(RobustFaceError):
    exit_code = 3


class NonFiniteError(NumericError):
    def __init__(self, op: str, where: str = "output"):
        self.op = op
        super().__init__(f"non-finite values in {where} of '{op}'")


class AttackError(NumericError):
    def __init__(self, iteration: int, message: str = "non-finite input gradient"):
        self.iteration = iteration
        super().__init__(f"PGD iteration {iteration}: {message}")


class BudgetError(NumericError):
    pass


class OptimizerError(NumericError):
    def __init__(self, param: str, message: str = "non-finite gradient"):
        self.param = param
        super().__init__(f"parameter '{param}': {message}")


class LossError(NumericError):
    pass


class ContractError(NumericError):
    pass


class TapeError(ContractError):
    pass
