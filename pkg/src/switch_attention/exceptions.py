from __future__ import annotations

from dataclasses import dataclass

from typing_extensions import Optional, Tuple, Union, Sequence


class LogicalError(Exception):
    """
    An error that happens due to mistake in the logical operation or usage of the API during runtime.
    """


class UsageError(LogicalError):
    """
    An exception raised when an incorrect usage of the API is encountered.
    """


class NumericsError(LogicalError):
    """
    Errors raised by tensor operations and the gradient tape.
    """


@dataclass
class DimensionMismatchError(NumericsError):
    operation: str
    expected_dimensions: Union[Tuple[int, ...], str]
    actual_dimensions: Tuple[int, ...]

    def __post_init__(self):
        msg = (
            f"Operation '{self.operation}' expected {self.expected_dimensions} dimensions, "
            f"but got {self.actual_dimensions}."
        )
        super().__init__(msg)


@dataclass
class DegenerateRowError(NumericsError):
    """
    Raised when a mask leaves a softmax row without a single admissible entry.
    """

    row_count: int

    def __post_init__(self):
        msg = f"{self.row_count} softmax row(s) are fully masked."
        super().__init__(msg)


@dataclass
class NonFiniteValueError(NumericsError):
    """
    Raised when an operation produces NaN or Inf.
    """

    operation: str
    count: int

    def __post_init__(self):
        msg = f"Operation '{self.operation}' produced {self.count} non-finite value(s)."
        super().__init__(msg)


@dataclass
class ContractViolationError(NumericsError):
    """
    Raised when the arguments of an operation violate its documented preconditions.
    """

    operation: str
    reason: str

    def __post_init__(self):
        super().__init__(f"Contract of '{self.operation}' violated: {self.reason}")


@dataclass
class ConfigurationError(UsageError):
    field_name: str
    reason: str

    def __post_init__(self):
        super().__init__(f"Invalid configuration for '{self.field_name}': {self.reason}")


@dataclass
class SequenceTooLongError(UsageError):
    length: int
    max_seq_len: int

    def __post_init__(self):
        msg = f"Sequence of length {self.length} exceeds max_seq_len={self.max_seq_len}."
        super().__init__(msg)


@dataclass
class IncompatibleDonorError(UsageError):
    """
    Raised when the parameters of a checkpoint cannot be transplanted into a model.
    """

    reason: str
    parameter_name: Optional[str] = None

    def __post_init__(self):
        if self.parameter_name is None:
            msg = f"Incompatible donor: {self.reason}"
        else:
            msg = f"Incompatible donor at parameter '{self.parameter_name}': {self.reason}"
        super().__init__(msg)


class CheckpointError(Exception):
    """
    An error that happens while reading or writing checkpoint files.
    """


@dataclass
class CheckpointVersionError(CheckpointError):
    file_path: str
    found_version: int
    supported_version: int

    def __post_init__(self):
        msg = (
            f"Checkpoint {self.file_path} has format version {self.found_version}, "
            f"only version {self.supported_version} is supported."
        )
        super().__init__(msg)


@dataclass
class CheckpointTruncatedError(CheckpointError):
    file_path: str
    expected_bytes: int
    actual_bytes: int

    def __post_init__(self):
        msg = (
            f"Checkpoint {self.file_path} is truncated or padded: expected {self.expected_bytes} bytes, "
            f"found {self.actual_bytes}."
        )
        super().__init__(msg)


@dataclass
class CheckpointManifestError(CheckpointError):
    file_path: str
    reason: str

    def __post_init__(self):
        super().__init__(f"Checkpoint {self.file_path} has an invalid manifest: {self.reason}")


@dataclass
class SessionNotPrefilledError(UsageError):
    def __post_init__(self):
        super().__init__("decode_step was called before prefill.")


@dataclass
class EmptyCostReportError(UsageError):
    missing_positions: Sequence[int] = ()

    def __post_init__(self):
        if self.missing_positions:
            msg = f"The cost report has no decode step at positions {list(self.missing_positions)}."
        else:
            msg = "The cost report contains no decode steps."
        super().__init__(msg)


@dataclass
class StepOutOfRangeError(UsageError):
    step: int
    total_steps: int

    def __post_init__(self):
        super().__init__(f"Step {self.step} is outside [0, {self.total_steps}].")


@dataclass
class TrainingDivergedError(LogicalError):
    """
    Raised when the loss or a gradient of a training step stops being finite.
    """

    step: int
    original_exception: Exception

    def __post_init__(self):
        super().__init__(
            f"Training diverged at step {self.step} "
            f"({self.original_exception.__class__.__name__}: {str(self.original_exception)})"
        )


@dataclass
class NiahConstructionError(UsageError):
    reason: str

    def __post_init__(self):
        super().__init__(f"Cannot build needle-in-a-haystack instance: {self.reason}")
