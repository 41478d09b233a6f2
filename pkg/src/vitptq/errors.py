"""Exception taxonomy shared across the toolkit."""


class VitPtqError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(VitPtqError):
    """Shapes or axes do not line up."""


class ContractError(VitPtqError):
    """Caller violated an operation precondition."""


class ParameterError(VitPtqError):
    """Quantizer parameters are invalid (non-positive scale, missing eta, ...)."""


class DomainError(VitPtqError):
    """Input lies outside the mathematical domain of the operation."""


class CalibrationError(VitPtqError):
    """Calibration could not produce usable parameters."""


class ConfigurationError(VitPtqError):
    """Run configuration is incomplete or inconsistent."""


class FixedPointRangeError(VitPtqError):
    """Value exponent falls outside the integer-shift fixed-point budget."""


class NumericalError(VitPtqError):
    """Non-finite value encountered where a finite one is required."""


class ContainerError(VitPtqError):
    """Base class for checkpoint-container failures."""


class BadMagicError(ContainerError):
    """File does not start with the container magic."""


class TruncatedFileError(ContainerError):
    """File ends before the header or data region is complete."""


class HeaderError(ContainerError):
    """Container header is malformed."""


class MissingTensorError(ContainerError):
    """A tensor required by the model schema is absent."""


class TensorShapeError(ContainerError):
    """Stored tensor shape disagrees with the model schema."""
