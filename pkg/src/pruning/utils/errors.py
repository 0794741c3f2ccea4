"""Exception hierarchy shared by the pruning toolkit.

Every error carries the process exit code the command-line interface uses
when it escapes a subcommand.
"""


class SurgeryError(Exception):
  """Base class for all toolkit errors."""

  exit_code = 1


class ConfigurationError(SurgeryError, ValueError):
  """Raised for invalid dimensions, ranges or option combinations."""

  exit_code = 2


class InfeasibleTargetError(SurgeryError, ValueError):
  """Raised if a sparsity target cannot be reached."""

  exit_code = 3

  def __init__(self, message: str, layers: tuple[str, ...] = ()):
    super().__init__(message)
    self.layers = layers


class NumericFailureError(SurgeryError, ArithmeticError):
  """Raised if a numerical routine fails to produce a trustworthy result."""

  exit_code = 4


class DegenerateCurvatureError(NumericFailureError):
  """Raised if a curvature estimate carries no information (e.g. all zero)."""


class SingularSystemError(NumericFailureError):
  """Raised if a constrained system is singular despite dampening."""


class CurvatureError(NumericFailureError):
  """Raised if curvature inputs are not finite."""


class HarnessError(SurgeryError, ValueError):
  """Raised if a model and a batch do not fit together."""

  exit_code = 2


class IngestionError(SurgeryError, ValueError):
  """Raised if a corpus cannot be turned into batches."""

  exit_code = 2


class OracleScaleError(SurgeryError, ValueError):
  """Raised if a dense or combinatorial computation exceeds its guard."""

  exit_code = 2


class UnsupportedError(SurgeryError, NotImplementedError):
  """Raised for options outside the supported range."""

  exit_code = 2
