"""Constants and enumerations for pruning."""

import enum

import numpy as np

DTYPE = np.float64


class LayerKind(enum.Enum):
  """Role of a weight matrix in the forward pass."""

  EMBEDDING = 'embedding'
  LINEAR = 'linear'
  ATTENTION_PROJECTION = 'attention-projection'

  @property
  def report_type(self) -> str:
    """Coarse type used in per-type sparsity summaries."""
    return {
        'embedding': 'embedding',
        'linear': 'fully-connected',
        'attention-projection': 'attention',
    }[self.value]


class Architecture(enum.Enum):
  MLP = 'mlp'
  TRANSFORMER = 'transformer'
  REGRESSION = 'regression'


class LossKind(enum.Enum):
  CROSS_ENTROPY = 'cross-entropy'
  SQUARED_ERROR = 'squared-error'


class PruneMode(enum.Enum):
  UNSTRUCTURED = 'unstructured'
  SEMI_2_4 = 'semi-2:4'
  STRUCTURED = 'structured'


class CostPolicy(enum.Enum):
  """Curvature used for removal costs.

  MAGNITUDE uses I (x) I, L_OBD diag(I (x) A), K_OBD diag(G (x) A) and
  KFAC_OBS the full inverse of G (x) A.
  """

  MAGNITUDE = 'magnitude'
  L_OBD = 'l-obd'
  K_OBD = 'k-obd'
  KFAC_OBS = 'kfac-obs'

  @property
  def needs_curvature(self) -> bool:
    return self is not CostPolicy.MAGNITUDE


class UpdateKind(enum.Enum):
  NONE = 'none'
  INDEPENDENT_STRUCTURE = 'independent-structure'
  FULL_CORRELATION = 'full-correlation'


class CurvatureKind(enum.Enum):
  KFAC = 'kfac'
  NKP = 'nkp'


class JointStrategy(enum.Enum):
  FAST = 'fast'
  ORACLE = 'oracle'


class Split(enum.Enum):
  TRAIN = 'train'
  TEST = 'test'


# Named method presets: (cost policy, update kind).
METHODS = {
    'magnitude': (CostPolicy.MAGNITUDE, UpdateKind.NONE),
    'l-obd': (CostPolicy.L_OBD, UpdateKind.NONE),
    'k-obd': (CostPolicy.K_OBD, UpdateKind.NONE),
    'surgeon-independent': (
        CostPolicy.KFAC_OBS,
        UpdateKind.INDEPENDENT_STRUCTURE,
    ),
    'surgeon': (CostPolicy.KFAC_OBS, UpdateKind.FULL_CORRELATION),
}

# Dampening fractions of the mean diagonal.
DAMP_A = 0.01
DAMP_G_STRUCTURED = 0.1
DAMP_G_DEFAULT = 0.01

DEFAULT_SHOTS_STRUCTURED = 10
DEFAULT_SHOTS_DEFAULT = 5

NKP_COLD_ITERS = 20
NKP_WARM_ITERS = 1

SEMI_M = 2
SEMI_N = 4

# Largest R * C for which dense RC x RC matrices are built.
ORACLE_MAX_DIM = 256
# Largest number of candidate sets enumerated by the exhaustive search.
ORACLE_MAX_CANDIDATES = 10**6

# Allowed loss increase when absorbing a low-rank correction.
LORA_TOLERANCE = 1e-6


def default_damping(mode: PruneMode) -> tuple[float, float]:
  """(frac_g, frac_a) defaults for `mode`."""
  if mode is PruneMode.STRUCTURED:
    return DAMP_G_STRUCTURED, DAMP_A
  return DAMP_G_DEFAULT, DAMP_A


def default_shots(mode: PruneMode) -> int:
  if mode is PruneMode.STRUCTURED:
    return DEFAULT_SHOTS_STRUCTURED
  return DEFAULT_SHOTS_DEFAULT
