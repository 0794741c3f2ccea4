"""Configuration dataclasses and their resolution.

Every configuration resolves in three layers: explicit overrides (command-line
flags) take precedence over a JSON file, which takes precedence over the
dataclass defaults. `to_dict` always emits every field so that the resolved
configuration written next to an artifact has no hidden defaults.
"""

from collections.abc import Mapping
import dataclasses
import enum
import json
import pathlib
from typing import Any, Optional, TypeVar, Union

from ..utils import errors
from . import constants as cs
from . import corpus

PathLike = Union[str, pathlib.Path]

_ConfigType = TypeVar('_ConfigType')


def _plain(value: Any) -> Any:
  """Converts enums, tuples and nested dataclasses into JSON values."""
  if isinstance(value, enum.Enum):
    return value.value
  if dataclasses.is_dataclass(value):
    return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
  if isinstance(value, (list, tuple)):
    return [_plain(v) for v in value]
  return value


def _check_keys(cls: type[Any], values: Mapping[str, Any]) -> None:
  known = {f.name for f in dataclasses.fields(cls)}
  unknown = sorted(set(values) - known)
  if unknown:
    raise errors.ConfigurationError(
        f'Unknown {cls.__name__} fields: {", ".join(unknown)}.'
    )


def _as_enum(enum_cls: type[enum.Enum], value: Any, name: str) -> Any:
  if value is None or isinstance(value, enum_cls):
    return value
  try:
    return enum_cls(value)
  except ValueError:
    choices = ', '.join(e.value for e in enum_cls)
    raise errors.ConfigurationError(
        f'{name} must be one of {{{choices}}}, got {value!r}.'
    ) from None


@dataclasses.dataclass
class ModelConfig:
  """Architecture of a desk-scale model.

  Attributes
  ----------
  architecture : cs.Architecture
      Which model family to build.
  vocab_size : int
      Number of byte tokens (char-LM architectures).
  hidden_dims : tuple of int
      MLP and regression hidden widths. The transformer uses the first entry
      as its feed-forward width.
  embed_dim : int
      Token embedding width (MLP) or model width d (transformer).
  context : int
      Tokens of context the MLP sees; its embedding input is context * V.
  max_len : int
      Longest sequence the transformer's positional parameter supports.
  prune_embedding : bool
      Whether embedding matrices are prunable.
  input_dim, output_dim : int
      Regression feature and target widths.
  use_bias : bool
      Regression layers carry biases.
  nonlinear : bool
      Regression layers apply tanh between layers.
  """

  architecture: cs.Architecture = cs.Architecture.MLP
  vocab_size: int = 27
  hidden_dims: tuple[int, ...] = (32, 32)
  embed_dim: int = 16
  context: int = 4
  max_len: int = 64
  prune_embedding: bool = True
  input_dim: int = 4
  output_dim: int = 2
  use_bias: bool = True
  nonlinear: bool = True

  def __post_init__(self):
    self.architecture = _as_enum(
        cs.Architecture, self.architecture, 'architecture'
    )
    self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
    self.validate()

  def validate(self) -> None:
    dims = {
        'embed_dim': self.embed_dim,
        'context': self.context,
        'max_len': self.max_len,
        'input_dim': self.input_dim,
        'output_dim': self.output_dim,
    }
    for name, value in dims.items():
      if value < 1:
        raise errors.ConfigurationError(f'{name} must be >= 1, got {value}.')
    if any(h < 1 for h in self.hidden_dims):
      raise errors.ConfigurationError(
          f'hidden_dims must be positive, got {list(self.hidden_dims)}.'
      )
    if self.architecture is not cs.Architecture.REGRESSION:
      if self.vocab_size < 2:
        raise errors.ConfigurationError(
            f'vocab_size must be >= 2, got {self.vocab_size}.'
        )
    if self.architecture is cs.Architecture.TRANSFORMER and not self.hidden_dims:
      raise errors.ConfigurationError(
          'The transformer needs hidden_dims[0] as its feed-forward width.'
      )

  def to_dict(self) -> dict[str, Any]:
    return _plain(self)

  @classmethod
  def from_dict(cls, values: Mapping[str, Any]) -> 'ModelConfig':
    _check_keys(cls, values)
    return cls(**values)


@dataclasses.dataclass
class LoraConfig:
  """Interleaved low-rank correction settings."""

  enabled: bool = False
  rank: int = 4
  steps: int = 50
  learning_rate: float = 1e-2

  def validate(self) -> None:
    if self.rank < 1:
      raise errors.ConfigurationError(f'lora rank must be >= 1, got {self.rank}.')
    if self.steps < 0:
      raise errors.ConfigurationError(
          f'lora steps must be >= 0, got {self.steps}.'
      )
    if self.learning_rate <= 0:
      raise errors.ConfigurationError(
          f'lora learning_rate must be > 0, got {self.learning_rate}.'
      )

  def to_dict(self) -> dict[str, Any]:
    return _plain(self)

  @classmethod
  def from_dict(cls, values: Mapping[str, Any]) -> 'LoraConfig':
    _check_keys(cls, values)
    return cls(**values)


@dataclasses.dataclass
class DataConfig:
  """Where curvature and evaluation batches come from."""

  train_path: Optional[str] = None
  seq_len: int = corpus.DEFAULT_SEQ_LEN
  batch_size: int = corpus.DEFAULT_BATCH_SIZE
  num_batches: int = corpus.DEFAULT_NUM_BATCHES
  test_fraction: float = corpus.DEFAULT_TEST_FRACTION

  def validate(self) -> None:
    for name in ('seq_len', 'batch_size', 'num_batches'):
      if getattr(self, name) < 1:
        raise errors.ConfigurationError(
            f'{name} must be >= 1, got {getattr(self, name)}.'
        )
    if not 0.0 < self.test_fraction < 1.0:
      raise errors.ConfigurationError(
          f'test_fraction must lie in (0, 1), got {self.test_fraction}.'
      )

  def to_dict(self) -> dict[str, Any]:
    return _plain(self)

  @classmethod
  def from_dict(cls, values: Mapping[str, Any]) -> 'DataConfig':
    _check_keys(cls, values)
    return cls(**values)


@dataclasses.dataclass
class PruneConfig:
  """Everything a pruning run depends on.

  `method` is a shorthand for (`cost_policy`, `update`); when both are given
  explicitly they win. `shots` and `damp_g` default by mode when left None,
  and `resolved()` fills them in.
  """

  mode: cs.PruneMode = cs.PruneMode.UNSTRUCTURED
  alpha: float = 0.5
  shots: Optional[int] = None
  method: Optional[str] = 'surgeon'
  cost_policy: Optional[cs.CostPolicy] = None
  update: Optional[cs.UpdateKind] = None
  max_correlated: int = 64
  damp_g: Optional[float] = None
  damp_a: float = cs.DAMP_A
  curvature: cs.CurvatureKind = cs.CurvatureKind.KFAC
  nkp_iters: int = cs.NKP_COLD_ITERS
  joint_strategy: cs.JointStrategy = cs.JointStrategy.FAST
  lora: LoraConfig = dataclasses.field(default_factory=LoraConfig)
  data: DataConfig = dataclasses.field(default_factory=DataConfig)
  seed: int = 0

  def __post_init__(self):
    self.mode = _as_enum(cs.PruneMode, self.mode, 'mode')
    self.cost_policy = _as_enum(cs.CostPolicy, self.cost_policy, 'cost_policy')
    self.update = _as_enum(cs.UpdateKind, self.update, 'update')
    self.curvature = _as_enum(cs.CurvatureKind, self.curvature, 'curvature')
    self.joint_strategy = _as_enum(
        cs.JointStrategy, self.joint_strategy, 'joint_strategy'
    )
    if isinstance(self.lora, Mapping):
      self.lora = LoraConfig.from_dict(self.lora)
    if isinstance(self.data, Mapping):
      self.data = DataConfig.from_dict(self.data)

  def validate(self) -> None:
    """Raises ConfigurationError for out-of-range or conflicting knobs."""
    if not 0.0 < self.alpha <= 1.0:
      raise errors.ConfigurationError(
          f'alpha must lie in (0, 1], got {self.alpha}.'
      )
    if self.mode is cs.PruneMode.SEMI_2_4 and self.alpha < 0.5:
      raise errors.InfeasibleTargetError(
          f'semi-2:4 pruning cannot go below alpha 0.5, got {self.alpha}.'
      )
    if self.shots is not None and self.shots < 1:
      raise errors.ConfigurationError(f'shots must be >= 1, got {self.shots}.')
    if self.method is not None and self.method not in cs.METHODS:
      raise errors.ConfigurationError(
          f'method must be one of {sorted(cs.METHODS)}, got {self.method!r}.'
      )
    if self.method is None and (self.cost_policy is None or self.update is None):
      raise errors.ConfigurationError(
          'Without a method preset both cost_policy and update are required.'
      )
    if self.max_correlated < 1:
      raise errors.ConfigurationError(
          f'max_correlated must be >= 1, got {self.max_correlated}.'
      )
    for name in ('damp_g', 'damp_a'):
      value = getattr(self, name)
      if value is not None and value <= 0:
        raise errors.ConfigurationError(f'{name} must be > 0, got {value}.')
    if self.nkp_iters < 1:
      raise errors.ConfigurationError(
          f'nkp_iters must be >= 1, got {self.nkp_iters}.'
      )
    self.lora.validate()
    self.data.validate()

  def resolved(self) -> 'PruneConfig':
    """A validated copy with every mode- and method-dependent default filled."""
    self.validate()
    cost_policy, update = self.cost_policy, self.update
    if self.method is not None:
      preset_policy, preset_update = cs.METHODS[self.method]
      cost_policy = cost_policy or preset_policy
      update = update or preset_update
    damp_g, _ = cs.default_damping(self.mode)
    return dataclasses.replace(
        self,
        shots=self.shots if self.shots is not None else cs.default_shots(self.mode),
        cost_policy=cost_policy,
        update=update,
        damp_g=self.damp_g if self.damp_g is not None else damp_g,
        lora=dataclasses.replace(self.lora),
        data=dataclasses.replace(self.data),
    )

  def to_dict(self) -> dict[str, Any]:
    return _plain(self)

  @classmethod
  def from_dict(cls, values: Mapping[str, Any]) -> 'PruneConfig':
    _check_keys(cls, values)
    return cls(**values)


@dataclasses.dataclass
class TrainConfig:
  """Toy-model training settings for the `train` command."""

  model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
  data: DataConfig = dataclasses.field(default_factory=DataConfig)
  epochs: int = 5
  learning_rate: float = 0.1
  momentum: float = 0.9
  seed: int = 0

  def __post_init__(self):
    if isinstance(self.model, Mapping):
      self.model = ModelConfig.from_dict(self.model)
    if isinstance(self.data, Mapping):
      self.data = DataConfig.from_dict(self.data)

  def validate(self) -> None:
    if self.epochs < 1:
      raise errors.ConfigurationError(f'epochs must be >= 1, got {self.epochs}.')
    if self.learning_rate <= 0:
      raise errors.ConfigurationError(
          f'learning_rate must be > 0, got {self.learning_rate}.'
      )
    if not 0.0 <= self.momentum < 1.0:
      raise errors.ConfigurationError(
          f'momentum must lie in [0, 1), got {self.momentum}.'
      )
    self.model.validate()
    self.data.validate()

  def to_dict(self) -> dict[str, Any]:
    return _plain(self)

  @classmethod
  def from_dict(cls, values: Mapping[str, Any]) -> 'TrainConfig':
    _check_keys(cls, values)
    return cls(**values)


def read_config_file(path: Optional[PathLike]) -> dict[str, Any]:
  """Reads a JSON config file; a missing path means an empty config."""
  if path is None:
    return {}
  try:
    values = json.loads(pathlib.Path(path).read_text())
  except (OSError, json.JSONDecodeError) as e:
    raise errors.ConfigurationError(f'Cannot read config {path}: {e}')
  if not isinstance(values, dict):
    raise errors.ConfigurationError(f'Config {path} must hold a JSON object.')
  return values


def _merge(
    base: Mapping[str, Any], overrides: Optional[Mapping[str, Any]]
) -> dict[str, Any]:
  """Deep-merges `overrides` onto `base`; nested dicts merge key by key."""
  merged = dict(base)
  for key, value in (overrides or {}).items():
    if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
      merged[key] = _merge(merged[key], value)
    else:
      merged[key] = value
  return merged


def resolve_prune_config(
    path: Optional[PathLike] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> PruneConfig:
  """Defaults < JSON file < overrides, validated and fully resolved."""
  values = _merge(read_config_file(path), overrides)
  try:
    config = PruneConfig.from_dict(values)
  except TypeError as e:
    raise errors.ConfigurationError(f'Invalid prune config: {e}') from e
  return config.resolved()


def resolve_train_config(
    path: Optional[PathLike] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> TrainConfig:
  """Defaults < JSON file < overrides, validated."""
  values = _merge(read_config_file(path), overrides)
  try:
    config = TrainConfig.from_dict(values)
  except TypeError as e:
    raise errors.ConfigurationError(f'Invalid train config: {e}') from e
  config.validate()
  return config


def write_resolved(config: Any, path: PathLike) -> pathlib.Path:
  """Writes `config.to_dict()` as the resolved configuration of an artifact."""
  path = pathlib.Path(path)
  path.parent.mkdir(parents=True, exist_ok=True)
  path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
  return path
