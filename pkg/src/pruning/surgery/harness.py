"""Model checkpoints, forward/backward passes and tape capture."""

from collections.abc import Iterable, Mapping, Sequence
import copy
import dataclasses
import pathlib
from typing import Any, Optional, Union

from absl import logging
import numpy as np

from ..utils import conform
from ..utils import errors
from ..utils import serialization
from . import config as config_lib
from . import constants as cs
from . import corpus
from . import models

PathLike = Union[str, pathlib.Path]
Batch = corpus.Batch
LayerTape = models.LayerTape
ModelConfig = config_lib.ModelConfig
PassResult = models.PassResult

load_corpus = corpus.load_corpus


@dataclasses.dataclass
class Layer:
  """One weight matrix with its keep-mask (1 = live, 0 = pruned)."""

  name: str
  kind: cs.LayerKind
  weight: np.ndarray
  prunable: bool = True
  mask: Optional[np.ndarray] = None

  def __post_init__(self):
    self.weight = conform.as_float64(self.weight, self.name)
    if self.mask is None:
      self.mask = np.ones_like(self.weight)
    conform.static_shape(
        self.mask,
        expect_shape=self.weight.shape,
        message=f'{self.name} mask',
        error_cls=errors.HarnessError,
    )

  @property
  def shape(self) -> tuple[int, int]:
    return self.weight.shape

  @property
  def size(self) -> int:
    return int(self.weight.size)

  def live_count(self) -> int:
    return int(np.count_nonzero(self.mask))

  def dead_rows(self) -> np.ndarray:
    """Rows whose every element is masked."""
    return np.flatnonzero(~np.any(self.mask != 0, axis=1))

  def dead_cols(self) -> np.ndarray:
    return np.flatnonzero(~np.any(self.mask != 0, axis=0))

  def live_dims(self) -> tuple[int, int]:
    """(live rows, live columns)."""
    rows, cols = self.shape
    return rows - len(self.dead_rows()), cols - len(self.dead_cols())


@dataclasses.dataclass
class ModelCheckpoint:
  """Weights, masks and non-prunable parameters of a model.

  Attributes
  ----------
  config : ModelConfig
      The architecture the layers were built for.
  layers : list of Layer
      Weight matrices in forward order.
  params : dict of str to np.ndarray
      Biases, layer-norm and positional parameters. Never pruned.
  meta : dict
      Free-form metadata: seed, vocab_size, hidden_dims, vocabulary bytes
      and labels such as the shot a checkpoint was written after.
  """

  config: ModelConfig
  layers: list[Layer]
  params: dict[str, np.ndarray]
  meta: dict[str, Any] = dataclasses.field(default_factory=dict)

  def __post_init__(self):
    self.validate()

  @property
  def network(self) -> models.Network:
    return models.network_for(self.config)

  def validate(self) -> None:
    """Checks that layers match the architecture and prunable weights are finite."""
    specs = self.network.layer_specs()
    names = [layer.name for layer in self.layers]
    if names != [s.name for s in specs]:
      raise errors.HarnessError(
          f'Layers {names} do not match architecture'
          f' {[s.name for s in specs]}.'
      )
    for spec, layer in zip(specs, self.layers):
      conform.static_shape(
          layer.weight,
          expect_shape=spec.shape,
          message=f'Layer {layer.name}',
          error_cls=errors.HarnessError,
      )
      if layer.prunable:
        conform.assert_finite(
            layer.weight, f'Layer {layer.name}', errors.HarnessError
        )
    for name, shape in self.network.param_shapes().items():
      if name not in self.params:
        raise errors.HarnessError(f'Missing parameter {name}.')
      conform.static_shape(
          self.params[name],
          expect_shape=shape,
          message=f'Parameter {name}',
          error_cls=errors.HarnessError,
      )

  def layer(self, name: str) -> Layer:
    for layer in self.layers:
      if layer.name == name:
        return layer
    raise KeyError(name)

  def prunable_layers(self) -> list[Layer]:
    return [layer for layer in self.layers if layer.prunable]

  def weights(self) -> dict[str, np.ndarray]:
    return {layer.name: layer.weight for layer in self.layers}

  def copy(self) -> 'ModelCheckpoint':
    return copy.deepcopy(self)

  def apply_masks(self) -> None:
    """Holds every masked weight at exactly zero."""
    for layer in self.layers:
      layer.weight = np.where(layer.mask != 0, layer.weight, 0.0)

  def prunable_size(self) -> int:
    return sum(layer.size for layer in self.prunable_layers())

  def live_parameters(self) -> int:
    return sum(layer.live_count() for layer in self.prunable_layers())

  def realized_size(self) -> float:
    """Fraction of prunable weights still live."""
    total = self.prunable_size()
    return self.live_parameters() / total if total else 1.0


def build_model(config: ModelConfig, seed: int) -> ModelCheckpoint:
  """Initializes a model with scaled-uniform weights from `seed`."""
  config.validate()
  network = models.network_for(config)
  rng = np.random.default_rng(seed)
  weights, params = network.init_params(rng)
  layers = [
      Layer(
          name=spec.name,
          kind=spec.kind,
          weight=weights[spec.name],
          prunable=spec.prunable,
      )
      for spec in network.layer_specs()
  ]
  meta = {
      'seed': int(seed),
      'vocab_size': int(config.vocab_size),
      'hidden_dims': list(config.hidden_dims),
  }
  logging.debug(
      'Built %s with %d prunable matrices.',
      config.architecture.value,
      sum(layer.prunable for layer in layers),
  )
  return ModelCheckpoint(config=config, layers=layers, params=params, meta=meta)


def forward_backward(model: ModelCheckpoint, batch: Batch) -> PassResult:
  """Mean loss, one tape per weight matrix and the weight gradients."""
  return model.network.run(model.weights(), model.params, batch)


def mean_loss(model: ModelCheckpoint, batches: Iterable[Batch]) -> float:
  """Sample-weighted mean loss over `batches` (forward passes only)."""
  total, count = 0.0, 0
  network = model.network
  weights = model.weights()
  for batch in batches:
    result = network.run(weights, model.params, batch, backward=False)
    total += result.loss * result.num_samples
    count += result.num_samples
  if count == 0:
    raise errors.HarnessError('Cannot evaluate a loss without batches.')
  return total / count


def capture_tapes(
    model: ModelCheckpoint,
    batches: Sequence[Batch],
    layer_names: Optional[Iterable[str]] = None,
) -> tuple[float, dict[str, LayerTape]]:
  """Mean loss and per-layer tapes concatenated over `batches`.

  Only prunable layers are kept unless `layer_names` says otherwise.
  """
  if not batches:
    raise errors.HarnessError('Cannot capture tapes without batches.')
  if layer_names is None:
    layer_names = [layer.name for layer in model.prunable_layers()]
  layer_names = list(layer_names)
  per_layer = {name: [] for name in layer_names}
  total, count = 0.0, 0
  for batch in batches:
    result = forward_backward(model, batch)
    total += result.loss * result.num_samples
    count += result.num_samples
    for name in layer_names:
      per_layer[name].append(result.tapes[name])
  tapes = {name: models.concat_tapes(t) for name, t in per_layer.items()}
  return total / count, tapes


def checkpoint_tensors(model: ModelCheckpoint) -> dict[str, np.ndarray]:
  """Flat tensor dictionary in a fixed order: weights, masks, parameters."""
  tensors = {}
  for layer in model.layers:
    tensors[f'{layer.name}.weight'] = layer.weight
  for layer in model.layers:
    tensors[f'{layer.name}.mask'] = layer.mask
  for name in sorted(model.params):
    tensors[name] = model.params[name]
  return tensors


def save_checkpoint(model: ModelCheckpoint, path: PathLike) -> pathlib.Path:
  """Writes `model` as a manifest at `path` plus its blob."""
  meta = dict(model.meta)
  meta['model'] = model.config.to_dict()
  meta['layers'] = [
      {'name': l.name, 'kind': l.kind.value, 'prunable': l.prunable}
      for l in model.layers
  ]
  return serialization.write_store(path, checkpoint_tensors(model), meta)


def load_checkpoint(path: PathLike) -> ModelCheckpoint:
  """Reads a checkpoint written by `save_checkpoint`."""
  tensors, meta = serialization.read_store(path)
  meta = dict(meta)
  try:
    config = ModelConfig.from_dict(meta.pop('model'))
    layer_meta = meta.pop('layers')
    layers = [
        Layer(
            name=entry['name'],
            kind=cs.LayerKind(entry['kind']),
            weight=tensors.pop(f'{entry["name"]}.weight'),
            prunable=bool(entry['prunable']),
            mask=tensors.pop(f'{entry["name"]}.mask'),
        )
        for entry in layer_meta
    ]
  except (KeyError, ValueError, TypeError) as e:
    raise errors.IngestionError(f'Malformed checkpoint {path}: {e}') from e
  return ModelCheckpoint(config=config, layers=layers, params=tensors, meta=meta)


def mean_gradients(
    model: ModelCheckpoint,
    batches: Sequence[Batch],
    weights: Optional[Mapping[str, np.ndarray]] = None,
) -> PassResult:
  """Sample-weighted mean loss and gradients over `batches`.

  `weights` replaces the model's weight matrices for this evaluation only.
  The returned result carries no tapes.
  """
  if not batches:
    raise errors.HarnessError('Cannot compute gradients without batches.')
  network = model.network
  weights = dict(weights) if weights is not None else model.weights()
  total, count = 0.0, 0
  weight_grads, param_grads = {}, {}
  for batch in batches:
    result = network.run(weights, model.params, batch)
    n = result.num_samples
    total += result.loss * n
    count += n
    for grads, acc in ((result.weight_grads, weight_grads),
                       (result.param_grads, param_grads)):
      for name, grad in grads.items():
        acc[name] = acc.get(name, 0.0) + grad * n
  weight_grads = {k: v / count for k, v in weight_grads.items()}
  param_grads = {k: v / count for k, v in param_grads.items()}
  return PassResult(total / count, count, {}, weight_grads, param_grads)
