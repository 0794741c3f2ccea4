"""Mini-batch training of the desk-scale models."""

from collections.abc import Sequence
import dataclasses
from typing import Any

from absl import logging
import numpy as np

from ..utils import errors
from . import config as config_lib
from . import harness

TrainConfig = config_lib.TrainConfig


@dataclasses.dataclass
class TrainResult:
  model: harness.ModelCheckpoint
  log: list[dict[str, Any]]

  @property
  def baseline_loss(self) -> float:
    return self.log[-1]['test_loss']


def train_model(
    config: TrainConfig,
    train_batches: Sequence[harness.Batch],
    test_batches: Sequence[harness.Batch],
) -> TrainResult:
  """SGD with momentum on every weight and parameter.

  Batches are visited in a seeded order that changes every epoch.

  Raises:
    NumericFailureError: if a loss becomes non-finite.
  """
  config.validate()
  if not train_batches or not test_batches:
    raise errors.HarnessError('Training needs train and test batches.')
  model = harness.build_model(config.model, config.seed)
  rng = np.random.default_rng(config.seed)
  velocity = {}
  log = []
  for epoch in range(config.epochs):
    total, count = 0.0, 0
    for b in rng.permutation(len(train_batches)):
      result = harness.forward_backward(model, train_batches[b])
      if not np.isfinite(result.loss):
        raise errors.NumericFailureError(
            f'Non-finite training loss at epoch {epoch}, batch {b}.'
        )
      total += result.loss * result.num_samples
      count += result.num_samples
      grads = dict(result.param_grads)
      grads.update(result.weight_grads)
      for name, grad in grads.items():
        v = config.momentum * velocity.get(name, 0.0) + grad
        velocity[name] = v
        if name in result.weight_grads:
          layer = model.layer(name)
          layer.weight = layer.weight - config.learning_rate * v
        else:
          model.params[name] = model.params[name] - config.learning_rate * v
    test_loss = harness.mean_loss(model, test_batches)
    if not np.isfinite(test_loss):
      raise errors.NumericFailureError(f'Non-finite test loss at epoch {epoch}.')
    log.append({
        'epoch': epoch,
        'train_loss': total / count,
        'test_loss': test_loss,
    })
    logging.info(
        'Epoch %d: train loss %.4f, test loss %.4f.',
        epoch,
        total / count,
        test_loss,
    )
  model.apply_masks()
  return TrainResult(model=model, log=log)
