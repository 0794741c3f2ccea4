"""Low-rank corrections fitted between pruning shots.

Each prunable matrix W receives an additive correction U V with U (R x r)
starting at zero and V (r x C) random, trained by gradient descent on
mask * (W + U V) with W frozen, the same objective that later decides whether
the correction is kept. The correction is then absorbed into W and the mask is
re-imposed, so it never revives a removed weight.
"""

from collections.abc import Sequence
import dataclasses

from absl import logging
import numpy as np

from ..utils import errors
from . import constants as cs
from . import harness

ModelCheckpoint = harness.ModelCheckpoint


@dataclasses.dataclass
class LowRankCorrection:
  """One layer's correction U V."""

  layer_name: str
  U: np.ndarray
  V: np.ndarray
  steps: int
  learning_rate: float

  @property
  def rank(self) -> int:
    return self.U.shape[1]

  def product(self) -> np.ndarray:
    return self.U @ self.V


@dataclasses.dataclass
class LoraResult:
  """Outcome of `lora_correct`.

  `model` is the corrected model, or an unchanged copy if the correction was
  reverted.
  """

  model: ModelCheckpoint
  corrections: dict[str, LowRankCorrection]
  loss_before: float
  loss_after: float
  reverted: bool


def lora_correct(
    model: ModelCheckpoint,
    batches: Sequence[harness.Batch],
    rank: int,
    steps: int,
    learning_rate: float,
    seed: int = 0,
) -> LoraResult:
  """Fits and absorbs U V corrections on all prunable layers.

  Raises:
    ConfigurationError: for rank < 1, negative steps or a non-positive rate.
  """
  if rank < 1 or steps < 0 or learning_rate <= 0:
    raise errors.ConfigurationError(
        f'Invalid low-rank settings: rank {rank}, steps {steps}, lr'
        f' {learning_rate}.'
    )
  rng = np.random.default_rng(seed)
  corrections = {}
  for layer in model.prunable_layers():
    rows, cols = layer.shape
    corrections[layer.name] = LowRankCorrection(
        layer_name=layer.name,
        U=np.zeros((rows, rank), dtype=cs.DTYPE),
        V=rng.standard_normal((rank, cols)) / np.sqrt(rank),
        steps=steps,
        learning_rate=learning_rate,
    )

  loss_before = harness.mean_loss(model, batches)
  base = model.weights()
  masks = {l.name: l.mask for l in model.prunable_layers()}
  for step in range(steps):
    effective = dict(base)
    for name, corr in corrections.items():
      effective[name] = masks[name] * (base[name] + corr.product())
    grads = harness.mean_gradients(model, batches, effective).weight_grads
    for name, corr in corrections.items():
      # Pruned entries carry no gradient back to U and V.
      grad = masks[name] * grads[name]
      grad_u = grad @ corr.V.T
      grad_v = corr.U.T @ grad
      corr.U = corr.U - learning_rate * grad_u
      corr.V = corr.V - learning_rate * grad_v
    if not np.all(np.isfinite([np.sum(c.U) for c in corrections.values()])):
      logging.warning('Low-rank correction diverged at step %d.', step)
      break

  corrected = model.copy()
  for name, corr in corrections.items():
    layer = corrected.layer(name)
    layer.weight = layer.weight + corr.product()
  corrected.apply_masks()
  finite = all(np.all(np.isfinite(l.weight)) for l in corrected.layers)
  loss_after = harness.mean_loss(corrected, batches) if finite else np.inf
  if not loss_after <= loss_before + cs.LORA_TOLERANCE:
    logging.warning(
        'Low-rank correction raised the loss from %.6f to %.6f; reverting.',
        loss_before,
        loss_after,
    )
    return LoraResult(model.copy(), corrections, loss_before, loss_after, True)
  logging.info(
      'Low-rank correction (rank %d, %d steps): loss %.6f -> %.6f.',
      rank,
      steps,
      loss_before,
      loss_after,
  )
  return LoraResult(corrected, corrections, loss_before, loss_after, False)
