"""Randomised agreement checks between the fast paths and the dense oracle."""

import dataclasses
import time

from absl import logging
import numpy as np
import pandas as pd

from . import constants as cs
from . import costs
from . import curvature
from . import models
from . import oracle
from . import updates

ORACLE_TOLERANCE = 1e-8
NKP_TOLERANCE = 1e-6
NKP_ITERS = 300


@dataclasses.dataclass
class Instance:
  """A random layer: weights, tape and dampened KFAC curvature."""

  W: np.ndarray
  tape: models.LayerTape
  curv: curvature.KronCurvature

  @property
  def fisher(self) -> np.ndarray:
    return oracle.kron(self.curv.G, self.curv.A)


def random_tape(
    rng: np.random.Generator,
    rows: int,
    cols: int,
    samples: int,
    offset: float = 1.0,
    name: str = 'layer',
) -> models.LayerTape:
  """Gaussian tape; `offset` shifts activations like a non-centred input."""
  return models.LayerTape(
      layer_name=name,
      activations=rng.standard_normal((samples, cols)) + offset,
      out_grads=rng.standard_normal((samples, rows)),
  )


def random_instance(
    rng: np.random.Generator,
    max_dim: int = 8,
    max_samples: int = 16,
    damping: float = 0.1,
) -> Instance:
  rows, cols = rng.integers(2, max_dim + 1, size=2)
  samples = int(rng.integers(2, max_samples + 1))
  tape = random_tape(rng, int(rows), int(cols), samples)
  curv = curvature.dampen(curvature.accumulate_kfac(tape), damping, damping)
  return Instance(W=rng.standard_normal((rows, cols)), tape=tape, curv=curv)


def relative_error(actual, expected) -> float:
  actual, expected = np.asarray(actual), np.asarray(expected)
  scale = max(float(np.max(np.abs(expected), initial=0.0)), 1e-300)
  return float(np.max(np.abs(actual - expected), initial=0.0)) / scale


def _instance_errors(inst: Instance, rng: np.random.Generator) -> dict[str, float]:
  W, curv = inst.W, inst.curv
  rows, cols = W.shape
  fisher = inst.fisher
  policy = cs.CostPolicy.KFAC_OBS
  g_inv, a_inv = curvature.factor_inverses(curv)
  out = {}

  grid = np.arange(rows * cols).reshape(rows, cols)
  out['element_costs'] = relative_error(
      costs.element_costs(W, curv, policy),
      oracle.removal_losses(fisher, W, grid.reshape(-1, 1)).reshape(rows, cols),
  )
  out['row_costs'] = relative_error(
      costs.row_costs(W, curv, policy), oracle.removal_losses(fisher, W, grid)
  )
  out['col_costs'] = relative_error(
      costs.col_costs(W, curv, policy), oracle.removal_losses(fisher, W, grid.T)
  )

  r = int(rng.integers(rows))
  c = int(rng.integers(cols))
  expected, _ = oracle.constrained_solution(fisher, grid[r], W)
  out['single_row_update'] = relative_error(
      updates.single_structure_updates(g_inv, a_inv, [r], [], W),
      expected.reshape(rows, cols),
  )
  expected, _ = oracle.constrained_solution(fisher, grid[:, c], W)
  out['single_col_update'] = relative_error(
      updates.single_structure_updates(g_inv, a_inv, [], [c], W),
      expected.reshape(rows, cols),
  )

  some_rows = rng.choice(rows, size=max(1, rows - 1), replace=False)
  expected, _ = oracle.constrained_solution(fisher, grid[some_rows].ravel(), W)
  out['multi_row_update'] = relative_error(
      updates.multi_row_update(g_inv, some_rows, W), expected.reshape(rows, cols)
  )
  some_cols = rng.choice(cols, size=max(1, cols - 1), replace=False)
  expected, _ = oracle.constrained_solution(fisher, grid[:, some_cols].ravel(), W)
  out['multi_col_update'] = relative_error(
      updates.multi_col_update(a_inv, some_cols, W), expected.reshape(rows, cols)
  )

  k = int(rng.integers(1, min(10, rows * cols - 1) + 1))
  elements = rng.choice(rows * cols, size=k, replace=False)
  expected, expected_cost = oracle.constrained_solution(fisher, elements, W)
  delta = updates.correlated_unstructured_update(
      curvature.eigendecompose(curv), elements, W, max_correlated=k
  )
  out['correlated_update'] = relative_error(delta, expected.reshape(rows, cols))

  objective = oracle.quadratic_for(curv.G, curv.A, W, fisher)
  realized = oracle.eval_quadratic(objective, W + delta)
  out['quadratic_exactness'] = relative_error(realized, expected_cost)
  return out


def _nkp_error(rng: np.random.Generator) -> tuple[float, bool]:
  rows, cols = rng.integers(2, 6, size=2)
  tape = random_tape(rng, int(rows), int(cols), int(rng.integers(2, 17)))
  fit = curvature.nkp_power_method(tape, iters=NKP_ITERS)
  best = oracle.rearrange_svd_nkp(oracle.dense_fisher(tape), int(rows), int(cols))[0]
  err = relative_error(
      oracle.kron(fit.G, fit.A), oracle.kron(best.G, best.A)
  )
  history = np.asarray(fit.history)
  monotone = bool(np.all(np.diff(history) >= -1e-12 * history[1:]))
  return err, monotone


@dataclasses.dataclass
class VerificationReport:
  """Worst error per check over all instances."""

  frame: pd.DataFrame
  seconds: float

  @property
  def passed(self) -> bool:
    return bool(self.frame['passed'].all())


def run_suite(instances: int = 50, seed: int = 0) -> VerificationReport:
  """Runs every check on `instances` random layers."""
  start = time.perf_counter()
  rng = np.random.default_rng(seed)
  worst = {}
  for _ in range(instances):
    for check, err in _instance_errors(random_instance(rng), rng).items():
      worst[check] = max(worst.get(check, 0.0), err)
  tolerances = {check: ORACLE_TOLERANCE for check in worst}

  nkp_worst, monotone = 0.0, True
  for _ in range(min(instances, 20)):
    err, ok = _nkp_error(rng)
    nkp_worst, monotone = max(nkp_worst, err), monotone and ok
  worst['nkp_agreement'] = nkp_worst
  tolerances['nkp_agreement'] = NKP_TOLERANCE
  worst['nkp_sigma_monotone'] = 0.0 if monotone else 1.0
  tolerances['nkp_sigma_monotone'] = 0.0

  frame = pd.DataFrame({
      'check': list(worst),
      'max_relative_error': [worst[c] for c in worst],
      'tolerance': [tolerances[c] for c in worst],
  })
  frame['passed'] = frame['max_relative_error'] <= frame['tolerance']
  seconds = time.perf_counter() - start
  for row in frame.itertuples():
    log = logging.info if row.passed else logging.error
    log('%-22s max rel err %.3e (tol %.0e)', row.check, row.max_relative_error,
        row.tolerance)
  return VerificationReport(frame=frame, seconds=seconds)
