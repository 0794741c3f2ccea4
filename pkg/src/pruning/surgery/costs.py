"""Removal costs in final-loss units.

Each policy stands for a curvature: magnitude uses I (x) I, l-obd I (x) A,
k-obd G (x) A with only its diagonal for elements, and kfac-obs the full
inverse of G (x) A. Costs of a weight theta_k under the OBS rule are
theta_k^2 / (2 [F^-1]_kk); rows and columns use the structured forms
L_r = theta_r^T A theta_r / (2 [G^-1]_rr) and L_c = theta_c^T G theta_c /
(2 [A^-1]_cc).
"""

from collections.abc import Iterable
import dataclasses
from typing import Optional

import numpy as np
import pandas as pd

from ..utils import conform
from ..utils import errors
from . import constants as cs
from . import curvature

KronCurvature = curvature.KronCurvature


@dataclasses.dataclass
class CostTable:
  """Element (R x C), row (R) and column (C) costs of one layer."""

  layer_name: str
  element_costs: np.ndarray
  row_costs: np.ndarray
  col_costs: np.ndarray
  policy: cs.CostPolicy

  def __post_init__(self):
    rows, cols = np.shape(self.element_costs)
    conform.static_shape(self.row_costs, expect_shape=(rows,))
    conform.static_shape(self.col_costs, expect_shape=(cols,))
    for name in ('element_costs', 'row_costs', 'col_costs'):
      conform.assert_finite(
          getattr(self, name), f'{self.layer_name} {name}'
      )

  @property
  def shape(self) -> tuple[int, int]:
    return self.element_costs.shape

  def block_costs(self) -> np.ndarray:
    return block_costs_2_4(self.element_costs)


def _require(curv: Optional[KronCurvature], policy: cs.CostPolicy):
  if curv is None:
    raise errors.ConfigurationError(f'Policy {policy.value} needs curvature.')
  return curv


def element_costs(
    W: np.ndarray,
    curv: Optional[KronCurvature],
    policy: cs.CostPolicy,
    inverses: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> np.ndarray:
  """R x C element costs; curvature is ignored for the magnitude policy."""
  sq = np.square(W)
  if policy is cs.CostPolicy.MAGNITUDE:
    return 0.5 * sq
  curv = _require(curv, policy)
  if policy is cs.CostPolicy.L_OBD:
    return 0.5 * np.diag(curv.A)[np.newaxis, :] * sq
  if policy is cs.CostPolicy.K_OBD:
    return 0.5 * np.outer(np.diag(curv.G), np.diag(curv.A)) * sq
  g_inv, a_inv = inverses if inverses is not None else curvature.factor_inverses(curv)
  return sq / (2.0 * np.outer(np.diag(g_inv), np.diag(a_inv)))


def row_costs(
    W: np.ndarray,
    curv: Optional[KronCurvature],
    policy: cs.CostPolicy,
    inverses: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> np.ndarray:
  """Cost of zeroing each row."""
  if policy is cs.CostPolicy.MAGNITUDE:
    return 0.5 * np.sum(np.square(W), axis=1)
  curv = _require(curv, policy)
  quad = np.einsum('rc,cd,rd->r', W, curv.A, W)
  if policy is cs.CostPolicy.L_OBD:
    return 0.5 * quad
  if policy is cs.CostPolicy.K_OBD:
    return 0.5 * np.diag(curv.G) * quad
  g_inv, _ = inverses if inverses is not None else curvature.factor_inverses(curv)
  return 0.5 * quad / np.diag(g_inv)


def col_costs(
    W: np.ndarray,
    curv: Optional[KronCurvature],
    policy: cs.CostPolicy,
    inverses: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> np.ndarray:
  """Cost of zeroing each column."""
  if policy is cs.CostPolicy.MAGNITUDE:
    return 0.5 * np.sum(np.square(W), axis=0)
  curv = _require(curv, policy)
  if policy is cs.CostPolicy.L_OBD:
    return 0.5 * np.diag(curv.A) * np.sum(np.square(W), axis=0)
  quad = np.einsum('rc,rs,sc->c', W, curv.G, W)
  if policy is cs.CostPolicy.K_OBD:
    return 0.5 * np.diag(curv.A) * quad
  _, a_inv = inverses if inverses is not None else curvature.factor_inverses(curv)
  return 0.5 * quad / np.diag(a_inv)


def block_costs_2_4(element_cost: np.ndarray) -> np.ndarray:
  """R x (C / 4) block costs: the sum of the 2 smallest of every 4 in a row."""
  rows, cols = np.shape(element_cost)
  if cols % cs.SEMI_N:
    raise errors.ConfigurationError(
        f'Row length {cols} is not divisible by {cs.SEMI_N} for 2:4 blocks.'
    )
  blocks = np.sort(
      np.reshape(element_cost, (rows, cols // cs.SEMI_N, cs.SEMI_N)), axis=-1
  )
  return np.sum(blocks[..., : cs.SEMI_M], axis=-1)


def cost_table(
    layer_name: str,
    W: np.ndarray,
    curv: Optional[KronCurvature],
    policy: cs.CostPolicy,
) -> CostTable:
  """All costs of one layer under `policy`."""
  inverses = None
  if policy is cs.CostPolicy.KFAC_OBS:
    inverses = curvature.factor_inverses(_require(curv, policy))
  return CostTable(
      layer_name=layer_name,
      element_costs=element_costs(W, curv, policy, inverses),
      row_costs=row_costs(W, curv, policy, inverses),
      col_costs=col_costs(W, curv, policy, inverses),
      policy=policy,
  )


def cost_table_frame(tables: Iterable[CostTable]) -> pd.DataFrame:
  """Long-format frame (layer, granularity, index, cost).

  Element indices are row-major flat positions.
  """
  frames = []
  for table in tables:
    for granularity, values in (
        ('element', np.ravel(table.element_costs)),
        ('row', table.row_costs),
        ('col', table.col_costs),
    ):
      frames.append(
          pd.DataFrame({
              'layer': table.layer_name,
              'granularity': granularity,
              'index': np.arange(len(values)),
              'cost': values,
          })
      )
  if not frames:
    return pd.DataFrame(columns=['layer', 'granularity', 'index', 'cost'])
  return pd.concat(frames, ignore_index=True)
