"""Global-threshold selection of weights, 2:4 blocks, rows and columns.

All layers compete for one removal budget, so sparsity is allocated across
layers by cost instead of by per-layer quota. Earlier removals (zeros in the
current masks) are always kept in the selection, which makes masks monotone
across shots. Ties are broken by layer order, then by row-major index.
"""

from collections.abc import Mapping, Sequence
import dataclasses
import math
from typing import Any, Optional

from absl import logging
import numpy as np

from ..utils import errors
from . import constants as cs
from . import costs

CostTable = costs.CostTable
Masks = Optional[Mapping[str, np.ndarray]]

_ROW, _COL = 0, 1


@dataclasses.dataclass
class LayerSelection:
  """Sorted, duplicate-free removal indices of one layer."""

  elements: np.ndarray
  rows: np.ndarray
  cols: np.ndarray

  @classmethod
  def empty(cls) -> 'LayerSelection':
    none = np.zeros(0, dtype=np.int64)
    return cls(elements=none, rows=none.copy(), cols=none.copy())

  def is_empty(self) -> bool:
    return not (self.elements.size or self.rows.size or self.cols.size)

  def keep_mask(self, shape: tuple[int, int]) -> np.ndarray:
    """1 where a weight survives this selection, 0 where it is removed."""
    mask = np.ones(shape, dtype=cs.DTYPE)
    mask.ravel()[self.elements] = 0.0
    mask[self.rows, :] = 0.0
    mask[:, self.cols] = 0.0
    return mask


@dataclasses.dataclass
class RemovalSelection:
  """The network-wide removal set produced at one target size.

  Attributes
  ----------
  mode : cs.PruneMode
      Granularity of the selection.
  layers : dict of str to LayerSelection
      Per-layer removals, in layer order.
  tau : float
      Largest cost (per element for structures) admitted by this selection;
      -inf when nothing new was selected.
  target_size : float
      Requested fraction alpha of prunable weights to keep.
  realized_size : float
      Fraction of prunable weights kept after applying the selection.
  removed : int
      Number of prunable weights removed, earlier removals included.
  total : int
      Number of prunable weights.
  """

  mode: cs.PruneMode
  layers: dict[str, LayerSelection]
  tau: float
  target_size: float
  realized_size: float
  removed: int
  total: int

  def to_records(self) -> list[dict[str, Any]]:
    """JSON-ready dump, one record per layer."""
    return [
        {
            'layer': name,
            'rows': sel.rows.tolist(),
            'cols': sel.cols.tolist(),
            'elements': sel.elements.tolist(),
        }
        for name, sel in self.layers.items()
    ]


def removal_target(alpha: float, total: int) -> int:
  """floor((1 - alpha) * total), robust to binary rounding of alpha."""
  return int(math.floor(round((1.0 - alpha) * total, 9)))


def _check_alpha(alpha: float) -> None:
  if not 0.0 < alpha <= 1.0:
    raise errors.ConfigurationError(f'alpha_t must lie in (0, 1], got {alpha}.')


def _mask_of(masks: Masks, table: CostTable) -> np.ndarray:
  if masks is None or table.layer_name not in masks:
    return np.ones(table.shape, dtype=cs.DTYPE)
  return np.asarray(masks[table.layer_name])


def select_unstructured(
    tables: Sequence[CostTable], alpha_t: float, masks: Masks = None
) -> RemovalSelection:
  """Removes the floor((1 - alpha_t) P) cheapest weights network-wide."""
  _check_alpha(alpha_t)
  costs_flat, layer_ids, flat_ids, forced = [], [], [], []
  for i, table in enumerate(tables):
    values = np.ravel(table.element_costs)
    costs_flat.append(values)
    layer_ids.append(np.full(values.size, i))
    flat_ids.append(np.arange(values.size))
    forced.append(np.ravel(_mask_of(masks, table)) == 0)
  costs_flat = np.concatenate(costs_flat)
  layer_ids = np.concatenate(layer_ids)
  flat_ids = np.concatenate(flat_ids)
  forced = np.concatenate(forced)

  total = costs_flat.size
  count = max(removal_target(alpha_t, total), int(np.sum(forced)))
  order = np.lexsort((flat_ids, layer_ids, costs_flat, ~forced))
  chosen = order[:count]
  fresh = chosen[~forced[chosen]]
  tau = float(np.max(costs_flat[fresh])) if fresh.size else -np.inf

  layers = {}
  for i, table in enumerate(tables):
    picked = np.sort(flat_ids[chosen[layer_ids[chosen] == i]])
    sel = LayerSelection.empty()
    sel.elements = picked.astype(np.int64)
    layers[table.layer_name] = sel
  return RemovalSelection(
      mode=cs.PruneMode.UNSTRUCTURED,
      layers=layers,
      tau=tau,
      target_size=alpha_t,
      realized_size=1.0 - count / total,
      removed=count,
      total=total,
  )


def select_semi_2_4(
    tables: Sequence[CostTable], alpha_t: float, masks: Masks = None
) -> RemovalSelection:
  """Selects whole 2:4 blocks by block cost until (1 - alpha_t) is removed.

  A selected block loses its 2 cheapest weights. Blocks already pruned in an
  earlier shot keep their existing zeros.

  Raises:
    InfeasibleTargetError: if alpha_t < 0.5.
  """
  _check_alpha(alpha_t)
  if alpha_t < 0.5 - 1e-12:
    raise errors.InfeasibleTargetError(
        f'2:4 sparsity cannot reach alpha {alpha_t} < 0.5.'
    )
  block_costs, layer_ids, block_ids, forced = [], [], [], []
  for i, table in enumerate(tables):
    bc = np.ravel(table.block_costs())
    rows, cols = table.shape
    mask = _mask_of(masks, table).reshape(rows, cols // cs.SEMI_N, cs.SEMI_N)
    block_costs.append(bc)
    layer_ids.append(np.full(bc.size, i))
    block_ids.append(np.arange(bc.size))
    forced.append(np.ravel(np.any(mask == 0, axis=-1)))
  block_costs = np.concatenate(block_costs)
  layer_ids = np.concatenate(layer_ids)
  block_ids = np.concatenate(block_ids)
  forced = np.concatenate(forced)

  total = block_costs.size * cs.SEMI_N
  count = max(removal_target(alpha_t, total) // cs.SEMI_M, int(np.sum(forced)))
  order = np.lexsort((block_ids, layer_ids, block_costs, ~forced))
  chosen = order[:count]
  fresh = chosen[~forced[chosen]]
  tau = float(np.max(block_costs[fresh])) if fresh.size else -np.inf

  layers = {}
  removed = 0
  for i, table in enumerate(tables):
    rows, cols = table.shape
    picked = np.sort(block_ids[chosen[layer_ids[chosen] == i]])
    mask = np.ravel(_mask_of(masks, table))
    elements = []
    for block in picked:
      start = block * cs.SEMI_N
      window = np.arange(start, start + cs.SEMI_N)
      existing = window[mask[window] == 0]
      if existing.size:
        elements.append(existing)
      else:
        cheapest = np.argsort(
            np.ravel(table.element_costs)[window], kind='stable'
        )[: cs.SEMI_M]
        elements.append(np.sort(window[cheapest]))
    flat = np.concatenate(elements) if elements else np.zeros(0, np.int64)
    sel = LayerSelection.empty()
    sel.elements = np.sort(flat).astype(np.int64)
    layers[table.layer_name] = sel
    removed += sel.elements.size
  return RemovalSelection(
      mode=cs.PruneMode.SEMI_2_4,
      layers=layers,
      tau=tau,
      target_size=alpha_t,
      realized_size=1.0 - removed / total,
      removed=removed,
      total=total,
  )


def select_structured(
    tables: Sequence[CostTable], alpha_t: float, masks: Masks = None
) -> RemovalSelection:
  """Greedily removes the rows and columns cheapest per live element.

  Rows score L_r / C_live and columns L_c / R_live, with live dimensions
  taken from the masks at the start of the shot. Candidates are admitted in
  score order until at least floor((1 - alpha_t) P) weights are removed,
  counting each removed weight once. The last live row or column of a layer
  is never removed.

  Raises:
    InfeasibleTargetError: if the target needs emptying a layer.
  """
  _check_alpha(alpha_t)
  total = sum(int(np.prod(t.shape)) for t in tables)
  target = removal_target(alpha_t, total)

  gone, rows_sel, cols_sel, live_rows, live_cols = [], [], [], [], []
  scores, layer_ids, kinds, indices = [], [], [], []
  for i, table in enumerate(tables):
    mask = _mask_of(masks, table)
    dead_rows = np.flatnonzero(~np.any(mask != 0, axis=1))
    dead_cols = np.flatnonzero(~np.any(mask != 0, axis=0))
    rows, cols = table.shape
    keep = mask != 0
    keep[dead_rows, :] = False
    keep[:, dead_cols] = False
    gone.append(~keep)
    rows_sel.append(set(dead_rows.tolist()))
    cols_sel.append(set(dead_cols.tolist()))
    r_live, c_live = rows - dead_rows.size, cols - dead_cols.size
    live_rows.append(r_live)
    live_cols.append(c_live)
    for r in np.setdiff1d(np.arange(rows), dead_rows):
      scores.append(table.row_costs[r] / max(c_live, 1))
      layer_ids.append(i)
      kinds.append(_ROW)
      indices.append(r)
    for c in np.setdiff1d(np.arange(cols), dead_cols):
      scores.append(table.col_costs[c] / max(r_live, 1))
      layer_ids.append(i)
      kinds.append(_COL)
      indices.append(c)

  removed = int(sum(np.sum(g) for g in gone))
  order = np.lexsort((indices, kinds, layer_ids, scores)) if scores else []
  tau = -np.inf
  protected = set()
  for k in order:
    if removed >= target:
      break
    i, kind, index = layer_ids[k], kinds[k], indices[k]
    if kind == _ROW:
      if live_rows[i] <= 1:
        protected.add(tables[i].layer_name)
        continue
      removed += int(np.sum(~gone[i][index, :]))
      gone[i][index, :] = True
      rows_sel[i].add(int(index))
      live_rows[i] -= 1
    else:
      if live_cols[i] <= 1:
        protected.add(tables[i].layer_name)
        continue
      removed += int(np.sum(~gone[i][:, index]))
      gone[i][:, index] = True
      cols_sel[i].add(int(index))
      live_cols[i] -= 1
    tau = max(tau, float(scores[k]))

  if removed < target:
    names = tuple(sorted(protected)) or tuple(t.layer_name for t in tables)
    raise errors.InfeasibleTargetError(
        f'Structured target alpha {alpha_t} needs {target} removals but only'
        f' {removed} are possible without emptying layers {", ".join(names)}.',
        layers=names,
    )

  layers = {}
  for i, table in enumerate(tables):
    sel = LayerSelection.empty()
    sel.rows = np.array(sorted(rows_sel[i]), dtype=np.int64)
    sel.cols = np.array(sorted(cols_sel[i]), dtype=np.int64)
    layers[table.layer_name] = sel
  logging.debug('Structured selection removed %d of %d weights.', removed, total)
  return RemovalSelection(
      mode=cs.PruneMode.STRUCTURED,
      layers=layers,
      tau=tau,
      target_size=alpha_t,
      realized_size=1.0 - removed / total,
      removed=removed,
      total=total,
  )


_SELECTORS = {
    cs.PruneMode.UNSTRUCTURED: select_unstructured,
    cs.PruneMode.SEMI_2_4: select_semi_2_4,
    cs.PruneMode.STRUCTURED: select_structured,
}


def select(
    mode: cs.PruneMode,
    tables: Sequence[CostTable],
    alpha_t: float,
    masks: Masks = None,
) -> RemovalSelection:
  """Dispatches to the selector of `mode`."""
  return _SELECTORS[mode](tables, alpha_t, masks)
