"""Weight updates that compensate for removals.

For removals E_K theta = 0 under a quadratic loss with curvature F, the
optimal update is

  delta = -F^-1 E_K^T (E_K F^-1 E_K^T)^-1 E_K theta,

at a loss increase of 0.5 theta_K^T (E_K F^-1 E_K^T)^-1 theta_K. With
F = G (x) A, removing rows only needs G^-1 and removing columns only A^-1.
Removing arbitrary elements uses the eigendecomposition of both factors so
that E_K F^-1 E_K^T is assembled without forming F^-1.
"""

from collections.abc import Sequence
import dataclasses
from typing import Optional, Union

from absl import logging
import numpy as np
from scipy import linalg

from ..utils import errors
from . import constants as cs
from . import curvature
from . import selection as selection_lib

DenseCurvature = curvature.DenseCurvature
KronCurvature = curvature.KronCurvature


@dataclasses.dataclass
class UpdatePolicy:
  """How removals are compensated; `max_correlated` caps element batches."""

  kind: cs.UpdateKind = cs.UpdateKind.FULL_CORRELATION
  max_correlated: int = 64

  def __post_init__(self):
    if self.max_correlated < 1:
      raise errors.ConfigurationError(
          f'max_correlated must be >= 1, got {self.max_correlated}.'
      )


@dataclasses.dataclass
class WeightDelta:
  layer_name: str
  delta: np.ndarray


@dataclasses.dataclass
class GeneralSolution:
  """Optimal delta (R x C) and the loss increase it incurs."""

  delta: np.ndarray
  cost: float


def _solve_spd(m: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
  try:
    factor = linalg.cho_factor(m, lower=True)
  except linalg.LinAlgError as e:
    raise errors.SingularSystemError(
        f'{what}: constraint system is singular ({e}); the removed weights'
        ' are linearly dependent under this curvature.'
    ) from e
  return linalg.cho_solve(factor, rhs)


def _flat_indices(indices: Union[Sequence[int], np.ndarray]) -> np.ndarray:
  return np.unique(np.asarray(indices, dtype=np.int64))


def general_update(
    fisher: Union[DenseCurvature, np.ndarray],
    indices: Union[Sequence[int], np.ndarray],
    W: np.ndarray,
) -> GeneralSolution:
  """Exact constrained solution on a dense curvature.

  Args:
    fisher: dense F (RC x RC), row-major vectorisation of W.
    indices: flat row-major indices of the removed weights.
    W: R x C weights.

  Raises:
    OracleScaleError: if RC exceeds the dense guard.
    SingularSystemError: if E_K F^-1 E_K^T is singular.
  """
  rows, cols = W.shape
  if rows * cols > cs.ORACLE_MAX_DIM:
    raise errors.OracleScaleError(
        f'general_update needs R * C <= {cs.ORACLE_MAX_DIM}, got {rows} x {cols}.'
    )
  f = fisher.F if isinstance(fisher, DenseCurvature) else np.asarray(fisher)
  idx = _flat_indices(indices)
  if idx.size == 0:
    return GeneralSolution(delta=np.zeros_like(W), cost=0.0)
  f_inv = _solve_spd(f, np.eye(rows * cols), 'general_update F')
  f_inv = 0.5 * (f_inv + f_inv.T)
  theta = np.ravel(W)[idx]
  u = _solve_spd(f_inv[np.ix_(idx, idx)], theta, 'general_update')
  delta = -f_inv[:, idx] @ u
  return GeneralSolution(
      delta=delta.reshape(rows, cols), cost=0.5 * float(theta @ u)
  )


def multi_row_update(
    g_inv: np.ndarray, rows: Sequence[int], W: np.ndarray
) -> np.ndarray:
  """-G^-1[:, R'] (G^-1[R', R'])^-1 W[R'], zeroing rows R'."""
  rows = _flat_indices(rows)
  if rows.size == 0:
    return np.zeros_like(W)
  solved = _solve_spd(g_inv[np.ix_(rows, rows)], W[rows], 'multi_row_update')
  return -g_inv[:, rows] @ solved


def multi_col_update(
    a_inv: np.ndarray, cols: Sequence[int], W: np.ndarray
) -> np.ndarray:
  """-W[:, C'] (A^-1[C', C'])^-1 A^-1[C', :], zeroing columns C'."""
  cols = _flat_indices(cols)
  if cols.size == 0:
    return np.zeros_like(W)
  solved = _solve_spd(a_inv[np.ix_(cols, cols)], a_inv[cols, :], 'multi_col_update')
  return -W[:, cols] @ solved


def single_structure_updates(
    g_inv: np.ndarray,
    a_inv: np.ndarray,
    rows: Sequence[int],
    cols: Sequence[int],
    W: np.ndarray,
) -> np.ndarray:
  """Sum of independent single-row and single-column updates against W."""
  delta = np.zeros_like(W)
  for r in _flat_indices(rows):
    delta -= np.outer(g_inv[:, r], W[r]) / g_inv[r, r]
  for c in _flat_indices(cols):
    delta -= np.outer(W[:, c], a_inv[c, :]) / a_inv[c, c]
  return delta


def structure_indices(
    shape: tuple[int, int], rows: Sequence[int], cols: Sequence[int]
) -> np.ndarray:
  """Flat indices of the union of rows and columns, each cell once."""
  mask = np.zeros(shape, dtype=bool)
  mask[np.asarray(rows, dtype=np.int64), :] = True
  mask[:, np.asarray(cols, dtype=np.int64)] = True
  return np.flatnonzero(mask)


def joint_row_col_update(
    curv: KronCurvature,
    rows: Sequence[int],
    cols: Sequence[int],
    W: np.ndarray,
    strategy: cs.JointStrategy = cs.JointStrategy.FAST,
    inverses: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> np.ndarray:
  """Removes rows and columns of one layer together.

  The fast strategy applies the multi-row update and then the multi-column
  update to the updated weights; rows stay zero through the second step. The
  oracle strategy solves the stacked constraints exactly on G (x) A.
  """
  if strategy is cs.JointStrategy.ORACLE:
    fisher = curvature.kron_dense(curv.G, curv.A)
    return general_update(fisher, structure_indices(W.shape, rows, cols), W).delta
  g_inv, a_inv = inverses if inverses is not None else curvature.factor_inverses(curv)
  row_delta = multi_row_update(g_inv, rows, W)
  col_delta = multi_col_update(a_inv, cols, W + row_delta)
  return row_delta + col_delta


def _correlated_batch(
    spectrum: curvature.InverseSpectrum, idx: np.ndarray, W: np.ndarray
) -> tuple[np.ndarray, float]:
  rows, cols = W.shape
  inv_denominator = 1.0 / spectrum.denominator
  k1 = spectrum.K1[idx // cols]
  k2 = spectrum.K2[idx % cols]
  # Row k of `gathered` is (E_K (K1 (x) K2))_k.
  gathered = (k1[:, :, np.newaxis] * k2[:, np.newaxis, :]).reshape(
      idx.size, rows * cols
  )
  m = (gathered * np.ravel(inv_denominator)) @ gathered.T
  m = 0.5 * (m + m.T)
  theta = np.ravel(W)[idx]
  u = _solve_spd(m, theta, 'correlated update')
  scattered = np.zeros(rows * cols)
  scattered[idx] = u
  inner = spectrum.K1.T @ scattered.reshape(rows, cols) @ spectrum.K2
  delta = -spectrum.K1 @ (inner * inv_denominator) @ spectrum.K2.T
  return delta, 0.5 * float(theta @ u)


def correlated_unstructured_update(
    spectrum: curvature.InverseSpectrum,
    elements: Union[Sequence[int], np.ndarray],
    W: np.ndarray,
    max_correlated: int,
) -> np.ndarray:
  """Removes elements in contiguous batches of at most `max_correlated`.

  `elements` are flat indices in the order batches are cut from (cheapest
  first). Every batch is solved against the same W and the deltas are
  summed. A singular batch falls back to per-element updates.
  """
  if max_correlated < 1:
    raise errors.ConfigurationError(
        f'max_correlated must be >= 1, got {max_correlated}.'
    )
  elements = np.asarray(elements, dtype=np.int64)
  delta = np.zeros_like(W)
  for start in range(0, elements.size, max_correlated):
    batch = elements[start : start + max_correlated]
    try:
      batch_delta, _ = _correlated_batch(spectrum, batch, W)
    except errors.SingularSystemError:
      logging.warning(
          'Singular correlated batch of %d weights; using per-element'
          ' updates.',
          batch.size,
      )
      batch_delta = sum(
          _correlated_batch(spectrum, batch[i : i + 1], W)[0]
          for i in range(batch.size)
      )
    delta += batch_delta
  return delta


def sum_kron_update(
    sumcurv: curvature.SumKronCurvature,
    indices: Union[Sequence[int], np.ndarray],
    W: np.ndarray,
    fast: bool = False,
    damping: Optional[tuple[float, float]] = None,
) -> GeneralSolution:
  """Exact removal update under F~ = sum_i G_i (x) A_i, at oracle scale.

  With `fast`, the simultaneous diagonalisation of the two terms solves the
  system without forming F~^-1 when it is usable, otherwise the dense path
  runs. `damping` is (frac_g, frac_a) for the leading term; None solves the
  sum as fitted.
  """
  rows, cols = W.shape
  if rows * cols > cs.ORACLE_MAX_DIM:
    raise errors.OracleScaleError(
        f'sum_kron_update needs R * C <= {cs.ORACLE_MAX_DIM}, got'
        f' {rows} x {cols}.'
    )
  if damping is not None:
    sumcurv = curvature.dampen_sum(sumcurv, *damping)
  idx = _flat_indices(indices)
  if fast and idx.size:
    spectrum = curvature.sum_kron_eigen(sumcurv)
    if spectrum is not None:
      delta, cost = _correlated_batch(spectrum, idx, W)
      return GeneralSolution(delta=delta, cost=cost)
    logging.info(
        '%s: Kronecker sum is not simultaneously diagonalisable; using the'
        ' dense path.',
        sumcurv.layer_name,
    )
  return general_update(curvature.sum_kron_dense(sumcurv), idx, W)


def layer_delta(
    mode: cs.PruneMode,
    W: np.ndarray,
    layer_selection: selection_lib.LayerSelection,
    curv: Optional[KronCurvature],
    policy: UpdatePolicy,
    element_order: Optional[np.ndarray] = None,
    strategy: cs.JointStrategy = cs.JointStrategy.FAST,
) -> np.ndarray:
  """Delta compensating one layer's selection under `policy`.

  `element_order` ranks the layer's elements by cost; selected elements are
  batched in that order.
  """
  if policy.kind is cs.UpdateKind.NONE or layer_selection.is_empty():
    return np.zeros_like(W)
  if curv is None:
    raise errors.ConfigurationError(
        f'Update {policy.kind.value} needs curvature.'
    )
  if mode is cs.PruneMode.STRUCTURED:
    rows, cols = layer_selection.rows, layer_selection.cols
    inverses = curvature.factor_inverses(curv)
    if policy.kind is cs.UpdateKind.INDEPENDENT_STRUCTURE:
      return single_structure_updates(*inverses, rows, cols, W)
    if rows.size and cols.size:
      return joint_row_col_update(curv, rows, cols, W, strategy, inverses)
    if rows.size:
      return multi_row_update(inverses[0], rows, W)
    return multi_col_update(inverses[1], cols, W)

  elements = layer_selection.elements
  if element_order is not None:
    rank = np.empty(W.size, dtype=np.int64)
    rank[element_order] = np.arange(W.size)
    elements = elements[np.argsort(rank[elements], kind='stable')]
  batch = (
      1
      if policy.kind is cs.UpdateKind.INDEPENDENT_STRUCTURE
      else policy.max_correlated
  )
  return correlated_unstructured_update(
      curvature.eigendecompose(curv), elements, W, batch
  )
