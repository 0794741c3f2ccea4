"""Dense brute-force ground truth for tiny layers.

Everything here is computed with dense double-precision JAX algebra and does
not call into the numpy fast paths, so agreement between the two is a real
check rather than a tautology.
"""

import dataclasses
import itertools
import math
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np

from ..utils import errors
from . import constants as cs
from . import models

jax.config.update('jax_enable_x64', True)

_CHUNK = 1 << 15


@dataclasses.dataclass
class QuadraticObjective:
  """L(theta) = 0.5 (theta - theta*)^T F (theta - theta*) on one layer."""

  theta_star: np.ndarray
  F: np.ndarray
  shape: tuple[int, int]

  def __post_init__(self):
    rows, cols = self.shape
    self.theta_star = np.ravel(np.asarray(self.theta_star, dtype=np.float64))
    self.F = np.asarray(self.F, dtype=np.float64)
    if self.theta_star.size != rows * cols or self.F.shape != (rows * cols,) * 2:
      raise errors.ConfigurationError(
          f'Objective shapes {self.theta_star.shape}, {self.F.shape} do not'
          f' match layer {self.shape}.'
      )
    if float(jnp.linalg.eigvalsh(jnp.asarray(self.F))[0]) <= 0.0:
      raise errors.ConfigurationError('Objective curvature is not positive definite.')


@dataclasses.dataclass
class MaskSearchResult:
  """Best removal set of an exhaustive search and its loss increase."""

  indices: tuple[int, ...]
  loss: float
  candidates: int


@dataclasses.dataclass
class NkpFactors:
  """Best Kronecker factors of a dense matrix with the rearranged spectrum."""

  G: np.ndarray
  A: np.ndarray
  singular_values: np.ndarray


def _guard(rows: int, cols: int) -> None:
  if rows * cols > cs.ORACLE_MAX_DIM:
    raise errors.OracleScaleError(
        f'Oracle needs R * C <= {cs.ORACLE_MAX_DIM}, got {rows} x {cols}.'
    )


def eval_quadratic(obj: QuadraticObjective, theta: np.ndarray) -> float:
  """0.5 (theta - theta*)^T F (theta - theta*)."""
  diff = jnp.ravel(jnp.asarray(theta)) - obj.theta_star
  return float(0.5 * diff @ (obj.F @ diff))


def dense_fisher(tape: models.LayerTape) -> np.ndarray:
  """(1/N) sum_n (g_n g_n^T) (x) (a_n a_n^T) as an RC x RC matrix."""
  g = jnp.asarray(tape.out_grads)
  a = jnp.asarray(tape.activations)
  rows, cols = g.shape[1], a.shape[1]
  _guard(rows, cols)
  blocks = jnp.einsum('ni,nj,nk,nl->ikjl', g, g, a, a) / tape.sample_count
  return np.asarray(blocks.reshape(rows * cols, rows * cols))


def kron(G: np.ndarray, A: np.ndarray) -> np.ndarray:
  _guard(G.shape[0], A.shape[0])
  return np.asarray(jnp.kron(jnp.asarray(G), jnp.asarray(A)))


def constrained_solution(
    F: np.ndarray, indices, theta: np.ndarray
) -> tuple[np.ndarray, float]:
  """Optimal update zeroing theta[indices] and its loss increase."""
  idx = jnp.asarray(sorted(set(int(i) for i in indices)), dtype=jnp.int32)
  theta = jnp.ravel(jnp.asarray(theta))
  if idx.size == 0:
    return np.zeros(theta.shape), 0.0
  f_inv = jnp.linalg.inv(jnp.asarray(F))
  m = f_inv[idx[:, None], idx[None, :]]
  u = jnp.linalg.solve(m, theta[idx])
  delta = -f_inv[:, idx] @ u
  return np.asarray(delta), float(0.5 * theta[idx] @ u)


def _candidate_losses(f_inv: jnp.ndarray, theta: jnp.ndarray, sets: jnp.ndarray):
  def one(idx):
    m = f_inv[idx[:, None], idx[None, :]]
    sub = theta[idx]
    return 0.5 * sub @ jnp.linalg.solve(m, sub)

  return jax.vmap(one)(sets)


_candidate_losses_jit = jax.jit(_candidate_losses)


def removal_losses(F: np.ndarray, theta: np.ndarray, sets: np.ndarray) -> np.ndarray:
  """Exact loss increase of zeroing each row of index `sets` (equal sizes)."""
  f_inv = jnp.linalg.inv(jnp.asarray(F))
  return np.asarray(
      _candidate_losses_jit(
          f_inv, jnp.ravel(jnp.asarray(theta)), jnp.asarray(sets, dtype=jnp.int32)
      )
  )


def exhaustive_best_mask(
    obj: QuadraticObjective,
    k: int,
    mode: cs.PruneMode = cs.PruneMode.UNSTRUCTURED,
) -> MaskSearchResult:
  """Enumerates every removal set of size k and solves each exactly.

  In unstructured mode a set holds k weights. In structured mode it holds k
  structures (rows are 0..R-1, columns R..R+C-1) and its loss is that of
  zeroing their union. The loss is measured from theta* with the optimal
  compensating update.

  Raises:
    OracleScaleError: if there are more than the allowed candidate sets.
  """
  rows, cols = obj.shape
  _guard(rows, cols)
  pool = rows * cols if mode is cs.PruneMode.UNSTRUCTURED else rows + cols
  if not 1 <= k <= pool:
    raise errors.ConfigurationError(f'k must lie in [1, {pool}], got {k}.')
  count = math.comb(pool, k)
  if count > cs.ORACLE_MAX_CANDIDATES:
    raise errors.OracleScaleError(
        f'{count} candidate sets exceed {cs.ORACLE_MAX_CANDIDATES}.'
    )
  f_inv = jnp.linalg.inv(jnp.asarray(obj.F))
  theta = jnp.asarray(obj.theta_star)

  if mode is cs.PruneMode.UNSTRUCTURED:
    sets = np.array(list(itertools.combinations(range(pool), k)), dtype=np.int32)
    losses = np.concatenate([
        np.asarray(
            _candidate_losses_jit(f_inv, theta, jnp.asarray(sets[s : s + _CHUNK]))
        )
        for s in range(0, len(sets), _CHUNK)
    ])
    best = int(np.argmin(losses))
    return MaskSearchResult(tuple(sets[best].tolist()), float(losses[best]), count)

  best_loss, best_set = np.inf, ()
  for combo in itertools.combinations(range(pool), k):
    cells = np.zeros((rows, cols), dtype=bool)
    for s in combo:
      if s < rows:
        cells[s, :] = True
      else:
        cells[:, s - rows] = True
    if cells.all():
      continue
    _, loss = constrained_solution(obj.F, np.flatnonzero(cells), obj.theta_star)
    if loss < best_loss:
      best_loss, best_set = loss, combo
  return MaskSearchResult(best_set, float(best_loss), count)


def greedy_mask_loss(obj: QuadraticObjective, k: int) -> MaskSearchResult:
  """Loss of removing the k weights with the smallest single-weight costs."""
  f_inv = jnp.linalg.inv(jnp.asarray(obj.F))
  theta = jnp.asarray(obj.theta_star)
  single = theta**2 / (2.0 * jnp.diag(f_inv))
  order = np.lexsort((np.arange(theta.size), np.asarray(single)))
  chosen = tuple(sorted(int(i) for i in order[:k]))
  _, loss = constrained_solution(obj.F, chosen, obj.theta_star)
  return MaskSearchResult(chosen, loss, 1)


def rearrange(F: np.ndarray, rows: int, cols: int) -> np.ndarray:
  """R(F) with R(G (x) A) = vec(G) vec(A)^T."""
  _guard(rows, cols)
  f = jnp.asarray(F).reshape(rows, cols, rows, cols)
  return np.asarray(f.transpose(0, 2, 1, 3).reshape(rows * rows, cols * cols))


def rearrange_svd_nkp(
    F: np.ndarray, rows: int, cols: int, rank: int = 1
) -> list[NkpFactors]:
  """Best sum of `rank` Kronecker products via the SVD of R(F).

  Each term is sigma_i u_i v_i^T reshaped, split as sqrt(sigma_i) per factor
  and signed so that the G factor has a non-negative trace.
  """
  u, s, vt = jnp.linalg.svd(jnp.asarray(rearrange(F, rows, cols)))
  terms = []
  for i in range(rank):
    g = jnp.sqrt(s[i]) * u[:, i].reshape(rows, rows)
    a = jnp.sqrt(s[i]) * vt[i].reshape(cols, cols)
    if float(jnp.trace(g)) < 0:
      g, a = -g, -a
    terms.append(NkpFactors(np.asarray(g), np.asarray(a), np.asarray(s)))
  return terms


def kron_residual(F: np.ndarray, terms: list[tuple[np.ndarray, np.ndarray]]) -> float:
  """|F - sum_i G_i (x) A_i|_F."""
  approx = sum(jnp.kron(jnp.asarray(g), jnp.asarray(a)) for g, a in terms)
  return float(jnp.linalg.norm(jnp.asarray(F) - approx))


def quadratic_for(
    G: np.ndarray, A: np.ndarray, W: np.ndarray, F: Optional[np.ndarray] = None
) -> QuadraticObjective:
  """Objective centred at W with curvature G (x) A unless F is given."""
  fisher = kron(G, A) if F is None else F
  return QuadraticObjective(theta_star=W, F=fisher, shape=W.shape)
