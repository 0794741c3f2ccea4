"""Kronecker-factored curvature estimation.

The Fisher block of a layer with output gradients g_n (R) and inputs a_n (C)
is F = (1/N) sum_n (g_n g_n^T) (x) (a_n a_n^T). KFAC approximates it as G (x) A
with G = (1/sqrt(N)) sum_n g_n g_n^T and A = (1/sqrt(N)) sum_n a_n a_n^T, so
that the product carries 1/N in total. Weights are vectorised row-major,
vec(W)[r * C + c] = W[r, c], which makes G the row factor and A the column
factor.

The nearest-Kronecker alternative fits G~, A~ minimizing |F - G~ (x) A~|_F.
The rearrangement R(F), with rows indexed by (r, r') and columns by (c, c'),
turns that into a rank-1 problem solved matrix-free by power iteration.
"""

from collections.abc import Mapping, Sequence
import dataclasses
from typing import Optional, Union

from absl import logging
import numpy as np
from scipy import linalg

from ..utils import conform
from ..utils import errors
from ..utils import serialization
from . import constants as cs
from . import models

LayerTape = models.LayerTape


@dataclasses.dataclass
class KronCurvature:
  """Kronecker factors G (R x R) and A (C x C) of one layer.

  `damp_g` and `damp_a` are the absolute diagonal shifts already applied
  (zero for undamped factors).
  """

  layer_name: str
  G: np.ndarray
  A: np.ndarray
  sample_count: int
  damp_g: float = 0.0
  damp_a: float = 0.0

  def __post_init__(self):
    conform.assert_symmetric(self.G, f'{self.layer_name} G')
    conform.assert_symmetric(self.A, f'{self.layer_name} A')

  @property
  def shape(self) -> tuple[int, int]:
    return self.G.shape[0], self.A.shape[0]

  @property
  def dampened(self) -> bool:
    return self.damp_g > 0 or self.damp_a > 0


@dataclasses.dataclass
class EigenCurvature:
  """G = K1 diag(s1) K1^T and A = K2 diag(s2) K2^T, eigenvalues ascending."""

  K1: np.ndarray
  s1: np.ndarray
  K2: np.ndarray
  s2: np.ndarray

  @property
  def S(self) -> np.ndarray:
    return np.outer(self.s1, self.s2)

  @property
  def denominator(self) -> np.ndarray:
    """D with F^-1 = (K1 (x) K2) diag(1 / vec(D)) (K1 (x) K2)^T."""
    return self.S


@dataclasses.dataclass
class SumKronCurvature:
  """F~ = sum_i G_i (x) A_i."""

  layer_name: str
  terms: list[tuple[np.ndarray, np.ndarray]]

  def __post_init__(self):
    for i, (g, a) in enumerate(self.terms):
      conform.assert_symmetric(g, f'{self.layer_name} G_{i + 1}')
      conform.assert_symmetric(a, f'{self.layer_name} A_{i + 1}')

  @property
  def rank(self) -> int:
    return len(self.terms)

  @property
  def shape(self) -> tuple[int, int]:
    g, a = self.terms[0]
    return g.shape[0], a.shape[0]


@dataclasses.dataclass
class SumKronEigen:
  """Simultaneous diagonalisation of a two-term Kronecker sum.

  With G2 K1 = G1 K1 diag(s1), K1^T G1 K1 = I and likewise for A,
  F~^-1 = (K1 (x) K2) diag(1 / (1 + s1 s2^T)) (K1 (x) K2)^T. K1 and K2 are not
  orthogonal.
  """

  K1: np.ndarray
  s1: np.ndarray
  K2: np.ndarray
  s2: np.ndarray

  @property
  def denominator(self) -> np.ndarray:
    return 1.0 + np.outer(self.s1, self.s2)


@dataclasses.dataclass
class DenseCurvature:
  """Exact Fisher block F (RC x RC), row-major vectorisation."""

  F: np.ndarray
  shape: tuple[int, int]

  def __post_init__(self):
    rows, cols = self.shape
    conform.static_shape(
        self.F,
        expect_shape=(rows * cols, rows * cols),
        message='Dense curvature',
        error_cls=errors.ConfigurationError,
    )


@dataclasses.dataclass
class NkpResult:
  """Nearest Kronecker factors scaled by sqrt(sigma) each."""

  G: np.ndarray
  A: np.ndarray
  sigma: float
  history: list[float]


InverseSpectrum = Union[EigenCurvature, SumKronEigen]


def _check_tape(tape: LayerTape) -> None:
  if tape.sample_count < 1:
    raise errors.CurvatureError(f'{tape.layer_name}: tape has no samples.')
  conform.assert_finite(
      tape.activations, f'{tape.layer_name} activations', errors.CurvatureError
  )
  conform.assert_finite(
      tape.out_grads, f'{tape.layer_name} output gradients', errors.CurvatureError
  )


def _symmetrize(m: np.ndarray) -> np.ndarray:
  return 0.5 * (m + m.T)


def accumulate_kfac(tape: LayerTape) -> KronCurvature:
  """Undamped KFAC factors with 1/sqrt(N) normalisation per factor."""
  _check_tape(tape)
  scale = 1.0 / np.sqrt(tape.sample_count)
  g, a = tape.out_grads, tape.activations
  return KronCurvature(
      layer_name=tape.layer_name,
      G=_symmetrize(g.T @ g) * scale,
      A=_symmetrize(a.T @ a) * scale,
      sample_count=tape.sample_count,
  )


def _diagonal_shift(m: np.ndarray, frac: float, name: str) -> float:
  mean_diag = float(np.mean(np.diag(m)))
  if not mean_diag > 0.0:
    raise errors.DegenerateCurvatureError(
        f'{name} has mean diagonal {mean_diag}; nothing to dampen against.'
    )
  return frac * mean_diag


def dampen(curv: KronCurvature, frac_g: float, frac_a: float) -> KronCurvature:
  """Adds frac * mean(diag) * I to each factor.

  Raises:
    ConfigurationError: if a fraction is not positive.
    DegenerateCurvatureError: if a factor has an all-zero diagonal.
  """
  if frac_g <= 0 or frac_a <= 0:
    raise errors.ConfigurationError(
        f'Dampening fractions must be > 0, got {frac_g}, {frac_a}.'
    )
  shift_g = _diagonal_shift(curv.G, frac_g, f'{curv.layer_name} G')
  shift_a = _diagonal_shift(curv.A, frac_a, f'{curv.layer_name} A')
  rows, cols = curv.shape
  return dataclasses.replace(
      curv,
      G=curv.G + shift_g * np.eye(rows),
      A=curv.A + shift_a * np.eye(cols),
      damp_g=curv.damp_g + shift_g,
      damp_a=curv.damp_a + shift_a,
  )


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
  """Flips columns so each one's largest-magnitude entry is positive."""
  pivots = np.argmax(np.abs(vectors), axis=0)
  signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
  signs[signs == 0] = 1.0
  return vectors * signs


def _eigh(m: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
  try:
    values, vectors = linalg.eigh(m)
  except linalg.LinAlgError as e:
    raise errors.NumericFailureError(f'{name}: eigh failed: {e}') from e
  return values, _fix_signs(vectors)


def eigendecompose(curv: KronCurvature) -> EigenCurvature:
  """Eigendecompositions of both factors, eigenvalues ascending."""
  s1, k1 = _eigh(curv.G, f'{curv.layer_name} G')
  s2, k2 = _eigh(curv.A, f'{curv.layer_name} A')
  if s1[0] <= 0 or s2[0] <= 0:
    raise errors.SingularSystemError(
        f'{curv.layer_name}: factors are not positive definite'
        f' (min eigenvalues {s1[0]:.3e}, {s2[0]:.3e}); dampen first.'
    )
  return EigenCurvature(K1=k1, s1=s1, K2=k2, s2=s2)


def _spd_inverse(m: np.ndarray, name: str) -> np.ndarray:
  try:
    factor = linalg.cho_factor(m, lower=True)
  except linalg.LinAlgError as e:
    raise errors.SingularSystemError(
        f'{name} is not positive definite despite dampening: {e}'
    ) from e
  return _symmetrize(linalg.cho_solve(factor, np.eye(m.shape[0])))


def factor_inverses(curv: KronCurvature) -> tuple[np.ndarray, np.ndarray]:
  """(G^-1, A^-1) by Cholesky factorisation."""
  return (
      _spd_inverse(curv.G, f'{curv.layer_name} G'),
      _spd_inverse(curv.A, f'{curv.layer_name} A'),
  )


def _check_oracle_scale(rows: int, cols: int, what: str) -> None:
  if rows * cols > cs.ORACLE_MAX_DIM:
    raise errors.OracleScaleError(
        f'{what} needs R * C <= {cs.ORACLE_MAX_DIM}, got {rows} x {cols}.'
    )


def dense_fisher(tape: LayerTape) -> DenseCurvature:
  """F = (1/N) sum_n (g_n g_n^T) (x) (a_n a_n^T), at oracle scale only."""
  _check_tape(tape)
  rows, cols = tape.out_grads.shape[1], tape.activations.shape[1]
  _check_oracle_scale(rows, cols, 'dense_fisher')
  per_sample = (
      tape.out_grads[:, :, np.newaxis] * tape.activations[:, np.newaxis, :]
  ).reshape(tape.sample_count, rows * cols)
  fisher = _symmetrize(per_sample.T @ per_sample) / tape.sample_count
  return DenseCurvature(F=fisher, shape=(rows, cols))


def kron_dense(G: np.ndarray, A: np.ndarray) -> np.ndarray:
  """G (x) A in the row-major vectorisation."""
  _check_oracle_scale(G.shape[0], A.shape[0], 'kron_dense')
  return np.kron(G, A)


class RearrangedFisher:
  """Matrix-free products with R(F) - sum_r vec(G_r) vec(A_r)^T.

  R(F) vec(A~) = (1/N) sum_n (a_n^T A~ a_n) g_n g_n^T and
  R(F)^T vec(G~) = (1/N) sum_n (g_n^T G~ g_n) a_n a_n^T. Deflation subtracts
  previously fitted terms.
  """

  def __init__(
      self,
      tape: LayerTape,
      deflate: Sequence[tuple[np.ndarray, np.ndarray]] = (),
  ):
    _check_tape(tape)
    self.name = tape.layer_name
    self._g = tape.out_grads
    self._a = tape.activations
    self._n = tape.sample_count
    self._deflate = list(deflate)

  @property
  def rows(self) -> int:
    return self._g.shape[1]

  @property
  def cols(self) -> int:
    return self._a.shape[1]

  def is_zero(self) -> bool:
    return not (np.any(self._g) and np.any(self._a)) and not self._deflate

  def matvec(self, a_tilde: np.ndarray) -> np.ndarray:
    """R x R result of applying the operator to vec(A~)."""
    weights = np.einsum('ni,ij,nj->n', self._a, a_tilde, self._a)
    out = (self._g.T * weights) @ self._g / self._n
    for g_r, a_r in self._deflate:
      out = out - g_r * np.sum(a_r * a_tilde)
    return _symmetrize(out)

  def rmatvec(self, g_tilde: np.ndarray) -> np.ndarray:
    """C x C result of applying the transposed operator to vec(G~)."""
    weights = np.einsum('ni,ij,nj->n', self._g, g_tilde, self._g)
    out = (self._a.T * weights) @ self._a / self._n
    for g_r, a_r in self._deflate:
      out = out - a_r * np.sum(g_r * g_tilde)
    return _symmetrize(out)


def nkp_power_method(
    fisher: Union[RearrangedFisher, LayerTape],
    init: Optional[tuple[np.ndarray, np.ndarray]] = None,
    iters: int = cs.NKP_COLD_ITERS,
) -> NkpResult:
  """Nearest Kronecker product G~ (x) A~ by alternating power iteration.

  Args:
    fisher: the operator, or a tape to build an undeflated one from.
    init: previous (G~, A~); only A~ seeds the iteration. Defaults to ones.
    iters: number of alternating steps.

  Returns:
    Factors scaled by sqrt(sigma) each, sigma and its per-iteration history,
    which is non-decreasing.

  Raises:
    DegenerateCurvatureError: if the operator is identically zero.
  """
  if iters < 1:
    raise errors.ConfigurationError(f'iters must be >= 1, got {iters}.')
  if isinstance(fisher, LayerTape):
    fisher = RearrangedFisher(fisher)
  if fisher.is_zero():
    raise errors.DegenerateCurvatureError(f'{fisher.name}: tape is all zero.')

  cols = fisher.cols
  a_tilde = np.ones((cols, cols)) if init is None else np.array(init[1])
  a_tilde = a_tilde / np.linalg.norm(a_tilde)
  history = []
  sigma = 0.0
  g_tilde = None
  for step in range(iters):
    g_new = fisher.matvec(a_tilde)
    norm = np.linalg.norm(g_new)
    if norm == 0.0 and step == 0:
      # The start is orthogonal to the dominant component.
      logging.debug('%s: restarting power method from identity.', fisher.name)
      a_tilde = np.eye(cols) / np.sqrt(cols)
      g_new = fisher.matvec(a_tilde)
      norm = np.linalg.norm(g_new)
    if norm == 0.0:
      raise errors.DegenerateCurvatureError(
          f'{fisher.name}: power iteration collapsed to zero.'
      )
    g_tilde = g_new / norm
    a_new = fisher.rmatvec(g_tilde)
    sigma = float(np.linalg.norm(a_new))
    if sigma == 0.0:
      raise errors.DegenerateCurvatureError(
          f'{fisher.name}: power iteration collapsed to zero.'
      )
    a_tilde = a_new / sigma
    history.append(sigma)
  root = np.sqrt(sigma)
  return NkpResult(G=root * g_tilde, A=root * a_tilde, sigma=sigma, history=history)


def sum_kron_fit(
    tape: LayerTape, rank: int, iters: int = cs.NKP_COLD_ITERS
) -> SumKronCurvature:
  """Fits sum_{i <= rank} G_i (x) A_i by deflation, rank in {1, 2}."""
  if rank < 1:
    raise errors.ConfigurationError(f'rank must be >= 1, got {rank}.')
  if rank > 2:
    raise errors.UnsupportedError(
        f'Kronecker sums of more than 2 terms are not supported, got {rank}.'
    )
  if rank == 2:
    _check_oracle_scale(
        tape.out_grads.shape[1], tape.activations.shape[1], 'sum_kron_fit'
    )
  terms = []
  for _ in range(rank):
    result = nkp_power_method(RearrangedFisher(tape, terms), iters=iters)
    terms.append((result.G, result.A))
  return SumKronCurvature(layer_name=tape.layer_name, terms=terms)


def dampen_sum(
    sumcurv: SumKronCurvature, frac_g: float, frac_a: float
) -> SumKronCurvature:
  """Dampens the leading term, which carries the positive definite part."""
  g1, a1 = sumcurv.terms[0]
  lead = dampen(
      KronCurvature(sumcurv.layer_name, g1, a1, sample_count=1), frac_g, frac_a
  )
  return SumKronCurvature(
      layer_name=sumcurv.layer_name,
      terms=[(lead.G, lead.A)] + list(sumcurv.terms[1:]),
  )


def sum_kron_dense(sumcurv: SumKronCurvature) -> DenseCurvature:
  rows, cols = sumcurv.shape
  fisher = sum(kron_dense(g, a) for g, a in sumcurv.terms)
  return DenseCurvature(F=_symmetrize(fisher), shape=(rows, cols))


def sum_kron_eigen(sumcurv: SumKronCurvature) -> Optional[SumKronEigen]:
  """Generalised eigendecomposition of a two-term sum, or None if unusable.

  Needs G1, A1 positive definite and 1 + s1 s2^T > 0 everywhere.
  """
  if sumcurv.rank == 1:
    g1, a1 = sumcurv.terms[0]
    g2, a2 = np.zeros_like(g1), np.zeros_like(a1)
  elif sumcurv.rank == 2:
    (g1, a1), (g2, a2) = sumcurv.terms
  else:
    raise errors.UnsupportedError(f'Unsupported Kronecker rank {sumcurv.rank}.')
  try:
    s1, k1 = linalg.eigh(g2, g1)
    s2, k2 = linalg.eigh(a2, a1)
  except linalg.LinAlgError as e:
    logging.debug('%s: generalised eigh failed: %s', sumcurv.layer_name, e)
    return None
  spectrum = SumKronEigen(K1=_fix_signs(k1), s1=s1, K2=_fix_signs(k2), s2=s2)
  if np.min(spectrum.denominator) <= 0:
    return None
  return spectrum


def save_factors(
    path: serialization.PathLike,
    factors: Mapping[str, tuple[np.ndarray, np.ndarray]],
    meta: Optional[Mapping[str, object]] = None,
) -> None:
  """Stores per-layer (G, A) pairs as a manifest + blob."""
  tensors = {}
  for name, (g, a) in factors.items():
    tensors[f'{name}.G'] = g
    tensors[f'{name}.A'] = a
  serialization.write_store(path, tensors, dict(meta or {}))


def load_factors(
    path: serialization.PathLike,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
  tensors, _ = serialization.read_store(path)
  names = sorted({key.rsplit('.', 1)[0] for key in tensors})
  return {name: (tensors[f'{name}.G'], tensors[f'{name}.A']) for name in names}
