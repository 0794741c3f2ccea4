"""Utilities for validating arrays conform to expectations."""

from collections.abc import Sequence
from typing import Any, Optional

import numpy as np

from . import errors
from . import ps_types

ArrayLike = ps_types.ArrayLike


def static_shape(
    array: Any,
    expect_shape: Optional[Sequence[Optional[int]]] = None,
    expect_ndim: Optional[int] = None,
    message: Optional[str] = None,
    error_cls: type[Exception] = ValueError,
) -> tuple[int, ...]:
  """Validates that `array` has the expected shape and/or ndim."""
  shape = np.shape(array)
  prefix = f'{message}: ' if message else ''
  if expect_ndim is not None and len(shape) != expect_ndim:
    raise error_cls(f'{prefix}Expected ndim {expect_ndim}, found {len(shape)}.')
  if expect_shape is not None:
    if len(shape) != len(expect_shape):
      raise error_cls(f'{prefix}Expected shape {expect_shape}, found {shape}.')
    for i, (actual, expected) in enumerate(zip(shape, expect_shape)):
      if expected is not None and actual != expected:
        raise error_cls(
            f'{prefix}Expected shape {expect_shape}, found {shape}'
            f' (mismatch at index {i}).'
        )
  return shape


def assert_finite(
    array: ArrayLike,
    name: str,
    error_cls: type[Exception] = errors.NumericFailureError,
) -> None:
  """Raises `error_cls` naming `name` if `array` holds NaN or Inf."""
  values = np.asarray(array)
  if not np.all(np.isfinite(values)):
    bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
    raise error_cls(f'{name} has {bad} non-finite entries.')


def assert_symmetric(
    matrix: ArrayLike, name: str, atol: float = 1e-10
) -> None:
  """Raises if `matrix` is not square and symmetric to `atol`."""
  matrix = np.asarray(matrix)
  static_shape(matrix, expect_ndim=2, message=name)
  if matrix.shape[0] != matrix.shape[1]:
    raise ValueError(f'{name}: expected a square matrix, found {matrix.shape}.')
  asym = float(np.max(np.abs(matrix - matrix.T), initial=0.0))
  scale = max(1.0, float(np.max(np.abs(matrix), initial=0.0)))
  if asym > atol * scale:
    raise errors.CurvatureError(
        f'{name} is not symmetric (max |M - M^T| = {asym:.3e}).'
    )


def as_float64(array: ArrayLike, name: str) -> np.ndarray:
  """Returns `array` as float64, rejecting complex or object input."""
  values = np.asarray(array)
  if values.dtype.kind not in 'fiub':
    raise TypeError(f'{name}: expected a real array, found dtype {values.dtype}.')
  return values.astype(np.float64, copy=False)
